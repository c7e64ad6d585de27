//! Minibatch SGD on softmax cross-entropy, its adversarial variant, and
//! accuracy evaluation under attacks and defenses.
//!
//! Randomness comes from two independent ChaCha streams of the same seed:
//! stream 0 shuffles the data, stream 1 seeds the inner attacks. Plain
//! training never touches stream 1, so an adversarial run whose attack leaves
//! its inputs unchanged follows the plain trajectory bit for bit.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack_api::PredictFn;
use crate::autodiff::Tape;
use crate::config::AttackConfig;
use crate::defenses::{DefendedModel, DefensePipeline};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Images flattened to `N×D` with their labels and the `C×H×W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    image_shape: [usize; 3],
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, image_shape: [usize; 3]) -> Result<Self> {
        let d: usize = image_shape.iter().product();
        if images.ndim() != 2 || images.row_len() != d || images.batch_size() != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len(), d]));
        }
        Ok(Dataset {
            images,
            labels,
            image_shape,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
        })
    }

    /// The first `n` examples (all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Inner attack for adversarial training.
    pub attack: Option<AttackConfig>,
    /// Epochs over which the inner attack's eps and step size ramp linearly
    /// up to their configured values; 0 starts at full strength.
    pub eps_warmup_epochs: usize,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!(
                "training needs positive epochs and batch size and a finite lr >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean minibatch loss per epoch (on the adversarial batches when training adversarially).
    pub epoch_losses: Vec<f64>,
}

pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(model, data, cfg, None)
}

/// Each minibatch is replaced by adversarial examples crafted against the
/// current parameters before the SGD step. The attack must be one of the
/// iterative gradient family.
pub fn adversarial_train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let attack = cfg
        .attack
        .ok_or_else(|| Error::contract("adversarial training needs an inner attack"))?;
    if attack.as_iterative().is_none() {
        return Err(Error::contract(format!(
            "inner attack must be an iterative gradient attack, got {}",
            attack.name()
        )));
    }
    attack.validate()?;
    fit(model, data, cfg, Some(&attack))
}

fn fit(model: &Model, data: &Dataset, cfg: &TrainConfig, attack: Option<&AttackConfig>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if data.images.row_len() != model.input_len() {
        return Err(Error::shape("train", data.images.shape(), &[data.len(), model.input_len()]));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    attack_rng.set_stream(1);

    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let attack = attack.map(|a| {
            if epoch < cfg.eps_warmup_epochs {
                a.scaled((epoch + 1) as f64 / cfg.eps_warmup_epochs as f64)
            } else {
                *a
            }
        });
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut x = data.images.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            if let Some(a) = &attack {
                x = a.run(&x, &y, &model, attack_rng.next_u64())?;
            }
            let tape = Tape::new();
            let params = model.bind(&tape, true);
            let logits = model.forward(&tape.constant(x), &params)?.logits;
            let loss = logits.softmax_cross_entropy(&y)?;
            total += loss.value().item()?;
            batches += 1;
            let grads = tape.backward(loss)?;
            let updated = params
                .iter()
                .map(|p| {
                    let g = grads.wrt(p).expect("parameters are leaves");
                    p.value().zip_map(g, |w, g| w - cfg.lr * g)
                })
                .collect::<Result<Vec<_>>>()?;
            model = model.with_params(updated)?;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    /// Present when an attack was run.
    pub adv_acc: Option<f64>,
}

/// Rows attacked per call during evaluation.
pub const EVAL_CHUNK: usize = 100;

fn accuracy(predict: &dyn PredictFn, x: &Tensor, labels: &[usize]) -> Result<usize> {
    let tape = Tape::new();
    let preds = predict.predict(&tape.constant(x.clone()))?.single()?.value().argmax_rows();
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count())
}

/// Clean and (optionally) adversarial accuracy. With a defense, both the
/// attack and the final prediction go through the defended model; pass a
/// straight-through pipeline to attack with BPDA.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    defense: Option<&DefensePipeline>,
    seed: u64,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let defended = DefendedModel::new(model.clone(), defense.cloned().unwrap_or_default(), data.image_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut clean, mut adv) = (0, 0);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let x = data.images.select_rows(idx)?;
        let y = &data.labels[idx[0]..idx[0] + idx.len()];
        clean += accuracy(&defended, &x, y)?;
        if let Some(a) = attack {
            let x_adv = a.run(&x, y, &defended, rng.next_u64())?;
            adv += accuracy(&defended, &x_adv, y)?;
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        clean_acc: clean as f64 / n,
        adv_acc: attack.map(|_| adv as f64 / n),
    })
}
