//! The attack contract: a predict function, a loss function over
//! `(predict(x), y)`, and a perturb method that only sees the gradient of that
//! loss with respect to `x`.
//!
//! [`perturb_iterative`] is the shared engine behind every iterative
//! gradient attack (sign or L2-normalized steps, optional random start,
//! optional momentum), projecting back into the perturbation budget after
//! every step. All tensors are batched along their leading axis; norms,
//! projections and step normalization apply per row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// What a predict function returns: one tensor or a tuple of them.
pub enum Output<'t> {
    Single(Var<'t>),
    Tuple(Vec<Output<'t>>),
}

impl<'t> Output<'t> {
    pub fn single(&self) -> Result<&Var<'t>> {
        match self {
            Output::Single(v) => Ok(v),
            Output::Tuple(_) => Err(Error::contract("expected a single predict output, got a tuple")),
        }
    }
}

/// What the loss compares the prediction against.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    Tensor(Tensor),
    Tuple(Vec<Target>),
}

pub trait PredictFn: Send + Sync {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>>;
}

/// Loss over `(predict(x), y)`. It never sees the model.
pub trait LossFn: Send + Sync {
    fn name(&self) -> String;
    fn loss<'t>(&self, output: &Output<'t>, target: &Target) -> Result<Var<'t>>;
}

impl PredictFn for Model {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        Ok(Output::Single(self.predict_logits(x)?))
    }
}

impl<P: PredictFn + ?Sized> PredictFn for &P {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        (**self).predict(x)
    }
}

/// Hidden-layer features of a model as the prediction.
pub struct FeaturePredictor<'m> {
    pub model: &'m Model,
    pub layer: usize,
}

impl PredictFn for FeaturePredictor<'_> {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        Ok(Output::Single(self.model.predict_features(x, self.layer)?))
    }
}

/// Several predictors evaluated on the same input, returned as a tuple.
pub struct TuplePredictor<'a>(pub Vec<&'a dyn PredictFn>);

impl PredictFn for TuplePredictor<'_> {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        Ok(Output::Tuple(
            self.0
                .iter()
                .map(|p| p.predict(x))
                .collect::<Result<_>>()?,
        ))
    }
}

/// Adapts a closure over tape variables.
pub struct FnPredict<F>(F);

pub fn predict_fn<F>(f: F) -> FnPredict<F>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>> + Send + Sync,
{
    FnPredict(f)
}

impl<F> PredictFn for FnPredict<F>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>> + Send + Sync,
{
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        Ok(Output::Single((self.0)(x)?))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl LossFn for CrossEntropy {
    fn name(&self) -> String {
        "cross-entropy".into()
    }

    fn loss<'t>(&self, output: &Output<'t>, target: &Target) -> Result<Var<'t>> {
        let Target::Labels(labels) = target else {
            return Err(Error::contract("cross-entropy needs label targets"));
        };
        output.single()?.softmax_cross_entropy(labels)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MeanSquared;

impl LossFn for MeanSquared {
    fn name(&self) -> String {
        "mse".into()
    }

    fn loss<'t>(&self, output: &Output<'t>, target: &Target) -> Result<Var<'t>> {
        let Target::Tensor(t) = target else {
            return Err(Error::contract("mse needs a tensor target"));
        };
        let out = output.single()?;
        out.mse(&out.constant(t.clone()))
    }
}

/// Sum of component losses over tuple outputs and tuple targets.
pub struct TupleLoss(pub Vec<Box<dyn LossFn>>);

impl LossFn for TupleLoss {
    fn name(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|l| l.name()).collect();
        format!("sum({})", parts.join(","))
    }

    fn loss<'t>(&self, output: &Output<'t>, target: &Target) -> Result<Var<'t>> {
        let (Output::Tuple(outs), Target::Tuple(targets)) = (output, target) else {
            return Err(Error::contract("tuple loss needs tuple outputs and targets"));
        };
        if outs.len() != self.0.len() || targets.len() != self.0.len() {
            return Err(Error::contract(format!(
                "tuple loss has {} components, got {} outputs and {} targets",
                self.0.len(),
                outs.len(),
                targets.len()
            )));
        }
        let mut total: Option<Var<'t>> = None;
        for ((loss, out), t) in self.0.iter().zip(outs).zip(targets) {
            let l = loss.loss(out, t)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::contract("empty tuple loss"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Allowed perturbation set: an eps-ball in `norm` intersected with the
/// valid input box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbBudget {
    pub norm: Norm,
    pub eps: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl PerturbBudget {
    pub fn new(norm: Norm, eps: f64, clip_min: f64, clip_max: f64) -> Result<Self> {
        let b = PerturbBudget {
            norm,
            eps,
            clip_min,
            clip_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::contract(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.clip_min.is_finite() && self.clip_max.is_finite() && self.clip_min < self.clip_max)
        {
            return Err(Error::contract(format!(
                "clip range [{}, {}] is empty or not finite",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if let Some(v) = x
            .data()
            .iter()
            .find(|v| !(**v >= self.clip_min && **v <= self.clip_max))
        {
            return Err(Error::contract(format!(
                "input value {v} outside clip range [{}, {}]",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }

    /// Per-row distance `‖adv − x‖` in this budget's norm.
    pub fn distances(&self, adv: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
        let delta = adv.sub(x)?;
        Ok((0..delta.batch_size())
            .map(|i| {
                let row = delta.row(i);
                match self.norm {
                    Norm::Linf => row.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                    Norm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
                }
            })
            .collect())
    }
}

/// Hyperparameters of [`perturb_iterative`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterativeConfig {
    pub budget: PerturbBudget,
    pub nb_iter: usize,
    pub eps_iter: f64,
    pub rand_init: bool,
    /// Momentum decay μ; 0 disables the accumulator.
    pub momentum_decay: f64,
    /// Minimize the loss toward `y` instead of maximizing it at `y`.
    pub targeted: bool,
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(self.eps_iter.is_finite() && self.eps_iter >= 0.0) {
            return Err(Error::contract(format!("eps_iter must be finite and >= 0, got {}", self.eps_iter)));
        }
        if !(self.momentum_decay.is_finite() && self.momentum_decay >= 0.0) {
            return Err(Error::contract(format!(
                "momentum decay must be finite and >= 0, got {}",
                self.momentum_decay
            )));
        }
        Ok(())
    }
}

/// Elementwise clamp of `v` into `[center − eps, center + eps]`.
pub fn project_linf(v: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    v.zip_map(center, |v, c| v.max(c - eps).min(c + eps))
}

/// Projection of `v` onto the L2 ball of radius `eps` around `center`,
/// treating the whole tensor as one vector.
pub fn project_l2(v: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    let delta = v.sub(center)?;
    let norm = delta.norm_l2();
    if norm <= eps {
        return Ok(v.clone());
    }
    let scale = eps / norm;
    center.zip_map(&delta, |c, d| c + scale * d)
}

/// [`project_l2`] applied independently to each row.
pub fn project_l2_rows(v: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    let delta = v.sub(center)?;
    let len = delta.row_len();
    let mut out = v.data().to_vec();
    for i in 0..delta.batch_size() {
        let row = delta.row(i);
        let norm = row.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > eps {
            let scale = eps / norm;
            for j in 0..len {
                out[i * len + j] = center.data()[i * len + j] + scale * row[j];
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

fn project(budget: &PerturbBudget, v: &Tensor, center: &Tensor) -> Result<Tensor> {
    match budget.norm {
        Norm::Linf => project_linf(v, center, budget.eps),
        Norm::L2 => project_l2_rows(v, center, budget.eps),
    }
}

/// Gradient of `loss(predict(x), y)` with respect to `x`, plus the loss value.
pub fn input_gradient(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
) -> Result<(Tensor, f64)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = predict.predict(&xv)?;
    let l = loss.loss(&out, y)?;
    let value = l.value().item()?;
    let grads = tape.backward(l)?;
    let g = grads
        .wrt(&xv)
        .cloned()
        .ok_or_else(|| Error::contract("input gradient missing"))?;
    Ok((g, value))
}

fn per_row(t: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let len = t.row_len();
    let mut out = vec![0.0; t.numel()];
    for i in 0..t.batch_size() {
        f(t.row(i), &mut out[i * len..(i + 1) * len]);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// `g / ‖g‖₁` per row; all-zero rows stay zero.
fn normalize_l1_rows(g: &Tensor) -> Tensor {
    per_row(g, |row, out| {
        let n: f64 = row.iter().map(|v| v.abs()).sum();
        if n > 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o = v / n;
            }
        }
    })
}

/// `g / ‖g‖₂` per row; all-zero rows stay zero, which makes that step a no-op.
fn normalize_l2_rows(g: &Tensor) -> Tensor {
    per_row(g, |row, out| {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o = v / n;
            }
        }
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Momentum state: `m ← μ·m + g/‖g‖₁` with per-row L1 normalization.
#[derive(Clone, Debug)]
pub struct MomentumAccumulator {
    decay: f64,
    state: Option<Tensor>,
}

impl MomentumAccumulator {
    pub fn new(decay: f64) -> Self {
        MomentumAccumulator { decay, state: None }
    }

    pub fn update(&mut self, grad: &Tensor) -> Result<Tensor> {
        let normalized = normalize_l1_rows(grad);
        let next = match &self.state {
            Some(m) => m.zip_map(&normalized, |m, g| self.decay * m + g)?,
            None => normalized,
        };
        self.state = Some(next.clone());
        Ok(next)
    }
}

/// Uniform start inside the eps-ball around `x`, clipped to the valid range.
pub fn random_start(x: &Tensor, budget: &PerturbBudget, rng: &mut impl Rng) -> Tensor {
    let eps = budget.eps;
    let delta = match budget.norm {
        Norm::Linf => per_row(x, |_, out| {
            if eps > 0.0 {
                for o in out.iter_mut() {
                    *o = rng.random_range(-eps..=eps);
                }
            }
        }),
        Norm::L2 => per_row(x, |row, out| {
            let d = row.len();
            for o in out.iter_mut() {
                *o = rng.sample(StandardNormal);
            }
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let radius = eps * u.powf(1.0 / d as f64);
            let scale = if n > 0.0 { radius / n } else { 0.0 };
            out.iter_mut().for_each(|o| *o *= scale);
        }),
    };
    x.zip_map(&delta, |v, d| (v + d).clamp(budget.clip_min, budget.clip_max))
        .expect("same shape")
}

/// Shared iterative perturbation engine.
///
/// Each iteration computes `g = ∇ₓ loss(predict(x̃), y)`, optionally folds it
/// into the momentum accumulator, steps along `sign(g)` (Linf) or `g/‖g‖₂`
/// (L2) by `eps_iter` (descending when targeted), projects into the eps-ball
/// around `x` and clips to the valid range. `x` itself is never modified.
pub fn perturb_iterative(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    cfg: &IterativeConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let budget = &cfg.budget;
    budget.check_input(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut adv = if cfg.rand_init {
        random_start(x, budget, &mut rng)
    } else {
        x.clone()
    };
    let mut momentum = (cfg.momentum_decay > 0.0).then(|| MomentumAccumulator::new(cfg.momentum_decay));
    let direction = if cfg.targeted { -1.0 } else { 1.0 };

    for _ in 0..cfg.nb_iter {
        let (mut g, _) = input_gradient(&adv, y, predict, loss)?;
        if let Some(m) = momentum.as_mut() {
            g = m.update(&g)?;
        }
        let step = match budget.norm {
            Norm::Linf => g.map(sign),
            Norm::L2 => normalize_l2_rows(&g),
        };
        let scale = direction * cfg.eps_iter;
        let moved = adv.zip_map(&step, |a, s| a + scale * s)?;
        adv = project(budget, &moved, x)?.clamp(budget.clip_min, budget.clip_max);
    }
    Ok(adv)
}
