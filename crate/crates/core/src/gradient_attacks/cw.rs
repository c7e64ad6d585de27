//! Carlini-Wagner L2 attack.
//!
//! Optimizes `w` with `x̃ = lo + (hi − lo)·(tanh(w) + 1)/2`, so every iterate
//! is inside the clip range, minimizing `‖x̃ − x‖₂² + c·f(x̃)` where
//! `f = max(Z_y − max_{k≠y} Z_k + κ, 0)` (untargeted) or
//! `f = max(max_{k≠t} Z_k − Z_t + κ, 0)` (targeted). The inner optimizer is
//! plain gradient descent. The constant `c` is searched per example: doubled
//! after a failed round until the first success (capped at 2³⁰·c₀), then
//! bisected.

use serde::{Deserialize, Serialize};

use crate::attack_api::PredictFn;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// atanh(±1) is infinite; inputs at the clip bounds map just inside.
const TANH_LIMIT: f64 = 1.0 - 1e-6;
const MAX_CONST_FACTOR: f64 = (1u64 << 30) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarliniWagnerL2 {
    pub confidence: f64,
    pub binary_search_steps: usize,
    pub max_iter: usize,
    pub initial_const: f64,
    pub learning_rate: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub targeted: bool,
}

#[derive(Clone, Debug)]
pub struct CwOutcome {
    /// Best adversarial example per row, or the clean row when unsuccessful.
    pub x_adv: Tensor,
    pub success: Vec<bool>,
    /// L2 distance of each successful row; `f64::INFINITY` on failure.
    pub l2: Vec<f64>,
}

impl CarliniWagnerL2 {
    pub fn validate(&self) -> Result<()> {
        let ok = self.confidence.is_finite()
            && self.confidence >= 0.0
            && self.initial_const.is_finite()
            && self.initial_const > 0.0
            && self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.clip_min < self.clip_max;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid Carlini-Wagner config {self:?}")))
        }
    }

    /// Whether `logits` meet the attack goal for `label` with margin ≥ κ.
    fn achieved(&self, logits: &[f64], label: usize) -> bool {
        let other = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != label)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let argmax = {
            let mut best = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = k;
                }
            }
            best
        };
        if self.targeted {
            argmax == label && logits[label] - other >= self.confidence
        } else {
            argmax != label && other - logits[label] >= self.confidence
        }
    }

    fn to_tanh_space(&self, x: &Tensor) -> Tensor {
        let (lo, hi) = (self.clip_min, self.clip_max);
        x.map(|v| {
            let unit = ((v - lo) / (hi - lo)) * 2.0 - 1.0;
            unit.clamp(-TANH_LIMIT, TANH_LIMIT).atanh()
        })
    }

    /// Runs the attack on a batch; `labels` are true labels (untargeted) or
    /// target labels (targeted).
    pub fn perturb(&self, x: &Tensor, labels: &[usize], predict: &dyn PredictFn) -> Result<CwOutcome> {
        self.validate()?;
        if x.ndim() != 2 || labels.len() != x.batch_size() {
            return Err(Error::shape("carlini_wagner_l2", x.shape(), &[labels.len()]));
        }
        if x
            .data()
            .iter()
            .any(|v| !(*v >= self.clip_min && *v <= self.clip_max))
        {
            return Err(Error::contract("Carlini-Wagner input outside clip range"));
        }
        let n = x.batch_size();
        let d = x.row_len();
        let (lo, hi) = (self.clip_min, self.clip_max);
        let half_range = (hi - lo) / 2.0;

        let mut best_adv = x.data().to_vec();
        let mut best_l2 = vec![f64::INFINITY; n];
        let mut success = vec![false; n];

        let clean_logits = {
            let tape = Tape::new();
            predict.predict(&tape.constant(x.clone()))?.single()?.value()
        };
        for i in 0..n {
            if self.achieved(clean_logits.row(i), labels[i]) {
                success[i] = true;
                best_l2[i] = 0.0;
            }
        }

        let w0 = self.to_tanh_space(x);
        let mut lower = vec![0.0; n];
        let mut upper = vec![f64::INFINITY; n];
        let mut consts = vec![self.initial_const; n];
        let const_cap = self.initial_const * MAX_CONST_FACTOR;

        for _ in 0..self.binary_search_steps {
            let mut w = w0.clone();
            let mut round_success = vec![false; n];
            let c = Tensor::new(vec![n], consts.clone())?;

            for it in 0..=self.max_iter {
                let tape = Tape::new();
                let wv = tape.leaf(w.clone());
                let xt = wv.tanh().add_scalar(1.0).scale(half_range).add_scalar(lo);
                let dist = xt.sub(&tape.constant(x.clone()))?.square().row_sum();
                let z = predict.predict(&xt)?;
                let z = z.single()?;
                let margin = if self.targeted {
                    z.max_excluding(labels)?.sub(&z.gather(labels)?)?
                } else {
                    z.gather(labels)?.sub(&z.max_excluding(labels)?)?
                };
                let f = margin.add_scalar(self.confidence).relu();
                let objective = dist.add(&f.mul(&tape.constant(c.clone()))?)?.sum();

                let xt_val = xt.value().clamp(lo, hi);
                let logits = z.value();
                for i in 0..n {
                    if !self.achieved(logits.row(i), labels[i]) {
                        continue;
                    }
                    round_success[i] = true;
                    let row = xt_val.row(i);
                    let l2 = row
                        .iter()
                        .zip(x.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        success[i] = true;
                        best_adv[i * d..(i + 1) * d].copy_from_slice(row);
                    }
                }

                if it == self.max_iter {
                    break;
                }
                let grads = tape.backward(objective)?;
                let g = grads.wrt(&wv).expect("w is a leaf");
                w = w.zip_map(g, |w, g| w - self.learning_rate * g)?;
            }

            for i in 0..n {
                if round_success[i] {
                    upper[i] = upper[i].min(consts[i]);
                    consts[i] = (lower[i] + upper[i]) / 2.0;
                } else {
                    lower[i] = lower[i].max(consts[i]);
                    consts[i] = if upper[i].is_finite() {
                        (lower[i] + upper[i]) / 2.0
                    } else {
                        (consts[i] * 2.0).min(const_cap)
                    };
                }
            }
        }

        // Re-check the stored examples: clamping could in principle move a
        // borderline candidate back across the decision boundary.
        let x_adv = Tensor::new(x.shape().to_vec(), best_adv)?;
        let final_logits = {
            let tape = Tape::new();
            predict.predict(&tape.constant(x_adv.clone()))?.single()?.value()
        };
        let mut out = x_adv.into_vec();
        for i in 0..n {
            if success[i] && !self.achieved(final_logits.row(i), labels[i]) {
                success[i] = false;
                best_l2[i] = f64::INFINITY;
            }
            if !success[i] {
                out[i * d..(i + 1) * d].copy_from_slice(x.row(i));
                best_l2[i] = f64::INFINITY;
            }
        }
        Ok(CwOutcome {
            x_adv: Tensor::new(x.shape().to_vec(), out)?,
            success,
            l2: best_l2,
        })
    }
}
