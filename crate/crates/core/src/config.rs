//! Serializable attack configurations.
//!
//! An [`AttackConfig`] names one attack and carries exactly the
//! hyperparameters that attack consumes, so serializing it records everything
//! needed to rerun it. Targeted variants aim at label `(y + 1) mod K`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack_api::{
    perturb_iterative, CrossEntropy, IterativeConfig, LossFn, Norm, PerturbBudget, PredictFn,
    Target,
};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradient_attacks::CarliniWagnerL2;
use crate::search_attacks::{jsma, local_search_attack, single_pixel_attack, JsmaConfig, Queries, SearchBudget};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
}

impl LossKind {
    pub fn build(self) -> Box<dyn LossFn> {
        match self {
            LossKind::CrossEntropy => Box::new(CrossEntropy),
        }
    }
}

/// Single gradient step (FGSM, FGM).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneStepParams {
    pub loss: LossKind,
    pub eps: f64,
    pub targeted: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

/// Basic iterative method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterativeParams {
    pub loss: LossKind,
    pub eps: f64,
    pub nb_iter: usize,
    pub eps_iter: f64,
    pub targeted: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdParams {
    pub loss: LossKind,
    pub eps: f64,
    pub nb_iter: usize,
    pub eps_iter: f64,
    pub rand_init: bool,
    pub targeted: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumParams {
    pub loss: LossKind,
    pub eps: f64,
    pub nb_iter: usize,
    pub eps_iter: f64,
    pub decay: f64,
    pub targeted: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinglePixelParams {
    pub max_queries: usize,
    pub clip_min: f64,
    pub clip_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSearchParams {
    pub max_queries: usize,
    pub p: f64,
    pub neighborhood_size: usize,
    pub rounds: usize,
    pub clip_min: f64,
    pub clip_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum AttackConfig {
    Fgsm(OneStepParams),
    Fgm(OneStepParams),
    BimLinf(IterativeParams),
    BimL2(IterativeParams),
    PgdLinf(PgdParams),
    PgdL2(PgdParams),
    MomentumLinf(MomentumParams),
    CwL2(CarliniWagnerL2),
    SinglePixel(SinglePixelParams),
    LocalSearch(LocalSearchParams),
    Jsma(JsmaConfig),
}

pub const ATTACK_NAMES: [&str; 11] = [
    "fgsm",
    "fgm",
    "bim-linf",
    "bim-l2",
    "pgd-linf",
    "pgd-l2",
    "momentum-linf",
    "cw-l2",
    "single-pixel",
    "local-search",
    "jsma",
];

impl AttackConfig {
    /// Documented defaults for MNIST-scale inputs in `[0, 1]`.
    pub fn preset(name: &str) -> Result<Self> {
        let loss = LossKind::CrossEntropy;
        let (clip_min, clip_max) = (0.0, 1.0);
        let pgd = |eps, eps_iter| PgdParams {
            loss,
            eps,
            nb_iter: 40,
            eps_iter,
            rand_init: true,
            targeted: false,
            clip_min,
            clip_max,
        };
        let bim = |eps, eps_iter| IterativeParams {
            loss,
            eps,
            nb_iter: 40,
            eps_iter,
            targeted: false,
            clip_min,
            clip_max,
        };
        let one = |eps| OneStepParams {
            loss,
            eps,
            targeted: false,
            clip_min,
            clip_max,
        };
        Ok(match name {
            "fgsm" => AttackConfig::Fgsm(one(0.3)),
            "fgm" => AttackConfig::Fgm(one(2.0)),
            "bim-linf" => AttackConfig::BimLinf(bim(0.3, 0.01)),
            "bim-l2" => AttackConfig::BimL2(bim(2.0, 0.1)),
            "pgd-linf" => AttackConfig::PgdLinf(pgd(0.3, 0.01)),
            "pgd-l2" => AttackConfig::PgdL2(pgd(2.0, 0.1)),
            "momentum-linf" => AttackConfig::MomentumLinf(MomentumParams {
                loss,
                eps: 0.3,
                nb_iter: 10,
                eps_iter: 0.03,
                decay: 1.0,
                targeted: false,
                clip_min,
                clip_max,
            }),
            "cw-l2" => AttackConfig::CwL2(CarliniWagnerL2 {
                confidence: 0.0,
                binary_search_steps: 6,
                max_iter: 100,
                initial_const: 1.0,
                learning_rate: 0.5,
                clip_min,
                clip_max,
                targeted: false,
            }),
            "single-pixel" => AttackConfig::SinglePixel(SinglePixelParams {
                max_queries: 1000,
                clip_min,
                clip_max,
            }),
            "local-search" => AttackConfig::LocalSearch(LocalSearchParams {
                max_queries: 20_000,
                p: (clip_max - clip_min) / 2.0,
                neighborhood_size: 5,
                rounds: 10,
                clip_min,
                clip_max,
            }),
            "jsma" => AttackConfig::Jsma(JsmaConfig {
                theta: 1.0,
                gamma: 0.1,
                clip_min,
                clip_max,
            }),
            other => {
                return Err(Error::contract(format!(
                    "unknown attack {other:?}; available: {}",
                    ATTACK_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm(_) => "fgsm",
            AttackConfig::Fgm(_) => "fgm",
            AttackConfig::BimLinf(_) => "bim-linf",
            AttackConfig::BimL2(_) => "bim-l2",
            AttackConfig::PgdLinf(_) => "pgd-linf",
            AttackConfig::PgdL2(_) => "pgd-l2",
            AttackConfig::MomentumLinf(_) => "momentum-linf",
            AttackConfig::CwL2(_) => "cw-l2",
            AttackConfig::SinglePixel(_) => "single-pixel",
            AttackConfig::LocalSearch(_) => "local-search",
            AttackConfig::Jsma(_) => "jsma",
        }
    }

    /// The engine configuration and loss for attacks built on
    /// [`perturb_iterative`]; `None` for the others.
    pub fn as_iterative(&self) -> Option<(IterativeConfig, LossKind)> {
        let budget = |norm, eps, clip_min, clip_max| PerturbBudget {
            norm,
            eps,
            clip_min,
            clip_max,
        };
        let cfg = match *self {
            AttackConfig::Fgsm(p) | AttackConfig::Fgm(p) => {
                let norm = if matches!(self, AttackConfig::Fgsm(_)) { Norm::Linf } else { Norm::L2 };
                let cfg = IterativeConfig {
                    budget: budget(norm, p.eps, p.clip_min, p.clip_max),
                    nb_iter: 1,
                    eps_iter: p.eps,
                    rand_init: false,
                    momentum_decay: 0.0,
                    targeted: p.targeted,
                };
                (cfg, p.loss)
            }
            AttackConfig::BimLinf(p) | AttackConfig::BimL2(p) => {
                let norm = if matches!(self, AttackConfig::BimLinf(_)) { Norm::Linf } else { Norm::L2 };
                let cfg = IterativeConfig {
                    budget: budget(norm, p.eps, p.clip_min, p.clip_max),
                    nb_iter: p.nb_iter,
                    eps_iter: p.eps_iter,
                    rand_init: false,
                    momentum_decay: 0.0,
                    targeted: p.targeted,
                };
                (cfg, p.loss)
            }
            AttackConfig::PgdLinf(p) | AttackConfig::PgdL2(p) => {
                let norm = if matches!(self, AttackConfig::PgdLinf(_)) { Norm::Linf } else { Norm::L2 };
                let cfg = IterativeConfig {
                    budget: budget(norm, p.eps, p.clip_min, p.clip_max),
                    nb_iter: p.nb_iter,
                    eps_iter: p.eps_iter,
                    rand_init: p.rand_init,
                    momentum_decay: 0.0,
                    targeted: p.targeted,
                };
                (cfg, p.loss)
            }
            AttackConfig::MomentumLinf(p) => {
                let cfg = IterativeConfig {
                    budget: budget(Norm::Linf, p.eps, p.clip_min, p.clip_max),
                    nb_iter: p.nb_iter,
                    eps_iter: p.eps_iter,
                    rand_init: false,
                    momentum_decay: p.decay,
                    targeted: p.targeted,
                };
                (cfg, p.loss)
            }
            _ => return None,
        };
        Some(cfg)
    }

    /// Same attack with eps and step size multiplied by `factor`; other
    /// attacks are returned unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        match &mut out {
            AttackConfig::Fgsm(p) | AttackConfig::Fgm(p) => p.eps *= factor,
            AttackConfig::BimLinf(p) | AttackConfig::BimL2(p) => {
                p.eps *= factor;
                p.eps_iter *= factor;
            }
            AttackConfig::PgdLinf(p) | AttackConfig::PgdL2(p) => {
                p.eps *= factor;
                p.eps_iter *= factor;
            }
            AttackConfig::MomentumLinf(p) => {
                p.eps *= factor;
                p.eps_iter *= factor;
            }
            _ => {}
        }
        out
    }

    pub fn clip_range(&self) -> (f64, f64) {
        match *self {
            AttackConfig::Fgsm(p) | AttackConfig::Fgm(p) => (p.clip_min, p.clip_max),
            AttackConfig::BimLinf(p) | AttackConfig::BimL2(p) => (p.clip_min, p.clip_max),
            AttackConfig::PgdLinf(p) | AttackConfig::PgdL2(p) => (p.clip_min, p.clip_max),
            AttackConfig::MomentumLinf(p) => (p.clip_min, p.clip_max),
            AttackConfig::CwL2(c) => (c.clip_min, c.clip_max),
            AttackConfig::SinglePixel(p) => (p.clip_min, p.clip_max),
            AttackConfig::LocalSearch(p) => (p.clip_min, p.clip_max),
            AttackConfig::Jsma(c) => (c.clip_min, c.clip_max),
        }
    }

    fn targeted(&self) -> bool {
        match self {
            AttackConfig::CwL2(c) => c.targeted,
            AttackConfig::Jsma(_) => true,
            AttackConfig::SinglePixel(_) | AttackConfig::LocalSearch(_) => false,
            _ => self.as_iterative().is_some_and(|(c, _)| c.targeted),
        }
    }

    /// Checks hyperparameter ranges without running anything.
    pub fn validate(&self) -> Result<()> {
        if let Some((cfg, _)) = self.as_iterative() {
            return cfg.validate();
        }
        match *self {
            AttackConfig::CwL2(c) => c.validate(),
            AttackConfig::SinglePixel(p) => SearchBudget {
                max_queries: p.max_queries,
                clip_min: p.clip_min,
                clip_max: p.clip_max,
                p: 0.0,
            }
            .validate_params(),
            AttackConfig::LocalSearch(p) => {
                if p.neighborhood_size == 0 {
                    return Err(Error::contract("neighborhood_size must be positive"));
                }
                SearchBudget {
                    max_queries: p.max_queries,
                    clip_min: p.clip_min,
                    clip_max: p.clip_max,
                    p: p.p,
                }
                .validate_params()
            }
            AttackConfig::Jsma(c) => c.validate(),
            _ => unreachable!("iterative attacks handled above"),
        }
    }

    /// Attacks every row of `x` (true labels `labels`) against `predict`.
    pub fn run(&self, x: &Tensor, labels: &[usize], predict: &dyn PredictFn, seed: u64) -> Result<Tensor> {
        if x.ndim() != 2 || x.batch_size() != labels.len() {
            return Err(Error::shape("attack", x.shape(), &[labels.len()]));
        }
        let goal = if self.targeted() {
            let tape = Tape::new();
            let k = predict.predict(&tape.constant(x.select_rows(&[0])?))?.single()?.shape()[1];
            labels.iter().map(|&y| (y + 1) % k).collect()
        } else {
            labels.to_vec()
        };
        if let Some((cfg, loss)) = self.as_iterative() {
            return perturb_iterative(x, &Target::Labels(goal), predict, loss.build().as_ref(), &cfg, seed);
        }
        if let AttackConfig::CwL2(c) = self {
            return Ok(c.perturb(x, &goal, predict)?.x_adv);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..x.batch_size())
            .map(|i| {
                let xi = x.select_rows(&[i])?;
                let row_seed = rng.next_u64();
                let adv = match *self {
                    AttackConfig::SinglePixel(p) => {
                        let budget = SearchBudget {
                            max_queries: p.max_queries,
                            clip_min: p.clip_min,
                            clip_max: p.clip_max,
                            p: 0.0,
                        };
                        single_pixel_attack(&xi, goal[i], &Queries(predict), &budget, row_seed)?.x_adv
                    }
                    AttackConfig::LocalSearch(p) => {
                        let budget = SearchBudget {
                            max_queries: p.max_queries,
                            clip_min: p.clip_min,
                            clip_max: p.clip_max,
                            p: p.p,
                        };
                        local_search_attack(
                            &xi,
                            goal[i],
                            &Queries(predict),
                            &budget,
                            p.neighborhood_size,
                            p.rounds,
                            row_seed,
                        )?
                        .x_adv
                    }
                    AttackConfig::Jsma(c) => jsma(&xi, goal[i], predict, &c)?.x_adv,
                    _ => unreachable!("gradient attacks handled above"),
                };
                Ok(adv)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&rows)
    }
}
