//! Named gradient attacks. All but Carlini-Wagner are configurations of
//! [`perturb_iterative`]; they differ only in step schedule, start point,
//! momentum, or in which predict/loss pair they hand to the engine.

mod cw;

use crate::attack_api::{
    perturb_iterative, FeaturePredictor, IterativeConfig, LossFn, MeanSquared, Norm, PerturbBudget,
    PredictFn, Target,
};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub use cw::{CarliniWagnerL2, CwOutcome};

fn require_norm(budget: &PerturbBudget, norm: Norm, attack: &str) -> Result<()> {
    if budget.norm != norm {
        return Err(Error::contract(format!(
            "{attack} needs a {norm:?} budget, got {:?}",
            budget.norm
        )));
    }
    Ok(())
}

fn single_step(budget: &PerturbBudget, targeted: bool) -> IterativeConfig {
    IterativeConfig {
        budget: *budget,
        nb_iter: 1,
        eps_iter: budget.eps,
        rand_init: false,
        momentum_decay: 0.0,
        targeted,
    }
}

/// One signed step of size eps (FGSM).
pub fn gradient_sign_attack(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    budget: &PerturbBudget,
    targeted: bool,
) -> Result<Tensor> {
    require_norm(budget, Norm::Linf, "gradient sign attack")?;
    perturb_iterative(x, y, predict, loss, &single_step(budget, targeted), 0)
}

/// One step of L2 length eps along the normalized gradient.
pub fn gradient_attack(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    budget: &PerturbBudget,
    targeted: bool,
) -> Result<Tensor> {
    require_norm(budget, Norm::L2, "gradient attack")?;
    perturb_iterative(x, y, predict, loss, &single_step(budget, targeted), 0)
}

/// Basic iterative method: no random start, no momentum.
pub fn basic_iterative(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    cfg: &IterativeConfig,
) -> Result<Tensor> {
    let cfg = IterativeConfig {
        rand_init: false,
        momentum_decay: 0.0,
        ..*cfg
    };
    perturb_iterative(x, y, predict, loss, &cfg, 0)
}

/// Projected gradient descent; honours `cfg.rand_init`, ignores momentum.
pub fn pgd(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    cfg: &IterativeConfig,
    seed: u64,
) -> Result<Tensor> {
    let cfg = IterativeConfig {
        momentum_decay: 0.0,
        ..*cfg
    };
    perturb_iterative(x, y, predict, loss, &cfg, seed)
}

/// Momentum iterative method with decay `cfg.momentum_decay`; no random start.
pub fn momentum_iterative(
    x: &Tensor,
    y: &Target,
    predict: &dyn PredictFn,
    loss: &dyn LossFn,
    cfg: &IterativeConfig,
) -> Result<Tensor> {
    let cfg = IterativeConfig {
        rand_init: false,
        ..*cfg
    };
    perturb_iterative(x, y, predict, loss, &cfg, 0)
}

/// Feature-space attack: pull the features of hidden layer `layer` toward
/// `guide` by minimizing their mean squared error.
#[allow(clippy::too_many_arguments)]
pub fn fast_feature_attack(
    x: &Tensor,
    guide: &Tensor,
    model: &Model,
    layer: usize,
    budget: &PerturbBudget,
    nb_iter: usize,
    eps_iter: f64,
    rand_init: bool,
    seed: u64,
) -> Result<Tensor> {
    require_norm(budget, Norm::Linf, "fast feature attack")?;
    let predict = FeaturePredictor { model, layer };
    let tape = crate::Tape::new();
    let probe = model.predict_features(&tape.constant(x.clone()), layer)?.shape();
    if probe != guide.shape() {
        return Err(Error::shape("fast_feature_attack", &probe, guide.shape()));
    }
    let cfg = IterativeConfig {
        budget: *budget,
        nb_iter,
        eps_iter,
        rand_init,
        momentum_decay: 0.0,
        targeted: true,
    };
    perturb_iterative(x, &Target::Tensor(guide.clone()), &predict, &MeanSquared, &cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack_api::{input_gradient, CrossEntropy};
    use crate::models::Architecture;

    fn linear(w: &[&[f64]]) -> Model {
        let cols = w[0].len();
        Model::from_params(
            Architecture::mlp(&[w.len(), cols]).unwrap(),
            vec![Tensor::from_rows(w).unwrap(), Tensor::zeros(vec![cols])],
        )
        .unwrap()
    }

    fn it(budget: PerturbBudget, nb_iter: usize, eps_iter: f64) -> IterativeConfig {
        IterativeConfig {
            budget,
            nb_iter,
            eps_iter,
            rand_init: true,
            momentum_decay: 0.0,
            targeted: false,
        }
    }

    #[test]
    fn fgsm_examples() {
        let m = linear(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = Tensor::from_rows(&[&[0.6, 0.4]]).unwrap();
        let y = Target::Labels(vec![0]);
        let b0 = PerturbBudget::new(Norm::Linf, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(gradient_sign_attack(&x, &y, &m, &CrossEntropy, &b0, false).unwrap(), x);

        let b = PerturbBudget::new(Norm::Linf, 0.1, 0.0, 1.0).unwrap();
        let adv = gradient_sign_attack(&x, &y, &m, &CrossEntropy, &b, false).unwrap();
        assert!((adv.data()[0] - 0.5).abs() < 1e-15 && (adv.data()[1] - 0.5).abs() < 1e-15);

        let l2 = PerturbBudget::new(Norm::L2, 0.1, 0.0, 1.0).unwrap();
        assert!(gradient_sign_attack(&x, &y, &m, &CrossEntropy, &l2, false).is_err());
    }

    #[test]
    fn fgm_step_has_length_eps() {
        let m = linear(&[&[1.0, -2.0], &[0.5, 0.3], &[-1.0, 0.2]]);
        let x = Tensor::from_rows(&[&[0.5, 0.5, 0.5]]).unwrap();
        let y = Target::Labels(vec![0]);
        let b = PerturbBudget::new(Norm::L2, 0.2, 0.0, 1.0).unwrap();
        let adv = gradient_attack(&x, &y, &m, &CrossEntropy, &b, false).unwrap();
        let d = adv.sub(&x).unwrap().norm_l2();
        assert!((d - 0.2).abs() < 1e-12);

        let zero = Model::zeros(Architecture::mlp(&[3, 2]).unwrap()).unwrap();
        assert_eq!(gradient_attack(&x, &y, &zero, &CrossEntropy, &b, false).unwrap(), x);
    }

    #[test]
    fn bim_loss_never_decreases_on_linear_model() {
        let m = linear(&[&[0.3, -0.8, 0.1], &[1.2, 0.4, -0.5], &[-0.7, 0.9, 0.2], &[0.1, 0.1, 0.6]]);
        let x = Tensor::from_rows(&[&[0.3, 0.6, 0.5, 0.2], &[0.9, 0.1, 0.4, 0.7]]).unwrap();
        let y = Target::Labels(vec![0, 2]);
        let b = PerturbBudget::new(Norm::Linf, 0.3, 0.0, 1.0).unwrap();
        let mut prev = input_gradient(&x, &y, &m, &CrossEntropy).unwrap().1;
        for n in 1..=10 {
            let adv = basic_iterative(&x, &y, &m, &CrossEntropy, &it(b, n, 0.05)).unwrap();
            for d in b.distances(&adv, &x).unwrap() {
                assert!(d <= 0.3 + 1e-12);
            }
            let l = input_gradient(&adv, &y, &m, &CrossEntropy).unwrap().1;
            assert!(l >= prev - 1e-12, "iteration {n}: {l} < {prev}");
            prev = l;
        }
    }

    #[test]
    fn pgd_seeds() {
        let m = linear(&[&[0.3, -0.8], &[1.2, 0.4], &[-0.7, 0.9]]);
        let x = Tensor::from_rows(&[&[0.3, 0.6, 0.5]]).unwrap();
        let y = Target::Labels(vec![0]);
        let b = PerturbBudget::new(Norm::Linf, 0.3, 0.0, 1.0).unwrap();
        // Few, small steps so the random start still shows in the result.
        let cfg = it(b, 1, 0.01);
        let a = pgd(&x, &y, &m, &CrossEntropy, &cfg, 5).unwrap();
        assert_eq!(a, pgd(&x, &y, &m, &CrossEntropy, &cfg, 5).unwrap());
        let distinct: std::collections::HashSet<Vec<u64>> = (0..100)
            .map(|s| {
                pgd(&x, &y, &m, &CrossEntropy, &cfg, s)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        assert!(distinct.len() > 90);
    }

    #[test]
    fn momentum_respects_budget() {
        let m = linear(&[&[0.3, -0.8], &[1.2, 0.4], &[-0.7, 0.9]]);
        let x = Tensor::from_rows(&[&[0.3, 0.6, 0.5]]).unwrap();
        let y = Target::Labels(vec![1]);
        for norm in [Norm::Linf, Norm::L2] {
            let b = PerturbBudget::new(norm, 0.25, 0.0, 1.0).unwrap();
            let mut cfg = it(b, 10, 0.1);
            cfg.momentum_decay = 1.0;
            let adv = momentum_iterative(&x, &y, &m, &CrossEntropy, &cfg).unwrap();
            assert!(b.distances(&adv, &x).unwrap()[0] <= 0.25 + 1e-9);
        }
    }

    #[test]
    fn fast_feature_examples() {
        let model = Model::init(Architecture::mlp(&[4, 3, 2]).unwrap(), 9).unwrap();
        let x = Tensor::from_rows(&[&[0.2, 0.4, 0.6, 0.8]]).unwrap();
        let tape = crate::Tape::new();
        let guide = model.predict_features(&tape.constant(x.clone()), 0).unwrap().value();
        let b = PerturbBudget::new(Norm::Linf, 0.1, 0.0, 1.0).unwrap();
        let adv = fast_feature_attack(&x, &guide, &model, 0, &b, 5, 0.02, false, 0).unwrap();
        // Zero loss and zero gradient at the start: nothing moves.
        assert_eq!(adv, x);

        let wrong = Tensor::zeros(vec![1, 2]);
        assert!(fast_feature_attack(&x, &wrong, &model, 0, &b, 5, 0.02, false, 0).is_err());
    }

    #[test]
    fn fast_feature_distance_shrinks_on_linear_features() {
        // Identity first layer with positive inputs: features = x, so the MSE
        // to the guide is convex and small sign steps cannot increase it.
        let arch = Architecture::mlp(&[3, 3, 2]).unwrap();
        let mut params = Model::zeros(arch.clone()).unwrap().params().to_vec();
        params[0] = Tensor::eye(3);
        let model = Model::from_params(arch, params).unwrap();
        let x = Tensor::from_rows(&[&[0.5, 0.5, 0.5]]).unwrap();
        let guide = Tensor::from_rows(&[&[0.8, 0.3, 0.55]]).unwrap();
        let b = PerturbBudget::new(Norm::Linf, 0.2, 0.0, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for n in 0..8 {
            let adv = fast_feature_attack(&x, &guide, &model, 0, &b, n, 0.01, false, 0).unwrap();
            let d = adv.sub(&guide).unwrap().norm_l2();
            assert!(d <= prev + 1e-15);
            prev = d;
        }
    }
}
