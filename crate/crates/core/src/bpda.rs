//! Backward-pass substitution for defenses.
//!
//! A [`BpdaModule`] runs the wrapped stage unchanged on the forward pass. On
//! the backward pass it ignores the stage's own derivative and instead either
//! differentiates a substitute function `g` at the same input, or applies a
//! user-supplied map from `(input, upstream)` to the input gradient. With
//! `g(x) = x` this is the straight-through estimator.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::defenses::{apply_on_tape, Preprocessor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable stand-in whose tape gradient replaces the stage's.
pub trait Substitute: Send + Sync + fmt::Debug {
    fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Substitute for Identity {
    fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(*x)
    }
}

/// Uses a (differentiable) stage as its own substitute.
#[derive(Clone, Debug)]
pub struct StageSubstitute(pub Arc<dyn Preprocessor>);

impl Substitute for StageSubstitute {
    fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        apply_on_tape(&self.0, x)
    }
}

type BackwardFn = dyn Fn(&Tensor, &Tensor) -> Result<Tensor> + Send + Sync;

#[derive(Clone)]
enum Backward {
    Substitute(Arc<dyn Substitute>),
    Direct(Arc<BackwardFn>),
}

#[derive(Clone)]
pub struct BpdaModule {
    inner: Arc<dyn Preprocessor>,
    backward: Backward,
}

impl BpdaModule {
    pub fn with_forward_substitute(inner: Arc<dyn Preprocessor>, g: Arc<dyn Substitute>) -> Self {
        BpdaModule {
            inner,
            backward: Backward::Substitute(g),
        }
    }

    /// `backward(input, upstream)` must return a tensor shaped like `input`.
    pub fn with_backward_fn(
        inner: Arc<dyn Preprocessor>,
        backward: impl Fn(&Tensor, &Tensor) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        BpdaModule {
            inner,
            backward: Backward::Direct(Arc::new(backward)),
        }
    }

    pub fn straight_through(inner: Arc<dyn Preprocessor>) -> Self {
        Self::with_forward_substitute(inner, Arc::new(Identity))
    }

    pub fn inner(&self) -> &Arc<dyn Preprocessor> {
        &self.inner
    }
}

impl fmt::Debug for BpdaModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let backward = match &self.backward {
            Backward::Substitute(g) => format!("{g:?}"),
            Backward::Direct(_) => "<fn>".to_string(),
        };
        f.debug_struct("BpdaModule")
            .field("inner", &self.inner)
            .field("backward", &backward)
            .finish()
    }
}

impl Preprocessor for BpdaModule {
    fn describe(&self) -> String {
        format!("bpda({})", self.inner.describe())
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.apply(x)
    }

    /// Evaluated at the pre-defense input; never calls the inner stage's vjp.
    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let g = match &self.backward {
            Backward::Substitute(sub) => {
                let tape = Tape::new();
                let x = tape.leaf(input.clone());
                let y = sub.forward(&x)?;
                if y.shape() != upstream.shape() {
                    return Err(Error::contract(format!(
                        "BPDA substitute returned shape {:?}, expected {:?}",
                        y.shape(),
                        upstream.shape()
                    )));
                }
                let probe = y.mul(&tape.constant(upstream.clone()))?.sum();
                tape.backward(probe)?.wrt(&x).expect("input is a leaf").clone()
            }
            Backward::Direct(f) => f(input, upstream)?,
        };
        if g.shape() != input.shape() {
            return Err(Error::contract(format!(
                "BPDA backward returned shape {:?} for input {:?}",
                g.shape(),
                input.shape()
            )));
        }
        Ok(g)
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack_api::{CrossEntropy, IterativeConfig, Norm, PerturbBudget, Target};
    use crate::autodiff::{finite_diff_grad, relative_error};
    use crate::defenses::{BitSqueeze, DefendedModel, DefensePipeline, LinearSmooth};
    use crate::gradient_attacks::basic_iterative;
    use crate::models::{Architecture, Model};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn squeeze() -> Arc<dyn Preprocessor> {
        Arc::new(BitSqueeze::new(1).unwrap())
    }

    /// Gradient of `Σ stage(x)·up` taken through the tape.
    fn tape_grad(stage: Arc<dyn Preprocessor>, x: &Tensor, up: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = apply_on_tape(&stage, &xv)?.mul(&tape.constant(up.clone()))?.sum();
        Ok(tape.backward(y)?.wrt(&xv).unwrap().clone())
    }

    #[test]
    fn straight_through_forward_is_the_defense_and_backward_is_identity() {
        let x = random(vec![2, 1, 4, 4], 0);
        let up = random(vec![2, 1, 4, 4], 1);
        let st: Arc<dyn Preprocessor> = Arc::new(BpdaModule::straight_through(squeeze()));
        assert_eq!(st.apply(&x).unwrap(), squeeze().apply(&x).unwrap());
        assert_eq!(tape_grad(st, &x, &up).unwrap(), up);
        // Without the wrapper the quantizer blocks all gradient.
        assert_eq!(tape_grad(squeeze(), &x, &up).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn straight_through_gradient_matches_finite_differences_of_substitute() {
        let x = random(vec![1, 1, 5, 5], 2);
        let up = random(vec![1, 1, 5, 5], 3);
        let st: Arc<dyn Preprocessor> = Arc::new(BpdaModule::straight_through(squeeze()));
        let g = tape_grad(st, &x, &up).unwrap();
        let fd = finite_diff_grad(|v| Ok(v.zip_map(&up, |a, b| a * b)?.sum()), &x, 1e-5).unwrap();
        assert!(relative_error(&g, &fd) < 1e-9);
    }

    #[test]
    fn self_substitution_reproduces_own_gradient() {
        let smooth: Arc<dyn Preprocessor> = Arc::new(LinearSmooth::gaussian(3, 0.9).unwrap());
        let wrapped: Arc<dyn Preprocessor> = Arc::new(BpdaModule::with_forward_substitute(
            smooth.clone(),
            Arc::new(StageSubstitute(smooth.clone())),
        ));
        let x = random(vec![1, 2, 6, 6], 4);
        let up = random(vec![1, 2, 6, 6], 5);
        let a = tape_grad(wrapped, &x, &up).unwrap();
        let b = tape_grad(smooth, &x, &up).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn direct_backward_variants() {
        let x = random(vec![1, 1, 4, 4], 6);
        let up = random(vec![1, 1, 4, 4], 7);
        let pass = BpdaModule::with_backward_fn(squeeze(), |_, up| Ok(up.clone()));
        let st = BpdaModule::straight_through(squeeze());
        assert_eq!(tape_grad(Arc::new(pass), &x, &up).unwrap(), tape_grad(Arc::new(st), &x, &up).unwrap());

        let double = BpdaModule::with_backward_fn(squeeze(), |_, up| Ok(up.scale(2.0)));
        assert_eq!(tape_grad(Arc::new(double), &x, &up).unwrap(), up.scale(2.0));

        let bad = BpdaModule::with_backward_fn(squeeze(), |_, _| Ok(Tensor::zeros(vec![3])));
        assert!(matches!(tape_grad(Arc::new(bad), &x, &up), Err(Error::Contract(_))));
    }

    #[derive(Debug)]
    struct Shrink;

    impl Substitute for Shrink {
        fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
            x.reshape(vec![x.shape().iter().product::<usize>()])
        }
    }

    #[test]
    fn substitute_with_wrong_shape_is_a_contract_error() {
        let m = BpdaModule::with_forward_substitute(squeeze(), Arc::new(Shrink));
        let x = random(vec![1, 1, 2, 2], 0);
        assert!(matches!(tape_grad(Arc::new(m), &x, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_backward_makes_bim_a_no_op() {
        let model = Model::init(Architecture::mlp(&[16, 8, 3]).unwrap(), 1).unwrap();
        let zero: Arc<dyn Preprocessor> =
            Arc::new(BpdaModule::with_backward_fn(squeeze(), |x, _| Ok(Tensor::zeros(x.shape().to_vec()))));
        let defended = DefendedModel::new(model, DefensePipeline::new(vec![zero]), [1, 4, 4]).unwrap();
        let x = random(vec![3, 16], 8);
        let cfg = IterativeConfig {
            budget: PerturbBudget::new(Norm::Linf, 0.3, 0.0, 1.0).unwrap(),
            nb_iter: 10,
            eps_iter: 0.05,
            rand_init: false,
            momentum_decay: 0.0,
            targeted: false,
        };
        let adv = basic_iterative(&x, &Target::Labels(vec![0, 1, 2]), &defended, &CrossEntropy, &cfg).unwrap();
        assert_eq!(adv, x);
    }

    proptest! {
        #[test]
        fn wrapped_forward_is_bitwise_the_defense(
            data in proptest::collection::vec(0.0f64..=1.0, 36),
            spec in prop::sample::select(vec!["bitsqueeze:1", "bitsqueeze:3", "jpeg:20", "median:3", "average:3"]),
        ) {
            let x = Tensor::new(vec![1, 1, 6, 6], data).unwrap();
            let p = DefensePipeline::parse(spec).unwrap();
            let wrapped = BpdaModule::straight_through(p.stages()[0].clone());
            prop_assert_eq!(wrapped.apply(&x).unwrap(), p.apply(&x).unwrap());
        }
    }
}
