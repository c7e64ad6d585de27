//! Reverse-mode gradients against central finite differences, 100 random
//! instances per op.

use advgrad::autodiff::{finite_diff_grad, relative_error};
use advgrad::models::{Architecture, Model};
use advgrad::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Checks `f` (scalar-valued) against finite differences in every input.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                f(&vars)?.value().item()
            },
            x,
            H,
        )
        .unwrap();
        let analytic = grads.wrt(&vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        worst = worst.max(relative_error(&analytic, &fd));
    }
    worst
}

/// `Σ out ⊙ w` for a fixed random `w`, so every Jacobian entry is exercised.
fn weigh<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, &out.shape());
    out.mul(&out.constant(w)).map(|v| v.sum())
}

fn sweep(name: &str, mut instance: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(instance(&mut rng, seed));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

#[test]
fn elementwise_binary_ops() {
    sweep("add", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]), random(rng, &[n, m])], |v| weigh(v[0].add(&v[1])?, s))
    });
    sweep("sub", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]), random(rng, &[n, m])], |v| weigh(v[0].sub(&v[1])?, s))
    });
    sweep("mul", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]), random(rng, &[n, m])], |v| weigh(v[0].mul(&v[1])?, s))
    });
}

#[test]
fn elementwise_unary_ops() {
    sweep("scale", |rng, s| {
        let (n, m) = dims(rng);
        let c = rng.random_range(-3.0..3.0);
        check(&[random(rng, &[n, m])], |v| weigh(v[0].scale(c), s))
    });
    sweep("add_scalar", |rng, s| {
        let (n, m) = dims(rng);
        let c = rng.random_range(-3.0..3.0);
        check(&[random(rng, &[n, m])], |v| weigh(v[0].add_scalar(c), s))
    });
    sweep("relu", |rng, s| {
        let (n, m) = dims(rng);
        check(&[off_kink(rng, &[n, m])], |v| weigh(v[0].relu(), s))
    });
    sweep("tanh", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]).scale(2.0)], |v| weigh(v[0].tanh(), s))
    });
    sweep("square", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m])], |v| weigh(v[0].square(), s))
    });
}

#[test]
fn reductions_and_reshape() {
    sweep("sum", |rng, _| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m])], |v| Ok(v[0].sum().scale(1.7)))
    });
    sweep("row_sum", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m, 2])], |v| weigh(v[0].row_sum(), s))
    });
    sweep("reshape", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m * 2])], |v| weigh(v[0].reshape(vec![n, 2, m])?, s))
    });
}

#[test]
fn dense_layer_ops() {
    sweep("matmul", |rng, s| {
        let (n, k) = dims(rng);
        let m = rng.random_range(1..5);
        check(&[random(rng, &[n, k]), random(rng, &[k, m])], |v| weigh(v[0].matmul(&v[1])?, s))
    });
    sweep("add_row_bias", |rng, s| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]), random(rng, &[m])], |v| weigh(v[0].add_row_bias(&v[1])?, s))
    });
}

#[test]
fn convolution_ops() {
    sweep("conv2d", |rng, s| {
        let (n, c, f) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let k = [1, 3][rng.random_range(0..2)];
        let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..2));
        let hw = rng.random_range(k..k + 4);
        check(&[random(rng, &[n, c, hw, hw + 1]), random(rng, &[f, c, k, k])], |v| {
            weigh(v[0].conv2d(&v[1], stride, padding)?, s)
        })
    });
    sweep("add_channel_bias", |rng, s| {
        let (n, f) = (rng.random_range(1..3), rng.random_range(1..4));
        check(&[random(rng, &[n, f, 3, 2]), random(rng, &[f])], |v| weigh(v[0].add_channel_bias(&v[1])?, s))
    });
}

#[test]
fn loss_ops() {
    sweep("softmax_cross_entropy", |rng, _| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check(&[random(rng, &[n, k]).scale(3.0)], |v| v[0].softmax_cross_entropy(&labels))
    });
    sweep("mse", |rng, _| {
        let (n, m) = dims(rng);
        check(&[random(rng, &[n, m]), random(rng, &[n, m])], |v| v[0].mse(&v[1]))
    });
    sweep("gather", |rng, s| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check(&[random(rng, &[n, k])], |v| weigh(v[0].gather(&index)?, s))
    });
    sweep("max_excluding", |rng, s| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        let exclude: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check(&[random(rng, &[n, k])], |v| weigh(v[0].max_excluding(&exclude)?, s))
    });
}

fn model_loss_check(arch: &str, rng: &mut ChaCha8Rng) -> f64 {
    let arch: Architecture = arch.parse().unwrap();
    // Random biases too: zero biases put dead-row preactivations exactly on the kink.
    let params = arch.param_shapes().iter().map(|sh| random(rng, sh)).collect();
    let model = Model::from_params(arch, params).unwrap();
    let n = rng.random_range(1..4);
    let x = random(rng, &[n, model.input_len()]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..model.num_classes())).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().cloned());
    check(&inputs, |v| {
        model.forward(&v[0], &v[1..])?.logits.softmax_cross_entropy(&labels)
    })
}

#[test]
fn full_mlp_loss_wrt_input_and_every_parameter() {
    sweep("mlp loss", |rng, _| model_loss_check("mlp:6-5-4-3", rng));
}

#[test]
fn full_conv_loss_wrt_input_and_every_parameter() {
    sweep("conv loss", |rng, _| model_loss_check("conv:1x5x5;c2k3s1p1;c2k3s2p0;d4;d3", rng));
}
