//! Small differentiable classifiers.
//!
//! Models take flattened inputs of shape `N×input_len` and return logits of
//! shape `N×classes`. Every hidden layer is followed by a ReLU; the head is
//! linear. Hidden layers are indexed from 0 for [`Model::predict_features`].

mod file;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use file::{load_model, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Layer layout of a classifier. Its text form is what model files store.
///
/// * `mlp:784-128-64-10`
/// * `conv:1x28x28;c8k5s2p0;c16k3s2p0;d32;d10` — conv stages, then dense widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp {
        widths: Vec<usize>,
    },
    Conv {
        input: (usize, usize, usize),
        convs: Vec<ConvLayer>,
        dense: Vec<usize>,
    },
}

/// Shape of one trainable tensor plus its Glorot fan-in/fan-out.
struct ParamSpec {
    shape: Vec<usize>,
    fans: Option<(usize, usize)>,
}

impl Architecture {
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        let arch = Architecture::Mlp {
            widths: widths.to_vec(),
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::contract(format!(
                        "mlp needs at least two positive widths, got {widths:?}"
                    )));
                }
            }
            Architecture::Conv { dense, .. } => {
                if dense.is_empty() || dense.contains(&0) {
                    return Err(Error::contract("conv model needs a dense head"));
                }
                self.conv_shapes()?;
            }
        }
        Ok(())
    }

    /// Spatial shape `(C, H, W)` after each conv stage, starting with the input.
    fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let Architecture::Conv { input, convs, .. } = self else {
            return Ok(vec![]);
        };
        let mut shapes = vec![*input];
        let (mut c, mut h, mut w) = *input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!("bad conv input shape {input:?}")));
        }
        for layer in convs {
            if layer.filters == 0 || layer.kernel == 0 || layer.stride == 0 {
                return Err(Error::contract(format!("bad conv layer {layer:?}")));
            }
            let (ph, pw) = (h + 2 * layer.padding, w + 2 * layer.padding);
            if layer.kernel > ph || layer.kernel > pw {
                return Err(Error::shape(
                    "conv architecture",
                    &[c, h, w],
                    &[layer.filters, c, layer.kernel, layer.kernel],
                ));
            }
            c = layer.filters;
            h = (ph - layer.kernel) / layer.stride + 1;
            w = (pw - layer.kernel) / layer.stride + 1;
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp { widths } => widths[0],
            Architecture::Conv {
                input: (c, h, w), ..
            } => c * h * w,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp { widths } => *widths.last().unwrap(),
            Architecture::Conv { dense, .. } => *dense.last().unwrap(),
        }
    }

    /// Number of hidden (ReLU-activated) layers.
    pub fn depth(&self) -> usize {
        match self {
            Architecture::Mlp { widths } => widths.len() - 2,
            Architecture::Conv { convs, dense, .. } => convs.len() + dense.len() - 1,
        }
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let dense = |specs: &mut Vec<ParamSpec>, widths: &[usize]| {
            for pair in widths.windows(2) {
                specs.push(ParamSpec {
                    shape: vec![pair[0], pair[1]],
                    fans: Some((pair[0], pair[1])),
                });
                specs.push(ParamSpec {
                    shape: vec![pair[1]],
                    fans: None,
                });
            }
        };
        let mut specs = Vec::new();
        match self {
            Architecture::Mlp { widths } => dense(&mut specs, widths),
            Architecture::Conv { convs, dense: head, .. } => {
                let shapes = self.conv_shapes().expect("validated architecture");
                for (layer, &(c, _, _)) in convs.iter().zip(&shapes) {
                    let k2 = layer.kernel * layer.kernel;
                    specs.push(ParamSpec {
                        shape: vec![layer.filters, c, layer.kernel, layer.kernel],
                        fans: Some((c * k2, layer.filters * k2)),
                    });
                    specs.push(ParamSpec {
                        shape: vec![layer.filters],
                        fans: None,
                    });
                }
                let (c, h, w) = *shapes.last().unwrap();
                let mut widths = vec![c * h * w];
                widths.extend(head);
                dense(&mut specs, &widths);
            }
        }
        specs
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.param_specs().into_iter().map(|s| s.shape).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { widths } => {
                let parts: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "mlp:{}", parts.join("-"))
            }
            Architecture::Conv {
                input: (c, h, w),
                convs,
                dense,
            } => {
                write!(f, "conv:{c}x{h}x{w}")?;
                for l in convs {
                    write!(f, ";c{}k{}s{}p{}", l.filters, l.kernel, l.stride, l.padding)?;
                }
                for d in dense {
                    write!(f, ";d{d}")?;
                }
                Ok(())
            }
        }
    }
}

fn parse_conv_layer(s: &str) -> Option<ConvLayer> {
    let rest = s.strip_prefix('c')?;
    let (filters, rest) = rest.split_once('k')?;
    let (kernel, rest) = rest.split_once('s')?;
    let (stride, padding) = rest.split_once('p')?;
    Some(ConvLayer {
        filters: filters.parse().ok()?,
        kernel: kernel.parse().ok()?,
        stride: stride.parse().ok()?,
        padding: padding.parse().ok()?,
    })
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("unrecognized architecture descriptor `{s}`"));
        let arch = if let Some(rest) = s.strip_prefix("mlp:") {
            let widths = rest
                .split('-')
                .map(|w| w.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            Architecture::Mlp { widths }
        } else if let Some(rest) = s.strip_prefix("conv:") {
            let mut parts = rest.split(';');
            let dims: Vec<usize> = parts
                .next()
                .ok_or_else(bad)?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let [c, h, w] = dims[..] else {
                return Err(bad());
            };
            let mut convs = Vec::new();
            let mut dense = Vec::new();
            for part in parts {
                if let Some(d) = part.strip_prefix('d') {
                    dense.push(d.parse().map_err(|_| bad())?);
                } else if dense.is_empty() {
                    convs.push(parse_conv_layer(part).ok_or_else(bad)?);
                } else {
                    return Err(bad());
                }
            }
            Architecture::Conv {
                input: (c, h, w),
                convs,
                dense,
            }
        } else {
            return Err(bad());
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Activations of one forward pass.
pub struct Forward<'t> {
    /// Post-activation output of every hidden layer, in order.
    pub hidden: Vec<Var<'t>>,
    pub logits: Var<'t>,
}

/// A classifier: architecture plus parameters in layer order
/// (weight then bias for each layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl Model {
    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::contract(format!(
                "architecture {arch} expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("model parameters", shape, p.shape()));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let params = arch.param_shapes().into_iter().map(Tensor::zeros).collect();
        Model::from_params(arch, params)
    }

    /// Glorot-uniform weights, zero biases; fully determined by `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()
            .into_iter()
            .map(|spec| match spec.fans {
                Some((fan_in, fan_out)) => {
                    let bound = glorot_bound(fan_in, fan_out);
                    let n = spec.shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                    Tensor::from_parts(spec.shape, data)
                }
                None => Tensor::zeros(spec.shape),
            })
            .collect();
        Model::from_params(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Model::from_params(self.arch.clone(), params)
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass using already-bound parameters.
    pub fn forward<'t>(&self, x: &Var<'t>, params: &[Var<'t>]) -> Result<Forward<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_len() {
            return Err(Error::shape("predict", &shape, &[shape[0], self.input_len()]));
        }
        let n = shape[0];
        let mut hidden = Vec::new();
        let mut h = *x;
        let mut p = params.iter();
        let mut next = || p.next().expect("parameter list matches architecture");

        if let Architecture::Conv { input, convs, .. } = &self.arch {
            let (c, hh, ww) = *input;
            h = h.reshape(vec![n, c, hh, ww])?;
            for layer in convs {
                let (k, b) = (next(), next());
                h = h
                    .conv2d(k, layer.stride, layer.padding)?
                    .add_channel_bias(b)?
                    .relu();
                hidden.push(h);
            }
            let flat: usize = h.shape()[1..].iter().product();
            h = h.reshape(vec![n, flat])?;
        }

        let layers = match &self.arch {
            Architecture::Mlp { widths } => widths.len() - 1,
            Architecture::Conv { dense, .. } => dense.len(),
        };
        for i in 0..layers {
            let (w, b) = (next(), next());
            h = h.matmul(w)?.add_row_bias(b)?;
            if i + 1 < layers {
                h = h.relu();
                hidden.push(h);
            }
        }
        Ok(Forward { hidden, logits: h })
    }

    /// Pre-softmax scores, recorded on the tape `x` lives on.
    pub fn predict_logits<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let params = self.bind(x.tape(), false);
        Ok(self.forward(x, &params)?.logits)
    }

    /// Post-activation output of hidden layer `layer_index`.
    pub fn predict_features<'t>(&self, x: &Var<'t>, layer_index: usize) -> Result<Var<'t>> {
        if layer_index >= self.depth() {
            return Err(Error::Index {
                op: "predict_features",
                index: layer_index,
                bound: self.depth(),
            });
        }
        let params = self.bind(x.tape(), false);
        Ok(self.forward(x, &params)?.hidden[layer_index])
    }

    /// Logits for a batch, without keeping the graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.predict_logits(&xv)?.value())
    }

    pub fn predict_classes(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
