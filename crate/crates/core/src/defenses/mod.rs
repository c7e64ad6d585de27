//! Input preprocessing defenses and pipelines of them.
//!
//! Every stage maps an `N×C×H×W` tensor in `[0, 1]` to a tensor of the same
//! shape in `[0, 1]`. On a tape a stage is a single custom node whose
//! backward pass is the stage's own almost-everywhere derivative
//! ([`Preprocessor::vjp`]); for quantizers that derivative is zero, which is
//! what [`crate::bpda`] exists to replace.

mod jpeg;
mod smoothing;

use std::fmt;
use std::sync::Arc;

use crate::attack_api::{Output, PredictFn};
use crate::autodiff::{CustomOp, Var};
use crate::bpda::BpdaModule;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub use jpeg::{jpeg_block, jpeg_filter_with_table, luminance_table, Jpeg, LUMINANCE};
pub use smoothing::{LinearSmooth, MedianSmooth, SmoothKind};

pub trait Preprocessor: Send + Sync + fmt::Debug {
    /// Stage in pipeline grammar, e.g. `bitsqueeze:1`.
    fn describe(&self) -> String;

    fn apply(&self, x: &Tensor) -> Result<Tensor>;

    /// Input gradient given the upstream gradient of `output = apply(input)`.
    fn vjp(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Result<Tensor>;

    /// False when the true derivative is zero almost everywhere.
    fn is_differentiable(&self) -> bool;
}

pub(crate) fn image_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

fn check_upstream(op: &'static str, input: &Tensor, upstream: &Tensor) -> Result<()> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(op, input.shape(), upstream.shape()));
    }
    Ok(())
}

/// Bit-depth reduction: `round(x·(2ᵇ−1))/(2ᵇ−1)`, halves rounded away from zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitSqueeze {
    bits: u32,
}

impl BitSqueeze {
    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::contract(format!("bit depth must be in 1..=8, got {bits}")));
        }
        Ok(BitSqueeze { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }
}

impl Preprocessor for BitSqueeze {
    fn describe(&self) -> String {
        format!("bitsqueeze:{}", self.bits)
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let levels = ((1u32 << self.bits) - 1) as f64;
        Ok(x.map(|v| (v * levels).round() / levels))
    }

    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_upstream("bitsqueeze_vjp", input, upstream)?;
        Ok(Tensor::zeros(input.shape().to_vec()))
    }

    fn is_differentiable(&self) -> bool {
        false
    }
}

/// Records `stage` on the tape as one node.
pub fn apply_on_tape<'t>(stage: &Arc<dyn Preprocessor>, x: &Var<'t>) -> Result<Var<'t>> {
    x.custom(Arc::new(StageOp(stage.clone())))
}

struct StageOp(Arc<dyn Preprocessor>);

impl CustomOp for StageOp {
    fn name(&self) -> String {
        self.0.describe()
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.0.apply(input)
    }

    fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        self.0.vjp(input, output, upstream)
    }
}

/// Ordered composition of stages, applied left to right.
#[derive(Clone, Debug, Default)]
pub struct DefensePipeline {
    stages: Vec<Arc<dyn Preprocessor>>,
}

impl DefensePipeline {
    pub fn new(stages: Vec<Arc<dyn Preprocessor>>) -> Self {
        DefensePipeline { stages }
    }

    pub fn stages(&self) -> &[Arc<dyn Preprocessor>] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Parses comma-separated stages:
    ///
    /// ```text
    /// bitsqueeze:<bits> | median:<k> | average:<k> | gaussian:<k>:<sigma>
    /// | jpeg:<quality> | conv:<k>:<w_00>:<w_01>:...   (k² row-major weights)
    /// ```
    ///
    /// The empty string is the empty pipeline.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Ok(Self::default());
        }
        spec.split(',')
            .map(|s| parse_stage(s.trim()))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Wraps each non-differentiable stage in a straight-through BPDA module.
    pub fn with_straight_through(&self) -> Self {
        let stages = self
            .stages
            .iter()
            .map(|s| -> Arc<dyn Preprocessor> {
                if s.is_differentiable() {
                    s.clone()
                } else {
                    Arc::new(BpdaModule::straight_through(s.clone()))
                }
            })
            .collect();
        Self::new(stages)
    }

    /// Records every stage on the tape in order.
    pub fn apply_on_tape<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let mut v = *x;
        for s in &self.stages {
            v = apply_on_tape(s, &v)?;
        }
        Ok(v)
    }
}

fn parse_num<T: std::str::FromStr>(stage: &str, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::contract(format!("bad parameter {field:?} in defense stage {stage:?}")))
}

fn parse_stage(stage: &str) -> Result<Arc<dyn Preprocessor>> {
    let parts: Vec<&str> = stage.split(':').collect();
    let arity = |n: usize| -> Result<()> {
        if parts.len() == n + 1 {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "defense stage {stage:?} takes {n} parameter(s)"
            )))
        }
    };
    let s: Arc<dyn Preprocessor> = match parts[0] {
        "bitsqueeze" => {
            arity(1)?;
            Arc::new(BitSqueeze::new(parse_num(stage, parts[1])?)?)
        }
        "median" => {
            arity(1)?;
            Arc::new(MedianSmooth::new(parse_num(stage, parts[1])?)?)
        }
        "average" => {
            arity(1)?;
            Arc::new(LinearSmooth::average(parse_num(stage, parts[1])?)?)
        }
        "gaussian" => {
            arity(2)?;
            Arc::new(LinearSmooth::gaussian(
                parse_num(stage, parts[1])?,
                parse_num(stage, parts[2])?,
            )?)
        }
        "jpeg" => {
            arity(1)?;
            Arc::new(Jpeg::new(parse_num(stage, parts[1])?)?)
        }
        "conv" => {
            let k: usize = parse_num(stage, parts.get(1).copied().unwrap_or(""))?;
            arity(1 + k * k)?;
            let weights = parts[2..]
                .iter()
                .map(|p| parse_num(stage, p))
                .collect::<Result<Vec<f64>>>()?;
            Arc::new(LinearSmooth::conv(Tensor::new(vec![k, k], weights)?)?)
        }
        other => {
            return Err(Error::contract(format!(
                "unknown defense {other:?}; available: bitsqueeze, median, average, gaussian, jpeg, conv"
            )))
        }
    };
    Ok(s)
}

impl fmt::Display for DefensePipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|s| s.describe()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Preprocessor for DefensePipeline {
    fn describe(&self) -> String {
        self.to_string()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut v = x.clone();
        for s in &self.stages {
            v = s.apply(&v)?;
        }
        Ok(v)
    }

    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let mut values = vec![input.clone()];
        for s in &self.stages {
            let next = s.apply(values.last().unwrap())?;
            values.push(next);
        }
        let mut g = upstream.clone();
        for (i, s) in self.stages.iter().enumerate().rev() {
            g = s.vjp(&values[i], &values[i + 1], &g)?;
        }
        Ok(g)
    }

    fn is_differentiable(&self) -> bool {
        self.stages.iter().all(|s| s.is_differentiable())
    }
}

/// A model with a defense pipeline in front of it. Inputs stay `N×D`; the
/// pipeline sees them reshaped to `N×C×H×W`.
#[derive(Clone, Debug)]
pub struct DefendedModel {
    model: Model,
    pipeline: DefensePipeline,
    image_shape: [usize; 3],
}

impl DefendedModel {
    pub fn new(model: Model, pipeline: DefensePipeline, image_shape: [usize; 3]) -> Result<Self> {
        let len: usize = image_shape.iter().product();
        if len != model.input_len() {
            return Err(Error::shape("defended_model", &image_shape, &[model.input_len()]));
        }
        Ok(DefendedModel {
            model,
            pipeline,
            image_shape,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pipeline(&self) -> &DefensePipeline {
        &self.pipeline
    }

    /// Applies the pipeline to flat `N×D` inputs.
    pub fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        let n = x.batch_size();
        self.pipeline
            .apply(&x.reshape(vec![n, c, h, w])?)?
            .reshape(vec![n, c * h * w])
    }
}

impl PredictFn for DefendedModel {
    fn predict<'t>(&self, x: &Var<'t>) -> Result<Output<'t>> {
        if self.pipeline.is_empty() {
            return self.model.predict(x);
        }
        let [c, h, w] = self.image_shape;
        let n = x.shape()[0];
        let img = x.reshape([n, c, h, w])?;
        let defended = self.pipeline.apply_on_tape(&img)?.reshape([n, c * h * w])?;
        self.model.predict(&defended)
    }
}
