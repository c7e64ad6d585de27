//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the records in reverse and returns the
//! gradient of a scalar output with respect to every leaf created with
//! [`Tape::leaf`]. Tapes are built per forward pass and dropped afterwards.
//!
//! Node parents always have smaller ids than the node itself, so the record
//! order is a topological order and the backward sweep is a single reverse
//! scan.

mod gradcheck;
pub(crate) mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
use kernels::ConvGeometry;

/// A user-defined differentiable operation with a single tensor input.
///
/// Used to splice non-differentiable transformations into the graph with an
/// explicitly chosen backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> String;

    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    /// Gradient with respect to `input` given the upstream gradient of the output.
    fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Result<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sum(usize),
    RowSum(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(usize, usize),
    Reshape(usize, Arc<[usize]>),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Arc<[usize]>,
    },
    Mse(usize, usize),
    Gather {
        x: usize,
        index: Arc<[usize]>,
    },
    MaxExcluding {
        x: usize,
        exclude: Arc<[usize]>,
    },
    Custom {
        input: usize,
        op: Arc<dyn CustomOp>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRowBias(a, b)
            | AddChannelBias(a, b) | Mse(a, b) => vec![a, b],
            Conv2d { x, w, .. } => vec![x, w],
            Scale(a, _) | AddScalar(a, _) | Relu(a) | Tanh(a) | Sum(a) | RowSum(a)
            | Reshape(a, _) => vec![a],
            SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Gather { x, .. } | MaxExcluding { x, .. } => vec![x],
            Custom { input, .. } => vec![input],
        }
    }

    fn name(&self) -> String {
        use Op::*;
        match self {
            Leaf => "leaf".into(),
            Constant => "constant".into(),
            Add(..) => "add".into(),
            Sub(..) => "sub".into(),
            Mul(..) => "mul".into(),
            Scale(..) => "scale".into(),
            AddScalar(..) => "add_scalar".into(),
            Relu(_) => "relu".into(),
            Tanh(_) => "tanh".into(),
            Sum(_) => "sum".into(),
            RowSum(_) => "row_sum".into(),
            MatMul(..) => "matmul".into(),
            AddRowBias(..) => "add_row_bias".into(),
            Conv2d { .. } => "conv2d".into(),
            AddChannelBias(..) => "add_channel_bias".into(),
            Reshape(..) => "reshape".into(),
            SoftmaxCrossEntropy { .. } => "softmax_cross_entropy".into(),
            Mse(..) => "mse".into(),
            Gather { .. } => "gather".into(),
            MaxExcluding { .. } => "max_excluding".into(),
            Custom { op, .. } => format!("custom:{}", op.name()),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
///
/// A tape is confined to the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients of a scalar output with respect to every leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, leaf: &Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input; [`backward`](Self::backward) reports its gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// A value treated as fixed during differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn record(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let parents = op.parents();
            let value = evaluate(&op, |id| &nodes[id].value)?;
            let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
            (value, requires_grad)
        };
        Ok(self.push(op, value, requires_grad))
    }

    /// Operation names in record order, for inspecting graph structure.
    pub fn op_names(&self) -> Vec<String> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Re-executes every recorded operation from the leaf and constant values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => evaluate(op, |id| &values[id])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from the scalar `output`. The tape itself is not modified,
    /// so repeated calls return identical gradients.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::contract("backward output belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let upstream = Tensor::from_parts(node.value.shape().to_vec(), g);
            for (parent, contrib) in backward_rule(&node.op, &node.value, &upstream, |p| {
                &nodes[p].value
            })? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (id, node) in nodes.iter().enumerate().take(output.id + 1) {
            if matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(id, Tensor::from_parts(shape, g));
            }
        }
        // Leaves created after the output cannot influence it.
        for (id, node) in nodes.iter().enumerate().skip(output.id + 1) {
            if matches!(node.op, Op::Leaf) {
                by_leaf.insert(id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::contract("operands recorded on different tapes"))
    }
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, &[rows, classes], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            op,
            index: bad,
            bound: classes,
        });
    }
    Ok(())
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::shape("conv2d", x, w));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    if w[2] > x[2] + 2 * padding || w[3] > x[3] + 2 * padding {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok(ConvGeometry {
        n: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        f: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        padding,
    })
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut data = Vec::with_capacity(logits.numel());
    for i in 0..logits.batch_size() {
        data.extend(softmax_row(&logits.data()[i * k..(i + 1) * k]));
    }
    Tensor::from_parts(logits.shape().to_vec(), data)
}

fn argmax_excluding(row: &[f64], exclude: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != exclude && (best == usize::MAX || v > row[best]) {
            best = j;
        }
    }
    best
}

/// Forward rule: a pure function of the parents' values.
fn evaluate<'a>(op: &Op, val: impl Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    use Op::*;
    Ok(match op {
        Leaf | Constant => unreachable!("leaves carry their own values"),
        Add(a, b) => val(*a).add(val(*b)).map_err(|_| shape_err("add", val(*a), val(*b)))?,
        Sub(a, b) => val(*a).sub(val(*b)).map_err(|_| shape_err("sub", val(*a), val(*b)))?,
        Mul(a, b) => val(*a)
            .zip_map(val(*b), |x, y| x * y)
            .map_err(|_| shape_err("mul", val(*a), val(*b)))?,
        Scale(a, c) => val(*a).scale(*c),
        AddScalar(a, c) => val(*a).map(|v| v + c),
        Relu(a) => val(*a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Tanh(a) => val(*a).map(f64::tanh),
        Sum(a) => Tensor::scalar(val(*a).sum()),
        RowSum(a) => {
            let t = val(*a);
            let n = t.batch_size();
            Tensor::from_parts(vec![n], (0..n).map(|i| t.row(i).iter().sum()).collect())
        }
        MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        }
        AddRowBias(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.ndim() != 2 || b.ndim() != 1 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("add_row_bias", a, b));
            }
            let cols = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % cols])
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Conv2d {
            x,
            w,
            stride,
            padding,
        } => {
            let (x, w) = (val(*x), val(*w));
            let g = conv_geometry(x.shape(), w.shape(), *stride, *padding)?;
            Tensor::from_parts(
                vec![g.n, g.f, g.out_h(), g.out_w()],
                kernels::conv2d(x.data(), w.data(), &g),
            )
        }
        AddChannelBias(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.ndim() != 4 || b.ndim() != 1 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("add_channel_bias", a, b));
            }
            let plane = a.shape()[2] * a.shape()[3];
            let ch = a.shape()[1];
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[(i / plane) % ch])
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Reshape(a, shape) => val(*a).reshape(shape.to_vec())?,
        SoftmaxCrossEntropy { logits, labels } => {
            let z = val(*logits);
            if z.ndim() != 2 {
                return Err(Error::shape("softmax_cross_entropy", z.shape(), &[labels.len()]));
            }
            let (n, k) = (z.shape()[0], z.shape()[1]);
            check_labels("softmax_cross_entropy", labels, n, k)?;
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = z.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[label];
            }
            Tensor::scalar(total / n as f64)
        }
        Mse(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.shape() != b.shape() {
                return Err(shape_err("mse", a, b));
            }
            let sq: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(sq / a.numel() as f64)
        }
        Gather { x, index } => {
            let z = val(*x);
            if z.ndim() != 2 {
                return Err(Error::shape("gather", z.shape(), &[index.len()]));
            }
            check_labels("gather", index, z.shape()[0], z.shape()[1])?;
            let data = index.iter().enumerate().map(|(i, &j)| z.row(i)[j]).collect();
            Tensor::from_parts(vec![index.len()], data)
        }
        MaxExcluding { x, exclude } => {
            let z = val(*x);
            if z.ndim() != 2 || z.shape()[1] < 2 {
                return Err(Error::shape("max_excluding", z.shape(), &[exclude.len()]));
            }
            check_labels("max_excluding", exclude, z.shape()[0], z.shape()[1])?;
            let data = exclude
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let row = z.row(i);
                    row[argmax_excluding(row, e)]
                })
                .collect();
            Tensor::from_parts(vec![exclude.len()], data)
        }
        Custom { input, op } => op.forward(val(*input))?,
    })
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, a.shape(), b.shape())
}

/// Backward rule: contributions of `upstream` to each parent's gradient.
fn backward_rule<'a>(
    op: &Op,
    out: &Tensor,
    upstream: &Tensor,
    val: impl Fn(usize) -> &'a Tensor,
) -> Result<Vec<(usize, Vec<f64>)>> {
    use Op::*;
    let g = upstream.data();
    Ok(match op {
        Leaf | Constant => vec![],
        Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
            ]
        }
        Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        AddScalar(a, _) => vec![(*a, g.to_vec())],
        // Subgradient 0 at exactly 0.
        Relu(a) => vec![(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        )],
        Tanh(a) => vec![(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (1.0 - y * y))
                .collect(),
        )],
        Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        RowSum(a) => {
            let len = val(*a).row_len();
            vec![(*a, g.iter().flat_map(|&v| std::iter::repeat_n(v, len)).collect())]
        }
        MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            vec![
                (*a, kernels::matmul_a_bt(g, bt.data(), m, n, k)),
                (*b, kernels::matmul_at_b(at.data(), g, m, k, n)),
            ]
        }
        AddRowBias(a, b) => {
            let cols = val(*b).numel();
            let mut gb = vec![0.0; cols];
            for (i, &v) in g.iter().enumerate() {
                gb[i % cols] += v;
            }
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Conv2d {
            x,
            w,
            stride,
            padding,
        } => {
            let (xt, wt) = (val(*x), val(*w));
            let geo = conv_geometry(xt.shape(), wt.shape(), *stride, *padding)?;
            let (gx, gw) = kernels::conv2d_backward(xt.data(), wt.data(), g, &geo);
            vec![(*x, gx), (*w, gw)]
        }
        AddChannelBias(a, b) => {
            let shape = val(*a).shape();
            let (ch, plane) = (shape[1], shape[2] * shape[3]);
            let mut gb = vec![0.0; ch];
            for (i, &v) in g.iter().enumerate() {
                gb[(i / plane) % ch] += v;
            }
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Reshape(a, _) => vec![(*a, g.to_vec())],
        SoftmaxCrossEntropy { logits, labels } => {
            let z = val(*logits);
            let (n, k) = (z.shape()[0], z.shape()[1]);
            let scale = g[0] / n as f64;
            let mut gz = Vec::with_capacity(n * k);
            for (i, &label) in labels.iter().enumerate() {
                let p = softmax_row(z.row(i));
                gz.extend(p.iter().enumerate().map(|(j, &pj)| {
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    scale * (pj - onehot)
                }));
            }
            vec![(*logits, gz)]
        }
        Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let c = 2.0 * g[0] / av.len() as f64;
            let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Gather { x, index } => {
            let k = val(*x).row_len();
            let mut gx = vec![0.0; val(*x).numel()];
            for (i, &j) in index.iter().enumerate() {
                gx[i * k + j] += g[i];
            }
            vec![(*x, gx)]
        }
        MaxExcluding { x, exclude } => {
            let z = val(*x);
            let k = z.row_len();
            let mut gx = vec![0.0; z.numel()];
            for (i, &e) in exclude.iter().enumerate() {
                gx[i * k + argmax_excluding(z.row(i), e)] += g[i];
            }
            vec![(*x, gx)]
        }
        Custom { input, op } => {
            let x = val(*input);
            let gx = op.backward(x, out, upstream)?;
            if gx.shape() != x.shape() {
                return Err(Error::contract(format!(
                    "custom op `{}` returned gradient of shape {:?} for input {:?}",
                    op.name(),
                    gx.shape(),
                    x.shape()
                )));
            }
            vec![(*input, gx.into_vec())]
        }
    })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// A constant on the same tape.
    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    fn binary(&self, other: &Var<'t>, op: Op) -> Result<Var<'t>> {
        same_tape(self, other)?;
        self.tape.record(op)
    }

    fn unary(&self, op: Op) -> Var<'t> {
        self.tape
            .record(op)
            .expect("infallible elementwise op failed")
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id, c))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("square of a single operand")
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id))
    }

    /// Sum over all but the leading axis; returns a length-N vector.
    pub fn row_sum(&self) -> Var<'t> {
        self.unary(Op::RowSum(self.id))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id))
    }

    /// `self[N×M] + bias[M]` broadcast over rows.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddRowBias(self.id, bias.id))
    }

    /// Zero-padded cross-correlation of `self[N×C×H×W]` with `kernel[F×C×kh×kw]`.
    pub fn conv2d(&self, kernel: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.binary(
            kernel,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                stride,
                padding,
            },
        )
    }

    /// `self[N×F×H×W] + bias[F]` broadcast over batch and spatial axes.
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddChannelBias(self.id, bias.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape: Vec<usize> = shape.into();
        self.tape.record(Op::Reshape(self.id, shape.into()))
    }

    /// Mean over the batch of `-log softmax(self)[label]`, stabilized by max-subtraction.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::SoftmaxCrossEntropy {
            logits: self.id,
            labels: labels.into(),
        })
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&self, target: &Var<'t>) -> Result<Var<'t>> {
        self.binary(target, Op::Mse(self.id, target.id))
    }

    /// `self[i, index[i]]` for each row `i`.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::Gather {
            x: self.id,
            index: index.into(),
        })
    }

    /// `max_{j != exclude[i]} self[i, j]` for each row `i`.
    pub fn max_excluding(&self, exclude: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::MaxExcluding {
            x: self.id,
            exclude: exclude.into(),
        })
    }

    pub fn custom(&self, op: Arc<dyn CustomOp>) -> Result<Var<'t>> {
        self.tape.record(Op::Custom { input: self.id, op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(i.matmul(&m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = a.matmul(&b).unwrap().value();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(&a).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv2d_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(x.conv2d(&one, 1, 0).unwrap().value().data(), x.value().data());

        let ones = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = x.conv2d(&ones, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);

        let small = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let big = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(small.conv2d(&big, 1, 0), Err(Error::Shape { .. })));
        // Padding makes room for the same kernel.
        assert_eq!(small.conv2d(&big, 1, 1).unwrap().shape(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn relu_forward_and_backward() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let up = tape.constant(t(&[2], &[5.0, 5.0]));
        let loss = x.relu().mul(&up).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = z.softmax_cross_entropy(&[0]).unwrap().value().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = z.softmax_cross_entropy(&[0]).unwrap().value().item().unwrap();
        assert!(l.is_finite() && l.abs() < 1e-300);

        assert!(matches!(
            z.softmax_cross_entropy(&[2]),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let z = tape.leaf(t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.3, -0.7]));
        let g = tape
            .backward(z.softmax_cross_entropy(&[2, 0]).unwrap())
            .unwrap();
        let p = softmax(&z.value());
        let expect: Vec<f64> = p
            .data()
            .iter()
            .enumerate()
            .map(|(i, &pi)| {
                let onehot = if i == 2 || i == 3 { 1.0 } else { 0.0 };
                (pi - onehot) / 2.0
            })
            .collect();
        for (a, b) in g.wrt(&z).unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_values() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 3.0]));
        assert_eq!(a.mse(&a).unwrap().value().data(), &[0.0]);
        let l = a.mse(&b).unwrap();
        assert_eq!(l.value().data(), &[5.0]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(&a).unwrap().data(), &[-1.0, -3.0]);
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert!(a.mse(&c).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        assert_eq!(tape.backward(x).unwrap().wrt(&x).unwrap().data(), &[1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.square().sum();
        let g1 = tape.backward(y).unwrap();
        assert_eq!(g1.wrt(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g1.wrt(&x).unwrap(), g2.wrt(&x).unwrap());

        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.wrt(&c).is_none());
        assert_eq!(g.wrt(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(a.add(&b).is_err());
        assert!(t1.backward(b).is_err());
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9]));
        let w = tape.leaf(t(&[2, 1, 2, 2], &[0.5, -0.5, 0.25, 1.0, -1.0, 0.1, 0.2, 0.3]));
        let y = x.conv2d(&w, 1, 0).unwrap().relu().reshape(vec![1, 8]).unwrap();
        let loss = y.softmax_cross_entropy(&[3]).unwrap();
        let replayed = tape.replay().unwrap();
        assert_eq!(replayed.len(), tape.len());
        assert_eq!(replayed.last().unwrap(), &loss.value());
        assert_eq!(
            tape.op_names(),
            vec!["leaf", "leaf", "conv2d", "relu", "reshape", "softmax_cross_entropy"]
        );
    }

    struct Doubling;

    impl CustomOp for Doubling {
        fn name(&self) -> String {
            "double".into()
        }
        fn forward(&self, input: &Tensor) -> Result<Tensor> {
            Ok(input.scale(2.0))
        }
        fn backward(&self, _: &Tensor, _: &Tensor, upstream: &Tensor) -> Result<Tensor> {
            Ok(upstream.scale(2.0))
        }
    }

    struct BadShape;

    impl CustomOp for BadShape {
        fn name(&self) -> String {
            "bad".into()
        }
        fn forward(&self, input: &Tensor) -> Result<Tensor> {
            Ok(input.clone())
        }
        fn backward(&self, _: &Tensor, _: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![1]))
        }
    }

    #[test]
    fn custom_ops() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -1.0]));
        let y = x.custom(Arc::new(Doubling)).unwrap();
        assert_eq!(y.value().data(), &[2.0, -2.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 2.0]);

        let z = x.custom(Arc::new(BadShape)).unwrap();
        assert!(matches!(tape.backward(z.sum()), Err(Error::Contract(_))));
    }
}
