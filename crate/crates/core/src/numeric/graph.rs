//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so insertion order is a
//! topological order and backward is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor below which [`Graph::l2_normalize`] passes its input through.
pub const L2_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of an ordered bucket accumulation, see [`Graph::bucket_sum`].
#[derive(Clone, Debug)]
pub enum BucketTerm {
    /// Row `row` of the differentiable input, added into `bucket`.
    Row { row: usize, bucket: usize },
    /// A constant row added into `bucket`.
    Const { bucket: usize, values: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    LayerNormRows {
        input: NodeId,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    SliceCols {
        input: NodeId,
        start: usize,
    },
    Transpose(NodeId),
    SelectRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    Reshape(NodeId),
    L2Normalize {
        input: NodeId,
        norm: f64,
        applied: bool,
    },
    L2NormalizeRows {
        input: NodeId,
        norms: Vec<f64>,
        applied: Vec<bool>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BucketSum {
        input: NodeId,
        rows: Vec<(usize, usize)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(..) => "reshape",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BucketSum { .. } => "bucket_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. Build forward with the op methods, then call
/// [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not lie on a differentiable path to the
    /// output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// First node (in reverse evaluation order) carrying a non-finite gradient.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.grads
            .iter()
            .enumerate()
            .rev()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
            .map(|(i, _)| NodeId(i))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Turns the per-op finiteness check on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                node: id.0,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(
        &mut self,
        a: NodeId,
        row: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).len() != n {
            return Err(Error::dim(name, self.shape(a), self.shape(row)));
        }
        let va = self.value(a);
        let vr = self.value(row).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (x, &r) in va.row(i).iter().zip(vr) {
                data.push(f(*x, r));
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        self.push(v, op, rg)
    }

    /// `a[i, :] + bias` for every row `i`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.row_op(a, bias, "add_row", |x, r| x + r, Op::AddRow(a, bias))
    }

    /// `a[i, :] * scale` elementwise for every row `i`.
    pub fn mul_row(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId> {
        self.row_op(a, scale, "mul_row", |x, r| x * r, Op::MulRow(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Column means of an `m × n` matrix, returned as an `n` vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![n], out)?, Op::MeanRows(a), rg)
    }

    /// Per-row standardization without affine terms (biased variance,
    /// eps = 1e-5). Compose with [`Graph::mul_row`] and [`Graph::add_row`].
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut normed = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            normed.extend(row.iter().map(|x| (x - mean) * is));
        }
        let v = Tensor::new(t.shape().to_vec(), normed.clone())?;
        let rg = self.rg(&[a]);
        self.push(
            v,
            Op::LayerNormRows {
                input: a,
                normed,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|x| (x - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            for o in &mut out[start..] {
                *o /= z;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let cols = self.value(first).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = self.value(first).dims2().0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if len == 0 || start + len > m {
            return Err(Error::Index {
                index: start + len,
                len: m,
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![len, n], data)?,
            Op::SliceRows { input: a, start },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if len == 0 || start + len > n {
            return Err(Error::Index {
                index: start + len,
                len: n,
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { input: a, start },
            rg,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Gathers the given rows (embedding-style lookup); repeats allowed.
    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if indices.is_empty() {
            return Err(Error::Input("select_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Index { index: i, len: m });
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![indices.len(), n], data)?,
            Op::SelectRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self
            .value(a)
            .reshaped(shape.to_vec())
            .map_err(|_| Error::dim("reshape", self.shape(a), shape))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Normalizes the whole tensor to unit L2 norm. Inputs with norm at or
    /// below `eps` pass through unchanged.
    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(a);
        let norm = t.norm();
        let applied = norm > eps;
        let v = if applied {
            t.map(|x| x / norm)
        } else {
            t.clone()
        };
        let rg = self.rg(&[a]);
        self.push(
            v,
            Op::L2Normalize {
                input: a,
                norm,
                applied,
            },
            rg,
        )
    }

    /// Row-wise variant of [`Graph::l2_normalize`].
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let mut data = Vec::with_capacity(t.len());
        let mut norms = Vec::with_capacity(m);
        let mut applied = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let on = n > eps;
            norms.push(n);
            applied.push(on);
            if on {
                data.extend(row.iter().map(|x| x / n));
            } else {
                data.extend_from_slice(row);
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(
            v,
            Op::L2NormalizeRows {
                input: a,
                norms,
                applied,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of each logit row against its target index.
    /// A 1-D logit vector is a single row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (m, n) = t.dims2();
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= n {
                return Err(Error::Index {
                    index: target,
                    len: n,
                });
            }
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let log_z = z.ln() + mx;
            total += log_z - row[target];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Ordered accumulation of rows into `buckets × d` output rows. Terms are
    /// applied in the given order, so callers control the floating-point
    /// summation order exactly. Only `Row` terms carry gradient.
    pub fn bucket_sum(
        &mut self,
        input: NodeId,
        buckets: usize,
        plan: &[BucketTerm],
    ) -> Result<NodeId> {
        let (m, d) = self.value(input).dims2();
        let mut out = vec![0.0; buckets * d];
        let mut rows = Vec::new();
        for term in plan {
            match term {
                BucketTerm::Row { row, bucket } => {
                    if *row >= m {
                        return Err(Error::Index { index: *row, len: m });
                    }
                    if *bucket >= buckets {
                        return Err(Error::Index {
                            index: *bucket,
                            len: buckets,
                        });
                    }
                    let src = self.value(input).row(*row);
                    for (o, x) in out[bucket * d..(bucket + 1) * d].iter_mut().zip(src) {
                        *o += x;
                    }
                    rows.push((*row, *bucket));
                }
                BucketTerm::Const { bucket, values } => {
                    if *bucket >= buckets {
                        return Err(Error::Index {
                            index: *bucket,
                            len: buckets,
                        });
                    }
                    if values.len() != d {
                        return Err(Error::dim("bucket_sum", &[d], &[values.len()]));
                    }
                    for (o, x) in out[bucket * d..(bucket + 1) * d].iter_mut().zip(values) {
                        *o += x;
                    }
                }
            }
        }
        let rg = self.rg(&[input]) && !rows.is_empty();
        self.push(
            Tensor::new(vec![buckets, d], out)?,
            Op::BucketSum { input, rows },
            rg,
        )
    }

    /// Backward from a single-element output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", self.shape(output), &[1]));
        }
        self.backward_with_seeds(&[(output, Tensor::full(self.shape(output), 1.0))])
    }

    /// Backward with explicit upstream gradients for one or more outputs.
    pub fn backward_with_seeds(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(Error::dim("backward seed", self.shape(*id), seed.shape()));
            }
            accumulate(&mut grads, *id, seed.clone());
            last = last.max(id.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = self.value(*b).transpose();
                    accumulate(grads, *a, g.matmul(&bt)?);
                }
                if self.wants(*b) {
                    let at = self.value(*a).transpose();
                    accumulate(grads, *b, at.matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    let (m, n) = g.dims2();
                    let mut acc = vec![0.0; n];
                    for row in 0..m {
                        for (o, x) in acc.iter_mut().zip(g.row(row)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *r, Tensor::new(self.shape(*r).to_vec(), acc)?);
                }
            }
            Op::MulRow(a, r) => {
                let (m, n) = g.dims2();
                let rv = self.value(*r).data();
                if self.wants(*a) {
                    let mut out = Vec::with_capacity(m * n);
                    for row in 0..m {
                        out.extend(g.row(row).iter().zip(rv).map(|(x, s)| x * s));
                    }
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), out)?);
                }
                if self.wants(*r) {
                    let av = self.value(*a);
                    let mut acc = vec![0.0; n];
                    for row in 0..m {
                        for ((o, x), y) in acc.iter_mut().zip(g.row(row)).zip(av.row(row)) {
                            *o += x * y;
                        }
                    }
                    accumulate(grads, *r, Tensor::new(self.shape(*r).to_vec(), acc)?);
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|x| x * f));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|x| x * k));
                }
                if self.wants(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    accumulate(grads, *s, Tensor::full(self.shape(*s), d));
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, &node.value, |x, y| x * y));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    accumulate(
                        grads,
                        *a,
                        zip(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                    );
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, self.value(*a), |x, y| x * gelu_grad(y)));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len() as f64;
                    accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let (m, n) = self.value(*a).dims2();
                    let mut out = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        out.extend(g.data().iter().map(|x| x / m as f64));
                    }
                    accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), out)?);
                }
            }
            Op::LayerNormRows {
                input,
                normed,
                inv_std,
            } => {
                if self.wants(*input) {
                    let (m, n) = g.dims2();
                    let mut out = Vec::with_capacity(m * n);
                    for row in 0..m {
                        let dy = g.row(row);
                        let y = &normed[row * n..(row + 1) * n];
                        let mean_dy = dy.iter().sum::<f64>() / n as f64;
                        let mean_dyy =
                            dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        out.extend(
                            dy.iter()
                                .zip(y)
                                .map(|(d, yy)| inv_std[row] * (d - mean_dy - yy * mean_dyy)),
                        );
                    }
                    accumulate(grads, *input, Tensor::new(g.shape().to_vec(), out)?);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let (m, n) = g.dims2();
                    let y = &node.value;
                    let mut out = Vec::with_capacity(m * n);
                    for row in 0..m {
                        let dy = g.row(row);
                        let yr = y.row(row);
                        let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        out.extend(dy.iter().zip(yr).map(|(d, yy)| yy * (d - dot)));
                    }
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), out)?);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).dims2().0;
                    if self.wants(*p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), data)?);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.dims2().0;
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).dims2().1;
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for row in 0..rows {
                            data.extend_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), data)?);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { input, start } => {
                if self.wants(*input) {
                    let (_, n) = g.dims2();
                    let mut full = Tensor::zeros(self.shape(*input));
                    full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(grads, *input, full);
                }
            }
            Op::SliceCols { input, start } => {
                if self.wants(*input) {
                    let (m, len) = g.dims2();
                    let n = self.value(*input).dims2().1;
                    let mut full = Tensor::zeros(self.shape(*input));
                    for row in 0..m {
                        full.data_mut()[row * n + start..row * n + start + len]
                            .copy_from_slice(g.row(row));
                    }
                    accumulate(grads, *input, full);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.transpose());
                }
            }
            Op::SelectRows { input, indices } => {
                if self.wants(*input) {
                    let (_, n) = g.dims2();
                    let mut full = Tensor::zeros(self.shape(*input));
                    for (k, &src) in indices.iter().enumerate() {
                        for (o, x) in full.data_mut()[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(g.row(k))
                        {
                            *o += x;
                        }
                    }
                    accumulate(grads, *input, full);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.reshaped(self.shape(*a).to_vec())?);
                }
            }
            Op::L2Normalize {
                input,
                norm,
                applied,
            } => {
                if self.wants(*input) {
                    if *applied {
                        let y = &node.value;
                        let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                        let data = g
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(d, yy)| (d - yy * dot) / norm)
                            .collect();
                        accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data)?);
                    } else {
                        accumulate(grads, *input, g.clone());
                    }
                }
            }
            Op::L2NormalizeRows {
                input,
                norms,
                applied,
            } => {
                if self.wants(*input) {
                    let (m, n) = g.dims2();
                    let y = &node.value;
                    let mut out = Vec::with_capacity(m * n);
                    for row in 0..m {
                        let dy = g.row(row);
                        if applied[row] {
                            let yr = y.row(row);
                            let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                            out.extend(
                                dy.iter().zip(yr).map(|(d, yy)| (d - yy * dot) / norms[row]),
                            );
                        } else {
                            out.extend_from_slice(dy);
                        }
                    }
                    accumulate(grads, *input, Tensor::new(g.shape().to_vec(), out)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let (m, n) = self.value(*logits).dims2();
                    let scale = g.item() / m as f64;
                    let mut out = probs.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        out[row * n + t] -= 1.0;
                    }
                    for o in &mut out {
                        *o *= scale;
                    }
                    accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), out)?);
                }
            }
            Op::BucketSum { input, rows } => {
                if self.wants(*input) {
                    let d = g.dims2().1;
                    let mut full = Tensor::zeros(self.shape(*input));
                    for &(row, bucket) in rows {
                        for (o, x) in full.data_mut()[row * d..(row + 1) * d]
                            .iter_mut()
                            .zip(g.row(bucket))
                        {
                            *o += x;
                        }
                    }
                    accumulate(grads, *input, full);
                }
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
