//! Reverse-mode autodiff on a linear tape.
//!
//! Nodes are appended in evaluation order (the tape is its own topological
//! order) and every reduction runs sequentially over the leading axis, so a
//! fixed seed gives bit-identical results. All values are checked finite as
//! they are produced; the offending op is named in the error.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backward rule for an op the tape does not know about (e.g. a sequence
/// loss computed by dynamic programming). Returns one gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor]) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRow(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    SoftmaxRows {
        x: NodeId,
        limits: Option<Vec<usize>>,
    },
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    StackRows(Vec<NodeId>),
    StackScalars(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    Pick {
        x: NodeId,
        index: usize,
    },
    Row {
        x: NodeId,
        index: usize,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    ReplaceRows {
        x: NodeId,
        row: NodeId,
        mask: Vec<bool>,
    },
    CosineSim(NodeId, NodeId),
    Ln(NodeId),
    ArgmaxOneHotRows(NodeId),
    StSelect {
        soft: NodeId,
        codebook: NodeId,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::StackRows(..) => "stack_rows",
            Op::StackScalars(..) => "stack_scalars",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::MeanRows(..) => "mean_rows",
            Op::Pick { .. } => "pick",
            Op::Row { .. } => "row",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::CosineSim(..) => "cosine_sim",
            Op::Ln(..) => "ln",
            Op::ArgmaxOneHotRows(..) => "argmax_one_hot_rows",
            Op::StSelect { .. } => "st_select",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single forward computation; build ops, then call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(NnError::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn shape_err(op: &'static str, detail: String) -> NnError {
        NnError::ShapeMismatch { op, detail }
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, true, Op::Leaf)
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, false, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(value))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        let rg = self.requires(x);
        self.push(value, rg, Op::AddScalar(x))
    }

    /// Matrix product; rank-1 operands are treated as single rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.nodes[a].value.dims2()?;
        let (k2, n) = self.nodes[b].value.dims2()?;
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        let ta = &self.nodes[a].value;
        let tb = &self.nodes[b].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        let t = &self.nodes[x].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Transpose(x))
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        let r = &self.nodes[row].value;
        if r.numel() != n {
            return Err(Self::shape_err(
                "add_row",
                format!("{:?} + row {:?}", self.nodes[x].value.shape(), r.shape()),
            ));
        }
        let t = &self.nodes[x].value;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(t.data()[i * n + j] + r.data()[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(row);
        self.push(value, rg, Op::AddRow(x, row))
    }

    /// `x @ w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Valid (no padding) 1-D convolution over time.
    /// `x: [T, c_in]`, `kernel: [k, c_in, c_out]` -> `[T', c_out]` with
    /// `T' = (T - k)/stride + 1`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let (t_in, c_in) = self.nodes[x].value.dims2()?;
        let (k, kc_in, c_out) = self.nodes[kernel].value.dims3()?;
        if kc_in != c_in || stride == 0 || k == 0 {
            return Err(Self::shape_err(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?}, stride {}",
                    self.nodes[x].value.shape(),
                    self.nodes[kernel].value.shape(),
                    stride
                ),
            ));
        }
        if t_in < k {
            return Err(Self::shape_err(
                "conv1d",
                format!("input length {} shorter than kernel {}", t_in, k),
            ));
        }
        let t_out = (t_in - k) / stride + 1;
        let tx = &self.nodes[x].value;
        let tk = &self.nodes[kernel].value;
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let base = t * stride;
            for dt in 0..k {
                let xrow = &tx.data()[(base + dt) * c_in..(base + dt + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &tk.data()[(dt * c_in + ci) * c_out..(dt * c_in + ci + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let value = Tensor::matrix(t_out, c_out, out)?;
        let rg = self.requires(x) || self.requires(kernel);
        self.push(
            value,
            rg,
            Op::Conv1d {
                x,
                kernel,
                stride,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.tanh()).collect(),
        )?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Tanh(x))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.ln()).collect())?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Ln(x))
    }

    /// Row-wise softmax with max-shift. `limits[i]`, when given, restricts
    /// row `i` to its first `limits[i]` columns; excluded entries are zero
    /// and receive no gradient (used for causal attention).
    pub fn softmax_rows(&mut self, x: NodeId, limits: Option<Vec<usize>>) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        if let Some(l) = &limits {
            if l.len() != m || l.iter().any(|&v| v == 0 || v > n) {
                return Err(Self::shape_err(
                    "softmax_rows",
                    format!("limits {:?} invalid for {} rows x {} cols", l, m, n),
                ));
            }
        }
        let t = &self.nodes[x].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lim = limits.as_ref().map_or(n, |l| l[i]);
            let row = &t.data()[i * n..i * n + lim];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..lim {
                out[i * n + j] /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::SoftmaxRows { x, limits })
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        let t = &self.nodes[x].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::LogSoftmaxRows(x))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        if self.nodes[gain].value.numel() != n || self.nodes[bias].value.numel() != n {
            return Err(Self::shape_err(
                "layer_norm_rows",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.nodes[x].value.shape(),
                    self.nodes[gain].value.shape(),
                    self.nodes[bias].value.shape()
                ),
            ));
        }
        let t = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g.data()[j] * (row[j] - mean) * inv + b.data()[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(value, rg, Op::LayerNormRows { x, gain, bias, eps })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let (m, _) = self.nodes[parts[0]].value.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.nodes[p].value.dims2()?;
            if pm != m {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", m, pm),
                ));
            }
            widths.push(pn);
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let n = widths[pi];
                let src = self.nodes[p].value.row(i);
                out[i * total + off..i * total + off + n].copy_from_slice(src);
                off += n;
            }
        }
        let shape = if self.nodes[parts[0]].value.rank() == 1 && m == 1 {
            vec![total]
        } else {
            vec![m, total]
        };
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(value, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        if start + len > n || len == 0 {
            return Err(Self::shape_err(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, n),
            ));
        }
        let t = &self.nodes[x].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let shape = if t.rank() == 1 { vec![len] } else { vec![m, len] };
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::SliceCols { x, start, len })
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Self::shape_err("stack_rows", "no inputs".into()));
        }
        let n = self.nodes[rows[0]].value.numel();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = &self.nodes[r].value;
            if t.numel() != n || t.rank() > 2 {
                return Err(Self::shape_err(
                    "stack_rows",
                    format!("expected {} elements, got shape {:?}", n, t.shape()),
                ));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), n, out)?;
        let rg = rows.iter().any(|&r| self.requires(r));
        self.push(value, rg, Op::StackRows(rows.to_vec()))
    }

    /// Stack scalars into a vector.
    pub fn stack_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Self::shape_err("stack_scalars", "no inputs".into()));
        }
        let mut out = Vec::with_capacity(items.len());
        for &s in items {
            let t = &self.nodes[s].value;
            if !t.is_scalar() {
                return Err(Self::shape_err(
                    "stack_scalars",
                    format!("non-scalar input of shape {:?}", t.shape()),
                ));
            }
            out.push(t.item());
        }
        let value = Tensor::vector(out);
        let rg = items.iter().any(|&s| self.requires(s));
        self.push(value, rg, Op::StackScalars(items.to_vec()))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), rg, Op::MeanAll(x))
    }

    /// Column means of a matrix: `[m,n] -> [n]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        let t = &self.nodes[x].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.requires(x);
        self.push(Tensor::vector(out), rg, Op::MeanRows(x))
    }

    /// Select a single element (by flat index) as a scalar.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if index >= t.numel() {
            return Err(Self::shape_err(
                "pick",
                format!("index {} out of {} elements", index, t.numel()),
            ));
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.requires(x);
        self.push(value, rg, Op::Pick { x, index })
    }

    /// Select one row of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let (m, _n) = self.nodes[x].value.dims2()?;
        if index >= m {
            return Err(Self::shape_err(
                "row",
                format!("row {} out of {}", index, m),
            ));
        }
        let value = Tensor::vector(self.nodes[x].value.row(index).to_vec());
        let rg = self.requires(x);
        self.push(value, rg, Op::Row { x, index })
    }

    /// Gather rows of a table: `table: [v,d]`, `indices: [l]` -> `[l,d]`.
    /// Duplicated indices accumulate gradient.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = self.nodes[table].value.dims2()?;
        if indices.iter().any(|&i| i >= v) {
            return Err(Self::shape_err(
                "gather_rows",
                format!("index out of range for {} rows", v),
            ));
        }
        let t = &self.nodes[table].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(indices.len(), d, out)?;
        let rg = self.requires(table);
        self.push(
            value,
            rg,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Replace masked rows of `x` with a (learned) row vector.
    pub fn replace_rows(&mut self, x: NodeId, row: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        if mask.len() != m || self.nodes[row].value.numel() != n {
            return Err(Self::shape_err(
                "replace_rows",
                format!(
                    "x {:?}, row {:?}, mask len {}",
                    self.nodes[x].value.shape(),
                    self.nodes[row].value.shape(),
                    mask.len()
                ),
            ));
        }
        let t = &self.nodes[x].value;
        let r = &self.nodes[row].value;
        let mut out = t.data().to_vec();
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                out[i * n..(i + 1) * n].copy_from_slice(r.data());
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(row);
        self.push(
            value,
            rg,
            Op::ReplaceRows {
                x,
                row,
                mask: mask.to_vec(),
            },
        )
    }

    /// Cosine similarity of two vectors; errors on zero norm.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let tb = &self.nodes[b].value;
        if ta.numel() != tb.numel() {
            return Err(Self::shape_err(
                "cosine_sim",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let na = norm(ta.data());
        let nb = norm(tb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(NnError::Invalid(
                "cosine_sim: zero-norm vector, cosine undefined".into(),
            ));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let value = Tensor::scalar(dot / (na * nb));
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::CosineSim(a, b))
    }

    /// Row-wise hard argmax as one-hot rows. Not differentiable: backward
    /// through this op is an error, never a silent zero.
    pub fn argmax_one_hot_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2()?;
        let t = &self.nodes[x].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[i * n + best] = 1.0;
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::ArgmaxOneHotRows(x))
    }

    /// Straight-through codebook selection: forwards the codeword at
    /// `argmax(soft)`, while gradients flow as if the output were
    /// `soft @ codebook` (soft path) and only the selected codeword row
    /// receives the upstream gradient (hard path).
    pub fn st_select(&mut self, soft: NodeId, codebook: NodeId) -> Result<NodeId> {
        let v = self.nodes[soft].value.numel();
        let (cv, d) = self.nodes[codebook].value.dims2()?;
        if cv != v {
            return Err(Self::shape_err(
                "st_select",
                format!(
                    "soft {:?} vs codebook {:?}",
                    self.nodes[soft].value.shape(),
                    self.nodes[codebook].value.shape()
                ),
            ));
        }
        let sdata = self.nodes[soft].value.data();
        let mut best = 0;
        for j in 1..v {
            if sdata[j] > sdata[best] {
                best = j;
            }
        }
        let value = Tensor::vector(self.nodes[codebook].value.row(best).to_vec());
        let _ = d;
        let rg = self.requires(soft) || self.requires(codebook);
        self.push(value, rg, Op::StSelect { soft, codebook })
    }

    /// Register a custom-differentiated node.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<NodeId> {
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// slots are `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(NnError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let upstream = grads[id].take().unwrap();
            self.backprop_node(id, &upstream, &mut grads)?;
            grads[id] = Some(upstream);
        }
        Ok(Gradients { slots: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => grads[id] = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        id: NodeId,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                let neg = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().map(|v| -v).collect(),
                )?;
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().zip(tb.data()).map(|(u, y)| u * y).collect(),
                )?;
                let db = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().zip(ta.data()).map(|(u, x)| u * x).collect(),
                )?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let dx = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().map(|u| u * c).collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, up.clone());
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2()?;
                let (_, n) = self.nodes[*b].value.dims2()?;
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                // dA = up @ B^T
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up.data()[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += u * tb.data()[p * n + j];
                            }
                        }
                    }
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), da)?,
                    );
                }
                // dB = A^T @ up
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * up.data()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::new(tb.shape().to_vec(), db)?,
                    );
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.nodes[*x].value.dims2()?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = up.data()[j * m + i];
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                );
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, up.clone());
                if self.nodes[*row].requires_grad {
                    let (m, n) = self.nodes[*x].value.dims2()?;
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += up.data()[i * n + j];
                        }
                    }
                    self.accumulate(
                        grads,
                        *row,
                        Tensor::new(self.nodes[*row].value.shape().to_vec(), dr)?,
                    );
                }
            }
            Op::Conv1d { x, kernel, stride } => {
                let (t_in, c_in) = self.nodes[*x].value.dims2()?;
                let (k, _, c_out) = self.nodes[*kernel].value.dims3()?;
                let t_out = (t_in - k) / stride + 1;
                let tx = &self.nodes[*x].value;
                let tk = &self.nodes[*kernel].value;
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; t_in * c_in];
                    for t in 0..t_out {
                        let base = t * stride;
                        for dt in 0..k {
                            for ci in 0..c_in {
                                let krow = &tk.data()
                                    [(dt * c_in + ci) * c_out..(dt * c_in + ci + 1) * c_out];
                                let urow = &up.data()[t * c_out..(t + 1) * c_out];
                                let mut s = 0.0;
                                for (kv, uv) in krow.iter().zip(urow) {
                                    s += kv * uv;
                                }
                                dx[(base + dt) * c_in + ci] += s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if self.nodes[*kernel].requires_grad {
                    let mut dk = vec![0.0; k * c_in * c_out];
                    for t in 0..t_out {
                        let base = t * stride;
                        let urow = &up.data()[t * c_out..(t + 1) * c_out];
                        for dt in 0..k {
                            for ci in 0..c_in {
                                let xv = tx.data()[(base + dt) * c_in + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dk
                                    [(dt * c_in + ci) * c_out..(dt * c_in + ci + 1) * c_out];
                                for (d, uv) in drow.iter_mut().zip(urow) {
                                    *d += xv * uv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *kernel, Tensor::new(tk.shape().to_vec(), dk)?);
                }
            }
            Op::Relu(x) => {
                let t = &self.nodes[*x].value;
                let dx = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(t.data())
                        .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let t = &self.nodes[*x].value;
                let dx = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(t.data())
                        .map(|(u, &v)| u * gelu_grad(v))
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(y.data())
                        .map(|(u, &t)| u * (1.0 - t * t))
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::Ln(x) => {
                let t = &self.nodes[*x].value;
                let dx = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(t.data())
                        .map(|(u, &v)| u / v)
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x, limits } => {
                let (m, n) = node.value.dims2()?;
                let y = &node.value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let lim = limits.as_ref().map_or(n, |l| l[i]);
                    let mut dot = 0.0;
                    for j in 0..lim {
                        dot += up.data()[i * n + j] * y.data()[i * n + j];
                    }
                    for j in 0..lim {
                        dx[i * n + j] = y.data()[i * n + j] * (up.data()[i * n + j] - dot);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                );
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = node.value.dims2()?;
                let y = &node.value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let mut tot = 0.0;
                    for j in 0..n {
                        tot += up.data()[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = up.data()[i * n + j] - y.data()[i * n + j].exp() * tot;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                );
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (m, n) = self.nodes[*x].value.dims2()?;
                let t = &self.nodes[*x].value;
                let g = &self.nodes[*gain].value;
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &t.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let urow = &up.data()[i * n..(i + 1) * n];
                    let mut mean_gd = 0.0;
                    let mut mean_gdx = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gd = g.data()[j] * urow[j];
                        mean_gd += gd;
                        mean_gdx += gd * xhat;
                        dgain[j] += urow[j] * xhat;
                        dbias[j] += urow[j];
                    }
                    mean_gd /= n as f64;
                    mean_gdx /= n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gd = g.data()[j] * urow[j];
                        dx[i * n + j] = (gd - mean_gd - xhat * mean_gdx) * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
                self.accumulate(
                    grads,
                    *gain,
                    Tensor::new(self.nodes[*gain].value.shape().to_vec(), dgain)?,
                );
                self.accumulate(
                    grads,
                    *bias,
                    Tensor::new(self.nodes[*bias].value.shape().to_vec(), dbias)?,
                );
            }
            Op::ConcatCols(parts) => {
                let (m, _total) = node.value.dims2()?;
                let total = node.value.shape().last().copied().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, pn) = self.nodes[p].value.dims2()?;
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            dp.extend_from_slice(
                                &up.data()[i * total + off..i * total + off + pn],
                            );
                        }
                        self.accumulate(
                            grads,
                            p,
                            Tensor::new(self.nodes[p].value.shape().to_vec(), dp)?,
                        );
                    }
                    off += pn;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.nodes[*x].value.dims2()?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        dx[i * n + start + j] = up.data()[i * len + j];
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                );
            }
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    if self.nodes[r].requires_grad {
                        let dr = up.data()[i * n..(i + 1) * n].to_vec();
                        self.accumulate(
                            grads,
                            r,
                            Tensor::new(self.nodes[r].value.shape().to_vec(), dr)?,
                        );
                    }
                }
            }
            Op::StackScalars(items) => {
                for (i, &s) in items.iter().enumerate() {
                    self.accumulate(grads, s, Tensor::scalar(up.data()[i]));
                }
            }
            Op::SumAll(x) => {
                let u = up.item();
                let t = &self.nodes[*x].value;
                self.accumulate(grads, *x, Tensor::filled(t.shape().to_vec(), u));
            }
            Op::MeanAll(x) => {
                let t = &self.nodes[*x].value;
                let u = up.item() / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::filled(t.shape().to_vec(), u));
            }
            Op::MeanRows(x) => {
                let (m, n) = self.nodes[*x].value.dims2()?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = up.data()[j] / m as f64;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                );
            }
            Op::Pick { x, index } => {
                let t = &self.nodes[*x].value;
                let mut dx = vec![0.0; t.numel()];
                dx[*index] = up.item();
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::Row { x, index } => {
                let (_, n) = self.nodes[*x].value.dims2()?;
                let t = &self.nodes[*x].value;
                let mut dx = vec![0.0; t.numel()];
                dx[index * n..(index + 1) * n].copy_from_slice(up.data());
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::GatherRows { table, indices } => {
                let (v, d) = self.nodes[*table].value.dims2()?;
                let mut dt = vec![0.0; v * d];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += up.data()[r * d + j];
                    }
                }
                self.accumulate(
                    grads,
                    *table,
                    Tensor::new(self.nodes[*table].value.shape().to_vec(), dt)?,
                );
            }
            Op::ReplaceRows { x, row, mask } => {
                let (m, n) = self.nodes[*x].value.dims2()?;
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        if !mask[i] {
                            dx[i * n..(i + 1) * n].copy_from_slice(&up.data()[i * n..(i + 1) * n]);
                        }
                    }
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::new(self.nodes[*x].value.shape().to_vec(), dx)?,
                    );
                }
                if self.nodes[*row].requires_grad {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        if mask[i] {
                            for j in 0..n {
                                dr[j] += up.data()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(
                        grads,
                        *row,
                        Tensor::new(self.nodes[*row].value.shape().to_vec(), dr)?,
                    );
                }
            }
            Op::CosineSim(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let na = norm(ta.data());
                let nb = norm(tb.data());
                let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                let s = dot / (na * nb);
                let u = up.item();
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| u * (y / (na * nb) - s * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| u * (x / (na * nb) - s * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::ArgmaxOneHotRows(x) => {
                if self.nodes[*x].requires_grad {
                    return Err(NnError::NonDifferentiable {
                        op: "argmax_one_hot_rows",
                    });
                }
            }
            Op::StSelect { soft, codebook } => {
                let sdata = self.nodes[*soft].value.data();
                let mut best = 0;
                for j in 1..sdata.len() {
                    if sdata[j] > sdata[best] {
                        best = j;
                    }
                }
                let cb = &self.nodes[*codebook].value;
                let (v, d) = cb.dims2()?;
                if self.nodes[*soft].requires_grad {
                    let mut ds = vec![0.0; v];
                    for (j, slot) in ds.iter_mut().enumerate() {
                        let row = cb.row(j);
                        let mut s = 0.0;
                        for (u, c) in up.data().iter().zip(row) {
                            s += u * c;
                        }
                        *slot = s;
                    }
                    self.accumulate(
                        grads,
                        *soft,
                        Tensor::new(self.nodes[*soft].value.shape().to_vec(), ds)?,
                    );
                }
                if self.nodes[*codebook].requires_grad {
                    let mut dc = vec![0.0; v * d];
                    dc[best * d..(best + 1) * d].copy_from_slice(up.data());
                    self.accumulate(grads, *codebook, Tensor::new(cb.shape().to_vec(), dc)?);
                }
            }
            Op::Custom { inputs, op } => {
                let input_tensors: Vec<&Tensor> =
                    inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = op.backward(up, &input_tensors)?;
                if input_grads.len() != inputs.len() {
                    return Err(NnError::Invalid(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (&i, g) in inputs.iter().zip(input_grads) {
                    self.accumulate(grads, i, g);
                }
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; zero tensors are returned as
    /// `None` when the loss does not depend on the node at all.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
