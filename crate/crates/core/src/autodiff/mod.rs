//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. [`Graph::backward`]
//! walks the tape in reverse, so gradient contributions are accumulated in a
//! fixed order and repeated runs are bit-identical. Broadcasting is limited to
//! bias addition; everything else requires matching shapes or an explicit
//! reshape.

mod gradcheck;
mod kernels;

pub use gradcheck::{finite_diff_check, FdConfig, FdReport};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};
use kernels::ConvGeometry;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LogSoftmax {
        input: Var,
        temperature: F,
    },
    WeightedNll {
        logp: Var,
        targets: Tensor<F>,
        row_weights: Vec<F>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar root with respect to named leaves, in leaf
/// registration order.
#[derive(Clone, Debug)]
pub struct Gradients<F: Real = f64> {
    by_name: IndexMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Graph<F: Real = f64> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that never requires gradients: parameters become constants
    /// and [`Graph::backward`] refuses to run.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// A named leaf that receives a gradient (unless the graph is in
    /// inference mode).
    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Var {
        let rg = self.recording;
        self.push(value, Op::Leaf, rg, Some(name.to_string()))
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: Option<String>) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a `[c]` bias along axis 1 of a `[b, c, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + b[(i / inner) % c];
        }
        let value = Tensor::new(sx, out)?;
        self.push_op(value, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_op(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_op(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push_op(value, Op::Scale(x, s), &[x], "scale")
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push_op(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push_op(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(F::tanh);
        self.push_op(value, Op::Tanh(x), &[x], "tanh")
    }

    /// Stride-1 convolution with zero "same" padding. `input` is
    /// `[b, ci, h, w]`, `weight` is `[co, ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(vec![sx[0], sw[0], sx[2], sx[3]], out)?;
        self.push_op(value, Op::Conv2d { input, weight, geom }, &[input, weight], "conv2d")
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("avgpool2", format!("needs [b,c,even,even], got {s:?}")));
        }
        let out = kernels::avgpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        self.push_op(value, Op::AvgPool2(x), &[x], "avgpool2")
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avgpool", format!("{s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = F::one() / F::of(plane as f64);
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push_op(value, Op::GlobalAvgPool(x), &[x], "global_avgpool")
    }

    /// Concatenates along axis 1; all other extents must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&da[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&db[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let value = Tensor::new(shape, out)?;
        self.push_op(value, Op::ConcatChannels(a, b), &[a, b], "concat_channels")
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?}[{start}..{}]", start + len)));
        }
        let data = self.value(x).data();
        let out: Vec<F> = data
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![s[0], len], out)?;
        self.push_op(value, Op::SliceCols { input: x, start }, &[x], "slice_cols")
    }

    /// Stacks 2-D tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", format!("part {s:?}, cols {cols}")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push_op(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push_op(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {s:?}, {} ids", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                s[0]
            )));
        }
        let t = self.value(table);
        let out: Vec<F> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![ids.len(), s[1]], out)?;
        self.push_op(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    /// Row-wise `log softmax(x / temperature)` of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var, temperature: F) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("log_softmax", format!("{:?}", self.shape(x))));
        }
        let value = tensor::log_softmax(self.value(x), temperature)?;
        self.push_op(value, Op::LogSoftmax { input: x, temperature }, &[x], "log_softmax")
    }

    /// `-(1/b) Σ_s w_s Σ_i t[s,i] · logp[s,i]`, a scalar.
    pub fn weighted_nll(&mut self, logp: Var, targets: &Tensor<F>, row_weights: &[F]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() || row_weights.len() != s[0] {
            return Err(Error::shape(
                "weighted_nll",
                format!(
                    "logp {s:?}, targets {:?}, {} weights",
                    targets.shape(),
                    row_weights.len()
                ),
            ));
        }
        let n = s[1];
        let lp = self.value(logp).data();
        let mut total = F::zero();
        for (r, &w) in row_weights.iter().enumerate() {
            let row: F = (0..n).map(|i| targets.data()[r * n + i] * lp[r * n + i]).sum();
            total = total + w * row;
        }
        let value = Tensor::scalar(-total / F::of(s[0] as f64));
        self.push_op(
            value,
            Op::WeightedNll {
                logp,
                targets: targets.clone(),
                row_weights: row_weights.to_vec(),
            },
            &[logp],
            "weighted_nll",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x], "sum")
    }

    /// `x · w + b` for `x: [b, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// One LSTM step with gate order input, forget, cell, output.
    /// `wx: [d, 4h]`, `wh: [h, 4h]`, `bias: [4h]`. Returns `(h', c')`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, wx: Var, wh: Var, bias: Var) -> Result<(Var, Var)> {
        let hidden = self.shape(h)[1];
        let gx = self.matmul(x, wx)?;
        let gh = self.matmul(h, wh)?;
        let pre = self.add(gx, gh)?;
        let pre = self.add_bias(pre, bias)?;
        let i = self.slice_cols(pre, 0, hidden)?;
        let f = self.slice_cols(pre, hidden, hidden)?;
        let g = self.slice_cols(pre, 2 * hidden, hidden)?;
        let o = self.slice_cols(pre, 3 * hidden, hidden)?;
        let i = self.sigmoid(i)?;
        let f = self.sigmoid(f)?;
        let g = self.tanh(g)?;
        let o = self.sigmoid(o)?;
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next)?;
        let h_next = self.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Sign pattern of every rectifier input; two evaluations whose patterns
    /// differ straddle a kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > F::zero()))
            .collect()
    }

    /// Reverse-mode sweep from a scalar `root`. Contributions are accumulated
    /// in reverse recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if !self.recording {
            return Err(Error::Argument("backward on an inference graph".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let mut by_name = IndexMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.name) {
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_name.insert(name.clone(), g.ensure_finite("backward")?);
            }
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let da = tensor::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = tensor::matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gd.to_vec());
                let sx = self.shape(*x);
                let inner: usize = sx[2..].iter().product();
                let c = sx[1];
                let mut db = vec![F::zero(); c];
                for (i, &v) in gd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    db[ch] = db[ch] + v;
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|&g| g * *s).collect());
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(vx)
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &y)| g * (F::one() - y * y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(self.value(*input).data(), self.value(*weight).data(), gd, geom);
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, kernels::avgpool2_backward(gd, s[0] * s[1], s[2], s[3]));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = F::one() / F::of(plane as f64);
                let d = gd.iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for chunk in gd.chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceCols { input, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[1];
                let mut d = vec![F::zero(); s[0] * s[1]];
                for (r, row) in gd.chunks(len).enumerate() {
                    d[r * s[1] + start..r * s[1] + start + len].copy_from_slice(row);
                }
                self.accumulate(grads, *input, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let dim = s[1];
                let mut d = vec![F::zero(); s[0] * dim];
                for (row, &id) in gd.chunks(dim).zip(ids) {
                    for (acc, &v) in d[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::LogSoftmax { input, temperature } => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in gd.chunks(n).zip(y.chunks(n)) {
                    let gsum: F = grow.iter().copied().sum();
                    for (&gi, &yi) in grow.iter().zip(yrow) {
                        d.push((gi - yi.exp() * gsum) / *temperature);
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::WeightedNll {
                logp,
                targets,
                row_weights,
            } => {
                let n = targets.shape()[1];
                let b = F::of(targets.shape()[0] as f64);
                let g0 = gd[0];
                let d = targets
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| -g0 * row_weights[i / n] * t / b)
                    .collect();
                self.accumulate(grads, *logp, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}
