//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products. All
//! values are matrices (rank-1 inputs are viewed as a single row), which is all
//! the encoder, the matching head and the contrastive loss need.

use std::collections::HashMap;

use super::params::ParameterSet;
use super::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Vec<bool>>),
    NormalizeRows(Var),
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RowNorms(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    Assemble(Vec<Var>),
    Diag(Var),
    DotConst(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Build the forward computation with the operation methods,
/// then call [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input that is not a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once) the named parameter as a tracked leaf.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = params.expect(name).clone();
        let (r, c) = value.dims();
        self.nodes.push(Node {
            value: value.reshape_matrix(r, c),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dims(), y.dims(), "add shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let (r, c) = x.dims();
        self.push(Tensor::matrix(r, c, data), Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dims(), y.dims(), "mul shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let (r, c) = x.dims();
        self.push(Tensor::matrix(r, c, data), Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dims(), y.dims(), "div shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p / q).collect();
        let (r, c) = x.dims();
        self.push(Tensor::matrix(r, c, data), Op::Div(a, b), &[a, b])
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        let (r, c) = x.dims();
        assert_eq!(b.dims(), (1, c), "add_row shapes");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, w) in chunk.iter_mut().zip(b.data()) {
                *v += w;
            }
        }
        self.push(Tensor::matrix(r, c, data), Op::AddRow(a, row), &[a, row])
    }

    /// `a (r×c) ⊙ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        let (r, c) = x.dims();
        assert_eq!(b.dims(), (1, c), "mul_row shapes");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, w) in chunk.iter_mut().zip(b.data()) {
                *v *= w;
            }
        }
        self.push(Tensor::matrix(r, c, data), Op::MulRow(a, row), &[a, row])
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let data = x.data().iter().map(|v| v * k).collect();
        self.push(Tensor::matrix(r, c, data), Op::MulScalar(a, k), &[a])
    }

    /// `a` times the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s);
        assert_eq!(k.dims(), (1, 1), "scale_by expects a scalar node");
        let k = k.data()[0];
        let x = self.value(a);
        let (r, c) = x.dims();
        let data = x.data().iter().map(|v| v * k).collect();
        self.push(Tensor::matrix(r, c, data), Op::ScaleBy(a, s), &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = tensor::transpose(self.value(a));
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(super::ops::softmax_unchecked(x.row_slice(i)));
        }
        self.push(Tensor::matrix(r, c, data), Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-softmax. Entries where `mask` is true are excluded from the
    /// normalizer; their output is 0 and they receive no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "mask size");
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row_slice(i);
            let keep = |j: usize| mask.as_ref().map_or(true, |m| !m[i * c + j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            let lse = max + sum.ln();
            for j in (0..c).filter(|&j| keep(j)) {
                data[i * c + j] = row[j] - lse;
            }
        }
        self.push(
            Tensor::matrix(r, c, data),
            Op::LogSoftmaxRows(a, mask),
            &[a],
        )
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` (layer norm without affine).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        self.push(Tensor::matrix(r, c, data), Op::NormalizeRows(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        self.push(Tensor::matrix(r, c, data), Op::Gelu(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        self.push(Tensor::matrix(r, len, data), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), r, "concat_cols rows");
                data.extend_from_slice(t.row_slice(i));
            }
        }
        self.push(
            Tensor::matrix(r, total, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), c, "concat_rows cols");
            data.extend_from_slice(t.data());
            r += t.rows();
        }
        self.push(
            Tensor::matrix(r, c, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Arithmetic mean over rows, `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = super::ops::mean_rows(self.value(a));
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Euclidean norm of each row, `r×1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let r = x.rows();
        let data = (0..r).map(|i| tensor::norm(x.row_slice(i))).collect();
        self.push(Tensor::matrix(r, 1, data), Op::RowNorms(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let n = tensor::norm(row);
            data.extend(row.iter().map(|v| v / n));
        }
        self.push(Tensor::matrix(r, c, data), Op::L2NormalizeRows(a), &[a])
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        )
    }

    /// Builds an `r×c` matrix from `r*c` scalar nodes in row-major order.
    pub fn assemble(&mut self, scalars: &[Var], r: usize, c: usize) -> Var {
        assert_eq!(scalars.len(), r * c, "assemble size");
        let data = scalars
            .iter()
            .map(|s| {
                let t = self.value(*s);
                assert_eq!(t.len(), 1, "assemble expects scalars");
                t.data()[0]
            })
            .collect();
        self.push(
            Tensor::matrix(r, c, data),
            Op::Assemble(scalars.to_vec()),
            scalars,
        )
    }

    /// Diagonal of a square matrix as an `r×1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        assert_eq!(r, c, "diag of non-square matrix");
        let data = (0..r).map(|i| x.get(i, i)).collect();
        self.push(Tensor::matrix(r, 1, data), Op::Diag(a), &[a])
    }

    /// `Σ a ⊙ k` for a constant tensor `k` of the same size.
    pub fn dot_const(&mut self, a: Var, k: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), k.len(), "dot_const size");
        let s = tensor::dot(x.data(), k.data());
        self.push(Tensor::scalar(s), Op::DotConst(a, k), &[a])
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    /// Gradients of every registered parameter, zero-filled for parameters that
    /// were not used, keyed and ordered like `params`.
    pub fn param_grads(&self, grads: &Gradients, params: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in params.iter() {
            let g = match self.params.get(name).and_then(|v| grads.get(*v)) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.data().to_vec())
                    .expect("gradient shape matches parameter"),
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name, g).expect("unique names");
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let (r, c) = y.dims();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let da = zip_map(dy, z, |g, w| g * w);
                let db = zip_map(dy, x, |g, w| g * w);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let da = zip_map(dy, z, |g, w| g / w);
                let data = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(z.data())
                    .map(|((g, p), q)| -g * p / (q * q))
                    .collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, Tensor::matrix(r, c, data));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                let mut dr = vec![0.0; c];
                for i in 0..r {
                    for (s, g) in dr.iter_mut().zip(dy.row_slice(i)) {
                        *s += g;
                    }
                }
                self.accumulate(grads, *row, Tensor::matrix(1, c, dr));
            }
            Op::MulRow(a, row) => {
                let (x, w) = (self.value(*a), self.value(*row));
                let mut da = dy.clone();
                let mut dr = vec![0.0; c];
                for i in 0..r {
                    let g = dy.row_slice(i);
                    let xi = x.row_slice(i);
                    for j in 0..c {
                        da.data_mut()[i * c + j] = g[j] * w.data()[j];
                        dr[j] += g[j] * xi[j];
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *row, Tensor::matrix(1, c, dr));
            }
            Op::MulScalar(a, k) => {
                let da = Tensor::matrix(r, c, dy.data().iter().map(|g| g * k).collect());
                self.accumulate(grads, *a, da);
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).data()[0];
                let x = self.value(*a);
                let da = Tensor::matrix(r, c, dy.data().iter().map(|g| g * k).collect());
                let ds = tensor::dot(dy.data(), x.data());
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, tensor::matmul_bt(dy, w));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, tensor::matmul_at(x, dy));
                }
            }
            Op::MatMulBt(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, tensor::matmul(dy, w));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, tensor::matmul_at(dy, x));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, tensor::transpose(dy));
            }
            Op::SoftmaxRows(a) => {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = y.row_slice(i);
                    let gi = dy.row_slice(i);
                    let inner = tensor::dot(yi, gi);
                    for j in 0..c {
                        dx[i * c + j] = yi[j] * (gi[j] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, dx));
            }
            Op::LogSoftmaxRows(a, mask) => {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let keep = |j: usize| mask.as_ref().map_or(true, |m| !m[i * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| dy.get(i, j)).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        dx[i * c + j] = dy.get(i, j) - y.get(i, j).exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, dx));
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let xi = x.row_slice(i);
                    let mean = xi.iter().sum::<f64>() / c as f64;
                    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let yi = y.row_slice(i);
                    let gi = dy.row_slice(i);
                    let gmean = gi.iter().sum::<f64>() / c as f64;
                    let gymean = tensor::dot(gi, yi) / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (gi[j] - gmean - yi[j] * gymean);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, dx));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| {
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        g * d
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::matrix(r, c, data));
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let mut dx = vec![0.0; r * cols];
                for i in 0..r {
                    dx[i * cols + start..i * cols + start + c].copy_from_slice(dy.row_slice(i));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, cols, dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&dy.row_slice(i)[offset..offset + pc]);
                    }
                    self.accumulate(grads, *p, Tensor::matrix(r, pc, dp));
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    let dp = dy.data()[offset * c..(offset + pr) * c].to_vec();
                    self.accumulate(grads, *p, Tensor::matrix(pr, c, dp));
                    offset += pr;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let mut dx = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    dx.extend(dy.data().iter().map(|g| g / rows as f64));
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, c, dx));
            }
            Op::SumAll(a) => {
                let (ar, ac) = self.value(*a).dims();
                self.accumulate(grads, *a, Tensor::filled(&[ar, ac], dy.data()[0]));
            }
            Op::MeanAll(a) => {
                let (ar, ac) = self.value(*a).dims();
                let g = dy.data()[0] / (ar * ac) as f64;
                self.accumulate(grads, *a, Tensor::filled(&[ar, ac], g));
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let (ar, ac) = x.dims();
                let mut dx = Vec::with_capacity(ar * ac);
                for i in 0..ar {
                    let n = y.data()[i];
                    let g = dy.data()[i];
                    dx.extend(x.row_slice(i).iter().map(|v| g * v / n));
                }
                self.accumulate(grads, *a, Tensor::matrix(ar, ac, dx));
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let n = tensor::norm(x.row_slice(i));
                    let yi = y.row_slice(i);
                    let gi = dy.row_slice(i);
                    let inner = tensor::dot(yi, gi);
                    dx.extend((0..c).map(|j| (gi[j] - yi[j] * inner) / n));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, dx));
            }
            Op::GatherRows(a, idx) => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                // Scatter in place: embedding tables are large and rows sparse.
                let (ar, ac) = self.value(*a).dims();
                let dx = grads[a.0].get_or_insert_with(|| Tensor::zeros(&[ar, ac]));
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * ac..(i + 1) * ac];
                    for (d, g) in dst.iter_mut().zip(dy.row_slice(k)) {
                        *d += g;
                    }
                }
            }
            Op::Assemble(scalars) => {
                for (k, s) in scalars.iter().enumerate() {
                    self.accumulate(grads, *s, Tensor::scalar(dy.data()[k]));
                }
            }
            Op::Diag(a) => {
                let n = self.value(*a).rows();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = dy.data()[i];
                }
                self.accumulate(grads, *a, Tensor::matrix(n, n, dx));
            }
            Op::DotConst(a, k) => {
                let (ar, ac) = self.value(*a).dims();
                let g = dy.data()[0];
                let dx = k.data().iter().map(|v| g * v).collect();
                self.accumulate(grads, *a, Tensor::matrix(ar, ac, dx));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims();
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::matrix(r, c, data)
}
