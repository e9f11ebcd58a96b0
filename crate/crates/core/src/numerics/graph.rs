//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Parameters from a [`ParamStore`] are bound lazily, once per graph, so a
//! fresh graph per forward pass is the normal usage:
//!
//! ```
//! use ewm_lab::numerics::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.input(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, -2.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Label value that [`Graph::cross_entropy`] skips.
pub const IGNORE_INDEX: i64 = -100;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    Causal,
    /// Key padding mask, `true` = attend.
    Keys(Vec<bool>),
    CausalKeys(Vec<bool>),
}

impl AttnMask {
    fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Keys(k) => k[j],
            AttnMask::CausalKeys(k) => j <= i && k[j],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    AdaptivePool(Var, usize),
    Mse(Var, Var),
    Cosine {
        pred: Var,
        target: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of tensor operations that can be differentiated.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
    track_all: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
            track_all: false,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Evaluation graph: nothing requires a gradient.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    /// Track gradients for every bound parameter, frozen or not.
    pub fn track_all_params(mut self) -> Self {
        self.track_all = true;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph was built without a parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Head-resolved attention weights `[heads x q x k]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let m = nodes[v.0].value.rows();
                let n = probs.len() / (heads * m);
                Some(Tensor::new(vec![*heads, m, n], probs.clone()).expect("consistent probs"))
            }
            _ => None,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        value.ensure_finite("input")?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, Op::Leaf)
    }

    /// Tracked input leaf. Panics on non-finite data; use [`Graph::try_input`] to recover.
    pub fn input(&self, value: Tensor) -> Var {
        self.try_input(value).expect("finite input")
    }

    pub fn try_input(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, Op::Leaf)
    }

    /// Bind a parameter of the attached store.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store().get(id);
        let tracked = p.requires_grad || self.track_all;
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: p.value.clone(),
                op: Op::Leaf,
                requires_grad: tracked && self.grad_enabled,
            });
            Var(nodes.len() - 1)
        };
        self.bound.borrow_mut().insert(id, var);
        var
    }

    /// Copy of a value cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.tensor(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, k2, n) = (x.rows(), x.cols(), y.rows(), y.cols());
            if k != k2 || y.shape().len() != 2 {
                drop(nodes);
                return Err(self.shape_err("matmul", a, b));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul(x.data(), y.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n, k2) = (x.rows(), x.cols(), y.rows(), y.cols());
            if k != k2 {
                drop(nodes);
                return Err(self.shape_err("matmul_bt", a, b));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_bt(x.data(), y.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        self.push(out, Op::MatMulBT(a, b), &[a, b], "matmul_bt")
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            drop(nodes);
            return Err(self.shape_err(name, a, b));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Add a row vector `b: [n]` to every row of `x: [.. x n]`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let n = xv.cols();
            if bv.len() != n {
                drop(nodes);
                return Err(self.shape_err("add_row", x, b));
            }
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(n) {
                for (o, &c) in row.iter_mut().zip(bv.data()) {
                    *o += c;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.push(out, Op::AddRow(x, b), &[x, b], "add_row")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?
        };
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    /// Multiply `x` by a tracked scalar `s` (shape `[1]`).
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, sv) = (&nodes[x.0].value, &nodes[s.0].value);
            if sv.len() != 1 {
                drop(nodes);
                return Err(self.shape_err("scale_by", x, s));
            }
            let c = sv.item();
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?
        };
        self.push(out, Op::ScaleBy(x, s), &[x, s], "scale_by")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let s = {
            let v = self.value(x);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Sum of scalars (or same-shape tensors).
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs.split_first().ok_or(Error::Empty { op: "add_n" })?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    pub fn concat_rows(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty { op: "concat_rows" });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[xs[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for x in xs {
                let v = &nodes[x.0].value;
                if v.cols() != cols {
                    drop(nodes);
                    return Err(self.shape_err("concat_rows", xs[0], *x));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        self.push(out, Op::ConcatRows(xs.to_vec()), xs, "concat_rows")
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let v = self.value(x);
            if start >= end || end > v.rows() {
                return Err(Error::Contract(format!(
                    "slice_rows {start}..{end} out of bounds for {} rows",
                    v.rows()
                )));
            }
            let c = v.cols();
            Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?
        };
        self.push(out, Op::SliceRows(x, start), &[x], "slice_rows")
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::Empty { op: "gather_rows" });
        }
        let out = {
            let v = self.value(x);
            let (r, c) = (v.rows(), v.cols());
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(Error::Contract(format!(
                        "gather_rows index {i} out of bounds for {r} rows"
                    )));
                }
                data.extend_from_slice(v.row(i));
            }
            Tensor::new(vec![idx.len(), c], data)?
        };
        self.push(out, Op::GatherRows(x, idx.to_vec()), &[x], "gather_rows")
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let c = v.cols();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.push(out, Op::Softmax(x), &[x], "softmax_rows")
    }

    /// Per-row normalisation followed by the affine `gamma * xhat + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[x.0].value,
                &nodes[gamma.0].value,
                &nodes[beta.0].value,
            );
            let d = xv.cols();
            if gv.len() != d || bv.len() != d {
                drop(nodes);
                return Err(self.shape_err("layer_norm", x, gamma));
            }
            let mut out = vec![0.0; xv.len()];
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = Vec::with_capacity(xv.rows());
            for (r, row) in xv.data().chunks(d).enumerate() {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..d {
                    let h = (row[j] - mu) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gv.data()[j] * h + bv.data()[j];
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let out = {
            let v = self.value(x);
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&t| gelu(t)).collect())?
        };
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q: [m x d]`, `k, v: [n x d]`. Per-head weights are kept on the node.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (m, d) = (qv.rows(), qv.cols());
            let n = kv.rows();
            if kv.cols() != d || vv.cols() != d || vv.rows() != n {
                drop(nodes);
                return Err(self.shape_err("attention", q, k));
            }
            if heads == 0 || d % heads != 0 {
                return Err(Error::Contract(format!(
                    "attention width {d} not divisible by {heads} heads"
                )));
            }
            match mask {
                AttnMask::Keys(km) | AttnMask::CausalKeys(km) if km.len() != n => {
                    return Err(Error::Contract("key mask length mismatch".into()));
                }
                _ => {}
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = vec![0.0; heads * m * n];
            let mut out = vec![0.0; m * d];
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let mut allowed = vec![false; n];
            for i in 0..m {
                for (j, a) in allowed.iter_mut().enumerate() {
                    *a = mask.allowed(i, j);
                }
                for h in 0..heads {
                    let off = h * dh;
                    let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                    let qi = &qd[i * d + off..i * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if allowed[j] {
                            let kj = &kd[j * d + off..j * d + off + dh];
                            let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..n {
                        if allowed[j] {
                            p[j] = (p[j] - max).exp();
                            z += p[j];
                        }
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let oi = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        if p[j] != 0.0 {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
            (Tensor::new(vec![m, d], out)?, probs)
        };
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Adaptive average pooling along rows to exactly `n_bins` rows.
    pub fn adaptive_avg_pool(&self, x: Var, n_bins: usize) -> Result<Var> {
        let out = adaptive_avg_pool_1d(&self.value(x), n_bins)?;
        self.push(out, Op::AdaptivePool(x, n_bins), &[x], "adaptive_avg_pool")
    }

    /// Mean of squared differences.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        let t = self.zip_same(pred, target, "mse", |a, b| (a - b) * (a - b))?;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target], "mse")
    }

    /// Mean over rows of `0.5 * (1 - cos(pred_r, target_r))`.
    pub fn cosine_alignment(&self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        let loss = {
            let nodes = self.nodes.borrow();
            let (p, t) = (&nodes[pred.0].value, &nodes[target.0].value);
            if p.shape() != t.shape() {
                drop(nodes);
                return Err(self.shape_err("cosine_alignment", pred, target));
            }
            let c = p.cols();
            let rows = p.rows();
            let mut acc = 0.0;
            for r in 0..rows {
                acc += 0.5 * (1.0 - row_cosine(p.row(r), t.row(r), eps).0);
            }
            let _ = c;
            acc / rows as f64
        };
        self.push(
            Tensor::scalar(loss),
            Op::Cosine { pred, target, eps },
            &[pred, target],
            "cosine_alignment",
        )
    }

    /// Mean token negative log-likelihood of `targets` under row-wise softmax
    /// of `logits: [L x V]`. Row `i` is scored against `targets[i]`; entries
    /// equal to [`IGNORE_INDEX`] are skipped. Returns `(loss, all_ignored)`;
    /// the loss is exactly 0 when every target is ignored.
    pub fn cross_entropy(&self, logits: Var, targets: &[i64]) -> Result<(Var, bool)> {
        let (loss, probs, count) = {
            let v = self.value(logits);
            let (l, vocab) = (v.rows(), v.cols());
            if targets.len() != l {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: v.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut probs = v.data().to_vec();
            let mut nll = 0.0;
            let mut count = 0usize;
            for (i, row) in probs.chunks_mut(vocab).enumerate() {
                let t = targets[i];
                if t == IGNORE_INDEX {
                    continue;
                }
                if t < 0 || t as usize >= vocab {
                    return Err(Error::Contract(format!(
                        "target {t} outside vocabulary of {vocab}"
                    )));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                nll += lse - row[t as usize];
                softmax_in_place(row);
                count += 1;
            }
            let loss = if count == 0 { 0.0 } else { nll / count as f64 };
            (loss, probs, count)
        };
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        )?;
        Ok((var, count == 0))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            propagate(&nodes, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .map(|(id, var)| (*id, *var))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is unreachable or untracked.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradients of every bound parameter that received one.
    pub fn params(&self) -> HashMap<ParamId, Tensor> {
        self.params
            .iter()
            .filter_map(|(id, var)| self.wrt(*var).map(|g| (*id, g)))
            .collect()
    }
}

fn acc_slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let rg = |v: Var| nodes[v.0].requires_grad;
    let len = |v: Var| nodes[v.0].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if rg(*a) {
                let slot = acc_slot(grads, *a, m * k);
                kernels::matmul_bt(g, bv.data(), slot, m, n, k);
            }
            if rg(*b) {
                let slot = acc_slot(grads, *b, k * n);
                kernels::matmul_at(av.data(), g, slot, m, k, n);
            }
        }
        Op::MatMulBT(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if rg(*a) {
                let slot = acc_slot(grads, *a, m * k);
                kernels::matmul(g, bv.data(), slot, m, n, k);
            }
            if rg(*b) {
                let slot = acc_slot(grads, *b, n * k);
                kernels::matmul_at(g, av.data(), slot, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if rg(v) {
                    let slot = acc_slot(grads, v, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, x)| *s += sign * x);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if rg(v) {
                    let slot = acc_slot(grads, v, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, x)| *s += sign * x);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if rg(*a) {
                let slot = acc_slot(grads, *a, g.len());
                for ((s, x), y) in slot.iter_mut().zip(g).zip(bv) {
                    *s += x * y;
                }
            }
            if rg(*b) {
                let slot = acc_slot(grads, *b, g.len());
                for ((s, x), y) in slot.iter_mut().zip(g).zip(av) {
                    *s += x * y;
                }
            }
        }
        Op::AddRow(x, b) => {
            if rg(*x) {
                let slot = acc_slot(grads, *x, g.len());
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
            if rg(*b) {
                let n = len(*b);
                let slot = acc_slot(grads, *b, n);
                for row in g.chunks(n) {
                    slot.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::Scale(x, c) => {
            if rg(*x) {
                let slot = acc_slot(grads, *x, g.len());
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += c * v);
            }
        }
        Op::ScaleBy(x, s) => {
            let c = nodes[s.0].value.item();
            if rg(*x) {
                let slot = acc_slot(grads, *x, g.len());
                slot.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
            if rg(*s) {
                let xv = nodes[x.0].value.data();
                let d: f64 = xv.iter().zip(g).map(|(a, b)| a * b).sum();
                acc_slot(grads, *s, 1)[0] += d;
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                let slot = acc_slot(grads, *x, len(*x));
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(x) => {
            if rg(*x) {
                let n = len(*x);
                let slot = acc_slot(grads, *x, n);
                let c = g[0] / n as f64;
                slot.iter_mut().for_each(|s| *s += c);
            }
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for x in xs {
                let n = len(*x);
                if rg(*x) {
                    let slot = acc_slot(grads, *x, n);
                    slot.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(s, v)| *s += v);
                }
                off += n;
            }
        }
        Op::SliceRows(x, start) => {
            if rg(*x) {
                let c = nodes[x.0].value.cols();
                let slot = acc_slot(grads, *x, len(*x));
                slot[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, v)| *s += v);
            }
        }
        Op::GatherRows(x, idx) => {
            if rg(*x) {
                let c = nodes[x.0].value.cols();
                let slot = acc_slot(grads, *x, len(*x));
                for (r, &src) in idx.iter().enumerate() {
                    slot[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::Softmax(x) => {
            if rg(*x) {
                let y = node.value.data();
                let c = node.value.cols();
                let slot = acc_slot(grads, *x, y.len());
                for ((yr, gr), sr) in y.chunks(c).zip(g.chunks(c)).zip(slot.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[x.0].value.cols();
            let gam = nodes[gamma.0].value.data();
            if rg(*gamma) {
                let slot = acc_slot(grads, *gamma, d);
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        slot[j] += gr[j] * hr[j];
                    }
                }
            }
            if rg(*beta) {
                let slot = acc_slot(grads, *beta, d);
                for gr in g.chunks(d) {
                    slot.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                }
            }
            if rg(*x) {
                let slot = acc_slot(grads, *x, g.len());
                let mut dxhat = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let c = inv_std[r] / d as f64;
                    for j in 0..d {
                        slot[r * d + j] += c * (d as f64 * dxhat[j] - sum - hr[j] * dot);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if rg(*x) {
                let xv = nodes[x.0].value.data();
                let slot = acc_slot(grads, *x, g.len());
                for ((s, v), &t) in slot.iter_mut().zip(g).zip(xv) {
                    *s += v * gelu_grad(t);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, g, grads, (*q, *k, *v), *heads, probs),
        Op::AdaptivePool(x, n_bins) => {
            if rg(*x) {
                let xv = &nodes[x.0].value;
                let (l, c) = (xv.rows(), xv.cols());
                let slot = acc_slot(grads, *x, l * c);
                for (b, (start, end)) in pool_bins(l, *n_bins).enumerate() {
                    let w = 1.0 / (end - start) as f64;
                    for r in start..end {
                        for j in 0..c {
                            slot[r * c + j] += w * g[b * c + j];
                        }
                    }
                }
            }
        }
        Op::Mse(p, t) => {
            let (pv, tv) = (nodes[p.0].value.data(), nodes[t.0].value.data());
            let c = 2.0 * g[0] / pv.len() as f64;
            for (v, sign) in [(*p, 1.0), (*t, -1.0)] {
                if rg(v) {
                    let slot = acc_slot(grads, v, pv.len());
                    for ((s, a), b) in slot.iter_mut().zip(pv).zip(tv) {
                        *s += sign * c * (a - b);
                    }
                }
            }
        }
        Op::Cosine { pred, target, eps } => {
            let (pv, tv) = (&nodes[pred.0].value, &nodes[target.0].value);
            let (rows, c) = (pv.rows(), pv.cols());
            let scale = -0.5 * g[0] / rows as f64;
            for (v, this, other) in [(*pred, pv, tv), (*target, tv, pv)] {
                if !rg(v) {
                    continue;
                }
                let slot = acc_slot(grads, v, rows * c);
                for r in 0..rows {
                    let (a, b) = (this.row(r), other.row(r));
                    let (cos, na, nb) = row_cosine(a, b, *eps);
                    let a_clamped = na < *eps;
                    for j in 0..c {
                        let mut dc = b[j] / (na.max(*eps) * nb.max(*eps));
                        if !a_clamped {
                            dc -= cos * a[j] / (na * na);
                        }
                        slot[r * c + j] += scale * dc;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if rg(*logits) && *count > 0 {
                let vocab = nodes[logits.0].value.cols();
                let slot = acc_slot(grads, *logits, probs.len());
                let c = g[0] / *count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..vocab {
                        let onehot = if j == t as usize { 1.0 } else { 0.0 };
                        slot[r * vocab + j] += c * (probs[r * vocab + j] - onehot);
                    }
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    probs: &[f64],
) {
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (m, d, n) = (qv.rows(), qv.cols(), kv.rows());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut dq = vec![0.0; m * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..m {
            let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
            let go = &g[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..n {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &vd[j * d + off..j * d + off + dh];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (s, x) in dvj.iter_mut().zip(go) {
                    *s += p[j] * x;
                }
            }
            for j in 0..n {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                for t in 0..dh {
                    dq[i * d + off + t] += ds * kd[j * d + off + t];
                    dk[j * d + off + t] += ds * qd[i * d + off + t];
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if nodes[var.0].requires_grad {
            let slot = acc_slot(grads, var, buf.len());
            slot.iter_mut().zip(&buf).for_each(|(s, x)| *s += x);
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Returns `(cos, |a|, |b|)` with each norm floored at `eps` in the ratio.
fn row_cosine(a: &[f64], b: &[f64], eps: f64) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na.max(eps) * nb.max(eps)), na, nb)
}

/// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Bin `i` covers rows `[floor(i L / n), max(start + 1, ceil((i + 1) L / n)))`.
pub fn pool_bins(l: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).map(move |i| {
        let start = i * l / n;
        let end = ((i + 1) * l).div_ceil(n).max(start + 1);
        (start, end)
    })
}

/// Plain (untracked) adaptive average pooling along rows.
pub fn adaptive_avg_pool_1d(x: &Tensor, n_bins: usize) -> Result<Tensor> {
    let (l, c) = (x.rows(), x.cols());
    if n_bins == 0 {
        return Err(Error::Contract("adaptive pooling needs at least one bin".into()));
    }
    let mut out = vec![0.0; n_bins * c];
    for (b, (start, end)) in pool_bins(l, n_bins).enumerate() {
        let bin = &mut out[b * c..(b + 1) * c];
        for r in start..end {
            for (o, v) in bin.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let count = (end - start) as f64;
        for o in bin.iter_mut() {
            *o /= count;
        }
    }
    Tensor::new(vec![n_bins, c], out)
}
