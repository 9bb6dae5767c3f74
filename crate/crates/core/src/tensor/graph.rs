//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Graph`] records every operation as a node whose inputs precede it, so
//! the node order is already topological and [`Graph::backward`] is a single
//! reverse sweep. Parameters are read from a borrowed [`ParamStore`] and are
//! never copied; frozen parameters behave as constants.

use std::collections::HashMap;

use super::array::gemm;
use super::kernels::{gelu, gelu_grad, layer_norm_rows, softmax_in_place};
use super::{DenseArray, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    AddRowsCyclic(Var, Var),
    AffineRows {
        x: Var,
        scale: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        q_len: usize,
        kv_len: usize,
        probs: Vec<f64>,
    },
    Interleave {
        x: Var,
        x_block: usize,
        y: Var,
        y_block: usize,
        y_shared: bool,
        y_first: bool,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    CrossEntropyDiag {
        logits: Var,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: DenseArray,
    },
    Smape {
        pred: Var,
        target: DenseArray,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<DenseArray>,
    requires_grad: bool,
}

/// One computation graph. Cheap to build per batch and discard afterwards.
#[derive(Debug)]
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients of the seeded outputs with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<DenseArray> {
        self.grads[v.0]
            .as_ref()
            .map(|g| DenseArray::from_raw(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of every parameter touched by the graph and not frozen.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, DenseArray)> + '_ {
        self.params.iter().filter_map(|&(id, v)| {
            self.grads[v.0]
                .as_ref()
                .map(|g| (id, DenseArray::from_raw(self.shapes[v.0].clone(), g.clone())))
        })
    }
}

fn same_shape(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseArray, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(val)) => val,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Constant input: never receives gradient.
    pub fn input(&mut self, value: DenseArray) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Free leaf that receives gradient (used to differentiate w.r.t. data).
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(Op::Input, value, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let frozen = self.store.get(id).frozen;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: !frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err(
                "matmul",
                format!("{m}x{k} * {}x{n}", bv.rows()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), DenseArray::from_raw(vec![m, n], out), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(DenseArray::from_raw(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = DenseArray::from_raw(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// `x * s` where `s` is a single-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.value(s).shape())));
        }
        let sv = self.scalar(s);
        let xv = self.value(x);
        let out = DenseArray::from_raw(xv.shape().to_vec(), xv.data().iter().map(|v| v * sv).collect());
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::MulScalar(x, s), out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = DenseArray::from_raw(av.shape().to_vec(), av.data().iter().map(|v| v.exp()).collect());
        let rg = self.rg(a);
        self.push(Op::Exp(a), out, rg)
    }

    /// `x[i] + p[i % rows(p)]` row-wise; a one-row `p` is a bias broadcast.
    pub fn add_rows_cyclic(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let (r, c) = (xv.rows(), xv.cols());
        let pr = pv.rows();
        if pv.cols() != c || r % pr != 0 {
            return Err(shape_err(
                "add_rows_cyclic",
                format!("{r}x{c} with period {pr}x{}", pv.cols()),
            ));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let prow = pv.row_slice(i % pr);
            for (o, pvv) in out[i * c..(i + 1) * c].iter_mut().zip(prow) {
                *o += pvv;
            }
        }
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(Op::AddRowsCyclic(x, p), DenseArray::from_raw(xv.shape().to_vec(), out), rg))
    }

    /// Constant per-row affine map `x[i, j] * scale[i] + shift[i]`.
    pub fn affine_rows(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if scale.len() != r || shift.len() != r {
            return Err(shape_err("affine_rows", format!("{r} rows, {} scales, {} shifts", scale.len(), shift.len())));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o * scale[i] + shift[i];
            }
        }
        let rg = self.rg(x);
        let shape = xv.shape().to_vec();
        Ok(self.push(Op::AffineRows { x, scale }, DenseArray::from_raw(shape, out), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = DenseArray::from_raw(av.shape().to_vec(), av.data().iter().map(|&v| gelu(v)).collect());
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = DenseArray::from_raw(av.shape().to_vec(), av.data().iter().map(|&v| v.max(0.0)).collect());
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = layer_norm_rows(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            y,
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        let shape = xv.shape().to_vec();
        self.push(Op::SoftmaxRows(x), DenseArray::from_raw(shape, out), rg)
    }

    /// Scaled dot-product attention split into `heads` column blocks, applied
    /// independently to `groups` consecutive row blocks (`q_len` query rows
    /// against `kv_len` key/value rows per group). No masking.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        if kv_len == 0 || q_len == 0 {
            return Err(Error::EmptyVariates);
        }
        if qv.rows() != groups * q_len
            || kv.rows() != groups * kv_len
            || vv.rows() != groups * kv_len
            || kv.cols() != d
            || vv.cols() != d
        {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?} for {groups} groups of {q_len}/{kv_len}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; groups * q_len * d];
        let mut probs = vec![0.0; groups * heads * q_len * kv_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..q_len {
                    let qi = (g * q_len + i) * d + c0;
                    let pbase = ((g * heads + h) * q_len + i) * kv_len;
                    let p = &mut probs[pbase..pbase + kv_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = (g * kv_len + j) * d + c0;
                        let mut s = 0.0;
                        for c in 0..dk {
                            s += qd[qi + c] * kd[kj + c];
                        }
                        *pj = s * scale;
                    }
                    softmax_in_place(p);
                    let oi = (g * q_len + i) * d + c0;
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = (g * kv_len + j) * d + c0;
                        for c in 0..dk {
                            out[oi + c] += pj * vd[vj + c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                q_len,
                kv_len,
                probs,
            },
            DenseArray::from_raw(vec![groups * q_len, d], out),
            rg,
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out as
    /// `groups x heads x q_len x kv_len`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Interleave row blocks: `x` holds G blocks of `x_block` rows; `y` holds
    /// either G blocks of `y_block` rows or, when `y_shared`, a single block
    /// reused for every group. Each output block is `[y; x]` or `[x; y]`.
    pub fn interleave(
        &mut self,
        x: Var,
        x_block: usize,
        y: Var,
        y_block: usize,
        y_shared: bool,
        y_first: bool,
    ) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = xv.cols();
        if x_block == 0 || xv.rows() % x_block != 0 || yv.cols() != c {
            return Err(shape_err("interleave", format!("x {:?} block {x_block}, y {:?}", xv.shape(), yv.shape())));
        }
        let groups = xv.rows() / x_block;
        let expect_y = if y_shared { y_block } else { groups * y_block };
        if yv.rows() != expect_y {
            return Err(shape_err("interleave", format!("y has {} rows, expected {expect_y}", yv.rows())));
        }
        let block = x_block + y_block;
        let mut out = Vec::with_capacity(groups * block * c);
        for g in 0..groups {
            let xs = &xv.data()[g * x_block * c..(g + 1) * x_block * c];
            let yg = if y_shared { 0 } else { g };
            let ys = &yv.data()[yg * y_block * c..(yg + 1) * y_block * c];
            if y_first {
                out.extend_from_slice(ys);
                out.extend_from_slice(xs);
            } else {
                out.extend_from_slice(xs);
                out.extend_from_slice(ys);
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(
            Op::Interleave {
                x,
                x_block,
                y,
                y_block,
                y_shared,
                y_first,
            },
            DenseArray::from_raw(vec![groups * block, c], out),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            out.extend_from_slice(xv.row_slice(i));
        }
        let rg = self.rg(x);
        let n = idx.len();
        Ok(self.push(Op::GatherRows { x, idx }, DenseArray::from_raw(vec![n, c], out), rg))
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, idx: Vec<usize>) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        let (r, c) = (bv.rows(), bv.cols());
        if sv.cols() != c || sv.rows() != idx.len() {
            return Err(shape_err("replace_rows", format!("base {:?}, src {:?}, {} indices", bv.shape(), sv.shape(), idx.len())));
        }
        let mut seen = vec![false; r];
        for &i in &idx {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(shape_err("replace_rows", format!("duplicate row index {i}")));
            }
        }
        let mut out = bv.data().to_vec();
        for (s, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(sv.row_slice(s));
        }
        let rg = self.rg(base) || self.rg(src);
        let shape = bv.shape().to_vec();
        Ok(self.push(Op::ReplaceRows { base, src, idx }, DenseArray::from_raw(shape, out), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), DenseArray::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), DenseArray::scalar(s), rg)
    }

    /// Divide each row by `(||row|| + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n + eps;
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let rg = self.rg(x);
        let shape = xv.shape().to_vec();
        self.push(Op::L2NormalizeRows { x, norms, eps }, DenseArray::from_raw(shape, out), rg)
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        let b = lv.rows();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if lv.cols() != b {
            return Err(shape_err("cross_entropy_diag", format!("logits {:?} not square", lv.shape())));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(b).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v -= max;
                total += v.exp();
            }
            // -log p_ii = log(sum exp(l - max)) - (l_ii - max)
            loss += total.ln() - row[i];
            for v in row.iter_mut() {
                *v = v.exp() / total;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropyDiag { logits, probs }, DenseArray::scalar(loss / b as f64), rg))
    }

    pub fn mse(&mut self, pred: Var, target: DenseArray) -> Result<Var> {
        let pv = self.value(pred);
        same_shape("mse", pv, &target)?;
        let n = pv.len() as f64;
        let s: f64 = pv.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.rg(pred);
        Ok(self.push(Op::Mse { pred, target }, DenseArray::scalar(s / n), rg))
    }

    /// `200/n * sum |t - p| / (|t| + |p|)`, with 0/0 terms taken as 0.
    pub fn smape(&mut self, pred: Var, target: DenseArray) -> Result<Var> {
        let pv = self.value(pred);
        same_shape("smape", pv, &target)?;
        let n = pv.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| {
                let den = t.abs() + p.abs();
                if den == 0.0 {
                    0.0
                } else {
                    (t - p).abs() / den
                }
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Op::Smape { pred, target }, DenseArray::scalar(200.0 * s / n), rg))
    }

    /// Reverse sweep seeded with `d out / d out = seed` for each pair.
    pub fn backward(&self, seeds: &[(Var, DenseArray)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, seed) in seeds {
            same_shape("backward seed", self.value(*v), seed)?;
            accumulate(&mut grads, *v, self.value(*v).len(), seed.data());
        }
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = (0..n).map(|i| self.value(Var(i)).shape().to_vec()).collect();
        let mut params: Vec<(ParamId, Var)> = self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        // constants never carry gradient, even if seeded directly
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes, params })
    }

    /// Convenience: backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, out: Var) -> Result<Gradients> {
        self.backward(&[(out, DenseArray::filled(self.value(out).shape(), 1.0))])
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, nn, k, 1.0, g, false, bv.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, m * k, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * nn];
                    gemm(k, m, nn, 1.0, av.data(), true, g, false, 0.0, &mut db);
                    accumulate(grads, *b, k * nn, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = DenseArray::from_raw(vec![r, c], g.to_vec()).transpose();
                accumulate(grads, *a, r * c, gt.data());
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g);
                self.acc_if(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, g.len(), &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, g.len(), &d);
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, g.len(), &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, g.len(), &d);
            }
            Op::MulScalar(x, s) => {
                let sv = self.scalar(*s);
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    accumulate(grads, *x, g.len(), &d);
                }
                if self.rg(*s) {
                    let ds: f64 = g.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, *s, 1, &[ds]);
                }
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, g.len(), &d);
            }
            Op::AddRowsCyclic(x, p) => {
                self.acc_if(grads, *x, g);
                if self.rg(*p) {
                    let pv = self.value(*p);
                    let (pr, c) = (pv.rows(), pv.cols());
                    let mut dp = vec![0.0; pr * c];
                    for (r, row) in g.chunks(c).enumerate() {
                        let dst = &mut dp[(r % pr) * c..(r % pr + 1) * c];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *p, pr * c, &dp);
                }
            }
            Op::AffineRows { x, scale, .. } => {
                let c = out.cols();
                let d: Vec<f64> = g.chunks(c).zip(scale).flat_map(|(row, s)| row.iter().map(move |v| v * s)).collect();
                accumulate(grads, *x, g.len(), &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(gv, x)| gv * gelu_grad(*x)).collect();
                accumulate(grads, *a, g.len(), &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.len(), &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += row[c] * hrow[c];
                            db[c] += row[c];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(grads, *gamma, d, &dg);
                    }
                    if self.rg(*beta) {
                        accumulate(grads, *beta, d, &db);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = row[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = row[c] * gam[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, g.len(), &dx);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(c).zip(out.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, g.len(), &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                q_len,
                kv_len,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = out.cols();
                let (heads, groups, q_len, kv_len) = (*heads, *groups, *q_len, *kv_len);
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dkk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; kv_len];
                for gi in 0..groups {
                    for h in 0..heads {
                        let c0 = h * dk;
                        for i in 0..q_len {
                            let oi = (gi * q_len + i) * d + c0;
                            let pbase = ((gi * heads + h) * q_len + i) * kv_len;
                            let p = &probs[pbase..pbase + kv_len];
                            let mut dot = 0.0;
                            for j in 0..kv_len {
                                let vj = (gi * kv_len + j) * d + c0;
                                let mut s = 0.0;
                                for c in 0..dk {
                                    s += g[oi + c] * vv[vj + c];
                                    dv[vj + c] += p[j] * g[oi + c];
                                }
                                dp[j] = s;
                                dot += p[j] * s;
                            }
                            for j in 0..kv_len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (gi * kv_len + j) * d + c0;
                                for c in 0..dk {
                                    dq[oi + c] += ds * kv[kj + c];
                                    dkk[kj + c] += ds * qv[oi + c];
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    accumulate(grads, *q, dq.len(), &dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, dkk.len(), &dkk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, dv.len(), &dv);
                }
            }
            Op::Interleave {
                x,
                x_block,
                y,
                y_block,
                y_shared,
                y_first,
            } => {
                let c = out.cols();
                let block = x_block + y_block;
                let groups = out.rows() / block;
                let mut dx = vec![0.0; groups * x_block * c];
                let y_rows = if *y_shared { *y_block } else { groups * y_block };
                let mut dy = vec![0.0; y_rows * c];
                for gi in 0..groups {
                    let base = gi * block * c;
                    let (xo, yo) = if *y_first { (y_block * c, 0) } else { (0, x_block * c) };
                    dx[gi * x_block * c..(gi + 1) * x_block * c]
                        .copy_from_slice(&g[base + xo..base + xo + x_block * c]);
                    let yg = if *y_shared { 0 } else { gi };
                    let dst = &mut dy[yg * y_block * c..(yg + 1) * y_block * c];
                    for (d, v) in dst.iter_mut().zip(&g[base + yo..base + yo + y_block * c]) {
                        *d += v;
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, dx.len(), &dx);
                }
                if self.rg(*y) {
                    accumulate(grads, *y, dy.len(), &dy);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                accumulate(grads, *x, dx.len(), &dx);
            }
            Op::ReplaceRows { base, src, idx } => {
                let c = out.cols();
                if self.rg(*base) {
                    let mut db = g.to_vec();
                    for &i in idx {
                        db[i * c..(i + 1) * c].fill(0.0);
                    }
                    accumulate(grads, *base, db.len(), &db);
                }
                if self.rg(*src) {
                    let mut ds = Vec::with_capacity(idx.len() * c);
                    for &i in idx {
                        ds.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    accumulate(grads, *src, ds.len(), &ds);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.len(), g),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n, &vec![g[0] / n as f64; n]);
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let den = nr + eps;
                    let xr = xv.row_slice(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        let radial = if nr > 0.0 { gx * xr[j] / (den * den * nr) } else { 0.0 };
                        dx[r * c + j] = gr[j] / den - radial;
                    }
                }
                accumulate(grads, *x, dx.len(), &dx);
            }
            Op::CrossEntropyDiag { logits, probs } => {
                let b = out_rows_of(probs);
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for i in 0..b {
                    dl[i * b + i] -= scale;
                }
                accumulate(grads, *logits, dl.len(), &dl);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(target.data()).map(|(p, t)| g[0] * 2.0 * (p - t) / n).collect();
                accumulate(grads, *pred, d.len(), &d);
            }
            Op::Smape { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len() as f64;
                let d: Vec<f64> = pv
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let den = t.abs() + p.abs();
                        if den == 0.0 {
                            return 0.0;
                        }
                        let num = (t - p).abs();
                        let dnum = sign(p - t);
                        let dden = sign(p);
                        g[0] * 200.0 / n * (dnum * den - num * dden) / (den * den)
                    })
                    .collect();
                accumulate(grads, *pred, d.len(), &d);
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.rg(v) {
            accumulate(grads, v, g.len(), g);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn out_rows_of(square: &[f64]) -> usize {
    (square.len() as f64).sqrt().round() as usize
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, d: &[f64]) {
    debug_assert_eq!(len, d.len());
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}
