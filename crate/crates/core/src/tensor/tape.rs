use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
///
/// Carries the id of the owning tape so that handles from another tape are
/// rejected instead of silently indexing the wrong node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    AddTiled {
        x: usize,
        tile: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: usize,
        heads: usize,
        probs: Vec<T>,
    },
    MeanTokens(usize),
    ReplaceRows {
        x: usize,
        token: usize,
        rows: Vec<bool>,
    },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: usize,
        target: usize,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Tape::backward`] walks them in strict reverse. A tape supports exactly one
/// backward pass; call [`Tape::reset`] to reuse it.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    keyed: HashMap<usize, usize>,
    keyed_order: Vec<(usize, usize)>,
    macs: u64,
    backward_done: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bval<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn reduce_to<T: Scalar>(contrib: Vec<T>, numel: usize) -> Vec<T> {
    if contrib.len() == numel {
        contrib
    } else {
        debug_assert_eq!(numel, 1);
        vec![contrib.iter().fold(T::zero(), |acc, &x| acc + x)]
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            keyed: HashMap::new(),
            keyed_order: Vec::new(),
            macs: 0,
            backward_done: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed so far (forward and backward).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Clears all nodes so the tape can record a new computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.keyed.clear();
        self.keyed_order.clear();
        self.macs = 0;
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autograd(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf registered under an external key (e.g. a parameter id). The same
    /// key always resolves to the same node on this tape.
    pub fn keyed_leaf(
        &mut self,
        key: usize,
        requires_grad: bool,
        make: impl FnOnce() -> Tensor<T>,
    ) -> Var {
        if let Some(&index) = self.keyed.get(&key) {
            return Var {
                tape: self.id,
                index,
            };
        }
        let v = self.leaf(make(), requires_grad);
        self.keyed.insert(key, v.index);
        self.keyed_order.push((key, v.index));
        v
    }

    /// Keyed leaves in registration order.
    pub fn keyed_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.keyed_order.iter().map(move |&(k, index)| {
            (
                k,
                Var {
                    tape: self.id,
                    index,
                },
            )
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = if va.shape() == vb.shape() || vb.is_scalar() {
            va.shape().to_vec()
        } else if va.is_scalar() {
            vb.shape().to_vec()
        } else {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        };
        let n = va.numel().max(vb.numel());
        let data: Vec<T> = (0..n)
            .map(|i| f(bval(va.data(), i), bval(vb.data(), i)))
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, data)?, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(f);
        let rg = self.rg(ia);
        Ok(self.push(value, op(ia), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|x| x * c);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Scale(ia, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu_fwd, Op::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::lit(v.numel() as f64);
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", va.shape(), vb.shape())),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), va.data(), k, 1, vb.data(), n, 1, T::zero(), &mut out, n, 1);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), rg))
    }

    /// Affine map over the last axis: `x[..., in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (din, dout) = match vw.shape() {
            [i, o] => (*i, *o),
            _ => return Err(Error::dim("linear", vx.shape(), vw.shape())),
        };
        if vx.shape().last() != Some(&din) {
            return Err(Error::dim("linear", vx.shape(), vw.shape()));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [dout] {
                return Err(Error::dim("linear bias", vw.shape(), self.nodes[ib].value.shape()));
            }
        }
        let rows = vx.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(rows, din, dout, T::one(), vx.data(), din, 1, vw.data(), dout, 1, T::zero(), &mut out, dout, 1);
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            for row in out.chunks_exact_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
        }
        self.macs += (rows * din * dout) as u64;
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear { x: ix, w: iw, b: ib },
            rg,
        ))
    }

    /// Adds `tile` to every trailing block of `x` with the same shape (used for
    /// positional embeddings shared across the batch).
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (ix, it) = (self.idx(x)?, self.idx(tile)?);
        let (vx, vt) = (&self.nodes[ix].value, &self.nodes[it].value);
        let tr = vt.shape();
        if tr.len() > vx.shape().len() || vx.shape()[vx.shape().len() - tr.len()..] != *tr {
            return Err(Error::dim("add_tiled", vx.shape(), tr));
        }
        let tn = vt.numel();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_exact_mut(tn) {
            for (d, &t) in chunk.iter_mut().zip(vt.data()) {
                *d = *d + t;
            }
        }
        let rg = self.rg(ix) || self.rg(it);
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddTiled { x: ix, tile: it }, rg))
    }

    /// Layer normalization over the last axis with affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let vx = &self.nodes[ix].value;
        let d = *vx.shape().last().unwrap_or(&0);
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if d == 0 || vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[b, t, 3e]` holding the query, key and value projections
    /// side by side; the result is `[b, t, e]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let iq = self.idx(qkv)?;
        let v = &self.nodes[iq].value;
        let (b, t, e3) = match v.shape() {
            [b, t, e3] => (*b, *t, *e3),
            s => return Err(Error::dim("attention", s, &[heads])),
        };
        if heads == 0 || e3 % 3 != 0 || (e3 / 3) % heads != 0 {
            return Err(Error::dim("attention", v.shape(), &[heads]));
        }
        let e = e3 / 3;
        let dh = e / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let src = v.data();
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * e];
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * t * e3 + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                // scores = scale * Q K^T
                gemm(t, dh, t, scale, &src[base..], e3, 1, &src[base + e..], 1, e3, T::zero(), p, t, 1);
                for row in p.chunks_exact_mut(t) {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
                    let mut s = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        s = s + *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / s;
                    }
                }
                gemm(t, t, dh, T::one(), p, t, 1, &src[base + 2 * e..], e3, 1, T::zero(), &mut out[bi * t * e + h * dh..], e, 1);
            }
        }
        self.macs += (2 * b * heads * t * t * dh) as u64;
        let rg = self.rg(iq);
        Ok(self.push(
            Tensor::new(vec![b, t, e], out)?,
            Op::Attention {
                qkv: iq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean over the token axis: `[b, t, e] -> [b, e]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let (b, t, e) = match v.shape() {
            [b, t, e] if *t > 0 => (*b, *t, *e),
            s => return Err(Error::dim("mean_tokens", s, &[])),
        };
        let inv = T::lit(1.0 / t as f64);
        let mut out = vec![T::zero(); b * e];
        for bi in 0..b {
            let o = &mut out[bi * e..(bi + 1) * e];
            for ti in 0..t {
                let row = &v.data()[(bi * t + ti) * e..(bi * t + ti + 1) * e];
                for (a, &r) in o.iter_mut().zip(row) {
                    *a = *a + r;
                }
            }
            for a in o.iter_mut() {
                *a = *a * inv;
            }
        }
        let rg = self.rg(ix);
        Ok(self.push(Tensor::new(vec![b, e], out)?, Op::MeanTokens(ix), rg))
    }

    /// Replaces the rows of `x` (rows along the last axis) flagged in `rows`
    /// with the vector `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, rows: &[bool]) -> Result<Var> {
        let (ix, it) = (self.idx(x)?, self.idx(token)?);
        let (vx, vt) = (&self.nodes[ix].value, &self.nodes[it].value);
        let e = *vx.shape().last().unwrap_or(&0);
        if vt.shape() != [e] || e == 0 || vx.numel() / e != rows.len() {
            return Err(Error::dim("replace_rows", vx.shape(), vt.shape()));
        }
        let mut data = vx.data().to_vec();
        for (r, chunk) in data.chunks_exact_mut(e).enumerate() {
            if rows[r] {
                chunk.copy_from_slice(vt.data());
            }
        }
        let rg = self.rg(ix) || self.rg(it);
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ReplaceRows {
                x: ix,
                token: it,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let v = &self.nodes[il].value;
        let (b, c) = match v.shape() {
            [b, c] if *b == labels.len() && *b > 0 => (*b, *c),
            s => return Err(Error::dim("softmax_cross_entropy", s, &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &v.data()[r * c..(r + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            let mut s = T::zero();
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - mx).exp();
                s = s + *p;
            }
            for p in probs[r * c..(r + 1) * c].iter_mut() {
                *p = *p / s;
            }
            total = total + (s.ln() + mx - row[y]);
        }
        let loss = total / T::lit(b as f64);
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all positions, or over the positions where
    /// `mask` is true.
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        let (vp, vt) = (&self.nodes[ip].value, &self.nodes[it].value);
        if vp.shape() != vt.shape() {
            return Err(Error::dim("mse", vp.shape(), vt.shape()));
        }
        if let Some(m) = mask {
            if m.len() != vp.numel() {
                return Err(Error::dim("mse mask", vp.shape(), &[m.len()]));
            }
        }
        let mut count = 0usize;
        let mut total = T::zero();
        for i in 0..vp.numel() {
            if mask.is_none_or(|m| m[i]) {
                let d = vp.data()[i] - vt.data()[i];
                total = total + d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Validation("mse mask selects no positions".into()));
        }
        let loss = total / T::lit(count as f64);
        let rg = self.rg(ip) || self.rg(it);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: ip,
                target: it,
                mask: mask.map(|m| m.to_vec()),
                count,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.backward_from(loss, Tensor::full(self.nodes[il].value.shape().to_vec(), T::one()))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `out`.
    pub fn backward_from(&mut self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let io = self.idx(out)?;
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if seed.shape() != self.nodes[io].value.shape() {
            return Err(Error::dim("backward seed", seed.shape(), self.nodes[io].value.shape()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[io].requires_grad {
            grads[io] = Some(seed.into_data());
        }
        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: tensors,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, contrib: Vec<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let contrib = reduce_to(contrib, self.nodes[i].value.numel());
        match &mut grads[i] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut macs = 0u64;
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let rg = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    let c = g.iter().enumerate().map(|(k, &x)| x * bval(vb, k)).collect();
                    self.accumulate(grads, *a, c);
                }
                if rg(*b) {
                    let c = g.iter().enumerate().map(|(k, &x)| x * bval(va, k)).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Gelu(a) => {
                let c = g.iter().zip(val(*a)).map(|(&x, &v)| x * gelu_grad(v)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Exp(a) => {
                let c = g.iter().zip(val(i)).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Log(a) => {
                let c = g.iter().zip(val(*a)).map(|(&x, &v)| x / v).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Sum(a) => {
                let n = nodes[*a].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel();
                let v = g[0] / T::lit(n as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    // dA = dC · B^T
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, n, 1, val(*b), 1, n, T::zero(), &mut da, k, 1);
                    macs += (m * n * k) as u64;
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    // dB = A^T · dC
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), val(*a), 1, k, g, n, 1, T::zero(), &mut db, n, 1);
                    macs += (m * n * k) as u64;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[*w].value.shape();
                let (din, dout) = (sw[0], sw[1]);
                let rows = nodes[*x].value.numel() / din;
                if rg(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, T::one(), g, dout, 1, val(*w), 1, dout, T::zero(), &mut dx, din, 1);
                    macs += (rows * din * dout) as u64;
                    self.accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(din, rows, dout, T::one(), val(*x), 1, din, g, dout, 1, T::zero(), &mut dw, dout, 1);
                    macs += (rows * din * dout) as u64;
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks_exact(dout) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d = *d + r;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::AddTiled { x, tile } => {
                self.accumulate(grads, *x, g.to_vec());
                if rg(*tile) {
                    let tn = nodes[*tile].value.numel();
                    let mut dt = vec![T::zero(); tn];
                    for chunk in g.chunks_exact(tn) {
                        for (d, &c) in dt.iter_mut().zip(chunk) {
                            *d = *d + c;
                        }
                    }
                    self.accumulate(grads, *tile, dt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[*gamma].value.numel();
                let gm = val(*gamma);
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                            db[j] = db[j] + grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if rg(*x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hrow[j];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let s = nodes[*qkv].value.shape();
                let (b, t, e3) = (s[0], s[1], s[2]);
                let e = e3 / 3;
                let dh = e / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let src = val(*qkv);
                let mut dqkv = vec![T::zero(); b * t * e3];
                let mut dp = vec![T::zero(); t * t];
                for bi in 0..b {
                    for h in 0..*heads {
                        let base = bi * t * e3 + h * dh;
                        let go = &g[bi * t * e + h * dh..];
                        let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        // dV = P^T dO
                        gemm(t, t, dh, T::one(), p, 1, t, go, e, 1, T::zero(), &mut dqkv[base + 2 * e..], e3, 1);
                        // dP = dO V^T
                        gemm(t, dh, t, T::one(), go, e, 1, &src[base + 2 * e..], 1, e3, T::zero(), &mut dp, t, 1);
                        // dS = P * (dP - rowsum(dP * P)) * scale
                        for (prow, drow) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                            let dot = prow
                                .iter()
                                .zip(drow.iter())
                                .fold(T::zero(), |a, (&pp, &dd)| a + pp * dd);
                            for (dd, &pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        gemm(t, t, dh, T::one(), &dp, t, 1, &src[base + e..], e3, 1, T::zero(), &mut dqkv[base..], e3, 1);
                        gemm(t, t, dh, T::one(), &dp, 1, t, &src[base..], e3, 1, T::zero(), &mut dqkv[base + e..], e3, 1);
                    }
                }
                macs += (4 * b * heads * t * t * dh) as u64;
                self.accumulate(grads, *qkv, dqkv);
            }
            Op::MeanTokens(x) => {
                let s = nodes[*x].value.shape();
                let (b, t, e) = (s[0], s[1], s[2]);
                let inv = T::lit(1.0 / t as f64);
                let mut dx = vec![T::zero(); b * t * e];
                for bi in 0..b {
                    for ti in 0..t {
                        for k in 0..e {
                            dx[(bi * t + ti) * e + k] = g[bi * e + k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ReplaceRows { x, token, rows } => {
                let e = nodes[*token].value.numel();
                if rg(*x) {
                    let mut dx = g.to_vec();
                    for (r, chunk) in dx.chunks_exact_mut(e).enumerate() {
                        if rows[r] {
                            chunk.fill(T::zero());
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if rg(*token) {
                    let mut dt = vec![T::zero(); e];
                    for (r, chunk) in g.chunks_exact(e).enumerate() {
                        if rows[r] {
                            for (d, &c) in dt.iter_mut().zip(chunk) {
                                *d = *d + c;
                            }
                        }
                    }
                    self.accumulate(grads, *token, dt);
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let k = g[0] / T::lit(b as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * c + y] = dl[r * c + y] - k;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let (vp, vt) = (val(*pred), val(*target));
                let k = T::lit(2.0) * g[0] / T::lit(*count as f64);
                let dp: Vec<T> = (0..vp.len())
                    .map(|j| {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            k * (vp[j] - vt[j])
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if rg(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&x| -x).collect());
                }
                self.accumulate(grads, *pred, dp);
            }
        }
        self.macs += macs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn relu_and_scale() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(t(&[2], &[2.0, 4.0]));
        let s = tape.scale(y, 0.5).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let s = tape.constant(t(&[], &[10.0]));
        let c = tape.add(a, s).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 12.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let v = tape.value(ce).item();
        assert!(v.is_finite() && v.abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 3.0]));
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let all = tape.mse(p, z, None).unwrap();
        assert_eq!(tape.value(all).item(), 5.0);
        let masked = tape.mse(p, z, Some(&[false, true])).unwrap();
        assert_eq!(tape.value(masked).item(), 9.0);
        let same = tape.mse(p, p, None).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert!(matches!(
            tape.mse(p, z, Some(&[false, false])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn simple_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Autograd(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Autograd(_))));

        let mut other = Tape::<f64>::new();
        let y = other.leaf(t(&[1], &[1.0]), true);
        let mut tape = Tape::<f64>::new();
        tape.leaf(t(&[1], &[1.0]), true);
        assert!(matches!(tape.backward(y), Err(Error::Autograd(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn mac_counting() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0; 6]), true);
        let b = tape.leaf(t(&[3, 4], &[1.0; 12]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs(), 24);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        // only dA is needed
        assert_eq!(tape.macs(), 48);
    }
}
