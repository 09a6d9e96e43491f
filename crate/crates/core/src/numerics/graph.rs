use std::cell::RefCell;
use std::fmt;

use super::tensor::{Scalar, Tensor};
use super::{Result, TensorError};

/// Per-row key windows for the fused attention primitive.
///
/// Row `i` attends to keys `ranges[i].0 .. ranges[i].1`. Every attention
/// pattern the encoder supports (global, local band, chunk) compiles to one
/// contiguous window per query row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub ranges: Vec<(usize, usize)>,
    /// Relative distances are clipped to `[-bias_cap, bias_cap]` when
    /// indexing the `[heads, 2 * bias_cap + 1]` bias table.
    pub bias_cap: usize,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Swish(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    DepthwiseConv {
        x: usize,
        w: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<usize>,
        spec: AttentionSpec,
        offsets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    WeightedSum(usize, Vec<T>),
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    PickCols {
        x: usize,
        idx: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    RepeatRows(usize, usize),
    Interp {
        x: usize,
        taps: Vec<(usize, T, usize, T)>,
    },
    ConcatRows(Vec<usize>),
    KeepRows {
        x: usize,
        keep: Vec<bool>,
    },
    External {
        x: usize,
        grad: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A recording of one forward computation.
///
/// A graph is single-threaded; independent graphs may live on different
/// threads.
pub struct Graph<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f64> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not require gradients or is not on the path to the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads[v.id].as_deref()
    }

    /// Gradient as a dense vector, zeros when absent.
    pub fn get_or_zero(&self, v: Var<'_, T>) -> Vec<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.shapes[v.id].iter().product()],
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Scalar loss whose value and input gradient were computed outside the
    /// graph (used by the CTC lattice).
    pub fn external_loss<'g>(&'g self, x: Var<'g, T>, value: T, grad: Vec<T>) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.id].value;
        if grad.len() != xv.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "external_loss",
                lhs: xv.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let rg = nodes[x.id].requires_grad;
        drop(nodes);
        Ok(self.push(Tensor::scalar(value), Op::External { x: x.id, grad }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves keep gradients that callers can ask for; interior
        // gradients stay too, which is useful when inspecting activations.
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            acc(nodes, grads, *a, |ga| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        ga[i * k + kk] = ga[i * k + kk] + dot(grow, &bv.data()[kk * n..(kk + 1) * n]);
                    }
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let a_ik = av.data()[i * k + kk];
                        if a_ik == T::zero() {
                            continue;
                        }
                        let dst = &mut gb[kk * n..(kk + 1) * n];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = *d + a_ik * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * bv[i];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] + g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            let n = nodes[*b].value.numel();
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            acc(nodes, grads, *b, |gb| {
                for (i, &v) in g.iter().enumerate() {
                    gb[i % n] = gb[i % n] + v;
                }
            });
        }
        Op::MulRow(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let n = bv.len();
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * bv[i % n];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for (i, &v) in g.iter().enumerate() {
                    gb[i % n] = gb[i % n] + v * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c));
        }
        Op::Sigmoid(a) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] = ga[i] + g[i] * out[i] * (T::one() - out[i]);
            }
        }),
        Op::Swish(a) => {
            let x = nodes[*a].value.data();
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    let s = sigmoid(x[i]);
                    ga[i] = ga[i] + g[i] * (s + x[i] * s * (T::one() - s));
                }
            })
        }
        Op::Exp(a) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] = ga[i] + g[i] * out[i];
            }
        }),
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] / x[i];
                }
            })
        }
        Op::Softmax(a) => {
            let c = node.value.cols();
            acc(nodes, grads, *a, |ga| {
                for (r, orow) in out.chunks(c).enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let s = dot(grow, orow);
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + orow[j] * (grow[j] - s);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let c = node.value.cols();
            acc(nodes, grads, *a, |ga| {
                for (r, orow) in out.chunks(c).enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let s: T = grow.iter().copied().sum();
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + grow[j] - orow[j].exp() * s;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = node.value.cols();
            let gm = nodes[*gamma].value.data();
            let cf = T::from_f64(c as f64);
            acc(nodes, grads, *x, |gx| {
                for r in 0..inv_std.len() {
                    let grow = &g[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let gh = grow[j] * gm[j];
                        s1 = s1 + gh;
                        s2 = s2 + gh * xh[j];
                    }
                    for j in 0..c {
                        let gh = grow[j] * gm[j];
                        gx[r * c + j] = gx[r * c + j] + inv_std[r] / cf * (cf * gh - s1 - xh[j] * s2);
                    }
                }
            });
            acc(nodes, grads, *gamma, |gg| {
                for (i, &v) in g.iter().enumerate() {
                    gg[i % c] = gg[i % c] + v * xhat[i];
                }
            });
            acc(nodes, grads, *beta, |gb| {
                for (i, &v) in g.iter().enumerate() {
                    gb[i % c] = gb[i % c] + v;
                }
            });
        }
        Op::DepthwiseConv { x, w } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
            let k = wv.shape()[0];
            let pad = k / 2;
            acc(nodes, grads, *x, |gx| {
                for t in 0..t_len {
                    for kk in 0..k {
                        let src = t as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            gx[src * c + ch] = gx[src * c + ch] + wv.data()[kk * c + ch] * g[t * c + ch];
                        }
                    }
                }
            });
            acc(nodes, grads, *w, |gw| {
                for t in 0..t_len {
                    for kk in 0..k {
                        let src = t as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            gw[kk * c + ch] = gw[kk * c + ch] + xv.data()[src * c + ch] * g[t * c + ch];
                        }
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            bias,
            spec,
            offsets,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v, *bias), spec, offsets, probs),
        Op::Sum(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + g[0])),
        Op::Mean(a) => {
            let n = T::from_f64(nodes[*a].value.numel() as f64);
            acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + g[0] / n))
        }
        Op::WeightedSum(a, w) => acc(nodes, grads, *a, |ga| {
            for (d, &wi) in ga.iter_mut().zip(w) {
                *d = *d + g[0] * wi;
            }
        }),
        Op::GatherRows { table, idx } => {
            let c = nodes[*table].value.cols();
            acc(nodes, grads, *table, |gt| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[src * c + j] = gt[src * c + j] + g[r * c + j];
                    }
                }
            })
        }
        Op::PickCols { x, idx } => {
            let c = nodes[*x].value.cols();
            acc(nodes, grads, *x, |gx| {
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * c + j] = gx[r * c + j] + g[r];
                }
            })
        }
        Op::SliceRows { x, start } => {
            let c = nodes[*x].value.cols();
            acc(nodes, grads, *x, |gx| {
                let off = start * c;
                for (i, &v) in g.iter().enumerate() {
                    gx[off + i] = gx[off + i] + v;
                }
            })
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v)),
        Op::RepeatRows(a, factor) => {
            let c = nodes[*a].value.cols();
            acc(nodes, grads, *a, |ga| {
                for (r, grow) in g.chunks(c).enumerate() {
                    let src = r / factor;
                    for j in 0..c {
                        ga[src * c + j] = ga[src * c + j] + grow[j];
                    }
                }
            })
        }
        Op::Interp { x, taps } => {
            let c = nodes[*x].value.cols();
            acc(nodes, grads, *x, |gx| {
                for (r, &(i0, w0, i1, w1)) in taps.iter().enumerate() {
                    for j in 0..c {
                        let gv = g[r * c + j];
                        gx[i0 * c + j] = gx[i0 * c + j] + w0 * gv;
                        gx[i1 * c + j] = gx[i1 * c + j] + w1 * gv;
                    }
                }
            })
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                acc(nodes, grads, p, |gp| {
                    for i in 0..n {
                        gp[i] = gp[i] + g[off + i];
                    }
                });
                off += n;
            }
        }
        Op::KeepRows { x, keep } => {
            let c = nodes[*x].value.cols();
            acc(nodes, grads, *x, |gx| {
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + g[r * c + j];
                        }
                    }
                }
            })
        }
        Op::External { x, grad } => acc(nodes, grads, *x, |gx| {
            for (d, &v) in gx.iter_mut().zip(grad) {
                *d = *d + g[0] * v;
            }
        }),
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v, bias): (usize, usize, usize, Option<usize>),
    spec: &AttentionSpec,
    offsets: &[usize],
    probs: &[T],
) {
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let t_len = spec.ranges.len();
    let d = nodes[q].value.cols();
    let dh = d / spec.heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let total = offsets[t_len];
    let width = 2 * spec.bias_cap + 1;

    let mut gq = vec![T::zero(); t_len * d];
    let mut gk = vec![T::zero(); t_len * d];
    let mut gvv = vec![T::zero(); t_len * d];
    let mut gb = vec![T::zero(); spec.heads * width];
    let mut gs = Vec::new();
    for h in 0..spec.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t_len {
            let (lo, hi) = spec.ranges[i];
            let p = &probs[h * total + offsets[i]..h * total + offsets[i] + (hi - lo)];
            let gi = &g[i * d + cols.start..i * d + cols.end];
            gs.clear();
            let mut s = T::zero();
            for (jj, j) in (lo..hi).enumerate() {
                let gp = dot(gi, &vv[j * d + cols.start..j * d + cols.end]);
                gs.push(gp);
                s = s + p[jj] * gp;
                let dst = &mut gvv[j * d + cols.start..j * d + cols.end];
                for (dv, &gv) in dst.iter_mut().zip(gi) {
                    *dv = *dv + p[jj] * gv;
                }
            }
            for (jj, j) in (lo..hi).enumerate() {
                let gscore = p[jj] * (gs[jj] - s);
                if gscore == T::zero() {
                    continue;
                }
                let gsc = gscore * scale;
                for c in cols.clone() {
                    gq[i * d + c] = gq[i * d + c] + gsc * kv[j * d + c];
                    gk[j * d + c] = gk[j * d + c] + gsc * qv[i * d + c];
                }
                let rel = (j as isize - i as isize).clamp(-(spec.bias_cap as isize), spec.bias_cap as isize);
                let bi = h * width + (rel + spec.bias_cap as isize) as usize;
                gb[bi] = gb[bi] + gscore;
            }
        }
    }
    let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
    acc(nodes, grads, q, |x| add(x, &gq));
    acc(nodes, grads, k, |x| add(x, &gk));
    acc(nodes, grads, v, |x| add(x, &gvv));
    if let Some(b) = bias {
        acc(nodes, grads, b, |x| add(x, &gb));
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|t| t.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|t| t.cols())
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.with_value(|t| t.data()[0])
    }

    /// Constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'g, T> {
        self.g.constant(self.value())
    }

    fn unary(&self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var<'g, T> {
        let nodes = self.g.nodes.borrow();
        let out = f(&nodes[self.id].value);
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.g.push(out, op, rg)
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'g, T>> {
        let nodes = self.g.nodes.borrow();
        let out = f(&nodes[self.id].value, &nodes[other.id].value)?;
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        Ok(self.g.push(out, op, rg))
    }

    fn zip(&self, other: Var<'g, T>, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(mismatch(name, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            let (m, k) = require_matrix("matmul", a)?;
            let (k2, n) = require_matrix("matmul", b)?;
            if k != k2 {
                return Err(mismatch("matmul", a, b));
            }
            Tensor::matrix(m, n, matmul_kernel(a.data(), b.data(), m, k, n))
        })
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, Op::Add(self.id, other.id), "add", |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, Op::Sub(self.id, other.id), "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, Op::Mul(self.id, other.id), "mul", |x, y| x * y)
    }

    fn row_broadcast(&self, row: Var<'g, T>, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        self.binary(row, op, |a, b| {
            let c = a.cols();
            if b.shape().len() != 1 || b.numel() != c || a.shape().len() != 2 {
                return Err(mismatch(name, a, b));
            }
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// `[m, n] + [n]`, broadcasting over rows.
    pub fn add_row(&self, row: Var<'g, T>) -> Result<Var<'g, T>> {
        self.row_broadcast(row, Op::AddRow(self.id, row.id), "add_row", |x, y| x + y)
    }

    /// `[m, n] * [n]`, broadcasting over rows.
    pub fn mul_row(&self, row: Var<'g, T>) -> Result<Var<'g, T>> {
        self.row_broadcast(row, Op::MulRow(self.id, row.id), "mul_row", |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let c = T::from_f64(c);
        self.unary(Op::Scale(self.id, c), |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * c).collect()).unwrap()
        })
    }

    fn map(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        self.unary(op, |a| Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).unwrap())
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Var<'g, T> {
        self.map(Op::Swish(self.id), |x| x * sigmoid(x))
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.map(Op::Exp(self.id), |x| x.exp())
    }

    pub fn log(&self) -> Var<'g, T> {
        self.map(Op::Log(self.id), |x| x.ln())
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.mul(*self)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self) -> Var<'g, T> {
        self.unary(Op::Softmax(self.id), |a| {
            let c = a.cols();
            let mut out = vec![T::zero(); a.numel()];
            for (r, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
                softmax_row(r, o);
            }
            Tensor::new(a.shape().to_vec(), out).unwrap()
        })
    }

    /// Row-wise log-softmax, stabilized by the row maximum.
    pub fn log_softmax(&self) -> Var<'g, T> {
        self.unary(Op::LogSoftmax(self.id), |a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(a.numel());
            for r in a.data().chunks(c) {
                let m = r.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                out.extend(r.iter().map(|&x| x - lse));
            }
            Tensor::new(a.shape().to_vec(), out).unwrap()
        })
    }

    /// Normalizes each row, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let nodes = self.g.nodes.borrow();
        let x = &nodes[self.id].value;
        let gm = &nodes[gamma.id].value;
        let bt = &nodes[beta.id].value;
        let (m, c) = require_matrix("layer_norm", x)?;
        if gm.numel() != c || gm.shape().len() != 1 {
            return Err(mismatch("layer_norm", x, gm));
        }
        if bt.numel() != c || bt.shape().len() != 1 {
            return Err(mismatch("layer_norm", x, bt));
        }
        let cf = T::from_f64(c as f64);
        let eps = T::from_f64(eps);
        let mut xhat = Vec::with_capacity(m * c);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * c);
        for r in x.data().chunks(c) {
            let mean = r.iter().copied().sum::<T>() / cf;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in r.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gm.data()[j] + bt.data()[j]);
            }
        }
        let rg = nodes[self.id].requires_grad || nodes[gamma.id].requires_grad || nodes[beta.id].requires_grad;
        drop(nodes);
        Ok(self.g.push(
            Tensor::matrix(m, c, out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel 1-D convolution over time with zero "same" padding.
    /// `self` is `[T, C]`, `kernel` is `[K, C]` with odd `K`.
    pub fn depthwise_conv1d(&self, kernel: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(kernel, Op::DepthwiseConv { x: self.id, w: kernel.id }, |x, w| {
            let (t_len, c) = require_matrix("depthwise_conv1d", x)?;
            let (k, c2) = require_matrix("depthwise_conv1d", w)?;
            if c != c2 || k % 2 == 0 {
                return Err(mismatch("depthwise_conv1d", x, w));
            }
            let pad = k / 2;
            let mut out = vec![T::zero(); t_len * c];
            for t in 0..t_len {
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        out[t * c + ch] = out[t * c + ch] + w.data()[kk * c + ch] * x.data()[src * c + ch];
                    }
                }
            }
            Tensor::matrix(t_len, c, out)
        })
    }

    /// Fused multi-head attention over per-row key windows with an optional
    /// relative-position bias table `[heads, 2 * cap + 1]`.
    pub fn attention(
        &self,
        k: Var<'g, T>,
        v: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: &AttentionSpec,
    ) -> Result<Var<'g, T>> {
        let nodes = self.g.nodes.borrow();
        let qv = &nodes[self.id].value;
        let kv = &nodes[k.id].value;
        let vv = &nodes[v.id].value;
        let (t_len, d) = require_matrix("attention", qv)?;
        if kv.shape() != qv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        if vv.shape() != qv.shape() {
            return Err(mismatch("attention", qv, vv));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(TensorError::InvalidShape {
                op: "attention",
                shape: qv.shape().to_vec(),
                reason: format!("model dim not divisible by {} heads", spec.heads),
            });
        }
        if spec.ranges.len() != t_len {
            return Err(TensorError::InvalidShape {
                op: "attention",
                shape: qv.shape().to_vec(),
                reason: format!("{} key windows for {} rows", spec.ranges.len(), t_len),
            });
        }
        let width = 2 * spec.bias_cap + 1;
        if let Some(b) = bias {
            let bv = &nodes[b.id].value;
            if bv.shape() != [spec.heads, width] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention bias",
                    lhs: bv.shape().to_vec(),
                    rhs: vec![spec.heads, width],
                });
            }
        }
        for &(lo, hi) in &spec.ranges {
            if lo >= hi || hi > t_len {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention window",
                    index: hi,
                    limit: t_len,
                });
            }
        }
        let dh = d / spec.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(t_len + 1);
        offsets.push(0);
        for &(lo, hi) in &spec.ranges {
            offsets.push(offsets.last().unwrap() + (hi - lo));
        }
        let total = offsets[t_len];
        let mut probs = vec![T::zero(); spec.heads * total];
        let mut out = vec![T::zero(); t_len * d];
        let (q, kd, vd) = (qv.data(), kv.data(), vv.data());
        let bias_data = bias.map(|b| nodes[b.id].value.data().to_vec());
        let mut scores = Vec::new();
        for h in 0..spec.heads {
            let c0 = h * dh;
            for i in 0..t_len {
                let (lo, hi) = spec.ranges[i];
                scores.clear();
                let qi = &q[i * d + c0..i * d + c0 + dh];
                for j in lo..hi {
                    let mut s = dot(qi, &kd[j * d + c0..j * d + c0 + dh]) * scale;
                    if let Some(bd) = &bias_data {
                        let rel = (j as isize - i as isize).clamp(-(spec.bias_cap as isize), spec.bias_cap as isize);
                        s = s + bd[h * width + (rel + spec.bias_cap as isize) as usize];
                    }
                    scores.push(s);
                }
                let p = &mut probs[h * total + offsets[i]..h * total + offsets[i + 1]];
                softmax_row(&scores, p);
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for (jj, j) in (lo..hi).enumerate() {
                    let pj = p[jj];
                    for (ov, &vj) in o.iter_mut().zip(&vd[j * d + c0..j * d + c0 + dh]) {
                        *ov = *ov + pj * vj;
                    }
                }
            }
        }
        let rg = nodes[self.id].requires_grad
            || nodes[k.id].requires_grad
            || nodes[v.id].requires_grad
            || bias.is_some_and(|b| nodes[b.id].requires_grad);
        drop(nodes);
        Ok(self.g.push(
            Tensor::matrix(t_len, d, out)?,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                bias: bias.map(|b| b.id),
                spec: spec.clone(),
                offsets,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'g, T> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.data().iter().copied().sum()))
    }

    pub fn mean(&self) -> Var<'g, T> {
        self.unary(Op::Mean(self.id), |a| {
            let n = T::from_f64(a.numel() as f64);
            Tensor::scalar(a.data().iter().copied().sum::<T>() / n)
        })
    }

    /// `sum_i weights[i] * x[i]`; a 0/1 weight vector gives a masked sum.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Var<'g, T>> {
        let n = self.with_value(|t| t.numel());
        if weights.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(),
                rhs: vec![weights.len()],
            });
        }
        let w: Vec<T> = weights.iter().map(|&x| T::from_f64(x)).collect();
        let wc = w.clone();
        Ok(self.unary(Op::WeightedSum(self.id, w), move |a| {
            Tensor::scalar(a.data().iter().zip(&wc).fold(T::zero(), |s, (&x, &wi)| s + x * wi))
        }))
    }

    /// Embedding lookup: rows of `self` selected by `idx`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g, T>> {
        let (rows, c) = self.with_value(|t| (t.rows(), t.cols()));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                limit: rows,
            });
        }
        Ok(self.unary(
            Op::GatherRows {
                table: self.id,
                idx: idx.to_vec(),
            },
            |a| {
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    out.extend_from_slice(a.row(i));
                }
                Tensor::matrix(idx.len(), c, out).unwrap()
            },
        ))
    }

    /// One element per row: `out[r] = self[r, idx[r]]`.
    pub fn pick_cols(&self, idx: &[usize]) -> Result<Var<'g, T>> {
        let (rows, c) = self.with_value(|t| (t.rows(), t.cols()));
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick_cols",
                lhs: self.shape(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "pick_cols",
                index: bad,
                limit: c,
            });
        }
        Ok(self.unary(
            Op::PickCols {
                x: self.id,
                idx: idx.to_vec(),
            },
            |a| Tensor::vector(idx.iter().enumerate().map(|(r, &j)| a.at(r, j)).collect()),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let rows = shape.first().copied().unwrap_or(0);
        if start > end || end > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                limit: rows,
            });
        }
        Ok(self.unary(Op::SliceRows { x: self.id, start }, |a| {
            let c = a.cols();
            let mut s = shape.clone();
            s[0] = end - start;
            Tensor::new(s, a.data()[start * c..end * c].to_vec()).unwrap()
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let n = self.with_value(|t| t.numel());
        if shape.iter().product::<usize>() != n {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.unary(Op::Reshape(self.id), |a| a.clone().reshape(shape.to_vec()).unwrap()))
    }

    /// Each row repeated `factor` times in order.
    pub fn repeat_rows(&self, factor: usize) -> Result<Var<'g, T>> {
        if factor == 0 {
            return Err(TensorError::InvalidShape {
                op: "repeat_rows",
                shape: self.shape(),
                reason: "factor must be at least 1".into(),
            });
        }
        Ok(self.unary(Op::RepeatRows(self.id, factor), |a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(a.numel() * factor);
            for r in a.data().chunks(c) {
                for _ in 0..factor {
                    out.extend_from_slice(r);
                }
            }
            Tensor::matrix(a.rows() * factor, c, out).unwrap()
        }))
    }

    /// Linear interpolation along rows to `len` rows; endpoints are aligned.
    pub fn interpolate_rows(&self, len: usize) -> Result<Var<'g, T>> {
        let rows = self.rows();
        if rows == 0 || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "interpolate_rows",
                shape: self.shape(),
                reason: format!("cannot interpolate {rows} rows to {len}"),
            });
        }
        let taps: Vec<(usize, T, usize, T)> = (0..len)
            .map(|i| {
                if rows == 1 || len == 1 {
                    return (0, T::one(), 0, T::zero());
                }
                let pos = i as f64 * (rows - 1) as f64 / (len - 1) as f64;
                let i0 = (pos.floor() as usize).min(rows - 1);
                let i1 = (i0 + 1).min(rows - 1);
                let w1 = pos - i0 as f64;
                (i0, T::from_f64(1.0 - w1), i1, T::from_f64(w1))
            })
            .collect();
        let tc = taps.clone();
        Ok(self.unary(Op::Interp { x: self.id, taps }, move |a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(len * c);
            for &(i0, w0, i1, w1) in &tc {
                for j in 0..c {
                    out.push(w0 * a.at(i0, j) + w1 * a.at(i1, j));
                }
            }
            Tensor::matrix(len, c, out).unwrap()
        }))
    }

    /// Row `r` passes through when `keep[r]`, otherwise it is replaced by the
    /// matching row of `fill` (which carries no gradient).
    pub fn keep_rows(&self, keep: &[bool], fill: &Tensor<T>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if keep.len() != self.rows() || fill.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "keep_rows",
                lhs: shape,
                rhs: fill.shape().to_vec(),
            });
        }
        Ok(self.unary(
            Op::KeepRows {
                x: self.id,
                keep: keep.to_vec(),
            },
            |a| {
                let c = a.cols();
                let mut out = a.data().to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        out[r * c..(r + 1) * c].copy_from_slice(fill.row(r));
                    }
                }
                Tensor::new(shape.clone(), out).unwrap()
            },
        ))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let g = parts
            .first()
            .ok_or_else(|| TensorError::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                reason: "no inputs".into(),
            })?
            .g;
        let nodes = g.nodes.borrow();
        let c = nodes[parts[0].id].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.cols() != c || v.shape().len() != 2 {
                return Err(mismatch("concat_rows", &nodes[parts[0].id].value, v));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
            rg |= nodes[p.id].requires_grad;
        }
        drop(nodes);
        Ok(g.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }
}
