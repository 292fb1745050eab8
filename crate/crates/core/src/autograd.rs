//! Tape-based reverse-mode differentiation over coarse tensor operators.
//!
//! Every operator records its inputs (and whatever it needs from the forward pass)
//! on a [`Tape`]; [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients for every node that depends on a trainable leaf.

use crate::error::{shape_err, CaimError, Result};
use crate::kernels::activation::{self, softmax_backward};
use crate::kernels::attention::{attention_backward, attention_forward};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use crate::kernels::lstm::{lstm_backward, lstm_forward, LstmCache};
use crate::kernels::norm::{
    group_norm_backward, group_norm_forward, layer_norm_backward, layer_norm_forward, NormStats,
};
use crate::kernels::resample::{
    bilinear_upsample, bilinear_upsample_backward, depth_to_space, space_to_depth,
};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{inverse_permutation, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SelectAxis { x: Var, axis: usize, picks: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<F> },
    Softmax { x: Var, axis: usize },
    Attention { qkv: Var, heads: usize, probs: Tensor<F> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, cache: LstmCache<F> },
    Upsample { x: Var, in_h: usize, in_w: usize },
    SpaceToDepth { x: Var, s: usize },
    DepthToSpace { x: Var, s: usize },
    MinMaxNorm { x: Var, axis: usize, eps: F, lo: Vec<usize>, hi: Vec<usize> },
    CenterDiff(Var),
    Focal { probs: Var, labels: Vec<usize>, weights: Vec<F>, gamma: F, eps: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {} out of range for shape {:?}", axis, shape));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is kept by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let y = self.value(a).map(|x| x * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.abs());
        self.push(y, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = activation::relu(self.value(a));
        self.push(y, Op::Relu(a), &[a])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(a).permute(perm)?;
        Ok(self.push(y, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(x.shape(), axis)?;
        if start + len > x.dim(axis) {
            return Err(shape_err!("narrow {}..{} exceeds axis {} of {:?}", start, start + len, axis, x.shape()));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::Narrow { x: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?).shape().to_vec();
        check_axis(&first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err!("concat shapes {:?} and {:?} differ off axis {}", first, s, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let x = self.value(v);
                let n = x.dim(axis);
                data.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    fn reduce_select(&mut self, a: Var, axis: usize, take_max: bool) -> Result<Var> {
        let x = self.value(a);
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut picks = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = x.data()[o * n * inner + i];
                for k in 1..n {
                    let v = x.data()[(o * n + k) * inner + i];
                    // strict comparison: ties keep the earliest index
                    if (take_max && v > bv) || (!take_max && v < bv) {
                        bv = v;
                        best = k;
                    }
                }
                vals.push(bv);
                picks.push(best);
            }
        }
        let y = Tensor::from_vec(&removed_axis(x.shape(), axis), vals)?;
        Ok(self.push(y, Op::SelectAxis { x: a, axis, picks }, &[a]))
    }

    /// Minimum along `axis` (axis removed); the gradient flows to the earliest minimiser.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_select(a, axis, false)
    }

    /// Maximum along `axis` (axis removed); the gradient flows to the earliest maximiser.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_select(a, axis, true)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let inv = F::one() / F::from_usize(n).unwrap();
        let mut vals = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in vals[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        vals.iter_mut().for_each(|v| *v *= inv);
        let y = Tensor::from_vec(&removed_axis(x.shape(), axis), vals)?;
        Ok(self.push(y, Op::MeanAxis { x: a, axis }, &[a]))
    }

    /// `y = x·Wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let input = *xv.shape().last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if wv.rank() != 2 || wv.dim(1) != input {
            return Err(shape_err!("linear weight {:?} does not accept width {}", wv.shape(), input));
        }
        let out = wv.dim(0);
        let rows = xv.numel() / input.max(1);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let mut y = Tensor::zeros(&shape);
        gemm(F::one(), MatRef::new(xv.data(), rows, input), MatRef::new(wv.data(), out, input).t(), F::zero(), y.data_mut());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out] {
                return Err(shape_err!("linear bias {:?} for width {}", bv.shape(), out));
            }
            for row in y.data_mut().chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (y, stats) = group_norm_forward(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (y, stats) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let y = activation::softmax(self.value(x), axis);
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    /// Self-attention core on a packed `[R, L, 3C]` projection; see [`crate::kernels::attention`].
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (y, probs) = attention_forward(self.value(qkv), heads)?;
        Ok(self.push(y, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Attention weights `[R, heads, L, L]` recorded by an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (y, cache) = lstm_forward(self.value(x), self.value(w_ih), self.value(w_hh), self.value(b))?;
        Ok(self.push(y, Op::Lstm { x, w_ih, w_hh, b, cache }, &[x, w_ih, w_hh, b]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let y = bilinear_upsample(xv, out_h, out_w)?;
        let (in_h, in_w) = (xv.dim(2), xv.dim(3));
        Ok(self.push(y, Op::Upsample { x, in_h, in_w }, &[x]))
    }

    pub fn space_to_depth(&mut self, x: Var, s: usize) -> Result<Var> {
        let y = space_to_depth(self.value(x), s)?;
        Ok(self.push(y, Op::SpaceToDepth { x, s }, &[x]))
    }

    pub fn depth_to_space(&mut self, x: Var, s: usize) -> Result<Var> {
        let y = depth_to_space(self.value(x), s)?;
        Ok(self.push(y, Op::DepthToSpace { x, s }, &[x]))
    }

    /// Min–max scaling to `[0, 1]` along `axis`: `(x − min) / (max − min + eps)`.
    /// A constant slice maps to 0.
    pub fn min_max_normalize(&mut self, x: Var, axis: usize, eps: F) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut y = Tensor::zeros(xv.shape());
        let (mut lo, mut hi) = (Vec::with_capacity(outer * inner), Vec::with_capacity(outer * inner));
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let (mut kl, mut kh) = (0, 0);
                for k in 1..n {
                    if xv.data()[at(k)] < xv.data()[at(kl)] {
                        kl = k;
                    }
                    if xv.data()[at(k)] > xv.data()[at(kh)] {
                        kh = k;
                    }
                }
                let (mn, mx) = (xv.data()[at(kl)], xv.data()[at(kh)]);
                let den = mx - mn + eps;
                for k in 0..n {
                    y.data_mut()[at(k)] = (xv.data()[at(k)] - mn) / den;
                }
                lo.push(kl);
                hi.push(kh);
            }
        }
        Ok(self.push(y, Op::MinMaxNorm { x, axis, eps, lo, hi }, &[x]))
    }

    /// Boundary kernel from raw 3×3 weights `[C, 1, 3, 3]`: neighbours copied, centre set to
    /// minus their sum, so that each kernel weighs `(neighbour − centre)` differences.
    pub fn center_difference_kernel(&mut self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        if wv.rank() != 4 || wv.dim(1) != 1 || wv.dim(2) != 3 || wv.dim(3) != 3 {
            return Err(shape_err!("boundary kernel must be [C, 1, 3, 3], got {:?}", wv.shape()));
        }
        let mut k = wv.clone();
        for chunk in k.data_mut().chunks_mut(9) {
            let ring: F = chunk.iter().enumerate().filter(|&(i, _)| i != 4).map(|(_, &v)| v).sum();
            chunk[4] = -ring;
        }
        Ok(self.push(k, Op::CenterDiff(w), &[w]))
    }

    /// Focal weighted cross-entropy on probabilities `[B, K, ...]`:
    /// mean over pixels of `w_y · (1 − p_y)^γ · (−ln(p_y + eps))`.
    pub fn focal_loss(&mut self, probs: Var, labels: &[usize], weights: &[F], gamma: F, eps: F) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() < 2 {
            return Err(shape_err!("focal loss expects [B, K, ...], got {:?}", p.shape()));
        }
        let (b, k) = (p.dim(0), p.dim(1));
        let spatial: usize = p.shape()[2..].iter().product();
        if labels.len() != b * spatial {
            return Err(shape_err!("{} labels for {} pixels", labels.len(), b * spatial));
        }
        if weights.len() != k {
            return Err(shape_err!("{} class weights for {} classes", weights.len(), k));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CaimError::Label(format!("label {} outside 0..{}", bad, k)));
        }
        let mut total = F::zero();
        for (pix, &lab) in labels.iter().enumerate() {
            let (bi, si) = (pix / spatial, pix % spatial);
            let py = p.data()[(bi * k + lab) * spatial + si];
            total += weights[lab] * (F::one() - py).powf(gamma) * -(py + eps).ln();
        }
        let n = F::from_usize(labels.len().max(1)).unwrap();
        let y = Tensor::scalar(total / n);
        Ok(self.push(
            y,
            Op::Focal { probs, labels: labels.to_vec(), weights: weights.to_vec(), gamma, eps },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar node. Gradients are kept for trainable leaves only.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                }
                if self.needs(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::Abs(a) => out.push((
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x > F::zero() {
                        gv
                    } else if x < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                })?,
            )),
            Op::Relu(a) => out.push((*a, g.zip_map(self.value(*a), |gv, x| if x > F::zero() { gv } else { F::zero() })?)),
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a), g.item()))),
            Op::Reshape(a) => out.push((*a, g.clone().reshape(self.shape(*a))?)),
            Op::Permute(a, perm) => out.push((*a, g.permute(&inverse_permutation(perm))?)),
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = g.dim(*axis);
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gx.extend_from_slice(&g.data()[src..src + n * inner]);
                        }
                        out.push((v, Tensor::from_vec(self.shape(v), gx)?));
                    }
                    offset += n;
                }
            }
            Op::SelectAxis { x, axis, picks } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        gx.data_mut()[(o * n + picks[r]) * inner + i] += g.data()[r];
                    }
                }
                out.push((*x, gx));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let inv = F::one() / F::from_usize(n).unwrap();
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut gx.data_mut()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                            *d = s * inv;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out_d, in_d) = (wv.dim(0), wv.dim(1));
                let rows = xv.numel() / in_d.max(1);
                let gm = MatRef::new(g.data(), rows, out_d);
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(F::one(), gm, MatRef::new(wv.data(), out_d, in_d), F::zero(), gx.data_mut());
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(F::one(), gm.t(), MatRef::new(xv.data(), rows, in_d), F::zero(), gw.data_mut());
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[out_d]);
                    for row in g.data().chunks(out_d) {
                        for (d, &s) in gb.data_mut().iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let need = [self.needs(*x), self.needs(*w), b.map(|b| self.needs(b)).unwrap_or(false)];
                let cg = conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *spec, g, need)?;
                if let Some(gx) = cg.x {
                    out.push((*x, gx));
                }
                if let Some(gw) = cg.w {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, cg.b) {
                    out.push((*b, gb));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (gx, gg, gb) = group_norm_backward(self.value(*x), *groups, self.value(*gamma), stats, g);
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (gx, gg, gb) = layer_norm_backward(self.value(*x), self.value(*gamma), stats, g);
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::Softmax { x, axis } => out.push((*x, softmax_backward(&node.value, g, *axis))),
            Op::Attention { qkv, heads, probs } => {
                out.push((*qkv, attention_backward(self.value(*qkv), probs, *heads, g)));
            }
            Op::Lstm { x, w_ih, w_hh, b, cache } => {
                let lg = lstm_backward(self.value(*x), self.value(*w_ih), self.value(*w_hh), &node.value, cache, g);
                out.push((*x, lg.x));
                out.push((*w_ih, lg.w_ih));
                out.push((*w_hh, lg.w_hh));
                out.push((*b, lg.bias));
            }
            Op::Upsample { x, in_h, in_w } => out.push((*x, bilinear_upsample_backward(g, *in_h, *in_w))),
            Op::SpaceToDepth { x, s } => out.push((*x, depth_to_space(g, *s)?)),
            Op::DepthToSpace { x, s } => out.push((*x, space_to_depth(g, *s)?)),
            Op::MinMaxNorm { x, axis, eps, lo, hi } => {
                let xv = self.value(*x);
                let y = &node.value;
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let mut gx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let r = o * inner + i;
                        let den = xv.data()[at(hi[r])] - xv.data()[at(lo[r])] + *eps;
                        let (mut to_lo, mut to_hi) = (F::zero(), F::zero());
                        for k in 0..n {
                            let (gk, yk) = (g.data()[at(k)], y.data()[at(k)]);
                            gx.data_mut()[at(k)] += gk / den;
                            to_lo += gk * (yk - F::one());
                            to_hi -= gk * yk;
                        }
                        gx.data_mut()[at(lo[r])] += to_lo / den;
                        gx.data_mut()[at(hi[r])] += to_hi / den;
                    }
                }
                out.push((*x, gx));
            }
            Op::CenterDiff(w) => {
                let mut gw = g.clone();
                for chunk in gw.data_mut().chunks_mut(9) {
                    let gc = chunk[4];
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v = if i == 4 { F::zero() } else { *v - gc };
                    }
                }
                out.push((*w, gw));
            }
            Op::Focal { probs, labels, weights, gamma, eps } => {
                let p = self.value(*probs);
                let (k, spatial) = (p.dim(1), p.shape()[2..].iter().product::<usize>());
                let scale = g.item() / F::from_usize(labels.len().max(1)).unwrap();
                let mut gp = Tensor::zeros(p.shape());
                let one = F::one();
                for (pix, &lab) in labels.iter().enumerate() {
                    let idx = ((pix / spatial) * k + lab) * spatial + pix % spatial;
                    let py = p.data()[idx];
                    let q = one - py;
                    // d/dp [ (1−p)^γ · (−ln(p+ε)) ]
                    let focal_term = if *gamma == F::zero() {
                        F::zero()
                    } else {
                        *gamma * q.powf(*gamma - one) * (py + *eps).ln()
                    };
                    let d = focal_term - q.powf(*gamma) / (py + *eps);
                    gp.data_mut()[idx] = scale * weights[lab] * d;
                }
                out.push((*probs, gp));
            }
        }
        Ok(out)
    }
}
