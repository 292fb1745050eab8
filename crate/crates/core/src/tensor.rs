//! Contiguous row-major n-dimensional arrays.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!("shape {:?} needs {} values, got {}", shape, numel, data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: F) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Materialised axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for rank {}", perm, rank));
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        if self.numel() == 0 || rank == 0 {
            return Tensor::from_vec(&out_shape, self.data.clone());
        }
        let last = rank - 1;
        if perm[last] == last {
            return Ok(self.permute_runs(perm, &out_shape, &in_strides));
        }
        // The input's contiguous axis moves inward-out: copy as tiled 2-D transposes between
        // input axis `a` (output-contiguous) and input axis `last` (input-contiguous).
        let out_strides = strides_of(&out_shape);
        let inv = inverse_permutation(perm);
        let a = perm[last];
        let (na, sa) = (self.shape[a], in_strides[a]);
        let (nb, db) = (self.shape[last], out_strides[inv[last]]);
        let others: Vec<(usize, usize, usize)> = (0..rank)
            .filter(|&k| k != a && k != last)
            .map(|k| (self.shape[k], in_strides[k], out_strides[inv[k]]))
            .collect();
        let mut out = vec![F::zero(); self.numel()];
        let mut idx = vec![0usize; others.len()];
        let outer: usize = others.iter().map(|o| o.0).product();
        const TILE: usize = 16;
        for _ in 0..outer {
            let src0: usize = idx.iter().zip(&others).map(|(i, o)| i * o.1).sum();
            let dst0: usize = idx.iter().zip(&others).map(|(i, o)| i * o.2).sum();
            for i0 in (0..na).step_by(TILE) {
                for j0 in (0..nb).step_by(TILE) {
                    for j in j0..(j0 + TILE).min(nb) {
                        let d = dst0 + j * db;
                        let sidx = src0 + j;
                        for i in i0..(i0 + TILE).min(na) {
                            out[d + i] = self.data[sidx + i * sa];
                        }
                    }
                }
            }
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < others[ax].0 {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::from_vec(&out_shape, out)
    }

    /// Permutation keeping the innermost axis: contiguous runs are copied whole.
    fn permute_runs(&self, perm: &[usize], out_shape: &[usize], in_strides: &[usize]) -> Self {
        let last = perm.len() - 1;
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let inner = out_shape[last];
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; last];
        let outer: usize = out_shape[..last].iter().product();
        for _ in 0..outer {
            let base: usize = idx.iter().zip(&src_strides[..last]).map(|(i, s)| i * s).sum();
            out.extend_from_slice(&self.data[base..base + inner]);
            for ax in (0..last).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape: out_shape.to_vec(), data: out }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("elementwise shapes differ: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Precision conversion, e.g. `f32` parameters into an `f64` gradient check.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Argmax along `axis`; ties resolve to the lowest index.
    pub fn argmax(&self, axis: usize) -> Vec<usize> {
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * n * inner + i];
                for k in 1..n {
                    let v = self.data[(o * n + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        out
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(product of dims before axis, dim at axis, product of dims after axis)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
