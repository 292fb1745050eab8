//! Group and layer normalisation.

use crate::error::{CaimError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-(sample, group) statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

/// GroupNorm over `[N, C, ...]`; statistics per sample and channel group.
pub fn group_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    groups: usize,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, NormStats<F>)> {
    if x.rank() < 2 {
        return Err(CaimError::Shape(format!("group_norm expects [N, C, ...], got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    if groups == 0 || c % groups != 0 {
        return Err(CaimError::Config(format!("{} channels not divisible into {} groups", c, groups)));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(CaimError::Shape(format!("group_norm affine params must have shape [{}]", c)));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    let cg = c / groups;
    let block = cg * spatial;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    let inv = F::one() / F::from_usize(block).unwrap();
    for (bi, (xs, ys)) in x.data().chunks(block).zip(y.data_mut().chunks_mut(block)).enumerate() {
        let mean = xs.iter().copied().sum::<F>() * inv;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv;
        let rstd = F::one() / (var + eps).sqrt();
        let g0 = (bi % groups) * cg;
        for ch in 0..cg {
            let (ga, be) = (gamma.data()[g0 + ch], beta.data()[g0 + ch]);
            let r = ch * spatial..(ch + 1) * spatial;
            for (yv, &xv) in ys[r.clone()].iter_mut().zip(&xs[r]) {
                *yv = (xv - mean) * rstd * ga + be;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((y, stats))
}

pub fn group_norm_backward<F: Scalar>(
    x: &Tensor<F>,
    groups: usize,
    gamma: &Tensor<F>,
    stats: &NormStats<F>,
    gy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let c = x.dim(1);
    let spatial: usize = x.shape()[2..].iter().product();
    let cg = c / groups;
    let block = cg * spatial;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    let inv = F::one() / F::from_usize(block).unwrap();
    let mut xhat = vec![F::zero(); block];
    let mut dxhat = vec![F::zero(); block];
    for (bi, ((xs, gys), gxs)) in
        x.data().chunks(block).zip(gy.data().chunks(block)).zip(gx.data_mut().chunks_mut(block)).enumerate()
    {
        let (mean, rstd) = (stats.mean[bi], stats.rstd[bi]);
        let g0 = (bi % groups) * cg;
        let (mut m1, mut m2) = (F::zero(), F::zero());
        for ch in 0..cg {
            let ga = gamma.data()[g0 + ch];
            let (mut sg, mut sb) = (F::zero(), F::zero());
            for i in ch * spatial..(ch + 1) * spatial {
                let xh = (xs[i] - mean) * rstd;
                xhat[i] = xh;
                let d = gys[i] * ga;
                dxhat[i] = d;
                m1 += d;
                m2 += d * xh;
                sg += gys[i] * xh;
                sb += gys[i];
            }
            ggamma.data_mut()[g0 + ch] += sg;
            gbeta.data_mut()[g0 + ch] += sb;
        }
        m1 *= inv;
        m2 *= inv;
        for i in 0..block {
            gxs[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    (gx, ggamma, gbeta)
}

/// LayerNorm over the last axis.
pub fn layer_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, NormStats<F>)> {
    let d = *x.shape().last().ok_or_else(|| CaimError::Shape("layer_norm on a scalar".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(CaimError::Shape(format!("layer_norm affine params must have shape [{}]", d)));
    }
    let rows = x.numel() / d.max(1);
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    let inv = F::one() / F::from_usize(d).unwrap();
    for (xs, ys) in x.data().chunks(d).zip(y.data_mut().chunks_mut(d)) {
        let mean = xs.iter().copied().sum::<F>() * inv;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..d {
            ys[i] = (xs[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((y, stats))
}

pub fn layer_norm_backward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    stats: &NormStats<F>,
    gy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = *x.shape().last().unwrap();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[d]);
    let mut gbeta = Tensor::zeros(&[d]);
    let inv = F::one() / F::from_usize(d).unwrap();
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for (r, ((xs, gys), gxs)) in
        x.data().chunks(d).zip(gy.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)).enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let (mut m1, mut m2) = (F::zero(), F::zero());
        for i in 0..d {
            xhat[i] = (xs[i] - mean) * rstd;
            dxhat[i] = gys[i] * gamma.data()[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
            ggamma.data_mut()[i] += gys[i] * xhat[i];
            gbeta.data_mut()[i] += gys[i];
        }
        m1 *= inv;
        m2 *= inv;
        for i in 0..d {
            gxs[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice_stats(y: &Tensor<f64>, n: usize, groups: usize) -> Vec<(f64, f64)> {
        let block = y.numel() / (n * groups);
        y.data()
            .chunks(block)
            .map(|s| {
                let m = s.iter().sum::<f64>() / block as f64;
                let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / block as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn normalises_each_sample_group() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 3], |i| ((i * 37 % 101) as f64).sin() * 3.0 + 1.0);
        let (y, _) = group_norm_forward(&x, 4, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for (m, v) in slice_stats(&y, 2, 4) {
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(&[1, 4, 2, 2], 3.5);
        let (y, _) = group_norm_forward(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_size_independent() {
        let one = Tensor::<f64>::from_fn(&[1, 8, 4, 4], |i| (i as f64 * 0.37).cos());
        let mut eight = Vec::new();
        for _ in 0..8 {
            eight.extend_from_slice(one.data());
        }
        let eight = Tensor::from_vec(&[8, 8, 4, 4], eight).unwrap();
        let gamma = Tensor::from_fn(&[8], |i| 1.0 + i as f64 * 0.1);
        let beta = Tensor::from_fn(&[8], |i| i as f64 * -0.2);
        let (y1, _) = group_norm_forward(&one, 8, &gamma, &beta, 1e-5).unwrap();
        let (y8, _) = group_norm_forward(&eight, 8, &gamma, &beta, 1e-5).unwrap();
        for chunk in y8.data().chunks(y1.numel()) {
            assert_eq!(chunk, y1.data());
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        let err = group_norm_forward(&x, 4, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-5);
        assert!(matches!(err, Err(CaimError::Config(_))));
    }
}
