//! Bilinear upsampling and space/depth rearrangements on `[N, C, H, W]`.

use crate::error::{shape_err, CaimError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps for one output axis under align-corners=false sampling.
#[derive(Clone, Debug)]
struct Taps<F> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<F>,
}

fn taps<F: Scalar>(in_len: usize, out_len: usize) -> Taps<F> {
    let scale = in_len as f64 / out_len as f64;
    let mut t = Taps { lo: Vec::new(), hi: Vec::new(), w_hi: Vec::new() };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_hi.push(F::from_f64_lossy(src - lo as f64));
    }
    t
}

fn check4<F: Scalar>(x: &Tensor<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(shape_err!("{} expects [N, C, H, W], got {:?}", what, x.shape()));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

pub fn bilinear_upsample<F: Scalar>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = check4(x, "bilinear_upsample")?;
    if out_h < h || out_w < w {
        return Err(CaimError::Config(format!("bilinear_upsample cannot shrink {}x{} to {}x{}", h, w, out_h, out_w)));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps::<F>(h, out_h), taps::<F>(w, out_w));
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(out_h * out_w)) {
        for oy in 0..out_h {
            let (wy1, r0, r1) = (ty.w_hi[oy], ty.lo[oy] * w, ty.hi[oy] * w);
            let wy0 = F::one() - wy1;
            for ox in 0..out_w {
                let (wx1, c0, c1) = (tx.w_hi[ox], tx.lo[ox], tx.hi[ox]);
                let wx0 = F::one() - wx1;
                dst[oy * out_w + ox] = wy0 * (wx0 * src[r0 + c0] + wx1 * src[r0 + c1])
                    + wy1 * (wx0 * src[r1 + c0] + wx1 * src[r1 + c1]);
            }
        }
    }
    Ok(y)
}

pub fn bilinear_upsample_backward<F: Scalar>(gy: &Tensor<F>, in_h: usize, in_w: usize) -> Tensor<F> {
    let (n, c, out_h, out_w) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    if out_h == in_h && out_w == in_w {
        return gy.clone();
    }
    let (ty, tx) = (taps::<F>(in_h, out_h), taps::<F>(in_w, out_w));
    let mut gx = Tensor::zeros(&[n, c, in_h, in_w]);
    for (src, dst) in gy.data().chunks(out_h * out_w).zip(gx.data_mut().chunks_mut(in_h * in_w)) {
        for oy in 0..out_h {
            let (wy1, r0, r1) = (ty.w_hi[oy], ty.lo[oy] * in_w, ty.hi[oy] * in_w);
            let wy0 = F::one() - wy1;
            for ox in 0..out_w {
                let (wx1, c0, c1) = (tx.w_hi[ox], tx.lo[ox], tx.hi[ox]);
                let wx0 = F::one() - wx1;
                let g = src[oy * out_w + ox];
                dst[r0 + c0] += g * wy0 * wx0;
                dst[r0 + c1] += g * wy0 * wx1;
                dst[r1 + c0] += g * wy1 * wx0;
                dst[r1 + c1] += g * wy1 * wx1;
            }
        }
    }
    gx
}

/// `[N, C, H, W] → [N, s²·C, H/s, W/s]`; output channel `b·C + c` holds input channel `c`
/// at sub-pixel offset `b = dy·s + dx`.
pub fn space_to_depth<F: Scalar>(x: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = check4(x, "space_to_depth")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err!("space_to_depth: {}x{} not divisible by {}", h, w, s));
    }
    let (ho, wo) = (h / s, w / s);
    let mut y = Tensor::zeros(&[n, s * s * c, ho, wo]);
    let (xd, yd) = (x.data(), y.data_mut());
    for ni in 0..n {
        for dy in 0..s {
            for dx in 0..s {
                let b = dy * s + dx;
                for ci in 0..c {
                    let dst = ((ni * s * s + b) * c + ci) * ho * wo;
                    let src = (ni * c + ci) * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            yd[dst + i * wo + j] = xd[src + (i * s + dy) * w + j * s + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<F: Scalar>(y: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (n, cs, ho, wo) = check4(y, "depth_to_space")?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(shape_err!("depth_to_space: {} channels not divisible by {}", cs, s * s));
    }
    let c = cs / (s * s);
    let (h, w) = (ho * s, wo * s);
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let (yd, xd) = (y.data(), x.data_mut());
    for ni in 0..n {
        for dy in 0..s {
            for dx in 0..s {
                let b = dy * s + dx;
                for ci in 0..c {
                    let src = ((ni * s * s + b) * c + ci) * ho * wo;
                    let dst = (ni * c + ci) * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            xd[dst + (i * s + dy) * w + j * s + dx] = yd[src + i * wo + j];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_upsample_grid() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        // Source coordinate per output index: (o + 0.5)/2 − 0.5 clamped at 0 → 0, .25, .75, 1(clamped 1.25).
        let axis = [(0usize, 0.0), (0, 0.25), (0, 0.75), (1, 0.0)];
        let at = |r: usize, c: usize| x.at(&[0, 0, r, c]);
        for (oy, &(ry, wy)) in axis.iter().enumerate() {
            for (ox, &(rx, wx)) in axis.iter().enumerate() {
                let (ry1, rx1) = ((ry + 1).min(1), (rx + 1).min(1));
                let want = (1.0 - wy) * ((1.0 - wx) * at(ry, rx) + wx * at(ry, rx1))
                    + wy * ((1.0 - wx) * at(ry1, rx) + wx * at(ry1, rx1));
                assert!((y.at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
            }
        }
        assert_eq!(
            &y.data()[..4],
            &[1.0, 1.25, 1.75, 2.0],
        );
    }

    #[test]
    fn constant_and_identity() {
        let x = Tensor::<f64>::full(&[2, 3, 3, 5], 0.25);
        let y = bilinear_upsample(&x, 12, 20).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64);
        assert_eq!(bilinear_upsample(&x, 3, 3).unwrap(), x);
        assert!(matches!(bilinear_upsample(&x, 2, 3), Err(CaimError::Config(_))));
    }

    #[test]
    fn space_to_depth_layout() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(space_to_depth(&x, 1).unwrap(), x);
        assert!(space_to_depth(&Tensor::<f64>::zeros(&[1, 1, 3, 4]), 2).is_err());
    }
}
