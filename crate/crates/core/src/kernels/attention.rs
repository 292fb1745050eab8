//! Multi-head scaled dot-product self-attention over short per-row sequences.
//!
//! Input is a packed projection `[R, L, 3·C]` laid out as `[q | k | v]`; head `h`
//! owns channels `h·d .. (h+1)·d` of each part, `d = C / heads`.

use crate::error::{CaimError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returns the attended values `[R, L, C]` and attention weights `[R, heads, L, L]`.
pub fn attention_forward<F: Scalar>(qkv: &Tensor<F>, heads: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    if qkv.rank() != 3 || qkv.dim(2) % 3 != 0 {
        return Err(CaimError::Shape(format!("attention expects [R, L, 3C], got {:?}", qkv.shape())));
    }
    let (r, l, c3) = (qkv.dim(0), qkv.dim(1), qkv.dim(2));
    let c = c3 / 3;
    if heads == 0 || c % heads != 0 {
        return Err(CaimError::Config(format!("{} channels not divisible by {} heads", c, heads)));
    }
    let d = c / heads;
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut out = Tensor::zeros(&[r, l, c]);
    let mut probs = Tensor::zeros(&[r, heads, l, l]);
    let src = qkv.data();
    for ri in 0..r {
        let row = &src[ri * l * c3..(ri + 1) * l * c3];
        for h in 0..heads {
            let p = &mut probs.data_mut()[(ri * heads + h) * l * l..(ri * heads + h + 1) * l * l];
            for i in 0..l {
                let q = &row[i * c3 + h * d..i * c3 + (h + 1) * d];
                let mut m = F::neg_infinity();
                for j in 0..l {
                    let k = &row[j * c3 + c + h * d..j * c3 + c + (h + 1) * d];
                    let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    p[i * l + j] = s;
                    m = m.max(s);
                }
                let mut z = F::zero();
                for j in 0..l {
                    let e = (p[i * l + j] - m).exp();
                    p[i * l + j] = e;
                    z += e;
                }
                for j in 0..l {
                    p[i * l + j] /= z;
                }
            }
            let o = &mut out.data_mut()[ri * l * c..(ri + 1) * l * c];
            for i in 0..l {
                for j in 0..l {
                    let pij = p[i * l + j];
                    let v = &row[j * c3 + 2 * c + h * d..j * c3 + 2 * c + (h + 1) * d];
                    for (dst, &vv) in o[i * c + h * d..i * c + (h + 1) * d].iter_mut().zip(v) {
                        *dst += pij * vv;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

pub fn attention_backward<F: Scalar>(qkv: &Tensor<F>, probs: &Tensor<F>, heads: usize, gout: &Tensor<F>) -> Tensor<F> {
    let (r, l, c3) = (qkv.dim(0), qkv.dim(1), qkv.dim(2));
    let c = c3 / 3;
    let d = c / heads;
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut g = Tensor::zeros(qkv.shape());
    let src = qkv.data();
    let mut dp = vec![F::zero(); l * l];
    for ri in 0..r {
        let row = &src[ri * l * c3..(ri + 1) * l * c3];
        let go = &gout.data()[ri * l * c..(ri + 1) * l * c];
        let grow = &mut g.data_mut()[ri * l * c3..(ri + 1) * l * c3];
        for h in 0..heads {
            let p = &probs.data()[(ri * heads + h) * l * l..(ri * heads + h + 1) * l * l];
            // dv_j = Σ_i p_ij go_i ; dp_ij = go_i · v_j
            for i in 0..l {
                let goi = &go[i * c + h * d..i * c + (h + 1) * d];
                for j in 0..l {
                    let v = &row[j * c3 + 2 * c + h * d..j * c3 + 2 * c + (h + 1) * d];
                    dp[i * l + j] = goi.iter().zip(v).map(|(&a, &b)| a * b).sum();
                    let pij = p[i * l + j];
                    for (dv, &gv) in grow[j * c3 + 2 * c + h * d..j * c3 + 2 * c + (h + 1) * d].iter_mut().zip(goi) {
                        *dv += pij * gv;
                    }
                }
            }
            for i in 0..l {
                let dot: F = (0..l).map(|j| p[i * l + j] * dp[i * l + j]).sum();
                for j in 0..l {
                    let ds = p[i * l + j] * (dp[i * l + j] - dot) * scale;
                    for e in 0..d {
                        let (qi, kj) = (i * c3 + h * d + e, j * c3 + c + h * d + e);
                        grow[qi] += ds * row[kj];
                        grow[kj] += ds * row[qi];
                    }
                }
            }
        }
    }
    g
}
