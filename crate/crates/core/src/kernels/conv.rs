//! 2-D cross-correlation with zero padding, grouped, via im2col + gemm.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2, groups: channels }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout == self.groups
    }
}

fn geometry<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>, spec: Conv2dSpec) -> Result<Geometry> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(shape_err!("conv2d expects 4-d input and weight, got {:?} and {:?}", x.shape(), w.shape()));
    }
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin_g, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let g = spec.groups;
    if g == 0 || spec.stride == 0 {
        return Err(shape_err!("conv2d groups and stride must be positive"));
    }
    if cin % g != 0 || cout % g != 0 {
        return Err(shape_err!("channels {}→{} not divisible by groups {}", cin, cout, g));
    }
    if cin / g != cin_g {
        return Err(shape_err!("weight expects {} input channels per group, input gives {}", cin_g, cin / g));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(shape_err!("bias shape {:?} does not match {} output channels", b.shape(), cout));
        }
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(shape_err!("kernel {}x{} larger than padded input {}x{}", kh, kw, h, wd));
    }
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    Ok(Geometry { n, cin, h, w: wd, cout, kh, kw, ho, wo, groups: g, stride: spec.stride, pad: spec.padding })
}

/// Output positions `o ∈ [lo, hi)` whose input index `o·stride + k − pad` lies in `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one group of one sample into `[cin_g·kh·kw, ho·wo]`.
fn im2col<F: Scalar>(g: &Geometry, x: &[F], col: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..xlo].fill(F::zero());
                    out_row[xhi..].fill(F::zero());
                    if g.stride == 1 {
                        let s0 = xlo + kx - g.pad;
                        out_row[xlo..xhi].copy_from_slice(&src[s0..s0 + xhi - xlo]);
                    } else {
                        for (ox, o) in out_row[xlo..xhi].iter_mut().enumerate() {
                            *o = src[(ox + xlo) * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into the image gradient.
fn col2im<F: Scalar>(g: &Geometry, col: &[F], gx: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    spec: Conv2dSpec,
) -> Result<Tensor<F>> {
    let g = geometry(x, w, b, spec)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    if g.is_depthwise() {
        depthwise_forward(&g, x.data(), w.data(), out.data_mut());
    } else {
        let hw_in = g.h * g.w;
        let hw_out = g.ho * g.wo;
        let krows = g.col_rows();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); krows * hw_out] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x.data()[(n * g.cin + grp * g.cin_g()) * hw_in..(n * g.cin + (grp + 1) * g.cin_g()) * hw_in];
                let wm = MatRef::new(&w.data()[grp * g.cout_g() * krows..(grp + 1) * g.cout_g() * krows], g.cout_g(), krows);
                let dst = &mut out.data_mut()
                    [(n * g.cout + grp * g.cout_g()) * hw_out..(n * g.cout + (grp + 1) * g.cout_g()) * hw_out];
                if g.is_pointwise() {
                    gemm(F::one(), wm, MatRef::new(xs, krows, hw_out), F::zero(), dst);
                } else {
                    im2col(&g, xs, &mut col);
                    gemm(F::one(), wm, MatRef::new(&col, krows, hw_out), F::zero(), dst);
                }
            }
        }
    }
    if let Some(b) = b {
        let hw_out = g.ho * g.wo;
        for (i, chunk) in out.data_mut().chunks_mut(hw_out).enumerate() {
            let bias = b.data()[i % g.cout];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

fn depthwise_forward<F: Scalar>(g: &Geometry, x: &[F], w: &[F], out: &mut [F]) {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cout {
            let plane = &x[(n * g.cin + c) * hw_in..(n * g.cin + c + 1) * hw_in];
            let k = &w[c * kk..(c + 1) * kk];
            let dst = &mut out[(n * g.cout + c) * hw_out..(n * g.cout + c + 1) * hw_out];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[ky * g.kw + kx];
                    let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let s0 = xlo + kx - g.pad;
                            for (d, &v) in drow[xlo..xhi].iter_mut().zip(&src[s0..s0 + xhi - xlo]) {
                                *d += wv * v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvGrads<F> {
    pub x: Option<Tensor<F>>,
    pub w: Option<Tensor<F>>,
    pub b: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    spec: Conv2dSpec,
    gout: &Tensor<F>,
    need: [bool; 3],
) -> Result<ConvGrads<F>> {
    let g = geometry(x, w, None, spec)?;
    if gout.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(shape_err!("conv2d output gradient shape {:?}", gout.shape()));
    }
    let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape()));
    let gb = (has_bias && need[2]).then(|| {
        let mut gb = Tensor::zeros(&[g.cout]);
        for (i, chunk) in gout.data().chunks(hw_out).enumerate() {
            gb.data_mut()[i % g.cout] += chunk.iter().copied().sum::<F>();
        }
        gb
    });
    if g.is_depthwise() {
        depthwise_backward(&g, x.data(), w.data(), gout.data(), gx.as_mut(), gw.as_mut());
        return Ok(ConvGrads { x: gx, w: gw, b: gb });
    }
    let krows = g.col_rows();
    let mut col = vec![F::zero(); if g.is_pointwise() { 0 } else { krows * hw_out }];
    let mut gcol = vec![F::zero(); if gx.is_some() && !g.is_pointwise() { krows * hw_out } else { 0 }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xr = (n * g.cin + grp * g.cin_g()) * hw_in..(n * g.cin + (grp + 1) * g.cin_g()) * hw_in;
            let wr = grp * g.cout_g() * krows..(grp + 1) * g.cout_g() * krows;
            let go = MatRef::new(
                &gout.data()[(n * g.cout + grp * g.cout_g()) * hw_out..(n * g.cout + (grp + 1) * g.cout_g()) * hw_out],
                g.cout_g(),
                hw_out,
            );
            if let Some(gw) = gw.as_mut() {
                let colm = if g.is_pointwise() {
                    MatRef::new(&x.data()[xr.clone()], krows, hw_out)
                } else {
                    im2col(&g, &x.data()[xr.clone()], &mut col);
                    MatRef::new(&col, krows, hw_out)
                };
                gemm(F::one(), go, colm.t(), F::one(), &mut gw.data_mut()[wr.clone()]);
            }
            if let Some(gx) = gx.as_mut() {
                let wm = MatRef::new(&w.data()[wr], g.cout_g(), krows);
                if g.is_pointwise() {
                    gemm(F::one(), wm.t(), go, F::one(), &mut gx.data_mut()[xr]);
                } else {
                    gemm(F::one(), wm.t(), go, F::zero(), &mut gcol);
                    col2im(&g, &gcol, &mut gx.data_mut()[xr]);
                }
            }
        }
    }
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

fn depthwise_backward<F: Scalar>(
    g: &Geometry,
    x: &[F],
    w: &[F],
    gout: &[F],
    mut gx: Option<&mut Tensor<F>>,
    mut gw: Option<&mut Tensor<F>>,
) {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cout {
            let xo = (n * g.cin + c) * hw_in;
            let go = &gout[(n * g.cout + c) * hw_out..(n * g.cout + c + 1) * hw_out];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[c * kk + ky * g.kw + kx];
                    let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    let mut acc = F::zero();
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row0 = xo + iy as usize * g.w;
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        for ox in xlo..xhi {
                            acc += grow[ox] * x[row0 + ox * g.stride + kx - g.pad];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gxd = gx.data_mut();
                            for ox in xlo..xhi {
                                gxd[row0 + ox * g.stride + kx - g.pad] += grow[ox] * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw.data_mut()[c * kk + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Trainable scalars and multiply–add FLOPs (2 per MAC) of one convolution.
pub fn conv2d_cost(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool, h: usize, w: usize) -> (u64, u64) {
    let weights = (cout * (cin / groups) * kernel * kernel) as u64;
    let params = weights + if bias { cout as u64 } else { 0 };
    let flops = 2 * weights * (h * w) as u64;
    (params, flops)
}
