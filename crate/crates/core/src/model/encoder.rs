//! Step 1: shared two-branch spatial encoder, adjacent differences and boundary enhancement.

use super::layers::ConvNorm;
use super::{norm_groups, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, CaimError, Result};
use crate::kernels::Conv2dSpec;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub branch1: [ConvNorm; 2],
    pub branch2: [ConvNorm; 2],
    pub fuse: ConvNorm,
}

/// Raw depthwise 3×3 kernels, one per channel of the `(T−1)·C` difference stack.
#[derive(Clone, Debug)]
pub struct BoundaryParams {
    pub w: ParamId,
    pub channels: usize,
}

impl EncoderParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let (cin, c) = (cfg.bands, cfg.channels);
        let g = norm_groups(c);
        Ok(EncoderParams {
            branch1: [
                ConvNorm::register(store, "encoder.branch1.0", cin, c, 3, g)?,
                ConvNorm::register(store, "encoder.branch1.1", c, c, 3, g)?,
            ],
            branch2: [
                ConvNorm::register(store, "encoder.branch2.0", cin, c, 1, g)?,
                ConvNorm::register(store, "encoder.branch2.1", c, c, 1, g)?,
            ],
            fuse: ConvNorm::register(store, "encoder.fuse", c, c, 3, g)?,
        })
    }
}

impl BoundaryParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let channels = (cfg.t_len - 1) * cfg.channels;
        let w = store.add_uniform("boundary.weight", &[channels, 1, 3, 3], 1.0 / 3.0)?;
        Ok(BoundaryParams { w, channels })
    }
}

/// `[T, B, ...] → [T·B, ...]`; sample `(t, b)` lands on row `t·B + b`.
pub fn stack_time_batch<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() < 2 {
        return Err(shape_err!("stack needs [T, B, ...], got {:?}", x.shape()));
    }
    let mut shape = vec![x.dim(0) * x.dim(1)];
    shape.extend_from_slice(&x.shape()[2..]);
    x.clone().reshape(&shape)
}

pub fn unstack_time_batch<F: Scalar>(x: &Tensor<F>, t_len: usize) -> Result<Tensor<F>> {
    if x.rank() < 1 || t_len == 0 || x.dim(0) % t_len != 0 {
        return Err(shape_err!("cannot unstack {:?} into {} steps", x.shape(), t_len));
    }
    let mut shape = vec![t_len, x.dim(0) / t_len];
    shape.extend_from_slice(&x.shape()[1..]);
    x.clone().reshape(&shape)
}

/// `E = Conv₃(E₁ + E₂)` on `[N, C_in, H, W]`, every convolution followed by GroupNorm and ReLU.
pub fn encode<F: Scalar>(tape: &mut Tape<F>, p: &Bound, enc: &EncoderParams, x: Var, eps: F) -> Result<Var> {
    let s = tape.shape(x);
    let cin = tape.shape(p.var(enc.branch1[0].conv.w))[1];
    if s.len() != 4 || s[1] != cin {
        return Err(shape_err!("encoder expects [N, {}, H, W], got {:?}", cin, s));
    }
    let mut e1 = x;
    for layer in &enc.branch1 {
        e1 = layer.forward(tape, p, e1, eps, true)?;
    }
    let mut e2 = x;
    for layer in &enc.branch2 {
        e2 = layer.forward(tape, p, e2, eps, true)?;
    }
    let sum = tape.add(e1, e2)?;
    enc.fuse.forward(tape, p, sum, eps, true)
}

/// Encodes a `[T, B, C, H, W]` series in one pass over the stacked `[T·B, ...]` batch.
pub fn encode_stacked<F: Scalar>(tape: &mut Tape<F>, p: &Bound, enc: &EncoderParams, x: Var, eps: F) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("expected [T, B, C, H, W], got {:?}", s));
    }
    let stacked = tape.reshape(x, &[s[0] * s[1], s[2], s[3], s[4]])?;
    let e = encode(tape, p, enc, stacked, eps)?;
    let c = tape.shape(e)[1];
    tape.reshape(e, &[s[0], s[1], c, s[3], s[4]])
}

/// Reference strategy: one encoder call per date, results concatenated along time.
pub fn encode_siamese<F: Scalar>(tape: &mut Tape<F>, p: &Bound, enc: &EncoderParams, x: Var, eps: F) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("expected [T, B, C, H, W], got {:?}", s));
    }
    let mut outs = Vec::with_capacity(s[0]);
    for t in 0..s[0] {
        let frame = tape.narrow(x, 0, t, 1)?;
        let frame = tape.reshape(frame, &s[1..])?;
        let e = encode(tape, p, enc, frame, eps)?;
        let es = tape.shape(e).to_vec();
        let mut shape = vec![1];
        shape.extend_from_slice(&es);
        outs.push(tape.reshape(e, &shape)?);
    }
    tape.concat(&outs, 0)
}

/// `D(i) = |E(i+1) − E(i)|` (or the signed difference) on `[T, B, C, H, W]`.
pub fn adjacent_diff<F: Scalar>(tape: &mut Tape<F>, e: Var, signed: bool) -> Result<Var> {
    let t = *tape.shape(e).first().ok_or_else(|| shape_err!("adjacent_diff on a scalar"))?;
    if t < 2 {
        return Err(CaimError::InvalidInput(format!("need at least 2 dates, got {t}")));
    }
    let later = tape.narrow(e, 0, 1, t - 1)?;
    let earlier = tape.narrow(e, 0, 0, t - 1)?;
    let d = tape.sub(later, earlier)?;
    Ok(if signed { d } else { tape.abs(d) })
}

/// Residual center-difference depthwise convolution over the `[B, (T−1)·C, H, W]` view.
pub fn boundary_enhance<F: Scalar>(tape: &mut Tape<F>, p: &Bound, bp: &BoundaryParams, d: Var) -> Result<Var> {
    let s = tape.shape(d).to_vec();
    if s.len() != 5 || s[0] * s[2] != bp.channels {
        return Err(shape_err!("boundary stage expects [T−1, B, C, H, W] with (T−1)·C = {}, got {:?}", bp.channels, s));
    }
    let (tm, b, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let x = tape.permute(d, &[1, 0, 2, 3, 4])?;
    let x = tape.reshape(x, &[b, tm * c, h, w])?;
    let k = tape.center_difference_kernel(p.var(bp.w))?;
    let edge = tape.conv2d(x, k, None, Conv2dSpec::depthwise(3, tm * c))?;
    let y = tape.add(x, edge)?;
    let y = tape.reshape(y, &[b, tm, c, h, w])?;
    tape.permute(y, &[1, 0, 2, 3, 4])
}
