//! Step 2: per-pixel temporal transformer + LSTM, then the two coarse moment extractors.

use super::layers::{Conv, ConvNorm, Linear, Norm};
use super::{norm_groups, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, CaimError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Pre-norm transformer block over `[R, L, C]` tokens.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct SpatioTemporalParams {
    pub mhsa: MhsaParams,
    pub lstm: LstmParams,
}

#[derive(Clone, Debug)]
pub struct Extractor1Params {
    pub conv4: ConvNorm,
}

#[derive(Clone, Debug)]
pub struct Extractor2Params {
    pub conv5a: ConvNorm,
    pub conv5b: Conv,
}

/// Logits and their softmax over the moment axis, both `[B, T, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct CoarseMoment {
    pub logits: Var,
    pub probs: Var,
}

impl MhsaParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, c: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(CaimError::Config(format!("{c} channels not divisible by {heads} heads")));
        }
        Ok(MhsaParams {
            ln1: Norm::register(store, &format!("{name}.ln1"), c)?,
            qkv: Linear::register(store, &format!("{name}.qkv"), c, 3 * c, true)?,
            proj: Linear::register(store, &format!("{name}.proj"), c, c, true)?,
            ln2: Norm::register(store, &format!("{name}.ln2"), c)?,
            ffn_in: Linear::register(store, &format!("{name}.ffn.0"), c, ffn_mult * c, true)?,
            ffn_out: Linear::register(store, &format!("{name}.ffn.1"), ffn_mult * c, c, true)?,
            heads,
        })
    }
}

impl LstmParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(LstmParams {
            w_ih: store.add_uniform(&format!("{name}.w_ih"), &[4 * hidden, input], bound)?,
            w_hh: store.add_uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: store.add_const(&format!("{name}.bias"), &[4 * hidden], 0.0)?,
        })
    }
}

impl SpatioTemporalParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        Ok(SpatioTemporalParams {
            mhsa: MhsaParams::register(store, "temporal.mhsa", cfg.channels, cfg.heads, cfg.ffn_mult)?,
            lstm: LstmParams::register(store, "temporal.lstm", cfg.channels, cfg.hidden)?,
        })
    }
}

impl Extractor1Params {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Extractor1Params { conv4: ConvNorm::register(store, "extractor1.conv4", cfg.hidden, 2, 1, 1)? })
    }
}

impl Extractor2Params {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let cin = (cfg.t_len - 1) * cfg.hidden;
        Ok(Extractor2Params {
            conv5a: ConvNorm::register(store, "extractor2.conv5a", cin, cfg.mid, 3, norm_groups(cfg.mid))?,
            conv5b: Conv::register(store, "extractor2.conv5b", cfg.mid, cfg.t_len, 3)?,
        })
    }
}

/// `x + Attn(LN(x))`, then `y + FFN(LN(y))`.
pub fn mhsa_block<F: Scalar>(tape: &mut Tape<F>, p: &Bound, m: &MhsaParams, x: Var, eps: F) -> Result<Var> {
    let n = m.ln1.forward(tape, p, x, eps)?;
    let qkv = m.qkv.forward(tape, p, n)?;
    let att = tape.attention(qkv, m.heads)?;
    let att = m.proj.forward(tape, p, att)?;
    let y = tape.add(x, att)?;
    let n = m.ln2.forward(tape, p, y, eps)?;
    let f = m.ffn_in.forward(tape, p, n)?;
    let f = tape.relu(f);
    let f = m.ffn_out.forward(tape, p, f)?;
    tape.add(y, f)
}

/// `[T−1, B, C, H, W] → [T−1, B, hidden, H, W]`; every pixel's sequence is processed alone.
pub fn spatiotemporal<F: Scalar>(tape: &mut Tape<F>, p: &Bound, st: &SpatioTemporalParams, d: Var, eps: F) -> Result<Var> {
    let s = tape.shape(d).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("expected [T−1, B, C, H, W], got {:?}", s));
    }
    let (tm, b, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let tokens = tape.permute(d, &[1, 3, 4, 0, 2])?;
    let tokens = tape.reshape(tokens, &[b * h * w, tm, c])?;
    let z = mhsa_block(tape, p, &st.mhsa, tokens, eps)?;
    let hs = tape.lstm(z, p.var(st.lstm.w_ih), p.var(st.lstm.w_hh), p.var(st.lstm.bias))?;
    let hidden = tape.shape(hs)[2];
    let hs = tape.reshape(hs, &[b, h, w, tm, hidden])?;
    tape.permute(hs, &[3, 0, 4, 1, 2])
}

/// Logits `[min_i nc_i, ch_1, …, ch_{T−1}]` from per-step two-channel maps `GN(Conv₄(H_i))`.
pub fn extractor1<F: Scalar>(tape: &mut Tape<F>, p: &Bound, e1: &Extractor1Params, hf: Var, eps: F) -> Result<CoarseMoment> {
    let s = tape.shape(hf).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("expected [T−1, B, C, H, W], got {:?}", s));
    }
    let (tm, b, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let x = tape.reshape(hf, &[tm * b, c, h, w])?;
    let d = e1.conv4.forward(tape, p, x, eps, false)?;
    let d = tape.reshape(d, &[tm, b, 2, h, w])?;
    let logits = extractor1_logits(tape, d)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(CoarseMoment { logits, probs })
}

/// Assembles extractor-1 logits `[B, T, H, W]` from `[T−1, B, 2, H, W]` features
/// (channel 0: no-change, channel 1: change).
pub fn extractor1_logits<F: Scalar>(tape: &mut Tape<F>, d: Var) -> Result<Var> {
    let s = tape.shape(d).to_vec();
    if s.len() != 5 || s[2] != 2 {
        return Err(shape_err!("expected [T−1, B, 2, H, W], got {:?}", s));
    }
    let (tm, b, h, w) = (s[0], s[1], s[3], s[4]);
    let nc = tape.narrow(d, 2, 0, 1)?;
    let nc = tape.min_axis(nc, 0)?;
    let ch = tape.narrow(d, 2, 1, 1)?;
    let ch = tape.reshape(ch, &[tm, b, h, w])?;
    let ch = tape.permute(ch, &[1, 0, 2, 3])?;
    tape.concat(&[nc, ch], 1)
}

/// Two 3×3 convolutions over the `[B, (T−1)·hidden, H, W]` view down to `T` logits.
pub fn extractor2<F: Scalar>(tape: &mut Tape<F>, p: &Bound, e2: &Extractor2Params, hf: Var, eps: F) -> Result<CoarseMoment> {
    let s = tape.shape(hf).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("expected [T−1, B, C, H, W], got {:?}", s));
    }
    let (tm, b, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let x = tape.permute(hf, &[1, 0, 2, 3, 4])?;
    let x = tape.reshape(x, &[b, tm * c, h, w])?;
    let y = e2.conv5a.forward(tape, p, x, eps, true)?;
    let logits = e2.conv5b.forward(tape, p, y)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(CoarseMoment { logits, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn extractor1_hand_example() {
        // nc = [0.5, 0.2, 0.9], ch = [1.0, 0.1, 0.3] for one pixel, T = 4
        let data = vec![0.5, 1.0, 0.2, 0.1, 0.9, 0.3];
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::from_vec(&[3, 1, 2, 1, 1], data).unwrap());
        let logits = extractor1_logits(&mut tape, d).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.2, 1.0, 0.1, 0.3]);
        let probs = tape.softmax(logits, 1).unwrap();
        assert_eq!(tape.value(probs).argmax(1), vec![1]);
    }

    #[test]
    fn spatiotemporal_shape_and_pixel_independence() {
        let cfg = ModelConfig { channels: 8, hidden: 4, heads: 2, t_len: 4, ..Default::default() };
        let mut store = ParamStore::<f64>::new(2);
        let st = SpatioTemporalParams::register(&mut store, &cfg).unwrap();
        let mut x = Tensor::from_fn(&[3, 1, 8, 1, 3], |i| ((i * 37 % 11) as f64) / 7.0 - 0.5);
        // pixel 2 copies pixel 0
        for t in 0..3 {
            for c in 0..8 {
                let v = x.at(&[t, 0, c, 0, 0]);
                x.set(&[t, 0, c, 0, 2], v);
            }
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = spatiotemporal(&mut tape, &p, &st, xv, 1e-5).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[3, 1, 4, 1, 3]);
        for t in 0..3 {
            for c in 0..4 {
                assert_eq!(y.at(&[t, 0, c, 0, 0]), y.at(&[t, 0, c, 0, 2]));
            }
        }
    }

    #[test]
    fn zero_extractor2_is_uniform() {
        let cfg = ModelConfig { hidden: 4, mid: 8, t_len: 3, ..Default::default() };
        let mut store = ParamStore::<f64>::new(1);
        let e2 = Extractor2Params::register(&mut store, &cfg).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 4, 3, 3], |i| i as f64));
        let out = extractor2(&mut tape, &p, &e2, x, 1e-5).unwrap();
        assert!(tape.value(out.probs).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }
}
