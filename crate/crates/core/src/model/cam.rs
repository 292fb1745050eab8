//! Step 3: temporal CAM heads, fusion into the fine moment, and area inference.

use super::layers::Linear;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(coarse branch, scale)` of the four heads, in output order CAM₁₋₁, CAM₁₋₂, CAM₂₋₁, CAM₂₋₂.
pub const CAM_HEADS: [(usize, usize); 4] = [(1, 2), (1, 4), (2, 2), (2, 4)];

pub const CAM_NORM_EPS: f64 = 1e-8;

/// One fully connected layer `s²·T → T`.
#[derive(Clone, Debug)]
pub struct CamHeadParams {
    pub fc: Linear,
    pub scale: usize,
}

impl CamHeadParams {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, t_len: usize, scale: usize) -> Result<Self> {
        Ok(CamHeadParams { fc: Linear::register(store, name, scale * scale * t_len, t_len, true)?, scale })
    }
}

#[derive(Clone, Debug)]
pub struct MomentPrediction<F> {
    /// `softmax(fused_logits)`, `[B, T, H, W]`.
    pub fine_moment: Tensor<F>,
    /// Per-head `softmax(CAM_k)`.
    pub moments: [Tensor<F>; 4],
    /// `Σ_k CAM_k`.
    pub fused_logits: Tensor<F>,
    /// Per-head classifier outputs, `[B, T]` each.
    pub aux_class_probs: [Tensor<F>; 4],
}

#[derive(Clone, Debug)]
pub struct AreaPrediction<F> {
    /// `[B, 2, H, W]`: index 0 no change, index 1 change.
    pub probs: Tensor<F>,
}

/// Returns `(cam [B, T, H, W], aux [B, T])` for pre-softmax coarse logits `[B, T, H, W]`.
///
/// Rows of the space-to-depth map are scored by the FC weight, min–max scaled per
/// (sample, class) over the sample's rows, and upsampled bilinearly to `H × W`.
pub fn temporal_cam<F: Scalar>(tape: &mut Tape<F>, p: &Bound, head: &CamHeadParams, coarse: Var) -> Result<(Var, Var)> {
    let sh = tape.shape(coarse).to_vec();
    let s = head.scale;
    if sh.len() != 4 || s == 0 || sh[2] % s != 0 || sh[3] % s != 0 {
        return Err(shape_err!("CAM scale {} needs [B, T, H, W] with H, W divisible, got {:?}", s, sh));
    }
    let (b, t, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (hs, ws, k) = (h / s, w / s, s * s * t);
    let f = tape.space_to_depth(coarse, s)?;
    let rows = tape.permute(f, &[0, 2, 3, 1])?;
    let rows = tape.reshape(rows, &[b, hs * ws, k])?;

    let pooled = tape.mean_axis(rows, 1)?;
    let aux = head.fc.forward(tape, p, pooled)?;
    let aux = tape.softmax(aux, 1)?;

    let scores = tape.linear(rows, p.var(head.fc.w), None)?;
    let scores = tape.min_max_normalize(scores, 1, F::from_f64_lossy(CAM_NORM_EPS))?;
    let scores = tape.permute(scores, &[0, 2, 1])?;
    let scores = tape.reshape(scores, &[b, t, hs, ws])?;
    let cam = tape.upsample_bilinear(scores, h, w)?;
    Ok((cam, aux))
}

/// Tape handles of the fused outputs.
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub moments: [Var; 4],
    pub fused_logits: Var,
    pub fine: Var,
}

pub fn fuse_vars<F: Scalar>(tape: &mut Tape<F>, cams: [Var; 4]) -> Result<FusedVars> {
    let mut moments = cams;
    for (m, &c) in moments.iter_mut().zip(&cams) {
        *m = tape.softmax(c, 1)?;
    }
    let mut fused = cams[0];
    for &c in &cams[1..] {
        fused = tape.add(fused, c)?;
    }
    let fine = tape.softmax(fused, 1)?;
    Ok(FusedVars { moments, fused_logits: fused, fine })
}

/// Area probabilities `softmax([m₀, max_{t≥1} m_t])` from moment logits `[B, T, H, W]`.
pub fn area_var<F: Scalar>(tape: &mut Tape<F>, fused: Var) -> Result<Var> {
    let s = tape.shape(fused).to_vec();
    if s.len() != 4 || s[1] < 2 {
        return Err(shape_err!("area inference needs [B, T ≥ 2, H, W], got {:?}", s));
    }
    let (b, t, h, w) = (s[0], s[1], s[2], s[3]);
    let m0 = tape.narrow(fused, 1, 0, 1)?;
    let rest = tape.narrow(fused, 1, 1, t - 1)?;
    let mx = tape.max_axis(rest, 1)?;
    let mx = tape.reshape(mx, &[b, 1, h, w])?;
    let a = tape.concat(&[m0, mx], 1)?;
    tape.softmax(a, 1)
}

/// Value-level fusion of four CAMs; `aux_class_probs` is left empty (`[0]`-shaped).
pub fn fuse_fine_moment<F: Scalar>(cams: &[Tensor<F>; 4]) -> Result<MomentPrediction<F>> {
    let mut tape = Tape::new();
    let vars = cams.clone().map(|c| tape.constant(c));
    let f = fuse_vars(&mut tape, vars)?;
    Ok(MomentPrediction {
        fine_moment: tape.value(f.fine).clone(),
        moments: f.moments.map(|m| tape.value(m).clone()),
        fused_logits: tape.value(f.fused_logits).clone(),
        aux_class_probs: std::array::from_fn(|_| Tensor::zeros(&[0])),
    })
}

pub fn infer_area<F: Scalar>(fused_logits: &Tensor<F>) -> Result<AreaPrediction<F>> {
    let mut tape = Tape::new();
    let v = tape.constant(fused_logits.clone());
    let a = area_var(&mut tape, v)?;
    Ok(AreaPrediction { probs: tape.value(a).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_reference_values() {
        let m = Tensor::from_vec(&[1, 3, 1, 1], vec![2.0f64, 0.1, 0.5]).unwrap();
        let a = infer_area(&m).unwrap().probs;
        assert!((a.data()[0] - 0.8176).abs() < 1e-4 && (a.data()[1] - 0.1824).abs() < 1e-4);
        let u = infer_area(&Tensor::full(&[1, 4, 1, 1], 0.3f64)).unwrap().probs;
        assert_eq!(u.data(), &[0.5, 0.5]);
    }

    #[test]
    fn fusion_sums_cams() {
        let t = 3;
        let mut cams: [Tensor<f64>; 4] = std::array::from_fn(|_| Tensor::zeros(&[1, t, 1, 1]));
        for (c, v) in cams.iter_mut().zip([0.9, 0.8, 0.7, 0.6]) {
            c.set(&[0, 2, 0, 0], v);
        }
        let m = fuse_fine_moment(&cams).unwrap();
        assert!((m.fused_logits.at(&[0, 2, 0, 0]) - 3.0).abs() < 1e-12);
        assert_eq!(m.fine_moment.argmax(1), vec![2]);
        let zero = fuse_fine_moment(&std::array::from_fn(|_| Tensor::<f64>::zeros(&[1, t, 2, 2]))).unwrap();
        assert!(zero.fine_moment.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn cam_scores_match_explicit_product() {
        // s = 2, T = 2, one 2×2 block: rows hold the 8 s2d channels
        let mut store = ParamStore::<f64>::new(0);
        let head = CamHeadParams::register(&mut store, "cam", 2, 2).unwrap();
        let w = Tensor::from_fn(&[2, 8], |i| (i as f64 * 0.37).sin());
        *store.get_mut(head.fc.w) = w.clone();
        // two blocks side by side so min–max has a range: [1, 2, 2, 4]
        let x = Tensor::from_fn(&[1, 2, 2, 4], |i| ((i * 7) % 5) as f64 - 1.5);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = tape.space_to_depth(xv, 2).unwrap();
        let rows = tape.permute(f, &[0, 2, 3, 1]).unwrap();
        let rows = tape.reshape(rows, &[1, 2, 8]).unwrap();
        let scores = tape.linear(rows, p.var(head.fc.w), None).unwrap();
        let fv = tape.value(f).clone();
        for r in 0..2 {
            for c in 0..2 {
                let direct: f64 = (0..8).map(|k| fv.at(&[0, k, 0, r]) * w.at(&[c, k])).sum();
                assert!((tape.value(scores).at(&[0, r, c]) - direct).abs() <= 1e-12);
            }
        }
        let (cam, aux) = temporal_cam(&mut tape, &p, &head, xv).unwrap();
        assert_eq!(tape.shape(cam), &[1, 2, 2, 4]);
        assert_eq!(tape.shape(aux), &[1, 2]);
        let v = tape.value(cam);
        assert!(v.data().iter().all(|&e| (0.0..=1.0).contains(&e)));
    }

    #[test]
    fn constant_input_gives_zero_cam() {
        let mut store = ParamStore::<f64>::new(3);
        let head = CamHeadParams::register(&mut store, "cam", 3, 4).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.7));
        let (cam, _) = temporal_cam(&mut tape, &p, &head, x).unwrap();
        assert!(tape.value(cam).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::full(&[1, 3, 6, 8], 0.0));
        assert!(temporal_cam(&mut tape, &p, &head, bad).is_err());
    }
}
