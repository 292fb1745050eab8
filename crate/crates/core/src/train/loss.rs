//! Focal weighted cross-entropy and the combined objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::ChangeLabels;
use crate::error::{CaimError, Result};
use crate::model::NetOutputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// `w_c = (1/R_c) / Σ_k 1/R_k`, ratios clamped below at `ratio_clamp`.
    InverseFrequency,
    /// `w_c = 1 − R_c`.
    Complement,
    /// `w_c = R_c`.
    LiteralRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub class_weight_mode: ClassWeightMode,
    /// Added to probabilities inside the log.
    pub eps: f64,
    pub ratio_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, class_weight_mode: ClassWeightMode::InverseFrequency, eps: 1e-12, ratio_clamp: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.eps > 0.0) || !(self.ratio_clamp > 0.0) {
            return Err(CaimError::Config("loss gamma must be ≥ 0, eps and ratio_clamp > 0".into()));
        }
        Ok(())
    }
}

/// Per-class pixel fractions of the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRatios {
    pub area: Vec<f64>,
    pub moment: Vec<f64>,
}

pub fn compute_class_ratios<'a>(labels: impl IntoIterator<Item = &'a ChangeLabels>) -> Result<ClassRatios> {
    let mut area = [0u64; 2];
    let mut moment: Vec<u64> = Vec::new();
    let mut total = 0u64;
    for l in labels {
        if moment.is_empty() {
            moment = vec![0; l.t_len];
        } else if moment.len() != l.t_len {
            return Err(CaimError::InvalidInput(format!("mixed series lengths {} and {}", moment.len(), l.t_len)));
        }
        for (&a, &m) in l.area.iter().zip(&l.moment) {
            area[a as usize] += 1;
            moment[m as usize] += 1;
        }
        total += l.area.len() as u64;
    }
    if total == 0 {
        return Err(CaimError::InvalidInput("class ratios of an empty dataset".into()));
    }
    let frac = |c: &u64| *c as f64 / total as f64;
    Ok(ClassRatios { area: area.iter().map(frac).collect(), moment: moment.iter().map(frac).collect() })
}

pub fn class_weights(ratios: &[f64], cfg: &LossConfig) -> Vec<f64> {
    match cfg.class_weight_mode {
        ClassWeightMode::LiteralRatio => ratios.to_vec(),
        ClassWeightMode::Complement => ratios.iter().map(|r| 1.0 - r).collect(),
        ClassWeightMode::InverseFrequency => {
            let inv: Vec<f64> = ratios.iter().map(|r| 1.0 / r.max(cfg.ratio_clamp)).collect();
            let s: f64 = inv.iter().sum();
            inv.iter().map(|v| v / s).collect()
        }
    }
}

/// Class weights for both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub area: Vec<f64>,
    pub moment: Vec<f64>,
}

impl LossWeights {
    pub fn from_ratios(r: &ClassRatios, cfg: &LossConfig) -> Self {
        LossWeights { area: class_weights(&r.area, cfg), moment: class_weights(&r.moment, cfg) }
    }

    pub fn uniform(t_len: usize) -> Self {
        LossWeights { area: vec![1.0; 2], moment: vec![1.0; t_len] }
    }
}

/// Focal weighted cross-entropy of `[B, K, H, W]` probabilities against per-pixel labels.
pub fn fwcl<F: Scalar>(tape: &mut Tape<F>, probs: Var, labels: &[usize], weights: &[f64], cfg: &LossConfig) -> Result<Var> {
    let w: Vec<F> = weights.iter().map(|&v| F::from_f64_lossy(v)).collect();
    tape.focal_loss(probs, labels, &w, F::from_f64_lossy(cfg.gamma), F::from_f64_lossy(cfg.eps))
}

/// Value-level [`fwcl`].
pub fn fwcl_value<F: Scalar>(probs: &Tensor<F>, labels: &[usize], weights: &[f64], cfg: &LossConfig) -> Result<F> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = fwcl(&mut tape, p, labels, weights, cfg)?;
    Ok(tape.value(l).item())
}

/// `L_m + L_A + (L_m1 + L_m2 + L_m3 + L_m4) / 4`.
pub fn combine_losses<F: Scalar>(moment: F, area: F, supplementary: [F; 4]) -> F {
    let quarter = F::from_f64_lossy(0.25);
    moment + area + supplementary.iter().fold(F::zero(), |a, &b| a + b) * quarter
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub moment: Var,
    pub area: Var,
    pub supplementary: [Var; 4],
}

/// Flattened `(moment, area)` label vectors for a batch, in `b·H·W + pixel` order.
pub fn batch_labels(labels: &[&ChangeLabels]) -> (Vec<usize>, Vec<usize>) {
    let moment = labels.iter().flat_map(|l| l.moment.iter().map(|&m| m as usize)).collect();
    let area = labels.iter().flat_map(|l| l.area.iter().map(|&a| a as usize)).collect();
    (moment, area)
}

pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &NetOutputs,
    moment_labels: &[usize],
    area_labels: &[usize],
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let moment = fwcl(tape, out.fused.fine, moment_labels, &weights.moment, cfg)?;
    let area = fwcl(tape, out.area, area_labels, &weights.area, cfg)?;
    let mut supplementary = [moment; 4];
    for (s, &m) in supplementary.iter_mut().zip(&out.fused.moments) {
        *s = fwcl(tape, m, moment_labels, &weights.moment, cfg)?;
    }
    let mut sup = supplementary[0];
    for &s in &supplementary[1..] {
        sup = tape.add(sup, s)?;
    }
    let sup = tape.scale(sup, F::from_f64_lossy(0.25));
    let total = tape.add(moment, area)?;
    let total = tape.add(total, sup)?;
    Ok(LossTerms { total, moment, area, supplementary })
}
