//! Mini-batch training with best-checkpoint selection, and batched evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_labels, compute_class_ratios, total_loss, LossConfig, LossWeights};
use super::metrics::{ConfusionMatrix, MetricsAccumulator, MetricsReport};
use super::optim::Adam;
use crate::autograd::Tape;
use crate::data::{batch_images, ChangeLabels, Sample, TsiCube};
use crate::error::{CaimError, Result};
use crate::model::{CaimNet, NetOutputs};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tile size and stride used when cutting scenes into training patches.
    pub patch: usize,
    pub stride: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            patch: 64,
            stride: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(CaimError::Config("learning_rate must be a finite value ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patch == 0 || self.stride == 0 {
            return Err(CaimError::Config("epochs, batch_size, patch and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(CaimError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub area_kappa: f64,
    pub moment_kappa: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.6},{:.4},{:.4}", self.epoch, self.split, self.loss, self.area_kappa, self.moment_kappa)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_moment_kappa: f64,
    pub weights: LossWeights,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: Option<f64>,
    pub report: MetricsReport,
}

/// Argmax maps of one network output batch, one [`ChangeLabels`] per sample.
fn argmax_maps<F: Scalar>(tape: &Tape<F>, out: &NetOutputs, t_len: usize) -> Result<Vec<ChangeLabels>> {
    let fine = tape.value(out.fused.fine);
    let area = tape.value(out.area);
    let (b, h, w) = (fine.dim(0), fine.dim(2), fine.dim(3));
    let m = fine.argmax(1);
    let a = area.argmax(1);
    Ok((0..b)
        .map(|i| {
            let r = i * h * w..(i + 1) * h * w;
            ChangeLabels {
                t_len,
                height: h,
                width: w,
                area: a[r.clone()].iter().map(|&v| v as u8).collect(),
                moment: m[r].iter().map(|&v| v as u16).collect(),
            }
        })
        .collect())
}

fn check_cubes<'a, F: Scalar>(net: &CaimNet<F>, cubes: impl IntoIterator<Item = &'a TsiCube>) -> Result<()> {
    for c in cubes {
        if c.t_len() != net.cfg.t_len || c.bands() != net.cfg.bands {
            return Err(CaimError::InvalidInput(format!(
                "cube has T={}, C={}; model expects T={}, C={}",
                c.t_len(),
                c.bands(),
                net.cfg.t_len,
                net.cfg.bands
            )));
        }
    }
    Ok(())
}

fn check_samples<F: Scalar>(net: &CaimNet<F>, samples: &[Sample]) -> Result<()> {
    check_cubes(net, samples.iter().map(|s| &s.cube))
}

/// Argmax maps for every cube.
pub fn predict_maps<F: Scalar>(net: &CaimNet<F>, cubes: &[&TsiCube], batch_size: usize) -> Result<Vec<ChangeLabels>> {
    check_cubes(net, cubes.iter().copied())?;
    let mut maps = Vec::with_capacity(cubes.len());
    for chunk in cubes.chunks(batch_size.max(1)) {
        let refs: Vec<&TsiCube> = chunk.to_vec();
        let mut tape = Tape::new();
        let p = net.store.bind_frozen(&mut tape);
        let x = tape.constant(batch_images::<F>(&refs)?);
        let out = net.forward(&mut tape, &p, x)?;
        maps.extend(argmax_maps(&tape, &out, net.cfg.t_len)?);
    }
    Ok(maps)
}

/// Metrics (and, given weights, the mean objective) over `samples`.
pub fn evaluate<F: Scalar>(
    net: &CaimNet<F>,
    samples: &[Sample],
    batch_size: usize,
    loss: Option<(&LossWeights, &LossConfig)>,
) -> Result<Evaluation> {
    check_samples(net, samples)?;
    let mut acc = MetricsAccumulator::new(net.cfg.t_len);
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TsiCube> = chunk.iter().map(|s| &s.cube).collect();
        let mut tape = Tape::new();
        let p = net.store.bind_frozen(&mut tape);
        let x = tape.constant(batch_images::<F>(&refs)?);
        let out = net.forward(&mut tape, &p, x)?;
        if let Some((w, cfg)) = loss {
            let labels: Vec<&ChangeLabels> = chunk.iter().map(|s| &s.labels).collect();
            let (ml, al) = batch_labels(&labels);
            let terms = total_loss(&mut tape, &out, &ml, &al, w, cfg)?;
            total += tape.value(terms.total).item().to_f64_lossy() * chunk.len() as f64;
        }
        for (pred, s) in argmax_maps(&tape, &out, net.cfg.t_len)?.iter().zip(chunk) {
            acc.add(&pred.moment, &pred.area, &s.labels)?;
        }
    }
    Ok(Evaluation { loss: loss.map(|_| total / samples.len().max(1) as f64), report: acc.report()? })
}

/// Moment Kappa of each supplementary head's own moment map `softmax(CAM_k)`, in head order.
pub fn head_moment_kappas<F: Scalar>(net: &CaimNet<F>, samples: &[Sample], batch_size: usize) -> Result<[f64; 4]> {
    check_samples(net, samples)?;
    let t_len = net.cfg.t_len;
    let mut conf: [ConfusionMatrix; 4] = std::array::from_fn(|_| ConfusionMatrix::new(t_len));
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TsiCube> = chunk.iter().map(|s| &s.cube).collect();
        let mut tape = Tape::new();
        let p = net.store.bind_frozen(&mut tape);
        let x = tape.constant(batch_images::<F>(&refs)?);
        let out = net.forward(&mut tape, &p, x)?;
        for (k, cm) in conf.iter_mut().enumerate() {
            let pred = tape.value(out.fused.moments[k]).argmax(1);
            let hw = pred.len() / chunk.len();
            for (i, s) in chunk.iter().enumerate() {
                for (&p, &t) in pred[i * hw..(i + 1) * hw].iter().zip(&s.labels.moment) {
                    cm.add(t as usize, p)?;
                }
            }
        }
    }
    Ok(conf.map(|c| c.kappa() * 100.0))
}

/// Trains `net` in place and leaves it holding the parameters of the best validation epoch.
pub fn train<F: Scalar>(
    net: &mut CaimNet<F>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_line: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CaimError::InvalidInput("training and validation sets must be non-empty".into()));
    }
    check_samples(net, train_set)?;
    check_samples(net, val_set)?;
    let ratios = compute_class_ratios(train_set.iter().map(|s| &s.labels))?;
    let weights = LossWeights::from_ratios(&ratios, loss_cfg);
    let mut adam = Adam::new(&net.store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, crate::params::ParamStore<F>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = MetricsAccumulator::new(net.cfg.t_len);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<&ChangeLabels> = batch.iter().map(|s| &s.labels).collect();
            let (ml, al) = batch_labels(&labels);
            let mut tape = Tape::new();
            let p = net.store.bind(&mut tape);
            let cubes: Vec<&TsiCube> = batch.iter().map(|s| &s.cube).collect();
            let x = tape.constant(batch_images::<F>(&cubes)?);
            let out = net.forward(&mut tape, &p, x)?;
            let terms = total_loss(&mut tape, &out, &ml, &al, &weights, loss_cfg)?;
            let l = tape.value(terms.total).item().to_f64_lossy();
            if !l.is_finite() {
                return Err(CaimError::NonFinite(format!("loss {l} at epoch {epoch}, batch {bi}")));
            }
            loss_sum += l * batch.len() as f64;
            for (pred, s) in argmax_maps(&tape, &out, net.cfg.t_len)?.iter().zip(&batch) {
                acc.add(&pred.moment, &pred.area, &s.labels)?;
            }
            let grads = tape.backward(terms.total)?;
            adam.update(&mut net.store, &p, &grads);
        }
        let tr = acc.report()?;
        let line = EpochLog {
            epoch,
            split: "train",
            loss: loss_sum / train_set.len() as f64,
            area_kappa: tr.area.kappa,
            moment_kappa: tr.moment.kappa,
        };
        on_line(&line);
        log.push(line);

        let ev = evaluate(net, val_set, cfg.batch_size, Some((&weights, loss_cfg)))?;
        let vl = ev.loss.unwrap_or(f64::NAN);
        if !vl.is_finite() {
            return Err(CaimError::NonFinite(format!("validation loss {vl} at epoch {epoch}")));
        }
        let line = EpochLog {
            epoch,
            split: "val",
            loss: vl,
            area_kappa: ev.report.area.kappa,
            moment_kappa: ev.report.moment.kappa,
        };
        on_line(&line);
        if best.as_ref().is_none_or(|b| line.moment_kappa > b.1) {
            best = Some((epoch, line.moment_kappa, net.store.clone()));
        }
        log.push(line);
    }
    let (best_epoch, best_kappa, store) = best.expect("at least one epoch");
    net.store = store;
    Ok(TrainOutcome { log, best_epoch, best_val_moment_kappa: best_kappa, weights })
}
