//! Efficiency harness: stacked versus per-date encoder timing, parameter and FLOP counts.
//!
//! Everything runs on the calling thread; the matrix kernels are single-threaded, so
//! timings are not perturbed by a worker pool.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CaimError, Result};
use crate::kernels::conv2d_cost;
use crate::model::encoder::{encode_siamese, encode_stacked, EncoderParams};
use crate::model::{CaimNet, ModelConfig, CAM_HEADS};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Median wall times of one encoder strategy, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyTiming {
    pub forward_s: f64,
    pub forward_backward_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBench {
    pub t: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub repeats: usize,
    pub stacked: StrategyTiming,
    pub siamese: StrategyTiming,
    pub max_abs_diff: f64,
}

impl EncoderBench {
    pub fn forward_speedup(&self) -> f64 {
        self.siamese.forward_s / self.stacked.forward_s
    }
}

/// Analytic FLOPs of one forward pass for a single sample of `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub items: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.items.iter().map(|i| i.1).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub params: usize,
    pub flops: FlopReport,
    pub encoder: Vec<EncoderBench>,
    /// Samples in one epoch, used to scale per-step times.
    pub epoch_samples: usize,
    /// Median full-model inference time per sample.
    pub inference_s: Option<f64>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# FLOP convention: one multiply-add = 2 FLOPs; bias, normalisation and activations not counted");
        let _ = writeln!(s, "# times are medians after one warm-up; epoch_equivalent_s = forward_backward_s * epoch_samples / B");
        let _ = writeln!(s, "params.total = {}", self.params);
        let _ = writeln!(s, "flops.input = {}x{}", self.flops.height, self.flops.width);
        for (name, v) in &self.flops.items {
            let _ = writeln!(s, "flops.{name} = {v}");
        }
        let _ = writeln!(s, "flops.total = {}", self.flops.total());
        if let Some(t) = self.inference_s {
            let _ = writeln!(s, "model.inference_per_sample_s = {t:.6}");
        }
        let _ = writeln!(s, "epoch_samples = {}", self.epoch_samples);
        for e in &self.encoder {
            let tag = format!("encoder.T{}_B{}_{}x{}", e.t, e.b, e.h, e.w);
            for (name, st) in [("stacked", &e.stacked), ("siamese", &e.siamese)] {
                let epoch = st.forward_backward_s * self.epoch_samples as f64 / e.b as f64;
                let _ = writeln!(s, "{tag}.{name}.forward_s = {:.6}", st.forward_s);
                let _ = writeln!(s, "{tag}.{name}.forward_backward_s = {:.6}", st.forward_backward_s);
                let _ = writeln!(s, "{tag}.{name}.epoch_equivalent_s = {epoch:.3}");
                let _ = writeln!(s, "{tag}.{name}.params = {}", self.params);
                let _ = writeln!(s, "{tag}.{name}.flops = {}", self.flops.total());
            }
            let _ = writeln!(s, "{tag}.max_abs_diff = {:e}", e.max_abs_diff);
            let _ = writeln!(s, "{tag}.forward_speedup = {:.3}", e.forward_speedup());
        }
        s
    }
}

pub fn count_params(store: &ParamStore<f32>) -> usize {
    store.num_scalars()
}

/// `2·Cout·(Cin/groups)·k²·H·W`.
pub fn conv_flops(cin: usize, cout: usize, k: usize, groups: usize, h: usize, w: usize) -> u64 {
    conv2d_cost(cin, cout, k, groups, true, h, w).1
}

/// `2·in·out` per row.
pub fn linear_flops(input: usize, out: usize, rows: usize) -> u64 {
    (2 * input * out * rows) as u64
}

pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> FlopReport {
    let (t, c, hid, bands) = (cfg.t_len, cfg.channels, cfg.hidden, cfg.bands);
    let l = t - 1;
    let px = h * w;
    let mut items = Vec::new();
    let encoder = conv_flops(bands, c, 3, 1, h, w)
        + conv_flops(c, c, 3, 1, h, w)
        + conv_flops(bands, c, 1, 1, h, w)
        + conv_flops(c, c, 1, 1, h, w)
        + conv_flops(c, c, 3, 1, h, w);
    items.push(("encoder".into(), encoder * t as u64));
    items.push(("boundary".into(), conv_flops(l * c, l * c, 3, l * c, h, w)));
    let rows = l * px;
    items.push(("attention.qkv".into(), linear_flops(c, 3 * c, rows)));
    // scores Q·Kᵀ and the weighted sum of V: 2·L·L·C each, per pixel
    items.push(("attention.scores".into(), (2 * 2 * l * l * c * px) as u64));
    items.push(("attention.proj".into(), linear_flops(c, c, rows)));
    items.push(("attention.ffn".into(), 2 * linear_flops(c, cfg.ffn_mult * c, rows)));
    items.push(("lstm".into(), linear_flops(c, 4 * hid, rows) + linear_flops(hid, 4 * hid, rows)));
    items.push(("extractor1".into(), conv_flops(hid, 2, 1, 1, h, w) * l as u64));
    items.push(("extractor2".into(), conv_flops(l * hid, cfg.mid, 3, 1, h, w) + conv_flops(cfg.mid, t, 3, 1, h, w)));
    let mut cam = 0u64;
    for (_, s) in CAM_HEADS {
        // every s×s block row (s²·T values) is scored against T class weights, plus the pooled classifier
        cam += linear_flops(s * s * t, t, px / (s * s)) + linear_flops(s * s * t, t, 1);
    }
    items.push(("cam".into(), cam));
    FlopReport { height: h, width: w, items }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

type EncodeFn = fn(&mut Tape<f32>, &crate::params::Bound, &EncoderParams, Var, f32) -> Result<Var>;

fn run_encoder(
    store: &ParamStore<f32>,
    enc: &EncoderParams,
    x: &Tensor<f32>,
    eps: f32,
    f: EncodeFn,
    backward: bool,
) -> Result<(f64, Tensor<f32>)> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let p = if backward { store.bind(&mut tape) } else { store.bind_frozen(&mut tape) };
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, &p, enc, xv, eps)?;
    if backward {
        let loss = tape.sum(out);
        tape.backward(loss)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((elapsed, tape.value(out).clone()))
}

/// Times both encoder strategies on identical parameters and a random `[T, B, bands, H, W]`
/// input. Repeats alternate the order of the two strategies.
pub fn bench_encoder(cfg: &ModelConfig, t: usize, b: usize, h: usize, w: usize, repeats: usize, seed: u64) -> Result<EncoderBench> {
    if t == 0 || b == 0 || h == 0 || w == 0 || repeats == 0 {
        return Err(CaimError::Config(format!("bench needs positive T, B, H, W and repeats, got {t}, {b}, {h}, {w}, {repeats}")));
    }
    let mut store = ParamStore::<f32>::new(seed);
    let enc = EncoderParams::register(&mut store, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::from_fn(&[t, b, cfg.bands, h, w], |_| rng.random_range(0.0f32..1.0));
    let eps = cfg.norm_eps as f32;
    let strategies: [EncodeFn; 2] = [encode_stacked, encode_siamese];

    let (_, a) = run_encoder(&store, &enc, &x, eps, strategies[0], false)?;
    let (_, s) = run_encoder(&store, &enc, &x, eps, strategies[1], false)?;
    if !a.all_finite() || !s.all_finite() {
        return Err(CaimError::Bench("non-finite encoder output".into()));
    }
    let max_abs_diff = a.max_abs_diff(&s) as f64;
    for f in strategies {
        run_encoder(&store, &enc, &x, eps, f, true)?;
    }

    let mut times = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for r in 0..repeats {
        for backward in [false, true] {
            for k in [r % 2, 1 - r % 2] {
                let (dt, _) = run_encoder(&store, &enc, &x, eps, strategies[k], backward)?;
                times[k][backward as usize].push(dt);
            }
        }
    }
    let timing = |k: usize| StrategyTiming {
        forward_s: median(times[k][0].clone()),
        forward_backward_s: median(times[k][1].clone()),
    };
    Ok(EncoderBench { t, b, h, w, repeats, stacked: timing(0), siamese: timing(1), max_abs_diff })
}

/// Median per-sample inference time of the full network on a random `[T, B, bands, H, W]` batch.
pub fn bench_inference(net: &CaimNet<f32>, b: usize, h: usize, w: usize, repeats: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[net.cfg.t_len, b, net.cfg.bands, h, w], |_| rng.random_range(0.0f32..1.0));
    net.predict(&x)?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let (m, _) = net.predict(&x)?;
        times.push(start.elapsed().as_secs_f64());
        if !m.fine_moment.all_finite() {
            return Err(CaimError::Bench("non-finite model output".into()));
        }
    }
    Ok(median(times) / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_conv_count() {
        let mut store = ParamStore::<f32>::new(0);
        crate::model::layers::Conv::register(&mut store, "c", 4, 64, 3).unwrap();
        assert_eq!(count_params(&store), 2368);
    }

    #[test]
    fn doubling_resolution_quadruples_conv_flops() {
        let cfg = ModelConfig::default();
        let a = estimate_flops(&cfg, 32, 32);
        let b = estimate_flops(&cfg, 64, 64);
        for ((na, va), (_, vb)) in a.items.iter().zip(&b.items) {
            if !na.starts_with("cam") {
                assert_eq!(*vb, 4 * va, "{na}");
            }
        }
        assert_eq!(conv_flops(4, 64, 3, 1, 64, 64), 4 * conv_flops(4, 64, 3, 1, 32, 32));
    }

    #[test]
    fn tiny_bench_agrees_and_times_are_positive() {
        let cfg = ModelConfig { channels: 8, ..Default::default() };
        let r = bench_encoder(&cfg, 3, 2, 8, 8, 3, 1).unwrap();
        assert!(r.max_abs_diff <= 1e-6);
        assert!(r.stacked.forward_s > 0.0 && r.siamese.forward_backward_s > 0.0);
    }
}
