//! Synthetic scenes with exact ground truth: a static background plus axis-aligned
//! rectangles that appear, disappear or change class at a known date.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cube::{derive_change_labels, ChangeLabels, SemanticSeries, TsiCube};
use crate::error::{CaimError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub t_len: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Land-cover classes with distinct spectra.
    pub n_classes: usize,
    /// Rectangle side range, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Rectangle corners and sides snap to multiples of this.
    pub grid: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            t_len: 6,
            bands: 4,
            height: 64,
            width: 64,
            n_objects: 6,
            noise_std: 0.05,
            seed: 0,
            n_classes: 5,
            min_size: 8,
            max_size: 24,
            grid: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(CaimError::Config(format!("t_len must be ≥ 2, got {}", self.t_len)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(CaimError::Config(format!("scene must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        if self.bands == 0 || self.n_classes < 2 || self.grid == 0 {
            return Err(CaimError::Config("bands ≥ 1, n_classes ≥ 2 and grid ≥ 1 required".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CaimError::Config(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std)));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(CaimError::Config(format!("bad object size range {}..={}", self.min_size, self.max_size)));
        }
        Ok(())
    }

    /// Side lengths (in grid cells) an object may take along an axis of `len` pixels.
    fn cell_range(&self, len: usize) -> Result<(usize, usize)> {
        let lo = self.min_size.div_ceil(self.grid);
        let hi = (self.max_size / self.grid).min(len / self.grid);
        if self.n_objects > 0 && (lo == 0 || lo > hi) {
            return Err(CaimError::Generation(format!(
                "objects of size {}..={} on grid {} cannot fit in {} pixels",
                self.min_size, self.max_size, self.grid, len
            )));
        }
        Ok((lo, hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Event {
    Appear,
    Disappear,
    Recolor(u16),
}

/// Per-class base reflectance `[n_classes][bands]`; every pair of classes differs by at
/// least `0.8 / (n_classes − 1)` in every band.
fn class_spectra(rng: &mut ChaCha8Rng, n_classes: usize, bands: usize) -> Vec<Vec<f32>> {
    let mut spectra = vec![vec![0f32; bands]; n_classes];
    let step = 0.8 / (n_classes - 1) as f64;
    for b in 0..bands {
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.shuffle(rng);
        for (k, &slot) in order.iter().enumerate() {
            spectra[k][b] = (0.1 + step * slot as f64) as f32;
        }
    }
    spectra
}

/// Deterministic scene for a fixed config; returned labels are derived from the series.
pub fn generate_synthetic_scene(cfg: &SceneConfig) -> Result<(TsiCube, SemanticSeries, ChangeLabels)> {
    cfg.validate()?;
    let (ch_lo, ch_hi) = cfg.cell_range(cfg.height)?;
    let (cw_lo, cw_hi) = cfg.cell_range(cfg.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spectra = class_spectra(&mut rng, cfg.n_classes, cfg.bands);
    let (t_len, h, w) = (cfg.t_len, cfg.height, cfg.width);
    let n_classes = cfg.n_classes as u16;
    let background: u16 = rng.random_range(0..n_classes);
    let mut labels = vec![background; t_len * h * w];

    for _ in 0..cfg.n_objects {
        let oh = rng.random_range(ch_lo..=ch_hi) * cfg.grid;
        let ow = rng.random_range(cw_lo..=cw_hi) * cfg.grid;
        let y0 = rng.random_range(0..=(h - oh) / cfg.grid) * cfg.grid;
        let x0 = rng.random_range(0..=(w - ow) / cfg.grid) * cfg.grid;
        let at = rng.random_range(1..t_len);
        let class = (background + rng.random_range(1..n_classes)) % n_classes;
        let event = match rng.random_range(0..3u8) {
            0 => Event::Appear,
            1 => Event::Disappear,
            _ => Event::Recolor((class + rng.random_range(1..n_classes)) % n_classes),
        };
        for t in 0..t_len {
            let paint = match event {
                Event::Appear => (t >= at).then_some(class),
                Event::Disappear => (t < at).then_some(class),
                Event::Recolor(after) => Some(if t < at { class } else { after }),
            };
            if let Some(c) = paint {
                for y in y0..y0 + oh {
                    labels[(t * h + y) * w + x0..(t * h + y) * w + x0 + ow].fill(c);
                }
            }
        }
    }

    let series = SemanticSeries::new(t_len, h, w, cfg.n_classes, labels)?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| CaimError::Config(e.to_string()))?;
    let mut images = Vec::with_capacity(t_len * cfg.bands * h * w);
    for t in 0..t_len {
        for b in 0..cfg.bands {
            for p in 0..h * w {
                let class = series.labels[t * h * w + p] as usize;
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                images.push(spectra[class][b] + n);
            }
        }
    }
    let cube = TsiCube::new(Tensor::from_vec(&[t_len, cfg.bands, h, w], images)?)?;
    let change = derive_change_labels(&series)?;
    Ok((cube, series, change))
}
