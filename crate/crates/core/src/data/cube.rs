//! Time-series cube, semantic label series and change labels.

use crate::error::{shape_err, CaimError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One location imaged at `T` dates: `[T, C, H, W]` reflectance-like values.
#[derive(Clone, Debug, PartialEq)]
pub struct TsiCube {
    images: Tensor<f32>,
}

impl TsiCube {
    pub fn new(images: Tensor<f32>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!("cube must be [T, C, H, W], got {:?}", images.shape()));
        }
        if images.shape().iter().any(|&d| d == 0) {
            return Err(shape_err!("cube has an empty axis: {:?}", images.shape()));
        }
        if images.dim(0) < 2 {
            return Err(CaimError::InvalidInput(format!("cube needs at least 2 images, got {}", images.dim(0))));
        }
        if !images.all_finite() {
            return Err(CaimError::InvalidInput("cube contains non-finite values".into()));
        }
        Ok(TsiCube { images })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn t_len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn bands(&self) -> usize {
        self.images.dim(1)
    }

    pub fn height(&self) -> usize {
        self.images.dim(2)
    }

    pub fn width(&self) -> usize {
        self.images.dim(3)
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)` across all dates and bands.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<TsiCube> {
        let (t, c, hh, ww) = (self.t_len(), self.bands(), self.height(), self.width());
        if y0 + h > hh || x0 + w > ww {
            return Err(shape_err!("crop {}x{} at ({}, {}) exceeds {}x{}", h, w, y0, x0, hh, ww));
        }
        let mut data = Vec::with_capacity(t * c * h * w);
        for plane in self.images.data().chunks(hh * ww) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * ww + x0..y * ww + x0 + w]);
            }
        }
        TsiCube::new(Tensor::from_vec(&[t, c, h, w], data)?)
    }
}

/// Per-date class ids `[T, H, W]` in `0..n_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticSeries {
    pub t_len: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub labels: Vec<u16>,
}

impl SemanticSeries {
    pub fn new(t_len: usize, height: usize, width: usize, n_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != t_len * height * width {
            return Err(shape_err!("{} labels for a {}x{}x{} series", labels.len(), t_len, height, width));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(CaimError::Label(format!("class id {bad} outside 0..{n_classes}")));
        }
        Ok(SemanticSeries { t_len, height, width, n_classes, labels })
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> u16 {
        self.labels[(t * self.height + y) * self.width + x]
    }
}

/// Binary change area and last-change moment per pixel.
///
/// Moment `0` means unchanged; moment `i ≥ 1` means the last change happened between
/// image `i` and image `i + 1` (1-based image numbering).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeLabels {
    pub t_len: usize,
    pub height: usize,
    pub width: usize,
    pub area: Vec<u8>,
    pub moment: Vec<u16>,
}

impl ChangeLabels {
    pub fn new(t_len: usize, height: usize, width: usize, area: Vec<u8>, moment: Vec<u16>) -> Result<Self> {
        let labels = ChangeLabels { t_len, height, width, area, moment };
        labels.validate()?;
        Ok(labels)
    }

    /// Checks sizes, moment range and `area = 1 ⇔ moment ≠ 0`.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.area.len() != n || self.moment.len() != n {
            return Err(shape_err!("label maps must hold {} pixels", n));
        }
        for (p, (&a, &m)) in self.area.iter().zip(&self.moment).enumerate() {
            if m as usize >= self.t_len {
                return Err(CaimError::Label(format!("moment {m} at pixel {p} outside 0..{}", self.t_len)));
            }
            if a > 1 || (a == 1) != (m != 0) {
                return Err(CaimError::Label(format!("area {a} inconsistent with moment {m} at pixel {p}")));
            }
        }
        Ok(())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ChangeLabels> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(shape_err!("label crop exceeds {}x{}", self.height, self.width));
        }
        let mut area = Vec::with_capacity(h * w);
        let mut moment = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let r = y * self.width + x0..y * self.width + x0 + w;
            area.extend_from_slice(&self.area[r.clone()]);
            moment.extend_from_slice(&self.moment[r]);
        }
        Ok(ChangeLabels { t_len: self.t_len, height: h, width: w, area, moment })
    }

    pub fn changed_pixels(&self) -> usize {
        self.area.iter().filter(|&&a| a == 1).count()
    }
}

/// Last-change labelling: per pixel the largest `i ∈ 1..T` with `labels[i] ≠ labels[i−1]`
/// (0-based dates), or 0 when the pixel never changes.
pub fn derive_change_labels(series: &SemanticSeries) -> Result<ChangeLabels> {
    if series.t_len < 2 {
        return Err(CaimError::InvalidSeries(format!("need at least 2 dates, got {}", series.t_len)));
    }
    let n = series.height * series.width;
    let mut moment = vec![0u16; n];
    for (p, m) in moment.iter_mut().enumerate() {
        for i in (1..series.t_len).rev() {
            if series.labels[i * n + p] != series.labels[(i - 1) * n + p] {
                *m = i as u16;
                break;
            }
        }
    }
    let area = moment.iter().map(|&m| u8::from(m != 0)).collect();
    Ok(ChangeLabels { t_len: series.t_len, height: series.height, width: series.width, area, moment })
}

/// A cube with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cube: TsiCube,
    pub labels: ChangeLabels,
}

/// Stacks cubes into the network input `[T, B, C, H, W]`.
pub fn batch_images<F: Scalar>(cubes: &[&TsiCube]) -> Result<Tensor<F>> {
    let first = cubes.first().ok_or_else(|| CaimError::InvalidInput("empty batch".into()))?;
    let (t, c, h, w) = (first.t_len(), first.bands(), first.height(), first.width());
    let frame = c * h * w;
    let b = cubes.len();
    let mut data = vec![F::zero(); t * b * frame];
    for (bi, cube) in cubes.iter().enumerate() {
        if cube.images().shape() != first.images().shape() {
            return Err(shape_err!("batch mixes cube shapes {:?} and {:?}", first.images().shape(), cube.images().shape()));
        }
        for ti in 0..t {
            let src = &cube.images().data()[ti * frame..(ti + 1) * frame];
            let dst = &mut data[(ti * b + bi) * frame..(ti * b + bi + 1) * frame];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = F::from_f64_lossy(v as f64);
            }
        }
    }
    Tensor::from_vec(&[t, b, c, h, w], data)
}
