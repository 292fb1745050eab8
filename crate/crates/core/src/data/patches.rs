//! Spatial tiling and train/validation/test splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cube::{ChangeLabels, TsiCube};
use crate::error::{CaimError, Result};

fn origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=len - patch).step_by(stride).collect()
}

/// Crops `patch × patch` tiles every `stride` pixels; dates and bands are kept whole.
pub fn extract_patches(
    cube: &TsiCube,
    labels: &ChangeLabels,
    patch: usize,
    stride: usize,
) -> Result<Vec<(TsiCube, ChangeLabels)>> {
    let (h, w) = (cube.height(), cube.width());
    if patch == 0 || stride == 0 {
        return Err(CaimError::InvalidPatch("patch and stride must be positive".into()));
    }
    if patch > h || patch > w {
        return Err(CaimError::InvalidPatch(format!("patch {patch} larger than {h}x{w}")));
    }
    if labels.height != h || labels.width != w {
        return Err(CaimError::InvalidPatch("labels do not match the cube".into()));
    }
    let mut out = Vec::new();
    for &y in &origins(h, patch, stride) {
        for &x in &origins(w, patch, stride) {
            out.push((cube.crop(y, x, patch, patch)?, labels.crop(y, x, patch, patch)?));
        }
    }
    Ok(out)
}

/// Shuffled split by `ratios`; each part gets `⌊n·r/Σr⌋` items (at least one), the
/// remainder goes to the first (training) part.
pub fn split_dataset<T>(items: Vec<T>, ratios: (usize, usize, usize), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    let total = ratios.0 + ratios.1 + ratios.2;
    if n < 3 {
        return Err(CaimError::Split(format!("{n} items cannot fill 3 parts")));
    }
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(CaimError::Split("every ratio must be positive".into()));
    }
    let n_val = (n * ratios.1 / total).max(1);
    let n_test = (n * ratios.2 / total).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(CaimError::Split(format!("{n} items leave no training data")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![0u8; n];
    for &i in &order[n_train..n_train + n_val] {
        part[i] = 1;
    }
    for &i in &order[n_train + n_val..] {
        part[i] = 2;
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    for &i in &order {
        let item = slots[i].take().unwrap();
        match part[i] {
            0 => train.push(item),
            1 => val.push(item),
            _ => test.push(item),
        }
    }
    Ok((train, val, test))
}
