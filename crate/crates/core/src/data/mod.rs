//! Cubes, labels, synthetic scenes, storage and dataset handling.

pub mod cube;
pub mod patches;
pub mod storage;
pub mod synth;

use std::path::{Path, PathBuf};

pub use cube::{batch_images, derive_change_labels, ChangeLabels, Sample, SemanticSeries, TsiCube};
pub use patches::{extract_patches, split_dataset};
pub use storage::{load_cube, load_label_maps, save_cube, save_prediction_maps};
pub use synth::{generate_synthetic_scene, SceneConfig};

use crate::error::{CaimError, Result};

pub const CUBE_EXT: &str = "caim";

/// Sorted `*.caim` files of a directory.
pub fn list_cubes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == CUBE_EXT))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every labelled cube of a directory, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(PathBuf, Sample)>> {
    let mut out = Vec::new();
    for path in list_cubes(dir)? {
        let (cube, labels) = load_cube(&path)?;
        let labels = labels.ok_or_else(|| CaimError::Format(format!("{} has no labels", path.display())))?;
        out.push((path, Sample { cube, labels }));
    }
    if out.is_empty() {
        return Err(CaimError::InvalidInput(format!("no .{CUBE_EXT} files in {}", dir.display())));
    }
    Ok(out)
}

/// Tiles every sample into `patch × patch` samples taken every `stride` pixels.
pub fn tile_samples(samples: impl IntoIterator<Item = Sample>, patch: usize, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in samples {
        for (cube, labels) in extract_patches(&s.cube, &s.labels, patch, stride)? {
            out.push(Sample { cube, labels });
        }
    }
    Ok(out)
}
