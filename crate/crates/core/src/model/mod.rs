//! The three-step network: difference encoder, coarse moment extractors and CAM refinement.

pub mod cam;
pub mod coarse;
pub mod encoder;
pub mod layers;
pub mod net;

use serde::{Deserialize, Serialize};

use crate::error::{CaimError, Result};

pub use cam::{fuse_fine_moment, infer_area, temporal_cam, AreaPrediction, MomentPrediction, CAM_HEADS};
pub use net::{CaimNet, NetOutputs};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_len: usize,
    pub bands: usize,
    /// Encoder and difference-feature width.
    pub channels: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of the first extractor-2 convolution.
    pub mid: usize,
    /// Keep the sign of `E(i+1) − E(i)` instead of its magnitude.
    pub signed_diff: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_len: 6,
            bands: 4,
            channels: 64,
            hidden: 32,
            heads: 4,
            ffn_mult: 2,
            mid: 64,
            signed_diff: false,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CaimError::Config(m.to_string()));
        if self.t_len < 2 {
            return bad("t_len must be at least 2");
        }
        if self.t_len > u16::MAX as usize {
            return bad("t_len too large");
        }
        if self.bands == 0 || self.channels == 0 || self.hidden == 0 || self.mid == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive");
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(CaimError::Config(format!("{} channels not divisible by {} heads", self.channels, self.heads)));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }
}

/// GroupNorm group count used for a `c`-channel map.
pub fn norm_groups(c: usize) -> usize {
    let g = c.min(8);
    (1..=g).rev().find(|g| c % g == 0).unwrap_or(1)
}
