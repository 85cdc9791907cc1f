use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Three stride-2 convolutions over an RGB image.
    Conv,
    /// The input already is a `[H, W, C]` feature grid.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Extractor output channels `C`.
    pub channels: usize,
    /// Satellite grid side `N`.
    pub grid: usize,
    /// Number of SAB/SAB/CAB rounds before the final CAB.
    pub fusion_rounds: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub seq_len: usize,
    /// Side of the square satellite input, in model pixels.
    pub sat_px: usize,
    /// Ground image `[height, width]` at model scale.
    pub ground_px: [usize; 2],
    pub ground_downsample: usize,
    pub extractor: ExtractorKind,
    /// Positional encodings on the fusion blocks' queries and keys.
    pub fusion_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            channels: 1024,
            grid: 32,
            fusion_rounds: 4,
            heads: 8,
            ffn_hidden: 512,
            seq_len: 6,
            sat_px: 256,
            ground_px: [128, 512],
            ground_downsample: 8,
            extractor: ExtractorKind::Conv,
            fusion_pe: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("channels", self.channels),
            ("grid", self.grid),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("seq_len", self.seq_len),
            ("sat_px", self.sat_px),
            ("ground_px[0]", self.ground_px[0]),
            ("ground_px[1]", self.ground_px[1]),
            ("ground_downsample", self.ground_downsample),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::config(format!("dim {} must be divisible by 4 for grid encodings", self.dim)));
        }
        if !self.sat_px.is_multiple_of(self.grid) {
            return Err(Error::config(format!(
                "sat_px {} is not divisible by grid {}",
                self.sat_px, self.grid
            )));
        }
        if self.extractor == ExtractorKind::Conv {
            if self.ground_downsample != 8 {
                return Err(Error::config("the convolutional extractor downsamples by exactly 8"));
            }
            if self.sat_px / 8 != self.grid {
                return Err(Error::config(format!(
                    "satellite input {} px gives a {} grid, config expects {}",
                    self.sat_px,
                    self.sat_px / 8,
                    self.grid
                )));
            }
            if self.ground_px.iter().any(|&p| p < 8) {
                return Err(Error::config("ground input must be at least 8 px on each side"));
            }
            if self.channels < 4 {
                return Err(Error::config("the convolutional extractor needs at least 4 channels"));
            }
        }
        Ok(())
    }

    pub fn cell_px(&self) -> f64 {
        self.sat_px as f64 / self.grid as f64
    }

    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Ground token grid `(H_g, W_g)` produced by the extractor.
    pub fn ground_grid(&self) -> (usize, usize) {
        (
            self.ground_px[0] / self.ground_downsample,
            self.ground_px[1] / self.ground_downsample,
        )
    }
}
