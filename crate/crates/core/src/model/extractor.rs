use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ExtractorKind, ModelConfig};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Maps an input image or feature grid to `C`-channel tokens.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// Three convolutions (kernel 4, stride 2, pad 1) with ReLU, each halving
    /// the resolution, so the output is `input / 8` per side.
    Conv { stages: Vec<Linear> },
    Identity { channels: usize },
}

/// Extractor output: `tokens` is `[(H·W) × C]`, row-major over the grid.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, config: &ModelConfig) -> Result<Self> {
        match config.extractor {
            ExtractorKind::Identity => Ok(FeatureExtractor::Identity {
                channels: config.channels,
            }),
            ExtractorKind::Conv => {
                let c = config.channels;
                let widths = [3, (c / 4).max(1), (c / 2).max(1), c];
                let stages = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        Linear::new(
                            store,
                            rng,
                            &format!("{name}.conv{i}"),
                            KERNEL * KERNEL * w[0],
                            w[1],
                            ParamGroup::Extractor,
                        )
                    })
                    .collect::<Result<_>>()?;
                Ok(FeatureExtractor::Conv { stages })
            }
        }
    }

    pub fn extract(&self, g: &mut Graph, input: &Tensor) -> Result<Features> {
        let &[mut height, mut width, channels] = input.shape() else {
            return Err(Error::shape(format!("extractor input must be [H, W, C], got {:?}", input.shape())));
        };
        match self {
            FeatureExtractor::Identity { channels: expect } => {
                if channels != *expect {
                    return Err(Error::shape(format!(
                        "feature grid has {channels} channels, model expects {expect}"
                    )));
                }
                let x = g.input(input.clone());
                let tokens = g.reshape(x, &[height * width, channels])?;
                Ok(Features { tokens, height, width })
            }
            FeatureExtractor::Conv { stages } => {
                if channels != 3 {
                    return Err(Error::shape(format!("expected an RGB image, got {channels} channels")));
                }
                let mut x = g.input(input.clone());
                for stage in stages {
                    let cols = g.im2col(x, KERNEL, STRIDE, PAD)?;
                    let y = stage.forward(g, cols)?;
                    let y = g.relu(y);
                    height = (height + 2 * PAD - KERNEL) / STRIDE + 1;
                    width = (width + 2 * PAD - KERNEL) / STRIDE + 1;
                    x = g.reshape(y, &[height, width, stage.out_dim])?;
                }
                let c = stages.last().map_or(channels, |s| s.out_dim);
                let tokens = g.reshape(x, &[height * width, c])?;
                Ok(Features { tokens, height, width })
            }
        }
    }
}
