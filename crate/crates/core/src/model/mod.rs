//! The sequential localizer: extractors, fusion network, temporal attention and heads.

mod config;
mod extractor;
mod localizer;
mod target;

pub use config::{ExtractorKind, ModelConfig};
pub use extractor::{FeatureExtractor, Features};
pub use localizer::{FusionFeature, HeadOutput, HiddenState, Localizer, Recurrence, StepOutput};
pub use target::{argmax, decode, encode_target, GridPrediction};
