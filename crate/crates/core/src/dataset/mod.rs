//! Manifests, trajectory segmentation, label construction, the synthetic
//! sequence generator and loading of model inputs.

mod load;
mod manifest;
mod samples;
mod segment;
mod synthetic;

pub use load::{group_sequences, load_sequences, SequenceTensors};
pub use manifest::{read_manifest, read_manifest_str, write_manifest, write_manifest_string, FrameRecord};
pub use samples::{build_samples, PatchPolicy, SequenceSample};
pub use segment::{resample_indices, resample_track, segment, SegmentRange, SegmentationParams};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticConfig, SyntheticSequence};
