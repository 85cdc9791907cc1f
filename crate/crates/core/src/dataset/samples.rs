use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameRecord, SegmentRange};
use crate::error::{Error, Result};
use crate::geo::{gps_to_pixel, pixel_to_gps, SatPatchGeo};

/// How satellite patches are placed around a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPolicy {
    pub res_mpp: f64,
    /// Native patch side in pixels.
    pub size_px: f64,
    /// Model input side in pixels.
    pub model_px: f64,
    /// Radius of the uniform-in-disk random shift of the patch center.
    pub jitter_m: f64,
    pub seed: u64,
}

impl Default for PatchPolicy {
    fn default() -> Self {
        PatchPolicy {
            res_mpp: 0.2,
            size_px: 640.0,
            model_px: 256.0,
            jitter_m: 5.0,
            seed: 0,
        }
    }
}

impl PatchPolicy {
    /// Native pixels per model pixel.
    pub fn model_scale(&self) -> f64 {
        self.size_px / self.model_px
    }
}

/// A sequence with its satellite patch and model-scale ground-truth pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub seq_id: String,
    pub frames: Vec<FrameRecord>,
    pub patch: SatPatchGeo,
    pub gt_pixels: Vec<(f64, f64)>,
    pub model_scale: f64,
}

/// Places a patch on the midpoint frame of each range and labels every frame.
///
/// Returns the samples and the number of ranges rejected because a frame fell
/// outside its patch. Sequence ids are `{seq_id of the first frame}_{k:04}`.
pub fn build_samples(
    ranges: &[SegmentRange],
    frames: &[FrameRecord],
    policy: &PatchPolicy,
) -> Result<(Vec<SequenceSample>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let scale = policy.model_scale();
    let mut samples = Vec::new();
    let mut rejected = 0;
    for (k, range) in ranges.iter().enumerate() {
        if range.end >= frames.len() || range.start > range.end {
            return Err(Error::config(format!(
                "range [{}, {}] does not fit {} frames",
                range.start,
                range.end,
                frames.len()
            )));
        }
        let mid = frames[range.midpoint()].gps();
        let centered = SatPatchGeo::new(mid, policy.res_mpp, policy.size_px)?;
        // jitter is drawn even when zero so the stream stays aligned across policies
        let r = policy.jitter_m * rng.random::<f64>().sqrt();
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let half = policy.size_px / 2.0;
        let center = pixel_to_gps(
            half + r * theta.cos() / policy.res_mpp,
            half - r * theta.sin() / policy.res_mpp,
            &centered,
        );
        let patch = SatPatchGeo::new(center, policy.res_mpp, policy.size_px)?;
        let seq_id = format!("{}_{k:04}", frames[range.start].seq_id);
        let mut gt_pixels = Vec::with_capacity(range.len());
        let mut ok = true;
        for f in &frames[range.start..=range.end] {
            match gps_to_pixel(f.gps(), &patch) {
                Ok((u, v)) => gt_pixels.push((u / scale, v / scale)),
                Err(e) => {
                    log::warn!("sequence {seq_id}: frame {} rejected: {e}", f.frame_index);
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            rejected += 1;
            continue;
        }
        let frames = frames[range.start..=range.end]
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.seq_id = seq_id.clone();
                f.set_patch(&patch);
                f
            })
            .collect();
        samples.push(SequenceSample {
            seq_id,
            frames,
            patch,
            gt_pixels,
            model_scale: scale,
        });
    }
    Ok((samples, rejected))
}
