use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::imageops::FilterType;

use crate::dataset::{FrameRecord, SyntheticSequence};
use crate::error::{Error, Result};
use crate::geo::{gps_to_pixel, SatPatchGeo};
use crate::io::read_tensors;
use crate::tensor::Tensor;

/// Model-ready inputs of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTensors {
    pub seq_id: String,
    /// `[H, W, C]` satellite input.
    pub satellite: Tensor,
    /// `[H, W, C]` per ground frame.
    pub frames: Vec<Tensor>,
    /// Model-scale ground truth per frame.
    pub gt_pixels: Vec<(f64, f64)>,
    pub patch: SatPatchGeo,
    pub model_scale: f64,
}

impl From<SyntheticSequence> for SequenceTensors {
    fn from(s: SyntheticSequence) -> Self {
        SequenceTensors {
            seq_id: s.seq_id,
            satellite: s.satellite,
            frames: s.frames,
            gt_pixels: s.gt_pixels,
            patch: s.patch,
            model_scale: s.model_scale,
        }
    }
}

/// Groups records by `seq_id` (sorted) with frames sorted by `frame_index`.
pub fn group_sequences(records: &[FrameRecord]) -> Vec<(String, Vec<FrameRecord>)> {
    let mut groups: BTreeMap<&str, Vec<FrameRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.seq_id).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(id, mut frames)| {
            frames.sort_by_key(|f| f.frame_index);
            (id.to_string(), frames)
        })
        .collect()
}

fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() == (width as u32, height as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle)
    };
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(vec![height, width, 3], data)
}

/// Loads every sequence of a manifest.
///
/// Paths are resolved against `base_dir`. Feature files hold a `satellite`
/// tensor and one `frame_{frame_index}` tensor per frame. Frames whose ground
/// truth falls outside the model input are dropped with a warning; the number
/// dropped is returned alongside the sequences.
pub fn load_sequences(
    records: &[FrameRecord],
    base_dir: &Path,
    sat_px: usize,
    ground_px: [usize; 2],
) -> Result<(Vec<SequenceTensors>, usize)> {
    let mut cache: HashMap<String, HashMap<String, Tensor>> = HashMap::new();
    let mut out = Vec::new();
    let mut dropped = 0;
    for (seq_id, frames) in group_sequences(records) {
        let patch = frames[0]
            .patch()
            .ok_or_else(|| Error::config(format!("sequence `{seq_id}` has no satellite patch fields")))??;
        if frames.iter().any(|f| f.patch().and_then(|p| p.ok()) != Some(patch)) {
            return Err(Error::config(format!("frames of `{seq_id}` disagree on the satellite patch")));
        }
        let model_scale = patch.size_px / sat_px as f64;

        let mut satellite = None;
        let mut inputs = Vec::new();
        let mut gt_pixels = Vec::new();
        for f in &frames {
            let gt = gps_to_pixel(f.gps(), &patch)
                .map(|(u, v)| (u / model_scale, v / model_scale))
                .ok()
                .filter(|&(u, v)| u < sat_px as f64 && v < sat_px as f64);
            let Some(gt) = gt else {
                log::warn!("sequence {seq_id}: frame {} lies outside its patch, excluded", f.frame_index);
                dropped += 1;
                continue;
            };
            let input = if let Some(rel) = &f.feature_path {
                if !cache.contains_key(rel) {
                    let tensors = read_tensors(&base_dir.join(rel))?;
                    cache.insert(rel.clone(), tensors.into_iter().collect());
                }
                let file = &cache[rel];
                let get = |name: &str| {
                    file.get(name)
                        .cloned()
                        .ok_or_else(|| Error::config(format!("{rel} has no tensor `{name}`")))
                };
                if satellite.is_none() {
                    satellite = Some(get("satellite")?);
                }
                get(&format!("frame_{}", f.frame_index))?
            } else {
                let rel = f.image_path.as_ref().expect("validated manifest");
                if satellite.is_none() {
                    let sat = f
                        .sat_path
                        .as_ref()
                        .ok_or_else(|| Error::config(format!("sequence `{seq_id}` has no sat_path")))?;
                    satellite = Some(load_image(&base_dir.join(sat), sat_px, sat_px)?);
                }
                load_image(&base_dir.join(rel), ground_px[0], ground_px[1])?
            };
            inputs.push(input);
            gt_pixels.push(gt);
        }
        let Some(satellite) = satellite else { continue };
        out.push(SequenceTensors {
            seq_id,
            satellite,
            frames: inputs,
            gt_pixels,
            patch,
            model_scale,
        });
    }
    Ok((out, dropped))
}
