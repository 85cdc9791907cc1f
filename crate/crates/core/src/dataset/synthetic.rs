use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, FrameRecord};
use crate::error::{Error, Result};
use crate::geo::{pixel_to_gps, GeoPoint, SatPatchGeo};
use crate::io::write_tensors;
use crate::tensor::Tensor;

const MAX_TRAJECTORY_TRIES: usize = 10_000;

/// Synthetic worlds in which single frames can be ambiguous but trajectories are not.
///
/// Each world is an `N×N` grid of random `C`-dim landmark signatures, which
/// doubles as the satellite input. A frame observes the signature of the cell
/// it stands in plus noise. With probability `dup_prob` a frame's signature is
/// also copied to a distractor cell far from the whole path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub grid: usize,
    pub seq_len: usize,
    pub count: usize,
    pub dup_prob: f64,
    pub noise: f64,
    /// Distance between consecutive positions, model pixels.
    pub step_px: f64,
    pub heading_noise_deg: f64,
    pub channels: usize,
    pub sat_px: usize,
    /// Minimum distance, in cells, between a distractor and every path cell.
    pub min_distractor_cells: f64,
    /// Tokens next to the landmark token in each ground frame.
    pub background_tokens: usize,
    /// Every channel of a background token holds this value.
    pub background_value: f64,
    pub res_mpp: f64,
    pub native_px: f64,
    pub origin: GeoPoint,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            grid: 32,
            seq_len: 6,
            count: 200,
            dup_prob: 0.3,
            noise: 0.1,
            step_px: 16.0,
            heading_noise_deg: 5.0,
            channels: 32,
            sat_px: 256,
            min_distractor_cells: 10.0,
            background_tokens: 1,
            background_value: 1.0,
            res_mpp: 0.2,
            native_px: 640.0,
            origin: GeoPoint { lat: 49.0, lon: 8.4 },
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.seq_len == 0 || self.channels == 0 || self.sat_px == 0 {
            return Err(Error::config("grid, seq_len, channels and sat_px must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dup_prob) {
            return Err(Error::config(format!("dup_prob {} is not in [0, 1]", self.dup_prob)));
        }
        if !(self.noise >= 0.0) || !(self.step_px >= 0.0) || !(self.heading_noise_deg >= 0.0) {
            return Err(Error::config("noise, step_px and heading noise must be non-negative"));
        }
        if self.step_px >= self.sat_px as f64 / 2.0 && self.seq_len > 1 {
            return Err(Error::config("step_px is too large for the patch"));
        }
        if !(self.res_mpp > 0.0) || !(self.native_px > 0.0) {
            return Err(Error::config("res_mpp and native_px must be positive"));
        }
        Ok(())
    }

    pub fn cell_px(&self) -> f64 {
        self.sat_px as f64 / self.grid as f64
    }

    pub fn model_scale(&self) -> f64 {
        self.native_px / self.sat_px as f64
    }

    pub fn patch(&self) -> SatPatchGeo {
        SatPatchGeo {
            center: self.origin,
            res_mpp: self.res_mpp,
            size_px: self.native_px,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub seq_id: String,
    /// `[N, N, C]` signature grid.
    pub satellite: Tensor,
    /// Per frame `[1, 1 + background_tokens, C]`; the landmark token comes first.
    pub frames: Vec<Tensor>,
    pub gt_pixels: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
    /// Distractor cell holding a copy of the frame's signature, if any.
    pub distractors: Vec<Option<usize>>,
    pub patch: SatPatchGeo,
    pub model_scale: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal) as f32 as f64
}

fn trajectory(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let size = cfg.sat_px as f64;
    let sigma = cfg.heading_noise_deg.to_radians();
    for _ in 0..MAX_TRAJECTORY_TRIES {
        let mut p = (rng.random::<f64>() * size, rng.random::<f64>() * size);
        let mut heading = rng.random::<f64>() * std::f64::consts::TAU;
        let mut path = vec![p];
        for _ in 1..cfg.seq_len {
            heading += sigma * rng.sample::<f64, _>(StandardNormal);
            p = (p.0 + cfg.step_px * heading.cos(), p.1 + cfg.step_px * heading.sin());
            path.push(p);
        }
        if path.iter().all(|&(u, v)| (0.0..size).contains(&u) && (0.0..size).contains(&v)) {
            return Ok(path);
        }
    }
    Err(Error::config("no trajectory fits inside the patch"))
}

fn generate_one(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (n, c) = (cfg.grid, cfg.channels);
    let mut world: Vec<f64> = (0..n * n * c).map(|_| gaussian(&mut rng)).collect();
    let path = trajectory(cfg, &mut rng)?;
    let cell_px = cfg.cell_px();
    let cells: Vec<usize> = path
        .iter()
        .map(|&(u, v)| ((v / cell_px) as usize).min(n - 1) * n + ((u / cell_px) as usize).min(n - 1))
        .collect();

    let far_from_path = |k: usize| {
        let (r, cc) = ((k / n) as f64, (k % n) as f64);
        cells.iter().all(|&p| {
            let (pr, pc) = ((p / n) as f64, (p % n) as f64);
            (r - pr).hypot(cc - pc) >= cfg.min_distractor_cells
        })
    };
    let mut distractors: Vec<Option<usize>> = Vec::with_capacity(cells.len());
    for (t, &cell) in cells.iter().enumerate() {
        let wants = rng.random::<f64>() < cfg.dup_prob;
        let repeated = cells[..t].contains(&cell);
        if !wants || repeated {
            distractors.push(None);
            continue;
        }
        let eligible: Vec<usize> = (0..n * n)
            .filter(|&k| far_from_path(k) && !distractors.contains(&Some(k)))
            .collect();
        if eligible.is_empty() {
            distractors.push(None);
            continue;
        }
        let d = eligible[rng.random_range(0..eligible.len())];
        world.copy_within(cell * c..(cell + 1) * c, d * c);
        distractors.push(Some(d));
    }

    let width = 1 + cfg.background_tokens;
    let frames = cells
        .iter()
        .map(|&cell| {
            let mut data = vec![cfg.background_value; width * c];
            for (i, x) in data[..c].iter_mut().enumerate() {
                *x = (world[cell * c + i] + cfg.noise * gaussian(&mut rng)) as f32 as f64;
            }
            Tensor::new(vec![1, width, c], data)
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticSequence {
        seq_id: format!("synth_{index:05}"),
        satellite: Tensor::new(vec![n, n, c], world)?,
        frames,
        gt_pixels: path,
        cells,
        distractors,
        patch: cfg.patch(),
        model_scale: cfg.model_scale(),
    })
}

/// Generates `cfg.count` sequences. Sequence `i` depends only on `(seed, i)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSequence>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_one(cfg, i)).collect()
}

/// Writes one feature file per sequence plus `manifest.jsonl` into `dir`.
/// Returns the manifest path.
pub fn write_synthetic(sequences: &[SyntheticSequence], dir: &Path) -> Result<PathBuf> {
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::file(&features, e))?;
    let mut records = Vec::new();
    for s in sequences {
        let rel = format!("features/{}.tensors", s.seq_id);
        let names: Vec<String> = (0..s.frames.len()).map(|i| format!("frame_{i}")).collect();
        let mut tensors: Vec<(&str, &Tensor)> = vec![("satellite", &s.satellite)];
        tensors.extend(names.iter().map(String::as_str).zip(&s.frames));
        write_tensors(&dir.join(&rel), &tensors)?;
        for (i, &(u, v)) in s.gt_pixels.iter().enumerate() {
            let gps = pixel_to_gps(u * s.model_scale, v * s.model_scale, &s.patch);
            let mut r = FrameRecord {
                seq_id: s.seq_id.clone(),
                frame_index: i as u64,
                lat: gps.lat,
                lon: gps.lon,
                heading_deg: None,
                image_path: None,
                feature_path: Some(rel.clone()),
                sat_center_lat: None,
                sat_center_lon: None,
                sat_res_mpp: None,
                sat_size_px: None,
                sat_path: None,
                extra: Default::default(),
            };
            r.set_patch(&s.patch);
            records.push(r);
        }
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}
