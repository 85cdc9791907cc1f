use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub spacing_m: f64,
    pub max_span_m: f64,
    pub min_frames: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            spacing_m: 8.0,
            max_span_m: 50.0,
            min_frames: 6,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_m > 0.0) || !(self.max_span_m > 0.0) {
            return Err(Error::config("spacing and maximum span must be positive"));
        }
        if self.min_frames < 2 {
            return Err(Error::config("min_frames must be at least 2"));
        }
        Ok(())
    }
}

/// Inclusive index range `[start, end]` into the resampled track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRange {
    pub start: usize,
    pub end: usize,
}

impl SegmentRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the middle frame, rounded down.
    pub fn midpoint(&self) -> usize {
        self.start + (self.end - self.start) / 2
    }
}

/// Relative slack on the spacing test, so that floating-point summation of
/// evenly spaced steps does not skip the point that lands exactly on it.
const SPACING_SLACK: f64 = 1e-9;

/// Indices of the points kept by greedy resampling: the first point, then
/// each next track point at least `spacing_m` (cumulative path length) past
/// the last kept one.
pub fn resample_indices(track: &[GeoPoint], spacing_m: f64) -> Result<Vec<usize>> {
    if track.is_empty() {
        return Err(Error::Empty("GPS track".into()));
    }
    let mut kept = vec![0];
    let mut travelled = 0.0;
    for i in 1..track.len() {
        travelled += haversine(track[i - 1], track[i]);
        if travelled >= spacing_m * (1.0 - SPACING_SLACK) {
            kept.push(i);
            travelled = 0.0;
        }
    }
    Ok(kept)
}

pub fn resample_track(track: &[GeoPoint], spacing_m: f64) -> Result<Vec<GeoPoint>> {
    Ok(resample_indices(track, spacing_m)?.into_iter().map(|i| track[i]).collect())
}

/// Splits resampled points into overlapping sequences.
///
/// From anchor `a`, the sequence runs up to the last point still within
/// `max_span_m` of `s_a`. The next anchor is the middle of that sequence.
/// Once no point leaves the span the remainder forms the last candidate.
/// Candidates shorter than `min_frames` are dropped.
pub fn segment(samples: &[GeoPoint], params: &SegmentationParams) -> Vec<SegmentRange> {
    let mut out = Vec::new();
    let mut anchor = 0;
    while anchor < samples.len() {
        let exit = (anchor + 1..samples.len()).find(|&x| haversine(samples[anchor], samples[x]) > params.max_span_m);
        let end = match exit {
            Some(x) => x - 1,
            None => samples.len() - 1,
        };
        let range = SegmentRange { start: anchor, end };
        if range.len() >= params.min_frames {
            out.push(range);
        }
        if exit.is_none() {
            break;
        }
        // a one- or two-point range would otherwise re-anchor on itself
        anchor = range.midpoint().max(anchor + 1);
    }
    out
}
