use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, SatPatchGeo};

/// One line of a JSON-lines manifest. Fields the program does not know are
/// kept in `extra` and written back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub seq_id: String,
    pub frame_index: u64,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_center_lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_center_lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_res_mpp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_size_px: Option<f64>,
    /// Satellite image (image mode) for the sequence. In feature mode the
    /// satellite grid lives in the feature file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_path: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl FrameRecord {
    pub fn gps(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }

    /// The satellite patch, when all four patch fields are present.
    pub fn patch(&self) -> Option<Result<SatPatchGeo>> {
        match (self.sat_center_lat, self.sat_center_lon, self.sat_res_mpp, self.sat_size_px) {
            (Some(lat), Some(lon), Some(res), Some(size)) => {
                Some(GeoPoint::new(lat, lon).and_then(|c| SatPatchGeo::new(c, res, size)))
            }
            _ => None,
        }
    }

    pub fn set_patch(&mut self, patch: &SatPatchGeo) {
        self.sat_center_lat = Some(patch.center.lat);
        self.sat_center_lon = Some(patch.center.lon);
        self.sat_res_mpp = Some(patch.res_mpp);
        self.sat_size_px = Some(patch.size_px);
    }

    fn validate(&self) -> std::result::Result<(), String> {
        GeoPoint::new(self.lat, self.lon).map_err(|e| e.to_string())?;
        match (&self.image_path, &self.feature_path) {
            (Some(_), Some(_)) => return Err("both image_path and feature_path are set".into()),
            (None, None) => return Err("one of image_path or feature_path is required".into()),
            _ => {}
        }
        let patch_fields = [
            self.sat_center_lat,
            self.sat_center_lon,
            self.sat_res_mpp,
            self.sat_size_px,
        ];
        let present = patch_fields.iter().filter(|f| f.is_some()).count();
        if present != 0 && present != 4 {
            return Err("satellite patch fields must be given together".into());
        }
        if let Some(Err(e)) = self.patch() {
            return Err(e.to_string());
        }
        Ok(())
    }
}

pub fn read_manifest_str(text: &str) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(line).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => Error::Schema {
                line: line_no,
                message: e.to_string(),
            },
            _ => Error::Parse {
                line: line_no,
                message: e.to_string(),
            },
        })?;
        record.validate().map_err(|message| Error::Schema { line: line_no, message })?;
        if !seen.insert((record.seq_id.clone(), record.frame_index)) {
            return Err(Error::Schema {
                line: line_no,
                message: format!("duplicate frame {} in sequence `{}`", record.frame_index, record.seq_id),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    read_manifest_str(&text)
}

pub fn write_manifest_string(records: &[FrameRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(records: &[FrameRecord], path: &Path) -> Result<()> {
    fs::write(path, write_manifest_string(records)?).map_err(|e| Error::file(path, e))
}
