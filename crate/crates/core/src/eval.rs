//! Per-sequence and dataset-level localization error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SequenceTensors;
use crate::error::{Error, Result};
use crate::geo::{pixel_error_to_meters, SatPatchGeo};
use crate::model::{decode, Localizer, Recurrence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub pred_u: f64,
    pub pred_v: f64,
    pub gt_u: f64,
    pub gt_v: f64,
    pub error_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub seq_id: String,
    pub sequence_error_m: f64,
    pub frames: Vec<FrameResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub count: usize,
    pub sequences: Vec<SequenceResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Mean per-frame ground error of one sequence.
pub fn sequence_error(
    seq_id: &str,
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    patch: &SatPatchGeo,
    model_scale: f64,
) -> Result<SequenceResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty(format!("sequence `{seq_id}`")));
    }
    let frames: Vec<FrameResult> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| FrameResult {
            pred_u: p.0,
            pred_v: p.1,
            gt_u: g.0,
            gt_v: g.1,
            error_m: pixel_error_to_meters(p, g, patch, model_scale),
        })
        .collect();
    let sequence_error_m = frames.iter().map(|f| f.error_m).sum::<f64>() / frames.len() as f64;
    Ok(SequenceResult {
        seq_id: seq_id.to_string(),
        sequence_error_m,
        frames,
    })
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Mean and median of the sequence errors. Results are sorted by `seq_id`.
pub fn aggregate(results: &[SequenceResult]) -> Result<DatasetReport> {
    if results.is_empty() {
        return Err(Error::Empty("result list".into()));
    }
    let mut sequences = results.to_vec();
    sequences.sort_by(|a, b| a.seq_id.cmp(&b.seq_id));
    let errors: Vec<f64> = sequences.iter().map(|s| s.sequence_error_m).collect();
    // sorted summation keeps the mean independent of the input order
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mean_error_m = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(DatasetReport {
        mean_error_m,
        median_error_m: median(&errors).expect("nonempty"),
        count: sequences.len(),
        sequences,
    })
}

/// Runs inference over every sequence and scores it.
pub fn evaluate(model: &Localizer, data: &[SequenceTensors], recurrence: Recurrence) -> Result<DatasetReport> {
    evaluate_threads(model, data, recurrence, 1)
}

/// Like [`evaluate`], spreading sequences over up to `threads` workers. The
/// report does not depend on the worker count.
pub fn evaluate_threads(
    model: &Localizer,
    data: &[SequenceTensors],
    recurrence: Recurrence,
    threads: usize,
) -> Result<DatasetReport> {
    let data: Vec<&SequenceTensors> = data.iter().filter(|s| !s.frames.is_empty()).collect();
    let score = |s: &SequenceTensors| {
        let preds = model.predict_sequence(&s.satellite, &s.frames, recurrence)?;
        let px: Vec<_> = preds.iter().map(|p| decode(p, &model.config)).collect();
        sequence_error(&s.seq_id, &px, &s.gt_pixels, &s.patch, s.model_scale)
    };
    let threads = threads.clamp(1, data.len().max(1));
    let results = if threads == 1 {
        data.iter().map(|s| score(s)).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = data.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let workers: Vec<_> = data
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| score(s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(data.len());
            for w in workers {
                all.extend(w.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    aggregate(&results)
}

pub fn report_json(report: &DatasetReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// One row per sequence after a header row.
pub fn report_csv(report: &DatasetReport) -> String {
    let mut out = String::from("seq_id,sequence_error_m,frames\n");
    for s in &report.sequences {
        let _ = writeln!(out, "{},{},{}", s.seq_id, s.sequence_error_m, s.frames.len());
    }
    out
}

pub fn write_report(report: &DatasetReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report),
    };
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_report(path: &Path) -> Result<DatasetReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
