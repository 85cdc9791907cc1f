use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Cell logits and in-cell offsets read off the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub logits: Vec<f64>,
    pub offsets: (f64, f64),
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pixel `(u, v)` at model scale for a prediction. Offsets are clamped to `[0, 1]`.
pub fn decode(pred: &GridPrediction, config: &ModelConfig) -> (f64, f64) {
    let k = argmax(&pred.logits);
    let (r, c) = (k / config.grid, k % config.grid);
    let cell = config.cell_px();
    let ox = pred.offsets.0.clamp(0.0, 1.0);
    let oy = pred.offsets.1.clamp(0.0, 1.0);
    ((c as f64 + ox) * cell, (r as f64 + oy) * cell)
}

/// Cell index and in-cell offsets of a ground-truth pixel.
pub fn encode_target(pixel: (f64, f64), config: &ModelConfig) -> Result<(usize, (f64, f64))> {
    let (u, v) = pixel;
    let size = config.sat_px as f64;
    if !(0.0..size).contains(&u) || !(0.0..size).contains(&v) {
        return Err(Error::Target(format!(
            "pixel ({u:.3}, {v:.3}) is outside the {size} px satellite input"
        )));
    }
    let cell = config.cell_px();
    let (fu, fv) = (u / cell, v / cell);
    let (c, r) = (fu.floor(), fv.floor());
    let k = r as usize * config.grid + c as usize;
    Ok((k, (fu - c, fv - r)))
}
