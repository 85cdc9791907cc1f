use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{encode_target, HeadOutput, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_mse: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !ok(self.lambda_cls) || !ok(self.lambda_mse) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.lambda_cls == 0.0 && self.lambda_mse == 0.0 {
            return Err(Error::config("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// Cross-entropy of `logits: [K]` against class `target`.
pub fn loss_cls(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let k = g.value(logits).numel();
    if target >= k {
        return Err(Error::Target(format!("class {target} is out of range for {k} logits")));
    }
    let flat = g.reshape(logits, &[k])?;
    let log_probs = g.log_softmax(flat);
    let picked = g.pick(log_probs, target)?;
    Ok(g.scale(picked, -1.0))
}

/// Mean squared error over the two offset components.
pub fn loss_mse(g: &mut Graph, pred: Var, target: (f64, f64)) -> Result<Var> {
    let t = g.input(Tensor::from_vec(vec![target.0, target.1]));
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// `(1/T) Σ_t (λ_cls·cls_t + λ_mse·mse_t)`.
pub fn loss_seq(per_step: &[(f64, f64)], w: &LossWeights) -> Result<f64> {
    if per_step.is_empty() {
        return Err(Error::Empty("per-step loss list".into()));
    }
    let total: f64 = per_step
        .iter()
        .map(|&(c, m)| w.lambda_cls * c + w.lambda_mse * m)
        .sum();
    Ok(total / per_step.len() as f64)
}

/// Loss nodes of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub cls: Var,
    pub mse: Var,
}

/// Weighted single-step loss for the ground-truth pixel `gt`.
pub fn step_loss(
    g: &mut Graph,
    heads: &HeadOutput,
    gt: (f64, f64),
    config: &ModelConfig,
    w: &LossWeights,
) -> Result<StepLoss> {
    let (cell, offsets) = encode_target(gt, config)?;
    let cls = loss_cls(g, heads.logits, cell)?;
    let mse = loss_mse(g, heads.offsets, offsets)?;
    let a = g.scale(cls, w.lambda_cls);
    let b = g.scale(mse, w.lambda_mse);
    let total = g.add(a, b)?;
    Ok(StepLoss { total, cls, mse })
}
