//! Synthetic comparison of sequential training with and without the
//! temporal block.
//!
//! Both arms start from the same single-frame checkpoint and get the same
//! sequential schedule; they differ only in whether the hidden state is used.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, SequenceTensors, SyntheticConfig};
use crate::error::Result;
use crate::eval::{evaluate, DatasetReport};
use crate::model::{ExtractorKind, Localizer, ModelConfig, Recurrence};
use crate::train::{train_baseline, train_sequential, LrSchedule, TrainConfig};

/// Test sets are generated from `seed + TEST_SEED_OFFSET`.
pub const TEST_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TamExperiment {
    pub model: ModelConfig,
    /// Training worlds; `count` is the training set size.
    pub data: SyntheticConfig,
    pub test_count: usize,
    /// Single-frame phase.
    pub baseline: TrainConfig,
    /// Sequential phase, run once per arm.
    pub sequential: TrainConfig,
}

impl Default for TamExperiment {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let dim = 32;
        let model = ModelConfig {
            dim,
            channels: data.channels,
            grid: data.grid,
            fusion_rounds: 0,
            heads: 1,
            ffn_hidden: 2 * dim,
            seq_len: data.seq_len,
            sat_px: data.sat_px,
            ground_px: [8, 16],
            ground_downsample: 8,
            extractor: ExtractorKind::Identity,
            fusion_pe: true,
        };
        let mut baseline = TrainConfig {
            steps: 1200,
            batch_size: 4,
            seq_len: data.seq_len,
            lr_schedule: LrSchedule::Cosine,
            ..Default::default()
        };
        baseline.optim.lr_other = 3e-3;
        let sequential = TrainConfig {
            steps: 600,
            ..baseline.clone()
        };
        TamExperiment {
            model,
            data,
            test_count: 50,
            baseline,
            sequential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub mean_error_m: f64,
    pub median_error_m: f64,
    /// Training time of this arm's last phase.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    /// After the single-frame phase.
    pub single_frame: ArmOutcome,
    pub independent: ArmOutcome,
    pub temporal: ArmOutcome,
}

impl ExperimentOutcome {
    /// Relative drop in mean error from the independent arm to the temporal one.
    pub fn reduction(&self) -> f64 {
        1.0 - self.temporal.mean_error_m / self.independent.mean_error_m
    }
}

fn outcome(report: &DatasetReport, seconds: f64) -> ArmOutcome {
    ArmOutcome {
        mean_error_m: report.mean_error_m,
        median_error_m: report.median_error_m,
        seconds,
    }
}

fn tensors(cfg: &SyntheticConfig) -> Result<Vec<SequenceTensors>> {
    Ok(generate_synthetic(cfg)?.into_iter().map(Into::into).collect())
}

/// Runs both arms for one seed. `progress` receives a line per finished phase.
pub fn run_tam_experiment(exp: &TamExperiment, seed: u64, progress: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    let train_cfg = SyntheticConfig {
        seed,
        ..exp.data.clone()
    };
    let test_cfg = SyntheticConfig {
        seed: seed + TEST_SEED_OFFSET,
        count: exp.test_count,
        ..exp.data.clone()
    };
    let train = tensors(&train_cfg)?;
    let test = tensors(&test_cfg)?;

    let mut model = Localizer::new(exp.model.clone(), seed)?;
    let baseline = TrainConfig {
        seed,
        ..exp.baseline.clone()
    };
    let start = Instant::now();
    train_baseline(&mut model, &train, &baseline, &mut |_| {})?;
    let single_frame = outcome(
        &evaluate(&model, &test, Recurrence::Independent)?,
        start.elapsed().as_secs_f64(),
    );
    progress(&format!(
        "seed {seed}: single-frame phase {:.3} m ({:.0} s)",
        single_frame.mean_error_m, single_frame.seconds
    ));

    let sequential = TrainConfig {
        seed,
        ..exp.sequential.clone()
    };
    let mut arm = |recurrence: Recurrence| -> Result<ArmOutcome> {
        let mut m = model.clone();
        let start = Instant::now();
        train_sequential(&mut m, &train, &sequential, recurrence, &mut |_| {})?;
        let seconds = start.elapsed().as_secs_f64();
        let out = outcome(&evaluate(&m, &test, recurrence)?, seconds);
        progress(&format!(
            "seed {seed}: {recurrence:?} arm {:.3} m ({:.0} s)",
            out.mean_error_m, out.seconds
        ));
        Ok(out)
    };
    let independent = arm(Recurrence::Independent)?;
    let temporal = arm(Recurrence::Temporal)?;
    Ok(ExperimentOutcome {
        seed,
        single_frame,
        independent,
        temporal,
    })
}
