use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cvseq::checks::{gradient_suite, CheckOutcome};
use cvseq::dataset::{
    build_samples, generate_synthetic, group_sequences, load_sequences, read_manifest, resample_indices, segment,
    write_manifest, write_synthetic, FrameRecord, PatchPolicy, SegmentationParams, SequenceTensors, SyntheticConfig,
};
use cvseq::eval::{evaluate_threads, write_report, ReportFormat};
use cvseq::model::{Localizer, ModelConfig, Recurrence};
use cvseq::train::{train_baseline, train_sequential, LogRecord, TrainConfig};

#[derive(Parser)]
#[command(name = "cvseq", version, about = "Cross-view sequential localization")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut GPS-tagged frame tracks into overlapping sequences with satellite patches.
    Segment(SegmentArgs),
    /// Write a synthetic dataset of ambiguous landmark worlds.
    Synth(SynthArgs),
    /// Train a model in the single-frame or the sequential phase.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    spacing_m: f64,
    #[arg(long, default_value_t = 50.0)]
    max_span_m: f64,
    #[arg(long, default_value_t = 6)]
    min_frames: usize,
    /// Satellite ground resolution, m/px.
    #[arg(long, default_value_t = 0.2)]
    res_mpp: f64,
    #[arg(long, default_value_t = 640.0)]
    size_px: f64,
    #[arg(long, default_value_t = 256.0)]
    model_px: f64,
    #[arg(long, default_value_t = 5.0)]
    jitter_m: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    dup_prob: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Baseline,
    Sequential,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Run configuration (JSON with `model` and `train` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of the training set.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow the sequential phase to start from random weights.
    #[arg(long)]
    no_pretrain: bool,
    /// Train the sequential phase without the temporal block.
    #[arg(long)]
    no_tam: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model configuration; defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    /// Write CSV instead of JSON.
    #[arg(long)]
    csv: bool,
    /// Predict every frame independently.
    #[arg(long)]
    no_tam: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Tiny,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    scale: Scale,
    /// Replace every tolerance by this value.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Everything needed to rerun a training job.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// Exit status for each failure class.
fn exit_code(err: &anyhow::Error) -> u8 {
    use cvseq::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_) => 3,
                E::Parse { .. }
                | E::Schema { .. }
                | E::File { .. }
                | E::Io(_)
                | E::Image(_)
                | E::Empty(_)
                | E::OutOfPatch { .. }
                | E::Target(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 3;
        }
    }
    1
}

/// Bad flags or configuration detected by the binary itself.
#[derive(Debug)]
struct UsageError(String);

/// A numerical check that did not hold.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for NumericalFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let params = SegmentationParams {
        spacing_m: a.spacing_m,
        max_span_m: a.max_span_m,
        min_frames: a.min_frames,
    };
    params.validate()?;
    let policy = PatchPolicy {
        res_mpp: a.res_mpp,
        size_px: a.size_px,
        model_px: a.model_px,
        jitter_m: a.jitter_m,
        seed: a.seed,
    };
    let records = read_manifest(&a.input)?;
    let source_dir = fs::canonicalize(manifest_dir(&a.input).join("."))
        .with_context(|| format!("resolving the directory of {}", a.input.display()))?;
    create_dir(&a.out)?;

    let (mut kept, mut short, mut rejected) = (0usize, 0usize, 0usize);
    let mut out = Vec::new();
    for (_, track) in group_sequences(&records) {
        let points: Vec<_> = track.iter().map(FrameRecord::gps).collect();
        let keep = resample_indices(&points, params.spacing_m)?;
        let frames: Vec<FrameRecord> = keep.iter().map(|&i| track[i].clone()).collect();
        let resampled: Vec<_> = frames.iter().map(FrameRecord::gps).collect();
        let ranges = segment(&resampled, &params);
        if ranges.is_empty() {
            short += 1;
        }
        let (samples, bad) = build_samples(&ranges, &frames, &policy)?;
        rejected += bad;
        kept += samples.len();
        for s in samples {
            for (i, f) in s.frames.iter().enumerate() {
                let mut r = f.clone();
                r.extra.insert("source_seq_id".into(), f.seq_id.clone().into());
                r.extra.insert("source_frame_index".into(), f.frame_index.into());
                r.seq_id = s.seq_id.clone();
                r.frame_index = i as u64;
                r.set_patch(&s.patch);
                for p in [&mut r.image_path, &mut r.feature_path, &mut r.sat_path].into_iter().flatten() {
                    if Path::new(p.as_str()).is_relative() {
                        *p = source_dir.join(&*p).to_string_lossy().into_owned();
                    }
                }
                out.push(r);
            }
        }
    }
    write_manifest(&out, &a.out.join("manifest.jsonl"))?;
    write_json(
        &a.out.join("config.json"),
        &serde_json::json!({ "input": a.input, "segmentation": params, "patch": policy }),
    )?;
    if kept == 0 {
        log::warn!("no sequence satisfies the segmentation constraints");
    }
    println!("segment: {kept} sequences kept, {rejected} rejected (frame outside patch), {short} tracks too short");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.grid {
        cfg.grid = v;
    }
    if let Some(v) = a.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.dup_prob {
        cfg.dup_prob = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let seqs = generate_synthetic(&cfg)?;
    create_dir(&a.out)?;
    let manifest = write_synthetic(&seqs, &a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    println!("synth: {} sequences written to {}", seqs.len(), manifest.display());
    Ok(())
}

fn load_data(manifest: &Path, config: &ModelConfig) -> Result<Vec<SequenceTensors>> {
    let records = read_manifest(manifest)?;
    let (data, dropped) = load_sequences(&records, &manifest_dir(manifest), config.sat_px, config.ground_px)?;
    if dropped > 0 {
        log::warn!("{dropped} frames dropped while loading {}", manifest.display());
    }
    if data.is_empty() {
        return Err(cvseq::Error::Empty(format!("dataset {}", manifest.display())).into());
    }
    Ok(data)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    run.model.validate()?;
    run.train.validate()?;
    if a.mode == Mode::Sequential && a.init.is_none() && !a.no_pretrain {
        return Err(UsageError(
            "sequential training needs a single-frame checkpoint via --init (or --no-pretrain)".into(),
        )
        .into());
    }
    let data = load_data(&a.data, &run.model)?;
    let mut model = Localizer::new(run.model.clone(), run.train.seed)?;
    if let Some(init) = &a.init {
        model.load(init).with_context(|| format!("loading {}", init.display()))?;
    }

    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &run)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_error = None;
    let mut log = |r: &LogRecord| {
        if log_error.is_none() {
            if let Err(e) = serde_json::to_string(r).map_err(std::io::Error::other).and_then(|l| writeln!(log_file, "{l}")) {
                log_error = Some(e);
            }
        }
    };
    let summary = match a.mode {
        Mode::Baseline => train_baseline(&mut model, &data, &run.train, &mut log)?,
        Mode::Sequential => {
            let rec = if a.no_tam {
                Recurrence::Independent
            } else {
                Recurrence::Temporal
            };
            train_sequential(&mut model, &data, &run.train, rec, &mut log)?
        }
    };
    if let Some(e) = log_error {
        return Err(e).context("writing the training log");
    }
    if !summary.last_loss.is_finite() && summary.steps > 0 {
        return Err(NumericalFailure("training loss is not finite".into()).into());
    }
    model.save(&a.out.join("model.ckpt"))?;
    println!(
        "train: {} steps, loss {:.4} -> {:.4}, {} sequences skipped",
        summary.steps, summary.first_loss, summary.last_loss, summary.skipped
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let config_path = a
        .config
        .clone()
        .unwrap_or_else(|| manifest_dir(&a.checkpoint).join("config.json"));
    let run: RunConfig = read_json(&config_path)?;
    let mut model = Localizer::new(run.model.clone(), 0)?;
    model.load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_data(&a.data, &run.model)?;
    let rec = if a.no_tam {
        Recurrence::Independent
    } else {
        Recurrence::Temporal
    };
    let report = evaluate_threads(&model, &data, rec, threads)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let format = if a.csv { ReportFormat::Csv } else { ReportFormat::Json };
    write_report(&report, &a.out, format)?;
    let mut resolved = a.out.clone().into_os_string();
    resolved.push(".config.json");
    write_json(
        Path::new(&resolved),
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "model": run.model,
            "temporal": !a.no_tam,
        }),
    )?;
    println!(
        "eval: {} sequences, mean {:.3} m, median {:.3} m",
        report.count, report.mean_error_m, report.median_error_m
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let Scale::Tiny = a.scale;
    let mut outcomes: Vec<CheckOutcome> = gradient_suite(a.seed)?;
    if let Some(t) = a.tol {
        for o in &mut outcomes {
            o.tolerance = t;
        }
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&outcomes)?);
    } else {
        for o in &outcomes {
            println!(
                "{:<24} {:<6} max rel err {:.3e} (tol {:.0e}) {}",
                o.name,
                format!("{:?}", o.kind).to_lowercase(),
                o.max_relative_error,
                o.tolerance,
                if o.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    if !failed.is_empty() {
        bail!(NumericalFailure(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
