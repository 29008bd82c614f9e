//! Command-line surface. Each subcommand is a thin wrapper over the core
//! library plus file IO; all randomness flows from the explicit `--seed`
//! flags and the config file, never from ambient entropy.
//!
//! Exit codes: 0 success, 1 self-check failure, 2 data error, 3 config
//! error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nowcast_core::dataset::{
    extract_events, split_events, synthesize_storms, StormFlow, StormSpec,
};
use nowcast_core::gradcheck::{format_report, run_suite, GradCheckOptions};
use nowcast_core::metrics::{evaluate_run, DEFAULT_POOLS, DEFAULT_THRESHOLDS};
use nowcast_core::model::Model;
use nowcast_core::{FieldSequence, PrecipField};

use crate::config::ToolkitConfig;
use crate::error::{Result, ToolError, EXIT_OK, EXIT_SELF_CHECK};
use crate::{report, tpnn, tpnw};

#[derive(Parser)]
#[command(
    name = "nowcast",
    version,
    about = "Physics-aligned precipitation nowcasting toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Extract rain events from a 10-minute precipitation sequence.
    Extract(ExtractArgs),
    /// Generate a synthetic storm sequence with known flow and growth.
    Synthesize(SynthesizeArgs),
    /// Train one stage of the model on a directory of TPNN windows.
    Train(TrainArgs),
    /// Run a trained model on a context sequence.
    Nowcast(NowcastArgs),
    /// Score predictions against observations.
    Evaluate(EvaluateArgs),
    /// Finite-difference self-check of every gradient path.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Input TPNN sequence.
    #[arg(long)]
    pub input: PathBuf,
    /// Accumulation threshold (mm/h summed over pixels and the 7-frame
    /// window); events require strictly greater sums.
    #[arg(long)]
    pub tau: f64,
    /// Output event manifest CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence identifier recorded on each event.
    #[arg(long, default_value = "sequence")]
    pub source: String,
    /// Seed for the train/validation/test assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SynthesizeArgs {
    /// Output TPNN sequence.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional ground-truth flow output: a 2-frame raw TPNN holding the
    /// u then v component, px per step.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    /// Peak rain rate range, mm/h.
    #[arg(long, default_value = "8,40", value_parser = parse_pair)]
    pub amplitude: (f64, f64),
    /// Blob radius range, pixels.
    #[arg(long, default_value = "4,7", value_parser = parse_pair)]
    pub sigma: (f64, f64),
    /// Uniform translation "u,v" in px per step.
    #[arg(long, default_value = "1,0", value_parser = parse_pair, conflicts_with = "rotation")]
    pub flow: (f64, f64),
    /// Solid-body rotation about the grid center, radians per step.
    #[arg(long)]
    pub rotation: Option<f64>,
    /// Relative amplitude growth per step.
    #[arg(long, default_value_t = 0.0)]
    pub growth: f64,
    #[arg(long, default_value_t = 600)]
    pub step_seconds: u32,
    #[arg(long, default_value_t = 0)]
    pub start_timestamp: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Ved,
    Evolver,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Which stage to fit; the evolver stage requires weights produced by
    /// a prior ved run and never touches the encoder or decoder.
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Directory of TPNN training windows (one window per file).
    #[arg(long)]
    pub data: PathBuf,
    /// Weight file to create (ved) or update in place (evolver).
    #[arg(long)]
    pub weights: PathBuf,
    /// Optional key=value config file; defaults match the published
    /// hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss-curve CSV; defaults to the weight path with a
    /// "_<stage>_loss.csv" suffix.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides training.seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct NowcastArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Context sequence; its length must equal the trained context size.
    #[arg(long)]
    pub input: PathBuf,
    /// Predicted sequence, one frame per lead.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-lead fields: a raw TPNN with three frames per lead in
    /// the order flow-u, flow-v (px per step), intensity (mm/h), each
    /// stamped with the lead's valid time.
    #[arg(long)]
    pub fields: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of predicted TPNN sequences.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of observed TPNN sequences with matching file names.
    #[arg(long)]
    pub truth: PathBuf,
    /// Full skill table CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-lead CSI-M/HSS-M curve CSV; defaults to the out path with a
    /// "_summary.csv" suffix.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op check.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    /// Negative control: corrupt the warp gradients so the suite must
    /// fail. Test plumbing only.
    #[arg(long, hide = true)]
    pub corrupt_warp: bool,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"a,b\", got {s}"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number {a}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number {b}"))?;
    Ok((a, b))
}

/// Worker cap for internally parallel commands. NOWCAST_THREADS overrides
/// the detected core count; 1 disables threading.
fn thread_cap() -> usize {
    match std::env::var("NOWCAST_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ToolError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    let seq = tpnn::read_sequence(&args.input)?;
    let events = extract_events(&seq, args.tau, &args.source)?;
    // fewer events than splits: everything trains, no manifest
    let splits = if events.len() >= 3 {
        Some(split_events(&events, [0.70, 0.15, 0.15], args.seed)?)
    } else {
        None
    };
    write_text(&args.out, &report::events_csv(&events, splits.as_ref()))?;
    println!("extracted {} events to {}", events.len(), args.out.display());
    Ok(())
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let flow = match args.rotation {
        Some(omega) => StormFlow::Rotational { omega },
        None => StormFlow::Constant {
            u: args.flow.0,
            v: args.flow.1,
        },
    };
    let spec = StormSpec {
        n: args.n,
        frames: args.frames,
        blobs: args.blobs,
        amplitude: args.amplitude,
        sigma: args.sigma,
        flow,
        growth: args.growth,
        step_seconds: args.step_seconds,
        start_timestamp: args.start_timestamp,
    };
    let storm = synthesize_storms(&spec, args.seed)?;
    tpnn::write_sequence(&storm.sequence, &args.out)?;
    if let Some(truth) = &args.truth {
        let ts = args.start_timestamp;
        tpnn::write_raw(
            args.n,
            args.step_seconds,
            &[ts, ts],
            &[storm.flow.u().values(), storm.flow.v().values()],
            truth,
        )?;
    }
    println!(
        "wrote {} frames of {}x{} to {}",
        args.frames,
        args.n,
        args.n,
        args.out.display()
    );
    Ok(())
}

/// Every .tpnn under the directory, sorted by file name for a stable
/// window order.
fn list_tpnn(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ToolError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ToolError::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("tpnn") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Read many sequences with up to `thread_cap()` reader threads.
fn read_many(paths: &[PathBuf]) -> Result<Vec<FieldSequence>> {
    let workers = thread_cap().min(paths.len().max(1));
    if workers <= 1 {
        return paths.iter().map(|p| tpnn::read_sequence(p)).collect();
    }
    let chunk = paths.len().div_ceil(workers);
    let mut parts: Vec<Result<Vec<FieldSequence>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|slice| scope.spawn(move || slice.iter().map(|p| tpnn::read_sequence(p)).collect()))
            .collect();
        for h in handles {
            parts.push(h.join().expect("reader thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(paths.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ToolkitConfig::load(path)?,
        None => ToolkitConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if args.stage == Stage::Evolver && !args.weights.exists() {
        return Err(ToolError::Config(format!(
            "evolver stage needs existing weights at {}; run --stage ved first",
            args.weights.display()
        )));
    }
    let files = list_tpnn(&args.data)?;
    if files.is_empty() {
        return Err(ToolError::Data(format!(
            "no .tpnn files under {}",
            args.data.display()
        )));
    }
    let windows = read_many(&files)?;
    match args.stage {
        Stage::Ved => {
            let mut model = Model::init(cfg.model.clone(), cfg.training.seed)?;
            model.fit_normalization(&windows)?;
            let records = model.train_ved(&windows, &cfg.flow, &cfg.losses, &cfg.training)?;
            tpnw::write_weights(&model, &args.weights)?;
            let log = args
                .log
                .clone()
                .unwrap_or_else(|| with_suffix(&args.weights, "_ved_loss.csv"));
            write_text(&log, &report::ved_curve_csv(&records))?;
            let last = records.last().map(|r| r.terms.total).unwrap_or(f64::NAN);
            println!(
                "ved stage: {} steps, final loss {last:.6}, weights at {}",
                records.len(),
                args.weights.display()
            );
        }
        Stage::Evolver => {
            let mut model = tpnw::read_weights(&args.weights)?;
            let records = model.train_evolver(&windows, &cfg.training)?;
            tpnw::write_weights(&model, &args.weights)?;
            let log = args
                .log
                .clone()
                .unwrap_or_else(|| with_suffix(&args.weights, "_evolver_loss.csv"));
            write_text(&log, &report::evolver_curve_csv(&records))?;
            let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "evolver stage: {} steps, final loss {last:.6}, weights at {}",
                records.len(),
                args.weights.display()
            );
        }
    }
    Ok(())
}

pub fn cmd_nowcast(args: &NowcastArgs) -> Result<()> {
    let model = tpnw::read_weights(&args.weights)?;
    let seq = tpnn::read_sequence(&args.input)?;
    if seq.len() != model.cfg.context_frames {
        return Err(ToolError::Config(format!(
            "context of {} frames, weights expect {}",
            seq.len(),
            model.cfg.context_frames
        )));
    }
    let cast = model.nowcast(&seq)?;
    let timestamps: Vec<i64> = cast.frames.iter().map(|f| f.timestamp()).collect();
    let frames: Vec<&[f64]> = cast.frames.iter().map(|f| f.values().values()).collect();
    // single-lead forecasts are shorter than a FieldSequence allows, so
    // predictions go through the raw writer; the bytes are identical
    tpnn::write_raw(seq.n(), seq.step_seconds(), &timestamps, &frames, &args.out)?;
    if let Some(fields_path) = &args.fields {
        let mut ts = Vec::new();
        let mut frames: Vec<&[f64]> = Vec::new();
        for (lead, (motion, intensity)) in cast.fields.iter().enumerate() {
            for _ in 0..3 {
                ts.push(timestamps[lead]);
            }
            frames.push(motion.u().values());
            frames.push(motion.v().values());
            frames.push(intensity.values().values());
        }
        tpnn::write_raw(seq.n(), seq.step_seconds(), &ts, &frames, fields_path)?;
    }
    println!(
        "wrote {} forecast frames to {}",
        cast.frames.len(),
        args.out.display()
    );
    Ok(())
}

/// Read one prediction/observation pair, enforcing frame-level alignment.
fn read_pair(pred: &Path, truth: &Path) -> Result<(Vec<PrecipField>, Vec<PrecipField>, u32)> {
    let p = tpnn::read_sequence(pred)?;
    let t = tpnn::read_sequence(truth)?;
    if p.len() != t.len() || p.n() != t.n() || p.step_seconds() != t.step_seconds() {
        return Err(ToolError::Data(format!(
            "{}: {} frames of {}x{} at {} s vs {} frames of {}x{} at {} s in {}",
            pred.display(),
            p.len(),
            p.n(),
            p.n(),
            p.step_seconds(),
            t.len(),
            t.n(),
            t.n(),
            t.step_seconds(),
            truth.display()
        )));
    }
    for (a, b) in p.frames().iter().zip(t.frames()) {
        if a.timestamp() != b.timestamp() {
            return Err(ToolError::Data(format!(
                "{}: timestamp {} has no match in {}",
                pred.display(),
                a.timestamp(),
                truth.display()
            )));
        }
    }
    let step = p.step_seconds();
    Ok((p.frames().to_vec(), t.frames().to_vec(), step))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let pred_files = list_tpnn(&args.pred)?;
    if pred_files.is_empty() {
        return Err(ToolError::Data(format!(
            "no .tpnn files under {}",
            args.pred.display()
        )));
    }
    let mut pairs = Vec::with_capacity(pred_files.len());
    for pred in &pred_files {
        let name = pred.file_name().expect("listed file has a name");
        let truth = args.truth.join(name);
        if !truth.exists() {
            return Err(ToolError::Data(format!(
                "{}: no observation file {}",
                pred.display(),
                truth.display()
            )));
        }
        pairs.push((pred.clone(), truth));
    }
    for truth in list_tpnn(&args.truth)? {
        let name = truth.file_name().expect("listed file has a name");
        if !args.pred.join(name).exists() {
            return Err(ToolError::Data(format!(
                "{}: no prediction file {}",
                truth.display(),
                args.pred.join(name).display()
            )));
        }
    }
    let workers = thread_cap().min(pairs.len());
    let mut loaded: Vec<(Vec<PrecipField>, Vec<PrecipField>, u32)> =
        Vec::with_capacity(pairs.len());
    if workers <= 1 {
        for (pred, truth) in &pairs {
            loaded.push(read_pair(pred, truth)?);
        }
    } else {
        let chunk = pairs.len().div_ceil(workers);
        let mut parts: Vec<Result<Vec<_>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|slice| {
                    scope.spawn(move || {
                        slice
                            .iter()
                            .map(|(p, t)| read_pair(p, t))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            for h in handles {
                parts.push(h.join().expect("reader thread panicked"));
            }
        });
        for part in parts {
            loaded.extend(part?);
        }
    }
    let step = loaded[0].2;
    if step % 60 != 0 {
        return Err(ToolError::Data(format!(
            "step of {step} s is not a whole number of minutes"
        )));
    }
    for ((pred, _), trio) in pairs.iter().zip(&loaded) {
        if trio.2 != step {
            return Err(ToolError::Data(format!(
                "{}: step {} s differs from the first event's {} s",
                pred.display(),
                trio.2,
                step
            )));
        }
    }
    let forecasts: Vec<Vec<PrecipField>> = loaded.iter().map(|t| t.0.clone()).collect();
    let observations: Vec<Vec<PrecipField>> = loaded.iter().map(|t| t.1.clone()).collect();
    let table = evaluate_run(
        &forecasts,
        &observations,
        step / 60,
        &DEFAULT_THRESHOLDS,
        &DEFAULT_POOLS,
    )?;
    write_text(&args.out, &report::skill_csv(&table))?;
    let summary = args
        .summary
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, "_summary.csv"));
    write_text(&summary, &report::summary_csv(&table))?;
    println!(
        "scored {} events over {} leads; table at {}",
        forecasts.len(),
        forecasts[0].len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let opts = GradCheckOptions {
        seed: args.seed,
        instances: args.instances,
        corrupt_warp: args.corrupt_warp,
    };
    let results = run_suite(&opts)?;
    print!("{}", format_report(&results));
    if results.iter().all(|r| r.passed()) {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_SELF_CHECK)
    }
}

/// Dispatch a parsed invocation; the return value is the process exit
/// code.
pub fn run(cli: Cli) -> i32 {
    let outcome: Result<i32> = match &cli.command {
        Command::Extract(args) => cmd_extract(args).map(|()| EXIT_OK),
        Command::Synthesize(args) => cmd_synthesize(args).map(|()| EXIT_OK),
        Command::Train(args) => cmd_train(args).map(|()| EXIT_OK),
        Command::Nowcast(args) => cmd_nowcast(args).map(|()| EXIT_OK),
        Command::Evaluate(args) => cmd_evaluate(args).map(|()| EXIT_OK),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
