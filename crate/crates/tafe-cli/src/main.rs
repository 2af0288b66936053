//! `tafe` — dataset generation, training, evaluation, gradient checking,
//! and kernel benchmarking for the pyramid-token segmentation library.
//!
//! Exit-code contract (CI-friendly):
//! - 0: success
//! - 1: a check failed (gradient check, benchmark correctness guard)
//! - 2: usage or configuration error
//! - 3: numeric abort (non-finite loss)
//!
//! Every command is reproducible from its argument vector alone; the only
//! nondeterministic outputs are the labeled wall-clock fields of `bench`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tafe::bench::{run_bench, BenchSpec, Topology};
use tafe::checks::{self, Scope, SuiteReport};
use tafe::metrics::ConfusionMatrix;
use tafe::model::{load_checkpoint, TafeConfig};
use tafe::trainer::{self, MetricsReport};
use tafe::{Result, TafeError};

#[derive(Parser)]
#[command(
    name = "tafe",
    version,
    about = "Multi-scale interaction attention segmentation workbench"
)]
struct Cli {
    /// Cap on kernel worker threads (default 1; the TAFE_THREADS variable
    /// mirrors this flag). Results are bit-identical at any setting.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (images, masks, manifest)
    GenData(GenDataArgs),
    /// Train a model from scratch on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics.json
    Eval(EvalArgs),
    /// Run gradient-check suites and print a JSON report
    Gradcheck(GradcheckArgs),
    /// Benchmark convolution topologies with an analytic cost model
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of samples
    #[arg(long)]
    n: usize,
    /// Base seed; sample i draws from seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame size: one number for square frames, or HxW
    #[arg(long, default_value = "64")]
    size: String,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration JSON; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and train_log.json
    #[arg(long)]
    out: PathBuf,
    /// Override one top-level config key, e.g. --set afe_enabled=false
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (holds manifest.json and parameter files)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to score against
    #[arg(long)]
    data: PathBuf,
    /// Where to write metrics.json
    #[arg(long)]
    out: PathBuf,
    /// Debug: score the ground truth against itself (must yield mIoU 1.0)
    #[arg(long)]
    truth_as_prediction: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which suite to run: ops, blocks, model, or all
    #[arg(long, default_value = "all")]
    scope: String,
    /// Negative control: check a deliberately wrong gradient rule instead;
    /// a healthy harness exits 1
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Topology to time: dense, cascade, or parallel; all three when omitted
    #[arg(long)]
    kernel: Option<String>,
    /// Strip length (3, 5, or 7)
    #[arg(long, default_value_t = 7)]
    k: usize,
    /// Input size as HxW
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Channel width of the timed kernels
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Timed repetitions after one warm-up pass
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Seed for the shared input and kernels
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Prints one stdout line, tolerating a closed pipe (e.g. `tafe bench | head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TafeError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    tafe::tensor::set_max_threads(resolve_threads(cli.threads)?);
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// `--threads` wins; the TAFE_THREADS variable is the fallback; the default
/// is one worker.
fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("TAFE_THREADS") {
            Ok(v) => v.parse().map_err(|_| {
                TafeError::Usage(format!("TAFE_THREADS must be a positive integer, got {v:?}"))
            })?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(TafeError::Usage("thread cap must be at least 1".into()));
    }
    Ok(n)
}

/// Accepts `64` (square) or `64x48` (height by width).
fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |t: &str| -> Result<usize> {
        t.parse()
            .map_err(|_| TafeError::Usage(format!("bad size component {t:?} in {s:?}")))
    };
    match s.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let side = parse(s)?;
            Ok((side, side))
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let (h, w) = parse_size(&a.size)?;
    let manifest = tafe::synthdata::gen_dataset(a.n, a.seed, h, w, &a.out)?;
    emit!(
        "wrote {} samples ({}x{}, {} classes) to {}",
        manifest.spec.count,
        manifest.spec.h,
        manifest.spec.w,
        manifest.spec.classes,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads the config file (or defaults), applies `--set` overrides as JSON
/// values, and rejects unknown keys on the final parse.
fn build_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<TafeConfig> {
    let mut doc: serde_json::Value = match path {
        Some(p) => {
            let bytes = fs::read(p)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| TafeError::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(TafeConfig::default())
            .map_err(|e| TafeError::Config(e.to_string()))?,
    };
    let map = doc
        .as_object_mut()
        .ok_or_else(|| TafeError::Config("config must be a JSON object".into()))?;
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            TafeError::Usage(format!("--set expects KEY=VALUE, got {item:?}"))
        })?;
        // Numbers and booleans parse as themselves; anything else is a string.
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
    }
    let config: TafeConfig =
        serde_json::from_value(doc).map_err(|e| TafeError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let config = build_config(a.config.as_ref(), &a.set)?;
    let outcome = trainer::train(&config, &a.data, &a.out)?;
    let last = outcome
        .log
        .records
        .last()
        .map(|r| r.loss)
        .unwrap_or(f64::NAN);
    emit!(
        "trained {} iterations, final loss {last:.6}",
        outcome.log.records.len()
    );
    emit!("checkpoint: {}", outcome.checkpoint_dir.display());
    emit!("log:        {}", a.out.join("train_log.json").display());
    Ok(ExitCode::SUCCESS)
}

fn print_metrics_table(report: &MetricsReport) {
    emit!("{:<8} {:>10} {:>10}", "class", "iou", "dice");
    let fmt = |v: &Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "absent".to_string(),
    };
    for (c, (iou, dice)) in report
        .summary
        .per_class_iou
        .iter()
        .zip(&report.summary.per_class_dice)
        .enumerate()
    {
        emit!("{c:<8} {:>10} {:>10}", fmt(iou), fmt(dice));
    }
    emit!(
        "{:<8} {:>10.4} {:>10.4}",
        "mean", report.summary.miou, report.summary.mdice
    );
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?;
    let report = if a.truth_as_prediction {
        let (spec, samples) = tafe::synthdata::load_dataset(&a.data)?;
        let mut cm = ConfusionMatrix::new(spec.classes)?;
        for s in &samples {
            cm.record_maps(&s.labels, &s.labels)?;
        }
        let report = MetricsReport {
            summary: cm.summary()?,
            config: model.config.clone(),
        };
        let json =
            serde_json::to_vec_pretty(&report).map_err(|e| TafeError::Format(e.to_string()))?;
        tafe::io::write_atomic(&a.out, &json)?;
        report
    } else {
        trainer::evaluate_to_file(&model, &a.data, &a.out)?
    };
    print_metrics_table(&report);
    emit!("metrics: {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report: SuiteReport = if a.corrupt {
        checks::corrupted_control()?
    } else {
        let scope: Scope = a.scope.parse()?;
        checks::run_scope(scope)?
    };
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| TafeError::Format(e.to_string()))?;
    emit!("{json}");
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let (h, w) = parse_size(&a.size)?;
    let kernels = match &a.kernel {
        Some(name) => vec![name.parse::<Topology>()?],
        None => Vec::new(),
    };
    let spec = BenchSpec {
        kernels,
        k: a.k,
        h,
        w,
        channels: a.channels,
        reps: a.reps,
        seed: a.seed,
    };
    let report = run_bench(&spec)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| TafeError::Format(e.to_string()))?;
    emit!("{json}");
    Ok(if report.guard_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
