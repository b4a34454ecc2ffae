//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration/format/usage errors, 3 training
//! divergence or numerical breakdown, 4 I/O errors, 5 gradient audit
//! failure. Malformed input never panics.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::OpKind;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{dump_csv, gen_synthetic, load_csv, Dataset, SyntheticKind};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::eval::{
    collapse_metrics, knn_eval, linear_probe, CollapseReport, EpochMonitor, EvalReport, KnnMonitor, ProbeConfig, Protocol,
};
use crate::gradcheck::{run_audit, AuditConfig, AuditReport, AuditedLoss};
use crate::plot::{default_metric, read_metrics_csv, render_svg, Metric, Series};
use crate::trainer::{EpochRecord, TrainState, Trainer, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_AUDIT: i32 = 5;

pub const CHECKPOINT_FILE: &str = "checkpoint.uclr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.ini";

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::Numeric(_) | Error::Conditioning { .. } | Error::NotPositiveDefinite { .. } => {
            EXIT_DIVERGENCE
        }
        _ => EXIT_CONFIG,
    }
}

#[derive(Parser, Debug)]
#[command(name = "uniclr", version, about = "Affinity-matrix contrastive learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder; any `--key=value` not listed below overrides the config.
    Train(TrainArgs),
    /// Evaluate a checkpoint with k-NN or a linear probe.
    Eval(EvalArgs),
    /// Finite-difference audit of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Line chart of one or more metrics CSV files.
    Plot(PlotArgs),
    /// Write a synthetic dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file path or built-in name (e.g. blobs_simaffinity).
    #[arg(long)]
    config: String,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier (partial) run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans the full run).
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(last = true, hide = true)]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset from a config (path or built-in name).
    #[arg(long, conflicts_with = "data")]
    config: Option<String>,
    /// Dataset from a CSV file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "knn")]
    protocol: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Feature dimensions, comma separated.
    #[arg(long, default_value = "3,8", value_delimiter = ',')]
    dims: Vec<usize>,
    /// Batch sizes, comma separated.
    #[arg(long = "n", default_value = "4,16", value_delimiter = ',')]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Restrict to one audited loss (default: all).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, hide = true)]
    corrupt_backward: Option<String>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    out: PathBuf,
    /// loss or knn_acc (default: knn_acc when every file has it).
    #[arg(long)]
    metric: Option<String>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value = "blobs")]
    kind: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Total sample count, split evenly across classes.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

const TRAIN_FLAGS_WITH_VALUE: [&str; 4] = ["--config", "--out", "--resume", "--stop-after"];

/// Moves every train argument clap does not know into the override tail.
fn split_train_args(args: Vec<OsString>) -> Vec<OsString> {
    let pos = args.iter().position(|a| a == "train");
    let Some(pos) = pos else { return args };
    let (head, tail) = args.split_at(pos + 1);
    let mut known: Vec<OsString> = head.to_vec();
    let mut extra: Vec<OsString> = Vec::new();
    let mut i = 0;
    while i < tail.len() {
        let a = tail[i].to_string_lossy().into_owned();
        if a == "--" {
            extra.extend(tail[i + 1..].iter().cloned());
            break;
        }
        let flag = a.split('=').next().unwrap_or("");
        if TRAIN_FLAGS_WITH_VALUE.contains(&flag) || a == "-h" || a == "--help" {
            known.push(tail[i].clone());
            if !a.contains('=') && TRAIN_FLAGS_WITH_VALUE.contains(&flag) {
                if let Some(v) = tail.get(i + 1) {
                    known.push(v.clone());
                    i += 1;
                }
            }
        } else {
            extra.push(tail[i].clone());
            // `--key value` form: carry the value along
            if a.starts_with("--") && !a.contains('=') {
                if let Some(v) = tail.get(i + 1) {
                    extra.push(v.clone());
                    i += 1;
                }
            }
        }
        i += 1;
    }
    if !extra.is_empty() {
        known.push("--".into());
        known.extend(extra);
    }
    known
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(split_train_args(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => return cmd_gradcheck(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// The parsed configuration, re-serialized in the config grammar.
    pub config_snapshot: String,
    pub dataset_fingerprint: String,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub epochs_completed: usize,
    pub epochs_planned: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub final_epoch: Option<EpochRecord>,
    pub knn: Option<EvalReport>,
    pub linear: Option<EvalReport>,
    pub collapse: Option<CollapseReport>,
    pub twin_grad_max_abs: f64,
    pub dataset_fingerprint: String,
}

/// Embeds both splits with a frozen encoder and scores them.
pub fn evaluate_encoder(
    encoder: &EncoderState,
    train: &Dataset,
    test: &Dataset,
    protocol: Protocol,
    k: usize,
    probe: &ProbeConfig,
) -> Result<EvalReport> {
    if encoder.input_dim() != train.dim() || encoder.input_dim() != test.dim() {
        return Err(Error::dim(
            "eval",
            format!(
                "encoder expects {} inputs, dataset has {}",
                encoder.input_dim(),
                train.dim()
            ),
        ));
    }
    let tr = encoder.embed(&train.features)?;
    let te = encoder.embed(&test.features)?;
    match protocol {
        Protocol::Knn => knn_eval(&tr, &train.labels, &te, &test.labels, k),
        Protocol::Linear => linear_probe(&tr, &train.labels, &te, &test.labels, probe),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let overrides = crate::config::parse_override_args(&a.overrides)?;
    let cfg = RunConfig::load_named(&a.config, &overrides)?;
    let (train, test) = cfg.data.load()?;
    let fingerprint = train.fingerprint();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let config_path = a.out.join(CONFIG_FILE);
    write_file(&config_path, cfg.to_ini().as_bytes())?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Trainer::resume(cfg.train.clone(), train.unlabeled(), TrainState::from_checkpoint(ck))?
        }
        None => Trainer::new(cfg.train.clone(), train.unlabeled())?,
    };

    let metrics_path = a.out.join(METRICS_FILE);
    let appending = a.resume.is_some() && metrics_path.exists();
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if !appending {
        writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut monitor = if !test.is_empty() && train.len() >= cfg.eval.k {
        Some(KnnMonitor {
            train: train.clone(),
            test: test.clone(),
            k: cfg.eval.k,
        })
    } else {
        None
    };
    let stop = a.stop_after.unwrap_or(cfg.train.epochs);
    let run = trainer.run_until(
        stop,
        monitor.as_mut().map(|m| m as &mut dyn EpochMonitor),
        &mut |rec| {
            writeln!(metrics_file, "{}", rec.csv_line())
                .and_then(|_| metrics_file.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            println!("{}", rec.csv_line());
            Ok(())
        },
    );
    run?;

    let ck_path = a.out.join(CHECKPOINT_FILE);
    trainer.state().to_checkpoint().save(&ck_path)?;

    let encoder = &trainer.state().encoder;
    let (knn, linear, collapse) = if test.is_empty() {
        (None, None, None)
    } else {
        let knn = if train.len() >= cfg.eval.k {
            Some(evaluate_encoder(encoder, &train, &test, Protocol::Knn, cfg.eval.k, &cfg.eval.probe)?)
        } else {
            None
        };
        let linear = evaluate_encoder(encoder, &train, &test, Protocol::Linear, cfg.eval.k, &cfg.eval.probe)?;
        let collapse = if test.len() >= 2 {
            Some(collapse_metrics(&encoder.embed(&test.features)?)?)
        } else {
            None
        };
        (knn, Some(linear), collapse)
    };
    let summary = RunSummary {
        variant: cfg.train.loss.variant.name().to_string(),
        epochs_completed: trainer.state().epoch,
        epochs_planned: cfg.train.epochs,
        train_samples: train.len(),
        test_samples: test.len(),
        final_epoch: trainer.metrics().last().cloned(),
        knn,
        linear,
        collapse,
        twin_grad_max_abs: trainer.metrics().twin_grad_max_abs,
        dataset_fingerprint: fingerprint.clone(),
    };
    let summary_path = a.out.join(SUMMARY_FILE);
    write_file(&summary_path, to_json(&summary).as_bytes())?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_snapshot: cfg.to_ini(),
        dataset_fingerprint: fingerprint,
        artifacts: BTreeMap::from([
            ("checkpoint".to_string(), ck_path),
            ("config".to_string(), config_path),
            ("metrics_csv".to_string(), metrics_path),
            ("summary_json".to_string(), summary_path),
        ]),
    };
    write_file(&a.out.join(MANIFEST_FILE), to_json(&manifest).as_bytes())?;
    if let Some(r) = &summary.knn {
        println!("knn accuracy {:.4} ({} / {})", r.accuracy, r.correct, r.num_test);
    }
    if let Some(r) = &summary.linear {
        println!("linear accuracy {:.4} ({} / {})", r.accuracy, r.correct, r.num_test);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let protocol = Protocol::parse(&a.protocol)
        .ok_or_else(|| Error::Config(format!("--protocol must be knn or linear, got {:?}", a.protocol)))?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (train, test, k, probe) = match (&a.config, &a.data) {
        (Some(c), _) => {
            let cfg = RunConfig::load_named(c, &[])?;
            let (tr, te) = cfg.data.load()?;
            (tr, te, a.k.unwrap_or(cfg.eval.k), cfg.eval.probe)
        }
        (None, Some(p)) => {
            if !(0.0..1.0).contains(&a.test_fraction) || a.test_fraction == 0.0 {
                return Err(Error::Config(format!("--test-fraction must be in (0, 1), got {}", a.test_fraction)));
            }
            let full = load_csv(p)?;
            let (tr, te) = full.split(a.test_fraction, a.split_seed);
            (tr, te, a.k.unwrap_or(crate::eval::DEFAULT_K), ProbeConfig::default())
        }
        (None, None) => return Err(Error::Config("eval needs --config or --data".into())),
    };
    let report = evaluate_encoder(&ck.encoder, &train, &test, protocol, k, &probe)?;
    let json = to_json(&report);
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, json.as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> i32 {
    let mut cfg = AuditConfig {
        dims: a.dims.clone(),
        batch_sizes: a.batch_sizes.clone(),
        seeds: a.seeds,
        ..AuditConfig::default()
    };
    if let Some(name) = &a.loss {
        match AuditedLoss::ALL.iter().find(|l| l.name() == name) {
            Some(l) => cfg.losses = vec![*l],
            None => {
                eprintln!("error: unknown loss {name:?}");
                return EXIT_CONFIG;
            }
        }
    }
    if let Some(op) = &a.corrupt_backward {
        match OpKind::from_name(op) {
            Some(k) => cfg.corrupt = Some(k),
            None => {
                eprintln!("error: unknown op {op:?}");
                return EXIT_CONFIG;
            }
        }
    }
    if cfg.dims.is_empty() || cfg.batch_sizes.is_empty() || cfg.seeds == 0 || cfg.batch_sizes.contains(&0) || cfg.dims.contains(&0) {
        eprintln!("error: dims, batch sizes and seeds must be positive");
        return EXIT_CONFIG;
    }
    let report: AuditReport = match run_audit(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_AUDIT;
        }
    };
    print!("{}", report.table());
    if let Some(p) = &a.json {
        if let Err(e) = write_file(p, to_json(&report).as_bytes()) {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    }
    if report.passed() {
        EXIT_OK
    } else {
        let w = report.worst().expect("non-empty audit");
        eprintln!(
            "gradient audit failed: worst {} with relative error {:.3e} (tolerance {:.0e})",
            w.name, w.max_rel_error, report.tolerance
        );
        EXIT_AUDIT
    }
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let mut runs = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        runs.push(read_metrics_csv(p)?);
    }
    let metric = match &a.metric {
        Some(m) => Metric::parse(m).ok_or_else(|| Error::Config(format!("--metric must be loss or knn_acc, got {m:?}")))?,
        None => default_metric(&runs),
    };
    let series: Vec<Series> = a
        .inputs
        .iter()
        .zip(&runs)
        .map(|(p, r)| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Series::from_records(name, r, metric)
        })
        .collect();
    write_file(&a.out, render_svg(&series, metric.label()).as_bytes())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let kind = SyntheticKind::parse(&a.kind)
        .ok_or_else(|| Error::Config(format!("--kind must be blobs, moons or rings, got {:?}", a.kind)))?;
    if a.classes == 0 || a.samples % a.classes != 0 {
        return Err(Error::Config(format!(
            "--samples ({}) must be a positive multiple of --classes ({})",
            a.samples, a.classes
        )));
    }
    let d = gen_synthetic(kind, a.classes, a.samples / a.classes, a.dim, a.seed)?;
    dump_csv(&d, &a.out)
}
