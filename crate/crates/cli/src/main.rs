//! `mpcx`: dataset generation, training, offline verification, timing study
//! and a log-sum-exp demo.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use mpcx::harness::{
    offline_verify, run_benchmark, BenchConfig, Candidate, CandidateSource, DEFAULT_INSTANCES, MIN_INSTANCES,
};
use mpcx::oracle::{dataset_header, generate_dataset, generate_records, read_dataset, split_dataset, GenerationConfig};
use mpcx::predictor::{train, Hyper, LossKind, LrSchedule, PositionalEncoding, TrainConfig};
use mpcx::smooth::{sandwich_check, BallConstraints, DEFAULT_BETA};
use mpcx::{Arch, DatasetRecord, Head, PipelineConfig, PredictorModel, ScenarioId, ScenarioParams};

const DEFAULT_SEED: u64 = 42;
const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Parser)]
#[command(name = "mpcx", version, about = "Learned active-set prediction for linear MPC")]
struct Cli {
    /// JSON file of settings; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled dataset (JSON lines).
    Gen(GenArgs),
    /// Train a predictor on a dataset.
    Train(TrainArgs),
    /// Run the pipeline over a dataset and report the fallback rate.
    Verify(VerifyArgs),
    /// Time the pipeline against the full solver.
    Bench(BenchArgs),
    /// Print log-sum-exp bounds for a random set of ball constraints.
    SmoothDemo(SmoothArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    scenario: ScenarioId,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// Fraction of labels re-checked with a reduced solve.
    #[arg(long)]
    check_fraction: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Store solve times in the records; the file is then not reproducible.
    #[arg(long)]
    record_timings: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "transformer")]
    arch: Arch,
    #[arg(long, default_value = "constraint")]
    head: Head,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the training report (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// `mse` or `bce`.
    #[arg(long)]
    loss: Option<String>,
    /// `cosine` or `constant`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    ff_width: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// `learned` or `sinusoidal`.
    #[arg(long)]
    positional: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Constraint-head model; required unless `--oracle` is given.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use the stored oracle labels instead of a model.
    #[arg(long, conflicts_with = "model")]
    oracle: bool,
    #[arg(long)]
    warm_model: Option<PathBuf>,
    /// Verify only the held-out part of the seeded train/test split.
    #[arg(long)]
    test_split: bool,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    verify_tol: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    scenario: ScenarioId,
    /// Constraint-head model for the main row.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    warm_model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    count: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SmoothArgs {
    #[arg(long, default_value_t = 16)]
    members: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long, num_args = 1.., default_values_t = [1.0, 10.0, DEFAULT_BETA, 500.0])]
    beta: Vec<f64>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mpcx::Error> for Failure {
    fn from(e: mpcx::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

type CliResult<T> = Result<T, Failure>;

fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn parse(args: Vec<String>) -> Result<Cli, clap::Error> {
    // A lenient first pass finds `--config` and the subcommand even when the
    // config supplies otherwise required flags.
    let lenient = command().ignore_errors(true).try_get_matches_from(&args)?;
    let sub = lenient.subcommand().map(|(name, m)| (name.to_string(), m.get_one::<PathBuf>("config").cloned()));
    let path = lenient.get_one::<PathBuf>("config").cloned().or_else(|| sub.as_ref().and_then(|s| s.1.clone()));
    let args = match (path, sub) {
        (Some(path), Some((sub, _))) => {
            let cfg = config::read_config(&path).map_err(|e| command().error(clap::error::ErrorKind::Io, format!("{e:#}")))?;
            let flags = config::config_flags(&command(), &sub, &cfg)
                .map_err(|e| command().error(clap::error::ErrorKind::InvalidValue, format!("{e:#}")))?;
            config::merged_args(&args, &sub, flags)
        }
        _ => args,
    };
    Cli::from_arg_matches(&command().try_get_matches_from(args)?)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Cmd::Gen(a) => cmd_gen(a, seed),
        Cmd::Train(a) => cmd_train(a, seed),
        Cmd::Verify(a) => cmd_verify(a, seed),
        Cmd::Bench(a) => cmd_bench(a, seed),
        Cmd::SmoothDemo(a) => cmd_smooth(a, seed),
    }
}

/// Worker count: the request (or the machine's parallelism), capped by
/// `MPCX_THREADS` when set.
fn worker_threads(requested: Option<usize>) -> CliResult<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut n = requested.unwrap_or(available).max(1);
    if let Ok(cap) = std::env::var("MPCX_THREADS") {
        let cap: usize = cap
            .trim()
            .parse()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| usage(format!("MPCX_THREADS must be a positive integer, got {cap:?}")))?;
        n = n.min(cap);
    }
    Ok(n)
}

fn kebab<T: DeserializeOwned>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| usage(format!("unknown {what} {s:?}")))
}

fn open_input(path: &Path, what: &str) -> CliResult<File> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    File::open(path).map_err(|e| Failure::Runtime(anyhow!(e).context(format!("opening {}", path.display()))))
}

fn load_dataset(path: &Path) -> CliResult<(mpcx::DatasetHeader, Vec<DatasetRecord>)> {
    let file = open_input(path, "dataset")?;
    let (header, records) = read_dataset(BufReader::new(file))
        .with_context(|| format!("reading dataset {}", path.display()))?;
    Ok((header, records))
}

fn load_model(path: &Path) -> CliResult<PredictorModel> {
    let file = open_input(path, "model")?;
    Ok(PredictorModel::load(BufReader::new(file)).with_context(|| format!("loading model {}", path.display()))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value).context("serializing")?;
    out.write_all(b"\n").context("writing")?;
    out.flush().context("writing")?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).context("serializing")?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(e.into())),
        _ => Ok(()),
    }
}

fn scenario_params(horizon: Option<usize>) -> ScenarioParams {
    ScenarioParams { horizon, ..ScenarioParams::default() }
}

fn cmd_gen(a: GenArgs, seed: u64) -> CliResult<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut cfg = GenerationConfig {
        params: scenario_params(a.horizon),
        threads: worker_threads(a.threads)?,
        record_timings: a.record_timings,
        ..GenerationConfig::default()
    };
    if let Some(f) = a.check_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(usage("--check-fraction must lie in [0, 1]"));
        }
        cfg.check_fraction = f;
    }
    let header = dataset_header(a.scenario, a.count, seed, &cfg).map_err(|e| usage(e))?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &header).context("writing header")?;
    out.write_all(b"\n").context("writing header")?;
    let stats = generate_records(a.scenario, a.count, seed, &cfg, |r| {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
        Ok(())
    })?;
    out.flush().context("writing dataset")?;
    print_json(&serde_json::json!({
        "out": a.out,
        "scenario": a.scenario,
        "records": stats.records,
        "catalog_digest": header.catalog_digest,
        "mean_inactive_fraction": stats.mean_inactive_fraction,
        "mean_solve_time": stats.mean_solve_time,
        "mean_iterations": stats.mean_iterations,
        "skipped_instances": stats.skipped_instances,
        "checked_records": stats.checked_records,
    }))
}

fn cmd_train(a: TrainArgs, seed: u64) -> CliResult<()> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(usage("--train-fraction must lie strictly between 0 and 1"));
    }
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    let h = &mut cfg.hyper;
    *h = Hyper {
        d_model: a.d_model.unwrap_or(h.d_model),
        n_heads: a.n_heads.unwrap_or(h.n_heads),
        n_layers: a.n_layers.unwrap_or(h.n_layers),
        ff_width: a.ff_width.unwrap_or(h.ff_width),
        mlp_hidden: a.mlp_hidden.unwrap_or(h.mlp_hidden),
        positional: match &a.positional {
            Some(p) => kebab::<PositionalEncoding>("positional encoding", p)?,
            None => h.positional,
        },
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.momentum = a.momentum.unwrap_or(cfg.momentum);
    cfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    if let Some(l) = &a.loss {
        cfg.loss = kebab::<LossKind>("loss", l)?;
    }
    if let Some(l) = &a.schedule {
        cfg.schedule = kebab::<LrSchedule>("schedule", l)?;
    }
    cfg.validate().map_err(usage)?;

    let (_, records) = load_dataset(&a.data)?;
    let split = split_dataset(records, a.train_fraction, seed)?;
    let trained = train(&split.train, &split.test, a.arch, a.head, &cfg)?;
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    trained.model.save(&mut out)?;
    out.flush().context("writing model")?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &trained.report)?;
    let r = &trained.report;
    print_json(&serde_json::json!({
        "model": a.out,
        "report": report_path,
        "arch": r.arch,
        "head": r.head,
        "parameters": r.parameters,
        "seconds": r.seconds,
        "final_train_loss": r.train_loss.last(),
        "final_test_loss": r.test_loss.last(),
        "test_metrics": r.test_metrics,
        "mean_u_error": r.mean_u_error,
    }))
}

fn pipeline_config(threshold: Option<f64>, verify_tol: Option<f64>) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage("--threshold must lie in [0, 1]"));
        }
        cfg.threshold = t;
    }
    if let Some(t) = verify_tol {
        if t.is_nan() || t < 0.0 {
            return Err(usage("--verify-tol must be non-negative"));
        }
        cfg.verify_tol = t;
        cfg.dual_tol = t;
    }
    Ok(cfg)
}

fn check_warm(model: &Option<PredictorModel>) -> CliResult<()> {
    match model {
        Some(m) if m.head != Head::WarmStart => Err(usage("--warm-model must be a warm-start head model")),
        _ => Ok(()),
    }
}

fn cmd_verify(a: VerifyArgs, seed: u64) -> CliResult<()> {
    if a.model.is_none() && !a.oracle {
        return Err(usage("give either --model or --oracle"));
    }
    let cfg = pipeline_config(a.threshold, a.verify_tol)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        if m.head != Head::Constraint {
            return Err(usage("--model must be a constraint head model"));
        }
    }
    let warm = a.warm_model.as_deref().map(load_model).transpose()?;
    check_warm(&warm)?;
    let (_, mut records) = load_dataset(&a.data)?;
    if a.test_split {
        records = split_dataset(records, a.train_fraction, seed)?.test;
    }
    let source = match &model {
        Some(m) => CandidateSource::Model(m),
        None => CandidateSource::Oracle,
    };
    let mut candidate = Candidate::new(if a.oracle { "oracle" } else { "model" }, source);
    if let Some(w) = &warm {
        candidate = candidate.with_warm_start(w);
    }
    let report = offline_verify(&records, &candidate, &cfg, worker_threads(a.threads)?)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)?;
    if !report.all_verified {
        return Err(Failure::Runtime(anyhow!("some emitted solutions failed verification")));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, seed: u64) -> CliResult<()> {
    if a.count < MIN_INSTANCES {
        return Err(usage(format!("--count must be at least {MIN_INSTANCES}")));
    }
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let cfg = BenchConfig { repeats: a.repeats, pipeline: pipeline_config(a.threshold, None)? };
    let model = a.model.as_deref().map(load_model).transpose()?;
    let warm = a.warm_model.as_deref().map(load_model).transpose()?;
    check_warm(&warm)?;
    let gen = GenerationConfig {
        params: scenario_params(a.horizon),
        threads: worker_threads(a.threads)?,
        ..GenerationConfig::default()
    };
    let (_, records, _) = generate_dataset(a.scenario, a.count, seed, &gen)?;

    let mut candidates = Vec::new();
    if let Some(m) = &model {
        let mut c = Candidate::new(format!("{}", m.arch), CandidateSource::Model(m));
        if let Some(w) = &warm {
            c = c.with_warm_start(w);
        }
        candidates.push(c);
    }
    let mut oracle = Candidate::new("oracle", CandidateSource::Oracle);
    let mut inactive = Candidate::new("all-inactive", CandidateSource::AllInactive);
    if let Some(w) = &warm {
        oracle = oracle.with_warm_start(w);
        inactive = inactive.with_warm_start(w);
    }
    candidates.push(oracle);
    candidates.push(inactive);

    let report = run_benchmark(&records, &candidates, &cfg)?;
    if let Some(p) = &a.out_json {
        let mut out = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        report.write_json(&mut out)?;
        out.flush().context("writing report")?;
    }
    if let Some(p) = &a.out_csv {
        let out = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        report.write_csv(out)?;
    }
    print_json(&serde_json::json!({
        "scenario": report.scenario,
        "instances": report.instances,
        "mean_assembly_time": report.mean_assembly_time,
        "rows": report.rows,
        "environment": report.environment,
    }))
}

fn cmd_smooth(a: SmoothArgs, seed: u64) -> CliResult<()> {
    if a.members == 0 || a.dim == 0 || a.points == 0 {
        return Err(usage("--members, --dim and --points must be positive"));
    }
    if a.beta.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
        return Err(usage("every --beta must be positive"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let set = BallConstraints::sample(&mut rng, a.members, a.dim);
    let points: Vec<_> = (0..a.points)
        .map(|_| nalgebra::DVector::from_fn(a.dim, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0)))
        .collect();
    let mut rows = Vec::new();
    for &beta in &a.beta {
        let (mut inside_combined, mut inside_all, mut containment_failures, mut sandwich_failures) = (0, 0, 0, 0);
        let mut max_gap = 0.0f64;
        for x in &points {
            let v = set.values(x);
            let s = sandwich_check(&v, beta)?;
            let all = v.iter().all(|&g| g <= 0.0);
            inside_all += usize::from(all);
            if s.scaled <= 0.0 {
                inside_combined += 1;
                containment_failures += usize::from(!all);
            }
            sandwich_failures += usize::from(!s.holds);
            max_gap = max_gap.max(s.scaled - s.lower);
        }
        rows.push(serde_json::json!({
            "beta": beta,
            "bound_gap": (a.members as f64).ln() / beta,
            "max_observed_gap": max_gap,
            "points_inside_combined": inside_combined,
            "points_inside_all": inside_all,
            "containment_failures": containment_failures,
            "sandwich_failures": sandwich_failures,
        }));
    }
    print_json(&serde_json::json!({
        "members": a.members,
        "dim": a.dim,
        "points": a.points,
        "rows": rows,
    }))
}
