//! The `ddpm` command line: `schedule`, `train`, `sample` and `eval`, all
//! driven by a JSON run config.
//!
//! Exit codes: 0 success, 1 an eval threshold was violated, 2 bad
//! configuration, 3 training diverged, 4 a required input is missing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::{DataSpec, OptimalDenoiser};
use crate::denoiser::{Architecture, Denoiser, DenoiserParams, MeanMode, Model, VarianceMode};
use crate::error::{Error, Result};
use crate::eval::{self, Expectation, MetricReport, Moments};
use crate::io::{fmt_f64, matrix_to_csv};
use crate::rng;
use crate::sampler::{generate, SampleOptions};
use crate::schedule::{Schedule, ScheduleSpec};
use crate::trainer::{loss_csv, resume, AdamState, Checkpoint, TrainConfig};

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "DDPM_SEED";

/// Stream id used for network initialisation; training steps use ids from 0.
const INIT_STREAM: u64 = u64::MAX;

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    pub schedule: ScheduleSpec,
    pub model: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_eval_samples() -> usize {
    10_000
}

/// Which metrics `eval` computes, with optional hard thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of generated samples for sample-based metrics.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default)]
    pub denoise_final: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<HistogramCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_sweep: Option<SweepCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_invariance: Option<EndpointCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elbo_constancy: Option<ConstancyCheck>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            denoise_final: false,
            moments: None,
            histogram: None,
            score_sweep: None,
            endpoint_invariance: None,
            elbo_constancy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentCheck {
    /// Fail when mean or variance is further than this many standard errors
    /// from 0 and 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_std_errs: Option<f64>,
}

fn default_bins() -> usize {
    50
}

fn default_range() -> (f64, f64) {
    (-4.0, 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramCheck {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_range")]
    pub range: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCheck {
    /// Levels to sweep; empty means every level.
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rmse: Option<f64>,
}

fn default_endpoint_levels() -> Vec<usize> {
    vec![64, 128, 256]
}

fn default_expectation() -> Expectation {
    Expectation::Quadrature { points: 801 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointCheck {
    #[serde(default = "default_endpoint_levels")]
    pub levels: Vec<usize>,
    #[serde(default = "default_expectation")]
    pub expectation: Expectation,
    /// Fail when the relative gap at the largest `T` exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_relative_gap: Option<f64>,
}

fn default_constancy_n() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstancyCheck {
    #[serde(default = "default_constancy_n")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_std_errs: Option<f64>,
}

/// A stored model that did not come from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schedule: ScheduleSpec,
    pub data: DataSpec,
    pub seed: u64,
    pub model: Model,
}

/// Either kind of model file, as read back by `sample` and `eval`.
struct Loaded {
    model: Model,
    schedule: Schedule,
    seed: u64,
}

#[derive(Debug, Parser)]
#[command(name = "ddpm", version, about = "Desk-scale denoising diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate a schedule and print its endpoint SNRs.
    Schedule(ScheduleArgs),
    /// Train a denoiser and write the loss log and checkpoints.
    Train(TrainArgs),
    /// Draw samples from a checkpoint by ancestral sampling.
    Sample(SampleArgs),
    /// Compute the metrics selected in a run config.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Run config, or a bare schedule descriptor.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "schedule.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use this directory instead of `<output_dir>/seed<seed>-<unix time>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Write the analytic optimal predictor for the data instead of training.
    #[arg(long)]
    analytic: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add no noise in the last reverse step.
    #[arg(long)]
    denoise_final: bool,
    /// Also write every intermediate state.
    #[arg(long)]
    trace: bool,
    /// Also write an SVG scatter (two-dimensional data only).
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse the process arguments, run and return the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Schedule(a) => cmd_schedule(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
        _ => 2,
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, what: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", what.display())))
}

/// The seed in force: `DDPM_SEED`, then the flag, then the file.
fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(configured)),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let config: RunConfig = parse(&read_input(path)?, path)?;
    if config.model.dim != config.data.dim() {
        return Err(Error::Config(format!(
            "model dim {} does not match data dim {}",
            config.model.dim,
            config.data.dim()
        )));
    }
    Ok(config)
}

fn build_schedule(spec: &ScheduleSpec) -> Result<Schedule> {
    spec.build().map_err(|e| Error::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> Result<i32> {
    let text = read_input(&a.config)?;
    let value: serde_json::Value = parse(&text, &a.config)?;
    let spec_value = value.get("schedule").cloned().unwrap_or(value);
    let spec: ScheduleSpec = serde_json::from_value(spec_value)
        .map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let s = build_schedule(&spec)?;
    fs::write(&a.out, s.to_csv())?;
    let t = s.levels();
    println!("T = {t}");
    println!("snr(1) = {}", fmt_f64(s.snr_at(1)));
    println!("snr(T) = {}", fmt_f64(s.snr_at(t)));
    for level in 1..=t.min(16) {
        println!("Lambda_{level} = {}", fmt_f64(s.cum_lambda(level)));
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut config = load_config(&a.config)?;
    let seed = resolve_seed(a.seed, config.seed)?;
    config.seed = seed;
    config.train.seed = seed;
    if let Some(steps) = a.steps {
        config.train.steps = steps;
    }
    let s = build_schedule(&config.schedule)?;
    let arch = &config.model;
    let model = if a.analytic {
        let oracle = OptimalDenoiser::new(config.data.clone(), arch.mode, arch.variance_mode)
            .map_err(|e| Error::Config(e.to_string()))?;
        Some(Model::Analytic(oracle))
    } else {
        None
    };
    let init = DenoiserParams::init(arch, s.levels(), &mut rng::split(seed, INIT_STREAM))
        .map_err(|e| Error::Config(e.to_string()))?;
    if model.is_none() {
        config.train.validate(&config.data, &s, &init)?;
    }

    let dir = match a.run_dir {
        Some(d) => d,
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            config.output_dir.join(format!("seed{seed}-{secs}"))
        }
    };
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &config)?;

    if let Some(model) = model {
        let file = ModelFile {
            schedule: config.schedule.clone(),
            data: config.data.clone(),
            seed,
            model,
        };
        write_json(&dir.join("checkpoint.json"), &file)?;
        fs::write(dir.join("loss.csv"), loss_csv(&[]))?;
        println!("{}", dir.display());
        return Ok(0);
    }

    let start = Checkpoint {
        step: 0,
        config: config.train.clone(),
        schedule: config.schedule.clone(),
        data: config.data.clone(),
        optimizer: AdamState::new(init.num_params()),
        model: init.clone(),
    };
    let last = config.train.steps;
    let outcome = resume(start.clone(), &s, |ck| {
        if ck.step != last {
            write_json(&dir.join(format!("checkpoint-{:06}.json", ck.step)), ck)?;
        }
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(exit_code(&e));
        }
    };
    fs::write(dir.join("loss.csv"), loss_csv(&outcome.log))?;
    let done = Checkpoint {
        step: last,
        model: outcome.params,
        optimizer: outcome.optimizer,
        ..start
    };
    write_json(&dir.join("checkpoint.json"), &done)?;
    println!("{}", dir.display());
    Ok(0)
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let text = read_input(path)?;
    let value: serde_json::Value = parse(&text, path)?;
    if value.get("optimizer").is_some() {
        let ck: Checkpoint = parse(&text, path)?;
        Ok(Loaded {
            schedule: build_schedule(&ck.schedule)?,
            seed: ck.config.seed,
            model: Model::Network(ck.model),
        })
    } else {
        let file: ModelFile = parse(&text, path)?;
        Ok(Loaded {
            schedule: build_schedule(&file.schedule)?,
            seed: file.seed,
            model: file.model,
        })
    }
}

fn output_dir(flag: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    flag.unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn model_dim(model: &Model) -> usize {
    match model {
        Model::Network(p) => p.dim(),
        Model::Analytic(o) => o.data.dim(),
    }
}

fn cmd_sample(a: SampleArgs) -> Result<i32> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let seed = resolve_seed(a.seed, loaded.seed)?;
    let dim = model_dim(&loaded.model);
    let opts = SampleOptions {
        keep_trace: a.trace,
        denoise_final: a.denoise_final,
    };
    let trace = generate(&loaded.model, &loaded.schedule, a.n, dim, seed, opts)?;
    let dir = output_dir(a.out, &a.checkpoint);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("samples.csv"), matrix_to_csv(trace.samples()))?;
    if a.trace {
        let trace_dir = dir.join("trace");
        fs::create_dir_all(&trace_dir)?;
        for (x, t) in trace.chain.iter().zip(&trace.levels) {
            fs::write(trace_dir.join(format!("x_{t:04}.csv")), matrix_to_csv(x))?;
        }
    }
    if a.svg {
        if dim != 2 {
            return Err(Error::Config("--svg needs two-dimensional samples".into()));
        }
        fs::write(dir.join("samples.svg"), eval::scatter_svg(trace.samples(), (-3.0, 3.0), 480)?)?;
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let config = load_config(&a.config)?;
    let loaded = load_checkpoint(&a.checkpoint)?;
    let seed = resolve_seed(a.seed, config.seed)?;
    let (model, s, data) = (&loaded.model, &loaded.schedule, &config.data);
    let ev = &config.eval;
    if model_dim(model) != data.dim() {
        return Err(Error::Config("checkpoint and config disagree on the data dimension".into()));
    }
    if ev.score_sweep.is_some() && model.mean_mode() != MeanMode::PredictEps {
        return Err(Error::Config("score_sweep needs a noise-predicting model".into()));
    }
    let dir = output_dir(a.out, &a.checkpoint);
    let mut report = MetricReport::new(
        seed,
        ev.samples,
        s.spec().clone(),
        Some(a.checkpoint.display().to_string()),
    );
    let mut violations = Vec::new();
    let mut check = |name: &str, value: f64, limit: Option<f64>| {
        if let Some(limit) = limit {
            if !(value <= limit) {
                violations.push(format!("{name} = {value} exceeds {limit}"));
            }
        }
    };

    if ev.moments.is_some() || ev.histogram.is_some() {
        let opts = SampleOptions {
            keep_trace: false,
            denoise_final: ev.denoise_final,
        };
        let samples = generate(model, s, ev.samples, data.dim(), seed, opts)?;
        let x = samples.samples();
        if let Some(m) = &ev.moments {
            let moments = Moments::of(x)?;
            let (mean_err, var_err) = moments.errors();
            report.insert("moment_mean_error", mean_err)?;
            report.insert("moment_var_error", var_err)?;
            let worst = (0..moments.mean.len())
                .map(|d| {
                    (moments.mean[d].abs() / moments.mean_std_err[d])
                        .max((moments.var[d] - 1.0).abs() / moments.var_std_err[d])
                })
                .fold(0.0_f64, f64::max);
            report.insert("moment_max_std_errs", worst)?;
            check("moment_max_std_errs", worst, m.max_std_errs);
        }
        if let Some(h) = &ev.histogram {
            let kl = eval::histogram_kl(x, data, h.bins, h.range)?;
            report.insert("histogram_kl", kl)?;
            check("histogram_kl", kl, h.max_kl);
        }
    }

    if let Some(sw) = &ev.score_sweep {
        let levels: Vec<usize> = if sw.levels.is_empty() {
            (1..=s.levels()).collect()
        } else {
            sw.levels.clone()
        };
        let rmse = eval::score_error_sweep(model, data, s, &levels)?;
        for (t, r) in levels.iter().zip(&rmse) {
            let name = format!("score_rmse_t{t}");
            report.insert(name.clone(), *r)?;
            check(&name, *r, sw.max_rmse);
        }
    }

    if let Some(ep) = &ev.endpoint_invariance {
        let oracle = OptimalDenoiser::new(data.clone(), MeanMode::PredictX0, VarianceMode::PosteriorVariance)?;
        let series = eval::endpoint_invariance_series(&oracle, data, &ep.levels, ep.expectation)?;
        for p in &series {
            report.insert(format!("endpoint_gap_T{}", p.levels), p.gap)?;
            report.insert(format!("endpoint_relative_gap_T{}", p.levels), p.relative_gap)?;
        }
        if let Some(last) = series.last() {
            check("endpoint_relative_gap", last.relative_gap, ep.max_relative_gap);
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("endpoint_gaps.csv"), eval::gap_series_csv(&series))?;
    }

    if let Some(ec) = &ev.elbo_constancy {
        // compare against a fresh network drawn from the configured architecture
        let other = DenoiserParams::init(&config.model, s.levels(), &mut rng::split(seed, INIT_STREAM - 1))
            .map_err(|e| Error::Config(e.to_string()))?;
        let g = eval::elbo_constancy_gap(model, &other, data, s, ec.n, seed)?;
        report.insert("elbo_constancy_gap", g.gap)?;
        report.insert("elbo_constancy_std_err", g.std_err)?;
        let ratio = if g.gap == 0.0 { 0.0 } else { g.gap / g.std_err };
        report.insert("elbo_constancy_std_errs", ratio)?;
        check("elbo_constancy_std_errs", ratio, ec.max_std_errs);
    }

    fs::create_dir_all(&dir)?;
    report.write_json(&dir.join("metrics.json"))?;
    report.append_csv(&dir.join("metrics.csv"))?;
    for v in &violations {
        eprintln!("threshold violated: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 1 })
}
