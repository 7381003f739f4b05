//! rsavq: sensitivity-aware vector quantization of small weight matrices.
//!
//! Subcommands: gen-toy, analyze, quantize, dequantize, eval, ablate.
//! Exit codes: 0 success, 1 internal invariant violation, 2 user/input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rsavq_core::edsg::MetricMode;
use rsavq_core::eval::{run_sweep_multi_seed, Axis};
use rsavq_core::fim::DEFAULT_RELATIVE_DAMPING;
use rsavq_core::tensorio::{
    read_bundle, read_quantized, read_tensor, write_bundle, write_quantized, write_tensor,
};
use rsavq_core::toymodel::{inputs_matrix, TaskSummary};
use rsavq_core::wcsg::{build_profile, global_distortion, ChannelMetric};
use rsavq_core::{
    decode, estimate_kronecker_fim, generate, metrics, quantize_matrix, Error, GradientBundle,
    QuantizeConfig, TaskParams, WeightMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChannelAxis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Parser, Debug)]
#[command(name = "rsavq", version, about = "Fisher-metric grouped vector quantization toolkit")]
struct Cli {
    /// JSON config file; CLI flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Pipeline seed (overrides config)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, short = 'o', global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Which weight axis holds the channels
    #[arg(long, global = true, value_enum)]
    channel_axis: Option<ChannelAxis>,

    /// Report format for ablate
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy calibration task (weights, gradients, inputs, labels)
    GenToy(GenToyArgs),
    /// Channel sensitivity analysis: energies, bit allocation, grouping
    Analyze(TensorPairArgs),
    /// Quantize a weight matrix against a gradient bundle
    Quantize(TensorPairArgs),
    /// Decode a quantized artifact back to a dense tensor
    Dequantize(DequantizeArgs),
    /// Error metrics for an original/quantized pair
    Eval(EvalArgs),
    /// Sweep an axis (lambda, group_count, vector_length, components)
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenToyArgs {
    /// Class count (matrix rows), >= 2
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Input dimension (matrix cols)
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Calibration sample count
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Use the wide heterogeneous-sensitivity task shape instead of --m/--n
    #[arg(long, default_value_t = false)]
    heterogeneous: bool,
}

#[derive(Args, Debug)]
struct TensorPairArgs {
    /// Weight tensor (.rsqt)
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    /// Gradient bundle (.rsqb file or directory of .rsqt)
    #[arg(long, value_name = "PATH")]
    grads: PathBuf,
    #[command(flatten)]
    quant: QuantFlags,
}

#[derive(Args, Debug)]
struct DequantizeArgs {
    /// Quantized artifact (.rsqq)
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Original weight tensor (.rsqt)
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    /// Quantized artifact (.rsqq)
    #[arg(long, value_name = "PATH")]
    quantized: PathBuf,
    /// Gradient bundle used for calibration
    #[arg(long, value_name = "PATH")]
    grads: PathBuf,
    #[command(flatten)]
    quant: QuantFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Sweep axis: lambda, group_count, vector_length, components
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values (ignored for components)
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Seeds for the multi-seed median protocol
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Sweep the heterogeneous task instead of the default one
    #[arg(long, default_value_t = false)]
    heterogeneous: bool,
    #[command(flatten)]
    quant: QuantFlags,
}

/// Per-run quantization overrides; unset flags fall back to config then
/// defaults.
#[derive(Args, Debug, Clone)]
struct QuantFlags {
    #[arg(long)]
    vector_length: Option<usize>,
    #[arg(long)]
    group_count: Option<usize>,
    #[arg(long)]
    target_bits: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
    #[arg(long)]
    metric_mode: Option<String>,
}

/// On-disk config: a superset of the quantizer config, all keys optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    vector_length: Option<usize>,
    group_count: Option<usize>,
    target_bits: Option<f64>,
    lambda: Option<f64>,
    kmeans_iters: Option<usize>,
    kmeans_tol: Option<f64>,
    seed: Option<u64>,
    metric_mode: Option<MetricMode>,
    seeds: Option<Vec<u64>>,
    channel_axis: Option<String>,
    format: Option<String>,
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, Error> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
}

fn parse_metric_mode(s: &str) -> Result<MetricMode, Error> {
    match s {
        "euclidean" => Ok(MetricMode::Euclidean),
        "fisher-diagonal" => Ok(MetricMode::FisherDiagonal),
        other => Err(Error::Validation(format!(
            "metric_mode must be euclidean or fisher-diagonal, got {other:?}"
        ))),
    }
}

/// flags > config file > built-in defaults
fn resolve_quant_config(
    flags: &QuantFlags,
    cfg: &CliConfig,
    seed_flag: Option<u64>,
) -> Result<QuantizeConfig, Error> {
    let mut q = QuantizeConfig::default();
    if let Some(v) = cfg.vector_length {
        q.vector_length = v;
    }
    if let Some(g) = cfg.group_count {
        q.group_count = g;
    }
    if let Some(b) = cfg.target_bits {
        q.target_bits = b;
    }
    if let Some(l) = cfg.lambda {
        q.lambda = l;
    }
    if let Some(i) = cfg.kmeans_iters {
        q.kmeans_iters = i;
    }
    if let Some(t) = cfg.kmeans_tol {
        q.kmeans_tol = t;
    }
    if let Some(s) = cfg.seed {
        q.seed = s;
    }
    if let Some(m) = cfg.metric_mode {
        q.metric_mode = m;
    }
    if let Some(v) = flags.vector_length {
        q.vector_length = v;
    }
    if let Some(g) = flags.group_count {
        q.group_count = g;
    }
    if let Some(b) = flags.target_bits {
        q.target_bits = b;
    }
    if let Some(l) = flags.lambda {
        q.lambda = l;
    }
    if let Some(i) = flags.kmeans_iters {
        q.kmeans_iters = i;
    }
    if let Some(t) = flags.kmeans_tol {
        q.kmeans_tol = t;
    }
    if let Some(m) = &flags.metric_mode {
        q.metric_mode = parse_metric_mode(m)?;
    }
    if let Some(s) = seed_flag {
        q.seed = s;
    }
    q.validate()?;
    Ok(q)
}

fn resolve_axis(cli: &Cli, cfg: &CliConfig) -> Result<ChannelAxis, Error> {
    if let Some(a) = cli.channel_axis {
        return Ok(a);
    }
    match cfg.channel_axis.as_deref() {
        None => Ok(ChannelAxis::Rows),
        Some("rows") => Ok(ChannelAxis::Rows),
        Some("cols") => Ok(ChannelAxis::Cols),
        Some(other) => Err(Error::Validation(format!(
            "channel_axis must be rows or cols, got {other:?}"
        ))),
    }
}

fn resolve_format(cli: &Cli, cfg: &CliConfig) -> Result<ReportFormat, Error> {
    if let Some(f) = cli.format {
        return Ok(f);
    }
    match cfg.format.as_deref() {
        None => Ok(ReportFormat::Csv),
        Some("csv") => Ok(ReportFormat::Csv),
        Some("json") => Ok(ReportFormat::Json),
        Some(other) => Err(Error::Validation(format!(
            "format must be csv or json, got {other:?}"
        ))),
    }
}

fn out_dir(cli: &Cli, cfg: &CliConfig) -> Result<PathBuf, Error> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Parallelism cap; results never depend on it, but the value must be sane.
fn check_threads_env() -> Result<(), Error> {
    if let Ok(raw) = std::env::var("RSAVQ_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::Validation(format!(
                "RSAVQ_THREADS must be a positive integer, got {raw:?}"
            ))),
        }
    } else {
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("json encode: {e}")))?;
    text.push('\n');
    write_atomic_text(path, &text)
}

fn write_atomic_text(path: &Path, text: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load the (weights, gradients) pair and apply the channel-axis convention:
/// with cols as channels both are transposed before the pipeline.
fn load_pair(
    weights: &Path,
    grads: &Path,
    axis: ChannelAxis,
) -> Result<(WeightMatrix, GradientBundle), Error> {
    let w = read_tensor(weights)?;
    let g = read_bundle(grads)?;
    if g.rows() != w.rows() || g.cols() != w.cols() {
        return Err(Error::Validation(format!(
            "gradient bundle {}x{} does not match weights {}x{}",
            g.rows(),
            g.cols(),
            w.rows(),
            w.cols()
        )));
    }
    match axis {
        ChannelAxis::Rows => Ok((w, g)),
        ChannelAxis::Cols => Ok((w.transpose(), g.transpose())),
    }
}

fn cmd_gen_toy(cli: &Cli, args: &GenToyArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let dir = out_dir(cli, &cfg)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let params = if args.heterogeneous {
        TaskParams {
            samples: args.samples,
            ..TaskParams::heterogeneous_task(seed)
        }
    } else {
        TaskParams {
            seed,
            ..TaskParams::default_shape(args.m, args.n, args.samples)
        }
    };
    let task = generate(&params)?;
    let bundle = task.grad_samples(&task.weight)?;

    write_tensor(&task.weight, dir.join("w.rsqt"))?;
    write_bundle(&bundle, dir.join("grads.rsqb"))?;
    write_tensor(&inputs_matrix(&task)?, dir.join("inputs.rsqt"))?;
    write_json(&dir.join("labels.json"), &task.labels)?;
    let summary = TaskSummary {
        m: task.weight.rows(),
        n: task.weight.cols(),
        s: task.inputs.len(),
        seed,
    };
    write_json(&dir.join("task.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&summary).map_err(|e| Error::Validation(e.to_string()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport {
    energies: Vec<f64>,
    bits: Vec<f64>,
    groups: Vec<rsavq_core::wcsg::Group>,
    global_distortion: f64,
}

fn cmd_analyze(cli: &Cli, args: &TensorPairArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let axis = resolve_axis(cli, &cfg)?;
    let q = resolve_quant_config(&args.quant, &cfg, cli.seed)?;
    let (w, bundle) = load_pair(&args.weights, &args.grads, axis)?;
    let fim = estimate_kronecker_fim(&bundle, 0.0)?
        .with_relative_damping(DEFAULT_RELATIVE_DAMPING);
    let metric = ChannelMetric::from_kronecker(&fim);
    let budget = q.target_bits * w.rows() as f64;
    let profile = build_profile(&bundle.mean(), &metric, budget, q.group_count.min(w.rows()))?;
    let report = AnalyzeReport {
        global_distortion: global_distortion(&profile.energies, &profile.bits)?,
        energies: profile.energies,
        bits: profile.bits,
        groups: profile.groups,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Validation(e.to_string()))?
    );
    Ok(())
}

fn cmd_quantize(cli: &Cli, args: &TensorPairArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let axis = resolve_axis(cli, &cfg)?;
    let dir = out_dir(cli, &cfg)?;
    let q_cfg = resolve_quant_config(&args.quant, &cfg, cli.seed)?;
    let (w, bundle) = load_pair(&args.weights, &args.grads, axis)?;
    let (q, profile) = quantize_matrix(&w, &bundle, &q_cfg)?;
    write_quantized(&q, dir.join("q.rsqq"))?;
    write_json(&dir.join("profile.json"), &profile)?;
    let w_hat = decode(&q)?;
    let fim = estimate_kronecker_fim(&bundle, 0.0)?
        .with_relative_damping(DEFAULT_RELATIVE_DAMPING);
    let m = metrics(&w, &w_hat, &fim, &profile)?;
    println!(
        "bits={} groups={} distortion={}",
        profile.avg_bits(),
        profile.groups.len(),
        m.fisher_distortion
    );
    Ok(())
}

fn cmd_dequantize(cli: &Cli, args: &DequantizeArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let axis = resolve_axis(cli, &cfg)?;
    let dir = out_dir(cli, &cfg)?;
    let q = read_quantized(&args.input)?;
    let mut w_hat = decode(&q)?;
    if axis == ChannelAxis::Cols {
        w_hat = w_hat.transpose();
    }
    let path = dir.join("w_hat.rsqt");
    write_tensor(&w_hat, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let axis = resolve_axis(cli, &cfg)?;
    let q_cfg = resolve_quant_config(&args.quant, &cfg, cli.seed)?;
    let (w, bundle) = load_pair(&args.weights, &args.grads, axis)?;
    let q = read_quantized(&args.quantized)?;
    let w_hat = decode(&q)?;
    if !w.same_shape(&w_hat) {
        return Err(Error::Validation(format!(
            "quantized artifact decodes to {}x{}, weights are {}x{}",
            w_hat.rows(),
            w_hat.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let fim = estimate_kronecker_fim(&bundle, 0.0)?
        .with_relative_damping(DEFAULT_RELATIVE_DAMPING);
    let metric = ChannelMetric::from_kronecker(&fim);
    let budget = q_cfg.target_bits * w.rows() as f64;
    let profile = build_profile(
        &bundle.mean(),
        &metric,
        budget,
        q_cfg.group_count.min(w.rows()),
    )?;
    let m = metrics(&w, &w_hat, &fim, &profile)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&m).map_err(|e| Error::Validation(e.to_string()))?
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    let dir = out_dir(cli, &cfg)?;
    let format = resolve_format(cli, &cfg)?;
    let q_cfg = resolve_quant_config(&args.quant, &cfg, cli.seed)?;
    let axis = Axis::parse(&args.axis)?;
    if axis != Axis::Components && args.values.is_empty() {
        return Err(Error::Validation(format!(
            "--values required for axis {}",
            axis.name()
        )));
    }
    let base_seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let seeds: Vec<u64> = if !args.seeds.is_empty() {
        args.seeds.clone()
    } else if let Some(s) = &cfg.seeds {
        s.clone()
    } else {
        vec![base_seed]
    };
    if seeds.is_empty() {
        return Err(Error::Validation("seeds list is empty".into()));
    }
    let params = if args.heterogeneous {
        TaskParams::heterogeneous_task(seeds[0])
    } else {
        TaskParams::default_task(seeds[0])
    };
    let report = run_sweep_multi_seed(&params, &q_cfg, axis, &args.values, &seeds)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("ablation_{}_{}", axis.name(), stamp);
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_atomic_text(&csv_path, &report.to_csv())?;
    write_json(&json_path, &report)?;
    match format {
        ReportFormat::Csv => print!("{}", report.to_csv()),
        ReportFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Validation(e.to_string()))?
        ),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    check_threads_env()?;
    match &cli.command {
        Command::GenToy(a) => cmd_gen_toy(cli, a),
        Command::Analyze(a) => cmd_analyze(cli, a),
        Command::Quantize(a) => cmd_quantize(cli, a),
        Command::Dequantize(a) => cmd_dequantize(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        // user/input problems
        Error::Format(_)
        | Error::Validation(_)
        | Error::UnsupportedVersion { .. }
        | Error::Infeasible(_)
        | Error::Io { .. } => 2,
        // internal invariant breaches
        Error::Numeric(_) => 1,
        Error::Stage { source, .. } => exit_code_for(source),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
