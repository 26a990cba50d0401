//! `attrib`: baseline-aware attribution from the command line.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical error.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrib_core::eval::{
    self, batch_run, convergence_study, parse_baseline, BaselineSpec, BatchConfig, Manifest,
    RefineConfig, RunRequest, Timing,
};
use attrib_core::gradcheck::{check_model, CHECK_TOLERANCE};
use attrib_core::render::{overlay, render_heatmap};
use attrib_core::{fixtures, AttributionMap, Method, Model, PathSpec, Scheme, Target, Tensor};
use clap::{Args, Parser, Subcommand};

use crate::config::ConfigFile;

const PRECEDENCE: &str = "Settings resolve as: command-line flag, then --config file, then \
built-in default. Paths inside a config file are relative to the file.";

#[derive(Parser)]
#[command(name = "attrib", version, about = "Baseline-aware attribution with error auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attribute one output to the features at one split.
    #[command(after_help = PRECEDENCE)]
    Attribute(AttributeArgs),
    /// Run every job of a manifest and write the aggregated CSV.
    #[command(after_help = PRECEDENCE)]
    Batch(BatchArgs),
    /// IG attribution error for a list of step counts.
    #[command(after_help = PRECEDENCE)]
    Convergence(ConvergenceArgs),
    /// Render an attribution map (optionally over an image) as PPM.
    Render(RenderArgs),
    /// Compare backward gradients with central finite differences.
    Check(CheckArgs),
    /// Write the analytic and random fixture set.
    GenFixtures(GenFixturesArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Model file (`.model.json`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input tensor file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `zeros`, an input-space tensor file, or `feature-zeros` (zero feature
    /// map; the report then has no input-level baseline). Default `zeros`.
    #[arg(long)]
    baseline: Option<String>,
    /// Split index: layers before it form the head. Default 0.
    #[arg(long)]
    split: Option<usize>,
    /// Riemann scheme, `right` or `left`. Default `right`.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Output to explain, `<index>[:logit|:prob]`. Default `0:logit`.
    #[arg(long)]
    target: Option<Target>,
    /// JSON config file with the same setting names.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Raw feature-space baseline at the split: `zeros` or a tensor file.
    /// Escape hatch; the report is flagged as having no input-level
    /// baseline.
    #[arg(long, conflicts_with = "baseline")]
    feature_baseline: Option<String>,
    /// ig, grad-input, taylor, layercam, layercam-mod or odam. Default ig.
    #[arg(long)]
    method: Option<Method>,
    /// Integration steps for ig. Default 256.
    #[arg(long)]
    steps: Option<usize>,
    /// Rerun with 2000 steps if the relative error at 256 exceeds 0.5.
    #[arg(long)]
    refine: bool,
    /// Report file; standard output if omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Attribution map file.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Heatmap of the collapsed map, as PPM.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Manifest file.
    manifest: PathBuf,
    /// CSV output; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Default 1.
    #[arg(long, env = "ATTRIB_WORKERS")]
    workers: Option<usize>,
    /// Steps for jobs that do not set their own. Default 256.
    #[arg(long)]
    steps: Option<usize>,
    /// Scheme for jobs that do not set their own. Default `right`.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Write zero runtimes so the CSV depends only on the manifest.
    #[arg(long)]
    no_timing: bool,
    /// JSON config file (`steps`, `scheme`, `workers`).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Strictly ascending step counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    steps_list: Vec<usize>,
    /// CSV output; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write zero runtimes.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Attribution map file, or a bare tensor file.
    #[arg(long)]
    map: PathBuf,
    /// `[3, H, W]` or `[1, H, W]` image tensor with values in [0, 1].
    #[arg(long)]
    image: Option<PathBuf>,
    /// Image weight in the overlay.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// PPM output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenFixturesArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of toy-CNN input images.
    #[arg(long, default_value_t = 4)]
    images: usize,
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<attrib_core::Error> for Failure {
    fn from(e: attrib_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<String> for Failure {
    fn from(message: String) -> Self {
        Failure::Input(message)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Attribute(a) => attribute(a),
        Command::Batch(a) => batch(a),
        Command::Convergence(a) => convergence(a),
        Command::Render(a) => render(a),
        Command::Check(a) => check(a),
        Command::GenFixtures(a) => gen_fixtures(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Common settings after applying flag > config > default.
struct Resolved {
    model: Model,
    input: Tensor,
    baseline: String,
    split: usize,
    scheme: Scheme,
    target: Target,
}

fn resolve_common(c: CommonArgs, cfg: &ConfigFile) -> Result<Resolved, Failure> {
    let model_path = c
        .model
        .or_else(|| cfg.model.clone())
        .ok_or("--model is required".to_string())?;
    let input_path = c
        .input
        .or_else(|| cfg.input.clone())
        .ok_or("--input is required".to_string())?;
    Ok(Resolved {
        model: Model::load(model_path)?,
        input: Tensor::load(input_path)?,
        baseline: c.baseline.or_else(|| cfg.baseline.clone()).unwrap_or_else(|| "zeros".into()),
        split: c.split.or(cfg.split).unwrap_or(0),
        scheme: c.scheme.or(cfg.scheme).unwrap_or(Scheme::Right),
        target: c.target.or(cfg.target).unwrap_or(Target::logit(0)),
    })
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Input(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::Input(format!("stdout: {e}")))
        }
    }
}

fn attribute(a: AttributeArgs) -> CliResult {
    let cfg = ConfigFile::load_opt(a.common.config.as_deref())?;
    let baseline_flag = a.common.baseline.is_some();
    let r = resolve_common(a.common, &cfg)?;
    let feature_baseline = match (&a.feature_baseline, baseline_flag) {
        (Some(f), _) => Some(f.clone()),
        (None, true) => None,
        (None, false) => cfg.feature_baseline.clone(),
    };
    let baseline = match feature_baseline.as_deref() {
        Some("zeros") => BaselineSpec::FeatureZeros,
        Some(path) => BaselineSpec::Feature(Tensor::load(path)?),
        None => parse_baseline(&r.baseline, &r.model)?,
    };
    let method = a.method.or(cfg.method).unwrap_or(Method::Ig);
    let steps = a.steps.or(cfg.steps);
    let refine = a.refine || cfg.refine.unwrap_or(false);
    if steps.is_some() && !method.uses_steps() {
        log::warn!("steps ignored: {method} is a single-step method");
    }
    if refine && !method.uses_steps() {
        log::warn!("refine ignored: {method} is a single-step method");
    }
    let path = if method.uses_steps() {
        PathSpec::new(steps.unwrap_or(PathSpec::DEFAULT_STEPS), r.scheme)?
    } else {
        PathSpec::right(1)
    };
    let req = RunRequest {
        baseline,
        model: &r.model,
        input: r.input,
        split_index: r.split,
        method,
        path,
        target: r.target,
    };
    let (map, report) = if refine {
        eval::refine(&req, RefineConfig::default())?
    } else {
        eval::run(&req)?
    };
    if let Some(p) = a.map.or(cfg.map) {
        write_output(Some(&p), &map.to_json())?;
    }
    if let Some(p) = a.heatmap.or(cfg.heatmap) {
        render_heatmap(&map.collapsed, p)?;
    }
    write_output(a.report.or(cfg.report).as_deref(), &(report.to_json() + "\n"))
}

fn batch(a: BatchArgs) -> CliResult {
    let cfg = ConfigFile::load_opt(a.config.as_deref())?;
    let manifest = Manifest::load(&a.manifest)?;
    let config = BatchConfig {
        workers: a.workers.or(cfg.workers).unwrap_or(1),
        steps: a.steps.or(cfg.steps).unwrap_or(PathSpec::DEFAULT_STEPS),
        scheme: a.scheme.or(cfg.scheme).unwrap_or(Scheme::Right),
        refine: RefineConfig::default(),
        timing: if a.no_timing { Timing::Omitted } else { Timing::WallClock },
    };
    let (result, runs) = batch_run(&manifest, &config)?;
    let failed = runs.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see the errors column", runs.len());
    }
    write_output(a.out.as_deref(), &result.to_csv_string())
}

fn convergence(a: ConvergenceArgs) -> CliResult {
    let cfg = ConfigFile::load_opt(a.common.config.as_deref())?;
    let r = resolve_common(a.common, &cfg)?;
    let x_base = match r.baseline.as_str() {
        "zeros" => Tensor::zeros(r.model.input_shape()),
        "feature-zeros" => {
            return Err(Failure::Input(
                "convergence needs an input-space baseline, not feature-zeros".into(),
            ))
        }
        path => Tensor::load(path)?,
    };
    let rows = convergence_study(&r.model, &r.input, &x_base, r.split, &a.steps_list, r.scheme, r.target)?;
    let mut text = String::from("steps,abs_error,rel_error,runtime_ms\n");
    for row in rows {
        let rel = row.rel_error.map_or_else(|| "undefined".into(), |v| format!("{v:.16e}"));
        let runtime = if a.no_timing { 0.0 } else { row.runtime_ms };
        text.push_str(&format!("{},{:.16e},{rel},{runtime:.16e}\n", row.steps, row.abs_error));
    }
    write_output(a.out.as_deref(), &text)
}

fn load_map(path: &Path) -> Result<Tensor, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Ok(map) = serde_json::from_str::<AttributionMap>(&text) {
        return Ok(map.collapsed);
    }
    Tensor::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn render(a: RenderArgs) -> CliResult {
    let map = load_map(&a.map)?;
    match a.image {
        Some(image) => overlay(&Tensor::load(image)?, &map, a.alpha, &a.out)?,
        None => render_heatmap(&map, &a.out)?,
    }
    Ok(())
}

fn check(a: CheckArgs) -> CliResult {
    let model = Model::load(&a.model)?;
    let report = check_model(&model, a.points, a.seed)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialization");
    write_output(None, &(json + "\n"))?;
    if report.passed(CHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "max relative gradient deviation {:e} exceeds {CHECK_TOLERANCE:e}",
            report.max_relative_deviation
        )))
    }
}

fn gen_fixtures(a: GenFixturesArgs) -> CliResult {
    let written = fixtures::write_fixture_set(&a.out, a.seed, a.images)?;
    let list: String = written.iter().map(|p| format!("{}\n", p.display())).collect();
    write_output(None, &list)
}
