//! Running attribution jobs and auditing them by attribution error.
//!
//! [`run`] executes one method at one split and produces an
//! [`AttributionReport`]. On top of it sit the two-stage [`refine`]
//! protocol, manifest-driven [`batch_run`], and [`convergence_study`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    gradient_times_input, integrated_gradients, layercam, odam_single, taylor_first_order,
    AttributionMap, BaselineProvenance, Method, PathSpec, Scheme, NO_INPUT_BASELINE_NOTE,
};
use crate::error::{Error, Result};
use crate::model::{Model, Target};
use crate::report::AttributionReport;
use crate::tensor::Tensor;

/// How the feature baseline `A'` is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSpec {
    /// Input-space baseline, pushed through the head.
    Input(Tensor),
    /// `A' = 0` in feature space. Only reachable through the explicit
    /// escape hatch; reports are flagged as having no input-level baseline.
    FeatureZeros,
    /// Raw feature-space `A'`, flagged like [`BaselineSpec::FeatureZeros`].
    Feature(Tensor),
}

impl BaselineSpec {
    pub fn zeros(model: &Model) -> Self {
        BaselineSpec::Input(Tensor::zeros(model.input_shape()))
    }
}

#[derive(Debug, Clone)]
pub struct RunRequest<'m> {
    pub model: &'m Model,
    pub input: Tensor,
    pub baseline: BaselineSpec,
    pub split_index: usize,
    pub method: Method,
    pub path: PathSpec,
    pub target: Target,
}

/// Runs one attribution and measures it against the exact output change.
///
/// IG and Taylor use the requested baseline. Gradient×input, both LayerCAM
/// variants and ODAM have the all-zero feature map as their baseline by
/// construction; their reports compare against `F(A) - F(0)`.
pub fn run(req: &RunRequest<'_>) -> Result<(AttributionMap, AttributionReport)> {
    let started = Instant::now();
    if req.input.shape() != req.model.input_shape() {
        return Err(Error::shape("model input", req.model.input_shape(), req.input.shape()));
    }
    let view = req.model.split(req.split_index)?;
    let a = view.forward_head(&req.input)?;
    let mut notes = Vec::new();

    let (a_base, provenance) = if req.method.has_implicit_zero_features() {
        let ignored = match &req.baseline {
            BaselineSpec::Input(t) | BaselineSpec::Feature(t) => t.data().iter().any(|&v| v != 0.0),
            BaselineSpec::FeatureZeros => false,
        };
        if ignored {
            notes.push(format!(
                "{} ignores the supplied baseline; its baseline is the zero feature map",
                req.method
            ));
        }
        let provenance = if req.split_index == 0 {
            BaselineProvenance::InputDerived
        } else {
            BaselineProvenance::RawFeature
        };
        (Tensor::zeros(view.feature_shape()), provenance)
    } else {
        match &req.baseline {
            BaselineSpec::Input(x_base) => {
                if x_base.shape() != req.model.input_shape() {
                    return Err(Error::shape(
                        "input baseline",
                        req.model.input_shape(),
                        x_base.shape(),
                    ));
                }
                (view.forward_head(x_base)?, BaselineProvenance::InputDerived)
            }
            BaselineSpec::FeatureZeros | BaselineSpec::Feature(_) => {
                let a_base = match &req.baseline {
                    BaselineSpec::Feature(t) => {
                        if t.shape() != view.feature_shape() {
                            return Err(Error::shape("feature baseline", view.feature_shape(), t.shape()));
                        }
                        t.clone()
                    }
                    _ => Tensor::zeros(view.feature_shape()),
                };
                let provenance = if req.split_index == 0 {
                    BaselineProvenance::InputDerived
                } else {
                    BaselineProvenance::RawFeature
                };
                (a_base, provenance)
            }
        }
    };

    let mut map = match req.method {
        Method::Ig => integrated_gradients(&view, &a, &a_base, req.path, req.target)?,
        Method::Taylor => taylor_first_order(&view, &a, &a_base, req.target)?,
        Method::GradInput => gradient_times_input(&view, &a, req.target)?,
        Method::Layercam => layercam(&view, &a, req.target, false, true)?,
        Method::LayercamMod => layercam(&view, &a, req.target, true, false)?,
        Method::Odam => odam_single(&view, &a, req.target)?,
        Method::OdamCombined => {
            return Err(Error::InvalidArgument(
                "odam-combined merges existing maps; it is not a single run".into(),
            ))
        }
    };
    map.meta.baseline = provenance;
    map.meta.notes.retain(|n| n != NO_INPUT_BASELINE_NOTE);
    if provenance == BaselineProvenance::RawFeature {
        map.note(NO_INPUT_BASELINE_NOTE);
    }
    for n in notes {
        map.note(n);
    }

    let y = view.tail_value(&a, req.target)?;
    let y_base = view.tail_value(&a_base, req.target)?;
    let report = AttributionReport::from_map(&map, y, y_base, started.elapsed());
    Ok((map, report))
}

/// Two-stage protocol settings: rerun with `fine_steps` when the coarse
/// relative error exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub threshold: f64,
    pub coarse_steps: usize,
    pub fine_steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            coarse_steps: 256,
            fine_steps: 2000,
        }
    }
}

/// Runs at `coarse_steps`; escalates to `fine_steps` if the relative error
/// is defined and above the threshold; a threshold of zero always
/// escalates. The returned report has `refined` set when the fine run was
/// used.
pub fn refine(req: &RunRequest<'_>, config: RefineConfig) -> Result<(AttributionMap, AttributionReport)> {
    let coarse_req = RunRequest {
        path: req.path.with_steps(config.coarse_steps)?,
        ..req.clone()
    };
    let (coarse_map, coarse) = run(&coarse_req)?;
    let escalate = coarse
        .rel_error
        .is_some_and(|r| r > config.threshold || config.threshold <= 0.0)
        && req.method.uses_steps();
    if !escalate {
        return Ok((coarse_map, coarse));
    }
    let fine_req = RunRequest {
        path: req.path.with_steps(config.fine_steps)?,
        ..req.clone()
    };
    let (fine_map, mut fine) = run(&fine_req)?;
    fine.refined = true;
    fine.runtime_ms += coarse.runtime_ms;
    if fine.abs_error > coarse.abs_error {
        log::warn!(
            "refinement raised abs error from {:e} to {:e} ({} split {} target {})",
            coarse.abs_error,
            fine.abs_error,
            req.method,
            req.split_index,
            req.target
        );
    }
    Ok((fine_map, fine))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub abs_error: f64,
    pub rel_error: Option<f64>,
    pub runtime_ms: f64,
}

/// IG error against the exact delta for each step count in `steps`.
pub fn convergence_study(
    model: &Model,
    x: &Tensor,
    x_base: &Tensor,
    split_index: usize,
    steps: &[usize],
    scheme: Scheme,
    target: Target,
) -> Result<Vec<ConvergenceRow>> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("step list is empty".into()));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "step list must be strictly ascending, got {steps:?}"
        )));
    }
    steps
        .iter()
        .map(|&m| {
            let req = RunRequest {
                model,
                input: x.clone(),
                baseline: BaselineSpec::Input(x_base.clone()),
                split_index,
                method: Method::Ig,
                path: PathSpec::new(m, scheme)?,
                target,
            };
            let (_, report) = run(&req)?;
            Ok(ConvergenceRow {
                steps: m,
                abs_error: report.abs_error,
                rel_error: report.rel_error,
                runtime_ms: report.runtime_ms,
            })
        })
        .collect()
}

/// Batch manifest: same JSON document style as model files. Relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "one")]
    pub format_version: u32,
    pub jobs: Vec<JobSpec>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub model: PathBuf,
    pub input: PathBuf,
    /// `"zeros"`, `"feature-zeros"`, or a tensor file path.
    #[serde(default = "default_baseline")]
    pub baseline: String,
    pub splits: Vec<usize>,
    pub methods: Vec<Method>,
    pub targets: Vec<Target>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    /// Apply the two-stage refinement protocol to IG runs.
    #[serde(default)]
    pub refine: bool,
}

fn default_baseline() -> String {
    "zeros".into()
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for job in &mut manifest.jobs {
            job.model = dir.join(&job.model);
            job.input = dir.join(&job.input);
            if !matches!(job.baseline.as_str(), "zeros" | "feature-zeros") {
                job.baseline = dir.join(&job.baseline).to_string_lossy().into_owned();
            }
        }
        Ok(manifest)
    }
}

/// Parses a baseline spec string for `model`.
pub fn parse_baseline(spec: &str, model: &Model) -> Result<BaselineSpec> {
    match spec {
        "zeros" => Ok(BaselineSpec::zeros(model)),
        "feature-zeros" => Ok(BaselineSpec::FeatureZeros),
        path => Ok(BaselineSpec::Input(Tensor::load(path)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    /// Record measured runtimes.
    #[default]
    WallClock,
    /// Write zero runtimes, making the CSV a pure function of the manifest.
    Omitted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub workers: usize,
    pub steps: usize,
    pub scheme: Scheme,
    pub refine: RefineConfig,
    pub timing: Timing,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            steps: PathSpec::DEFAULT_STEPS,
            scheme: Scheme::Right,
            refine: RefineConfig::default(),
            timing: Timing::WallClock,
        }
    }
}

/// One executed unit of a batch: a (job, method, split, target) combination.
#[derive(Debug, Clone)]
pub struct BatchRun {
    pub job: usize,
    pub method: Method,
    pub split_index: usize,
    pub target: Target,
    pub outcome: std::result::Result<AttributionReport, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub method: Method,
    pub split_index: usize,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub key: GroupKey,
    pub n: usize,
    pub mean_abs_error: Option<f64>,
    pub mean_rel_error: Option<f64>,
    pub undefined_count: usize,
    pub total_runtime_ms: f64,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub rows: Vec<BatchRow>,
}

pub const CSV_HEADER: [&str; 9] = [
    "method",
    "split_layer",
    "target",
    "n",
    "mean_abs_error",
    "mean_rel_error",
    "undefined_count",
    "total_runtime_ms",
    "errors",
];

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl BatchResult {
    /// Groups runs by (method, split, target), in sorted key order. Sums run
    /// in job order so aggregates do not depend on scheduling.
    pub fn aggregate(runs: &[BatchRun]) -> Self {
        let mut groups: BTreeMap<GroupKey, Vec<&BatchRun>> = BTreeMap::new();
        for r in runs {
            groups
                .entry(GroupKey {
                    method: r.method,
                    split_index: r.split_index,
                    target: r.target,
                })
                .or_default()
                .push(r);
        }
        let rows = groups
            .into_iter()
            .map(|(key, members)| {
                let mut n = 0;
                let mut abs_sum = 0.0;
                let mut rel_sum = 0.0;
                let mut rel_n = 0;
                let mut runtime = 0.0;
                let mut errors = Vec::new();
                for r in members {
                    match &r.outcome {
                        Ok(report) => {
                            n += 1;
                            abs_sum += report.abs_error;
                            runtime += report.runtime_ms;
                            if let Some(rel) = report.rel_error {
                                rel_sum += rel;
                                rel_n += 1;
                            }
                        }
                        Err(e) => errors.push(format!("job {}: {e}", r.job)),
                    }
                }
                BatchRow {
                    key,
                    n,
                    mean_abs_error: (n > 0).then(|| abs_sum / n as f64),
                    mean_rel_error: (rel_n > 0).then(|| rel_sum / rel_n as f64),
                    undefined_count: n - rel_n,
                    total_runtime_ms: runtime,
                    errors,
                }
            })
            .collect();
        BatchResult { rows }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), fmt17);
        for row in &self.rows {
            w.write_record([
                row.key.method.to_string(),
                row.key.split_index.to_string(),
                row.key.target.to_string(),
                row.n.to_string(),
                opt(row.mean_abs_error),
                opt(row.mean_rel_error),
                row.undefined_count.to_string(),
                fmt17(row.total_runtime_ms),
                row.errors.join("; "),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

struct Unit {
    job: usize,
    method: Method,
    split_index: usize,
    target: Target,
}

fn execute_unit(job: &JobSpec, unit: &Unit, config: &BatchConfig) -> std::result::Result<AttributionReport, String> {
    let go = || -> Result<AttributionReport> {
        let model = Model::load(&job.model)?;
        let input = Tensor::load(&job.input)?;
        let baseline = parse_baseline(&job.baseline, &model)?;
        let path = PathSpec::new(
            job.steps.unwrap_or(config.steps),
            job.scheme.unwrap_or(config.scheme),
        )?;
        let req = RunRequest {
            model: &model,
            input,
            baseline,
            split_index: unit.split_index,
            method: unit.method,
            path,
            target: unit.target,
        };
        let (_, mut report) = if job.refine && unit.method.uses_steps() {
            refine(&req, config.refine)?
        } else {
            run(&req)?
        };
        if config.timing == Timing::Omitted {
            report.runtime_ms = 0.0;
        }
        Ok(report)
    };
    go().map_err(|e| e.to_string())
}

/// Executes every (job, method, split, target) combination of the manifest
/// on `config.workers` threads. Failures are kept per run and never abort
/// the batch.
pub fn batch_run(manifest: &Manifest, config: &BatchConfig) -> Result<(BatchResult, Vec<BatchRun>)> {
    use rayon::prelude::*;

    let mut units = Vec::new();
    for (j, job) in manifest.jobs.iter().enumerate() {
        for &method in &job.methods {
            for &split_index in &job.splits {
                for &target in &job.targets {
                    units.push(Unit {
                        job: j,
                        method,
                        split_index,
                        target,
                    });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        units
            .par_iter()
            .map(|u| execute_unit(&manifest.jobs[u.job], u, config))
            .collect()
    });
    let runs: Vec<BatchRun> = units
        .into_iter()
        .zip(outcomes)
        .map(|(u, outcome)| BatchRun {
            job: u.job,
            method: u.method,
            split_index: u.split_index,
            target: u.target,
            outcome,
        })
        .collect();
    Ok((BatchResult::aggregate(&runs), runs))
}
