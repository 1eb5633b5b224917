//! Declarative experiments: an error functional over an ε-ladder, a fitted
//! log-log rate and a serialized report.
//!
//! Replicas run in parallel on index-keyed RNG streams and are aggregated in
//! index order, so a report depends only on its config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fluid::{build_c_operator, mode_covariance, FluidConfig, Wavevector};
use crate::grid::UniformGrid;
use crate::limit::{limit_lift_with, LiftForm};
use crate::operators::{psd_sqrt, validate_generator, GeneratorAlgebra, LinearOperator};
use crate::ou::{sample_invariant, seek_step, simulate_fast_path, standard_normal, NoiseConfig};
use crate::rough::{canonical_lift, check_alpha, holder_seminorm, SeminormMode};
use crate::slowfast::{
    assemble_driver, compute_remainder, driver_norm_bounds, remainder_scaling, rough_euler_limit,
    SlowFastIntegrator, SlowFastSystem, MIN_EPSILON,
};
use crate::stats::{loglog, mean_stderr, ols, LinearFit};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest tolerated share of failed replicas per ε.
pub const MAX_FAILURE_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    LiftConvergence,
    CorrectionM,
    ErgodicRate,
    ItoStokes,
    SlowfastLimit,
    DriverBounds,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        Self::LiftConvergence,
        Self::CorrectionM,
        Self::ErgodicRate,
        Self::ItoStokes,
        Self::SlowfastLimit,
        Self::DriverBounds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LiftConvergence => "lift-convergence",
            Self::CorrectionM => "correction-m",
            Self::ErgodicRate => "ergodic-rate",
            Self::ItoStokes => "ito-stokes",
            Self::SlowfastLimit => "slowfast-limit",
            Self::DriverBounds => "driver-bounds",
        }
    }

    fn needs_fluid(self) -> bool {
        matches!(self, Self::ItoStokes | Self::SlowfastLimit | Self::DriverBounds)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Fast-noise operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorSpec {
    Matrix {
        c: LinearOperator<f64>,
        q: LinearOperator<f64>,
    },
    /// `C = −rate·I`, `Q = variance·I`.
    Isotropic { dim: usize, rate: f64, variance: f64 },
    Fluid(FluidSpec),
}

impl OperatorSpec {
    /// `(C, Q)` for the finite-dimensional kinds.
    pub fn matrices(&self) -> Result<(LinearOperator<f64>, LinearOperator<f64>)> {
        match self {
            Self::Matrix { c, q } => Ok((c.clone(), q.clone())),
            Self::Isotropic { dim, rate, variance } => {
                if *dim == 0 || !(*rate > 0.0) || !(*variance >= 0.0) {
                    return Err(Error::Config(format!(
                        "isotropic operators need dim ≥ 1, rate > 0, variance ≥ 0; got {dim}, {rate}, {variance}"
                    )));
                }
                Ok((
                    LinearOperator::identity(*dim).scale(-rate),
                    LinearOperator::identity(*dim).scale(*variance),
                ))
            }
            Self::Fluid(_) => Err(Error::Config("this experiment needs matrix operators".into())),
        }
    }
}

/// Fluid instantiation: `C = −ρ(−A)^ς` and a mode-mixing `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluidSpec {
    pub fluid: FluidConfig,
    pub rho: f64,
    pub varsigma: f64,
    pub modes: Vec<Wavevector>,
    pub amplitude: f64,
    pub correlation: f64,
    /// Scale of the deterministic initial velocity.
    pub initial_scale: f64,
    pub nonlinear: bool,
}

impl Default for FluidSpec {
    fn default() -> Self {
        Self {
            fluid: FluidConfig::default(),
            rho: 1.0,
            varsigma: 0.0,
            modes: vec![[1, 0, 0], [0, 1, 0]],
            amplitude: 1.0,
            correlation: 0.5,
            initial_scale: 0.5,
            nonlinear: true,
        }
    }
}

impl FluidSpec {
    pub fn system(&self) -> Result<SlowFastSystem<f64>> {
        self.fluid.validate()?;
        let basis = self.fluid.basis::<f64>()?;
        let c = build_c_operator(&basis, self.rho, self.varsigma, self.fluid.nu, None)?;
        let q = mode_covariance(&basis, &self.modes, self.amplitude, self.correlation)?;
        let mut sys = SlowFastSystem::new(basis, self.fluid.nu, c, q)?;
        sys.nonlinear = self.nonlinear;
        Ok(sys)
    }

    /// Smooth deterministic initial velocity with norm of order `initial_scale`.
    pub fn initial_velocity(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| {
            self.initial_scale * ((i as f64 * 0.7).sin() + 0.2) / (1.0 + i as f64).sqrt()
        })
    }
}

/// Level-1 uses `sup_t E‖y_t − B_t‖²`; level-2 `E‖Y²_{0T} − B²_{0T}‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    Level1,
    #[default]
    Level2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// `|measured − value| ≤ tolerance`.
    #[default]
    Within,
    /// `measured ≤ value + tolerance`.
    AtMost,
    /// `measured ≥ value − tolerance`.
    AtLeast,
}

/// Pass criterion on a named metric: `slope` or a diagnostic key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub comparison: Comparison,
}

impl Target {
    pub fn new(metric: &str, value: f64, tolerance: f64, comparison: Comparison) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            tolerance,
            comparison,
        }
    }

    fn holds(&self, measured: f64) -> bool {
        measured.is_finite()
            && match self.comparison {
                Comparison::Within => (measured - self.value).abs() <= self.tolerance,
                Comparison::AtMost => measured <= self.value + self.tolerance,
                Comparison::AtLeast => measured >= self.value - self.tolerance,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// File stem; defaults to the experiment id.
    pub stem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub operators: OperatorSpec,
    pub epsilons: Vec<f64>,
    pub fine_level: u32,
    pub coarse_level: u32,
    #[serde(default = "one")]
    pub t_end: f64,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub observable: Observable,
    /// Weight log-log points by `(mean/stderr)²`.
    #[serde(default)]
    pub weighted_fit: bool,
    /// Samples from the invariant law for the Itô-Stokes cross-check.
    #[serde(default)]
    pub mc_samples: usize,
    #[serde(default = "default_sobolev")]
    pub sobolev_indices: Vec<u32>,
    #[serde(default)]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    crate::rough::DEFAULT_ALPHA
}

fn default_sobolev() -> Vec<u32> {
    vec![0, 1, 2]
}

fn ladder(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 2f64.powi(-k)).collect()
}

impl ExperimentConfig {
    /// A ready-to-run configuration for each experiment.
    pub fn example(id: ExperimentId) -> Self {
        let base = Self {
            experiment: id,
            operators: OperatorSpec::Isotropic {
                dim: 4,
                rate: 1.0,
                variance: 1.0,
            },
            epsilons: ladder(3, 7),
            fine_level: 14,
            coarse_level: 0,
            t_end: 1.0,
            replicas: 400,
            seed: 20240601,
            alpha: default_alpha(),
            observable: Observable::Level2,
            weighted_fit: false,
            mc_samples: 0,
            sobolev_indices: default_sobolev(),
            targets: vec![Target::new("slope", 1.0, 0.25, Comparison::Within)],
            output: OutputSpec::default(),
        };
        let fluid = |cutoff: usize| {
            OperatorSpec::Fluid(FluidSpec {
                fluid: FluidConfig {
                    cutoff,
                    ..FluidConfig::default()
                },
                ..FluidSpec::default()
            })
        };
        match id {
            ExperimentId::LiftConvergence => base,
            ExperimentId::CorrectionM => Self {
                operators: OperatorSpec::Matrix {
                    c: LinearOperator::from_row_major(2, &[-1.0, 0.0, 0.0, -3.0]).expect("2x2"),
                    q: LinearOperator::from_row_major(2, &[2.0, 0.0, 0.0, 1.0]).expect("2x2"),
                },
                epsilons: vec![1.0],
                replicas: 1,
                targets: vec![Target::new("correction_norm", 0.0, 1e-12, Comparison::AtMost)],
                ..base
            },
            ExperimentId::ErgodicRate => Self {
                operators: OperatorSpec::Isotropic {
                    dim: 2,
                    rate: 1.0,
                    variance: 1.0,
                },
                epsilons: ladder(0, 6),
                fine_level: 5,
                replicas: 2000,
                targets: vec![Target::new("horizon_slope", -1.0, 0.15, Comparison::Within)],
                ..base
            },
            ExperimentId::ItoStokes => Self {
                operators: fluid(2),
                epsilons: ladder(3, 7),
                fine_level: 12,
                replicas: 100,
                mc_samples: 100_000,
                targets: vec![
                    Target::new("relative_error_of_mean", 0.0, 0.05, Comparison::AtMost),
                    Target::new("invariant_mc_max_z", 0.0, 3.0, Comparison::AtMost),
                ],
                ..base
            },
            ExperimentId::SlowfastLimit => Self {
                operators: fluid(2),
                epsilons: ladder(2, 5),
                fine_level: 11,
                coarse_level: 6,
                replicas: 20,
                targets: vec![
                    Target::new("monotone_violation", 0.0, 0.0, Comparison::AtMost),
                    Target::new("min_remainder_exponent", 1.0, 0.0, Comparison::AtLeast),
                ],
                ..base
            },
            ExperimentId::DriverBounds => Self {
                operators: fluid(1),
                epsilons: vec![0.1],
                fine_level: 10,
                coarse_level: 4,
                replicas: 8,
                targets: vec![Target::new("min_level1_exponent", 0.4, 0.0, Comparison::AtLeast)],
                ..base
            },
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epsilons.is_empty() {
            return bad("epsilon ladder is empty".into());
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return bad(format!("epsilons must lie in (0, 1]: {:?}", self.epsilons));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("epsilons must be strictly decreasing: {:?}", self.epsilons));
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if self.fine_level > 24 || self.coarse_level > self.fine_level {
            return bad(format!(
                "need coarse_level ≤ fine_level ≤ 24, got {} and {}",
                self.coarse_level, self.fine_level
            ));
        }
        check_alpha(self.alpha).map_err(|e| Error::Config(e.to_string()))?;
        if self.sobolev_indices.is_empty() || self.sobolev_indices.iter().any(|&m| m > 2) {
            return bad(format!("sobolev indices must lie in {{0, 1, 2}}: {:?}", self.sobolev_indices));
        }
        let fluid = matches!(self.operators, OperatorSpec::Fluid(_));
        if fluid != self.experiment.needs_fluid() {
            return bad(format!(
                "{} needs {} operators",
                self.experiment,
                if self.experiment.needs_fluid() { "fluid" } else { "matrix or isotropic" }
            ));
        }
        match &self.operators {
            OperatorSpec::Fluid(f) => {
                f.fluid.validate()?;
            }
            other => {
                let (c, q) = other.matrices()?;
                validate_generator(&c, &q).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        if self.experiment == ExperimentId::SlowfastLimit && self.epsilons.iter().any(|&e| e < MIN_EPSILON) {
            return bad(format!("slow-fast runs need ε ≥ {MIN_EPSILON}"));
        }
        if self.experiment == ExperimentId::ErgodicRate {
            let h = self.t_end / 2f64.powi(self.fine_level as i32);
            for &e in &self.epsilons {
                let steps = self.t_end / e / h;
                if (steps - steps.round()).abs() > 1e-9 * steps {
                    return bad(format!("horizon t_end/ε = {} is not a multiple of the step {h}", self.t_end / e));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Aggregate of one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub epsilon: f64,
    pub mean_error: f64,
    pub stderr: f64,
    pub n_replicas: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target: Target,
    pub measured: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub experiment: ExperimentId,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicas: usize,
    pub points: Vec<RatePoint>,
    /// Log-log fit of `mean_error` against ε; absent for a single point.
    pub fit: Option<LinearFit>,
    /// 95% confidence half-width of the slope.
    pub slope_half_width: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub targets: Vec<TargetOutcome>,
    pub pass: bool,
}

impl RateReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        if name == "slope" {
            return self.fit.map(|f| f.slope);
        }
        self.diagnostics.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: &str = "epsilon,mean_error,stderr,n_replicas";

pub fn emit_report(report: &RateReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for p in &report.points {
                s.push_str(&format!("{},{},{},{}\n", p.epsilon, p.mean_error, p.stderr, p.n_replicas));
            }
            Ok(s)
        }
    }
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`; returns both paths.
pub fn write_report(report: &RateReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&json, emit_report(report, ReportFormat::Json)?)?;
    std::fs::write(&csv, emit_report(report, ReportFormat::Csv)?)?;
    Ok((json, csv))
}

/// Two-sided 97.5% Student quantile.
fn t_quantile(dof: usize) -> f64 {
    const TABLE: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];
    match dof {
        0 => f64::INFINITY,
        d if d <= 10 => TABLE[d - 1],
        d if d <= 30 => 2.042 + (2.228 - 2.042) * (30 - d) as f64 / 20.0,
        _ => 1.96,
    }
}

/// Runs `work(replica)` for every replica in parallel, in index order.
fn replicate<R: Send>(replicas: usize, work: impl Fn(u64) -> Result<R> + Sync + Send) -> Vec<Result<R>> {
    (0..replicas as u64).into_par_iter().map(work).collect()
}

/// Splits successes from failures and enforces the failure budget.
fn successes<R>(results: Vec<Result<R>>) -> Result<(Vec<R>, usize)> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first.get_or_insert(e);
            }
        }
    }
    let failed = total - ok.len();
    if let Some(e) = first {
        if failed as f64 > MAX_FAILURE_SHARE * total as f64 || ok.is_empty() {
            return Err(Error::ReplicaFailures {
                failed,
                total,
                first: e.to_string(),
            });
        }
    }
    Ok((ok, failed))
}

fn point(epsilon: f64, values: &[f64], failed: usize) -> RatePoint {
    let (mean, se) = mean_stderr(values);
    RatePoint {
        epsilon,
        mean_error: mean,
        stderr: se,
        n_replicas: values.len(),
        n_failed: failed,
    }
}

fn eps_key(name: &str, eps: f64) -> String {
    format!("{name}[eps={eps}]")
}

struct Outcome {
    points: Vec<RatePoint>,
    diagnostics: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

impl Outcome {
    fn new(points: Vec<RatePoint>) -> Self {
        Self {
            points,
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }
}

/// Validates `config`, runs it and evaluates its targets.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let mut out = match config.experiment {
        ExperimentId::LiftConvergence => lift_convergence(config)?,
        ExperimentId::CorrectionM => correction_m(config)?,
        ExperimentId::ErgodicRate => ergodic_rate(config)?,
        ExperimentId::ItoStokes => ito_stokes(config)?,
        ExperimentId::SlowfastLimit => slowfast_limit(config)?,
        ExperimentId::DriverBounds => driver_bounds(config)?,
    };
    if let OperatorSpec::Fluid(f) = &config.operators {
        out.warnings.extend(f.fluid.validate()?);
    }
    let usable: Vec<&RatePoint> = out.points.iter().filter(|p| p.mean_error > 0.0).collect();
    let (fit, half) = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|p| p.epsilon).collect();
        let y: Vec<f64> = usable.iter().map(|p| p.mean_error).collect();
        let fit = if config.weighted_fit && usable.iter().all(|p| p.stderr > 0.0) {
            let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
            let w: Vec<f64> = usable.iter().map(|p| (p.mean_error / p.stderr).powi(2)).collect();
            ols(&lx, &ly, Some(&w))?
        } else {
            loglog(&x, &y)?
        };
        let dof = usable.len().saturating_sub(2);
        let half = if dof == 0 { 0.0 } else { t_quantile(dof) * fit.slope_stderr };
        (Some(fit), Some(half))
    } else {
        (None, None)
    };
    if config.experiment == ExperimentId::ErgodicRate {
        if let Some(f) = fit {
            out.diagnostics.insert("horizon_slope".into(), -f.slope);
        }
    }
    let mut report = RateReport {
        experiment: config.experiment,
        version: VERSION.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        replicas: config.replicas,
        points: out.points,
        fit,
        slope_half_width: half,
        diagnostics: out.diagnostics.into_iter().filter(|(_, v)| v.is_finite()).collect(),
        warnings: out.warnings,
        targets: Vec::new(),
        pass: true,
    };
    for t in &config.targets {
        let measured = report
            .metric(&t.metric)
            .ok_or_else(|| Error::Config(format!("{} reports no metric `{}`", config.experiment, t.metric)))?;
        let pass = t.holds(measured);
        report.pass &= pass;
        report.targets.push(TargetOutcome {
            target: t.clone(),
            measured,
            pass,
        });
    }
    Ok(report)
}

fn lift_convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (c, q) = cfg.operators.matrices()?;
    let alg = GeneratorAlgebra::new(&c, &q)?;
    let grid = UniformGrid::dyadic(cfg.t_end, cfg.fine_level)?;
    let stride = 1usize << (cfg.fine_level - cfg.coarse_level);
    let results = replicate(cfg.replicas, |r| {
        let noise = NoiseConfig::new(q.clone(), cfg.seed, r)?;
        Ok(cfg
            .epsilons
            .iter()
            .map(|&eps| -> Result<Vec<f64>> {
                let path = simulate_fast_path(&c, &noise, eps, &grid, None)?;
                let y = path.rescaled_integral(&c)?;
                match cfg.observable {
                    Observable::Level1 => {
                        let b = alg.neg_c_inv.matrix() * path.brownian_path();
                        Ok((0..=grid.steps())
                            .step_by(stride)
                            .map(|i| (y.column(i) - b.column(i)).norm_squared())
                            .collect())
                    }
                    Observable::Level2 => {
                        let yl = canonical_lift(&y, cfg.t_end, 0)?;
                        let bl = limit_lift_with(&alg, &path.increments, cfg.t_end, 0, LiftForm::Ito)?;
                        Ok(vec![(yl.level2.get(0, 1) - bl.path.level2.get(0, 1)).norm().powi(2)])
                    }
                }
            })
            .collect::<Vec<_>>())
    });
    let results: Vec<Vec<Result<Vec<f64>>>> = results.into_iter().collect::<Result<_>>()?;
    let mut points = Vec::new();
    let mut results: Vec<_> = results.into_iter().map(|v| v.into_iter()).collect();
    let mut diagnostics = BTreeMap::new();
    for &eps in &cfg.epsilons {
        let per: Vec<Result<Vec<f64>>> = results.iter_mut().map(|it| it.next().expect("one per ε")).collect();
        let (ok, failed) = successes(per)?;
        let len = ok[0].len();
        // sup over time of the replica mean
        let (mut best, mut best_vals) = (f64::NEG_INFINITY, Vec::new());
        for k in 0..len {
            let vals: Vec<f64> = ok.iter().map(|v| v[k]).collect();
            let (m, _) = mean_stderr(&vals);
            if m > best {
                best = m;
                best_vals = vals;
            }
        }
        let p = point(eps, &best_vals, failed);
        diagnostics.insert(eps_key("scaled_error", eps), p.mean_error / eps);
        points.push(p);
    }
    let mut out = Outcome::new(points);
    out.diagnostics = diagnostics;
    Ok(out)
}

fn correction_m(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (c, q) = cfg.operators.matrices()?;
    let alg = GeneratorAlgebra::new(&c, &q)?;
    let m = &alg.correction;
    let residual = (c.matrix() * alg.q_inf.matrix() + alg.q_inf.matrix() * c.matrix().transpose() + q.matrix()).amax();
    let mut out = Outcome::new(vec![point(cfg.epsilons[0], &[m.norm()], 0)]);
    let d = &mut out.diagnostics;
    d.insert("correction_norm".into(), m.norm());
    d.insert("correction_asymmetry_defect".into(), (m.as_matrix() + m.as_matrix().transpose()).amax());
    d.insert("lyapunov_residual".into(), residual);
    let sym_target = alg.b_covariance.matrix() * 0.5;
    d.insert(
        "drift_symmetric_defect".into(),
        (alg.drift.symmetric_part().as_matrix() - sym_target).amax(),
    );
    if c.dim() >= 2 {
        // operator form ⟨M e_0, e_1⟩ is the stored (1, 0) entry
        d.insert("correction_operator_01".into(), m.entry(1, 0));
    }
    Ok(out)
}

/// `Var[(1/t)∫₀ᵗ w ⊗ (−C)⁻¹w ds]` (summed over entries) for stationary
/// `C = −λI`, `Q = σ²I` in dimension `d`.
pub fn isotropic_ergodic_variance(dim: usize, rate: f64, variance: f64, t: f64) -> f64 {
    let s2 = variance / (2.0 * rate);
    let x = 2.0 * rate * t;
    // (2/t²)∫₀ᵗ(t − τ)·2s⁴e^{−2λτ}dτ / λ² for one diagonal entry
    let diag = 4.0 * s2 * s2 / (rate * rate * t * t) * (t / (2.0 * rate) - (-(-x).exp_m1()) / (4.0 * rate * rate));
    diag * (dim * (dim + 1)) as f64 / 2.0
}

fn ergodic_rate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (c, q) = cfg.operators.matrices()?;
    let alg = GeneratorAlgebra::new(&c, &q)?;
    let h = cfg.t_end / 2f64.powi(cfg.fine_level as i32);
    let horizons: Vec<usize> = cfg.epsilons.iter().map(|&e| (cfg.t_end / e / h).round() as usize).collect();
    let longest = *horizons.iter().max().expect("nonempty ladder");
    let grid = UniformGrid::new(longest as f64 * h, longest)?;
    let neg_c_inv = alg.neg_c_inv.matrix().clone();
    let mean = alg.drift.as_matrix().clone();
    let results = replicate(cfg.replicas, |r| -> Result<Vec<f64>> {
        let noise = NoiseConfig::new(q.clone(), cfg.seed, r)?;
        let mut rng = noise.rng();
        seek_step(&mut rng, longest);
        let w0 = sample_invariant(&c, &q, &mut rng)?;
        let path = simulate_fast_path(&c, &noise, 1.0, &grid, Some(&w0))?;
        let f = |i: usize| {
            let w = path.state(i);
            &w * (&neg_c_inv * &w).transpose()
        };
        let mut acc = DMatrix::zeros(c.dim(), c.dim());
        let mut prev = f(0);
        let mut errs = Vec::with_capacity(horizons.len());
        let mut k = 0;
        for i in 1..=longest {
            let cur = f(i);
            acc += (&prev + &cur) * (0.5 * h);
            prev = cur;
            while k < horizons.len() && horizons[k] == i {
                let avg = &acc / (i as f64 * h);
                errs.push((avg - &mean).norm_squared());
                k += 1;
            }
        }
        Ok(errs)
    });
    let (ok, failed) = successes(results)?;
    let points: Vec<RatePoint> = cfg
        .epsilons
        .iter()
        .enumerate()
        .map(|(k, &e)| point(e, &ok.iter().map(|v| v[k]).collect::<Vec<_>>(), failed))
        .collect();
    let mut out = Outcome::new(points);
    if let OperatorSpec::Isotropic { dim, rate, variance } = cfg.operators {
        let ts: Vec<f64> = horizons.iter().map(|&n| n as f64 * h).collect();
        let exact: Vec<f64> = ts.iter().map(|&t| isotropic_ergodic_variance(dim, rate, variance, t)).collect();
        if ts.len() >= 2 {
            out.diagnostics.insert("closed_form_horizon_slope".into(), loglog(&ts, &exact)?.slope);
        }
        let worst_z = out
            .points
            .iter()
            .zip(&exact)
            .map(|(p, e)| (p.mean_error - e).abs() / p.stderr.max(f64::MIN_POSITIVE))
            .fold(0.0f64, f64::max);
        out.diagnostics.insert("closed_form_max_z".into(), worst_z);
        for (p, e) in out.points.iter().zip(&exact) {
            out.diagnostics.insert(eps_key("closed_form_variance", p.epsilon), *e);
        }
    }
    Ok(out)
}

fn fluid_spec(cfg: &ExperimentConfig) -> Result<&FluidSpec> {
    match &cfg.operators {
        OperatorSpec::Fluid(f) => Ok(f),
        _ => Err(Error::Config(format!("{} needs fluid operators", cfg.experiment))),
    }
}

fn ito_stokes(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sys = fluid_spec(cfg)?.system()?;
    let oracle = sys.ito_stokes_oracle()?;
    let scale = oracle.norm();
    if scale == 0.0 {
        return Err(Error::Config("the Itô-Stokes drift vanishes for this noise".into()));
    }
    let grid = UniformGrid::dyadic(cfg.t_end, cfg.fine_level)?;
    let mut points = Vec::new();
    let mut diagnostics = BTreeMap::new();
    for &eps in &cfg.epsilons {
        let results = replicate(cfg.replicas, |r| sys.ito_stokes_estimate(&sys.simulate_fast(eps, &grid, cfg.seed, r)?));
        let (ok, failed) = successes(results)?;
        let errs: Vec<f64> = ok.iter().map(|e| (e - &oracle).norm_squared() / (scale * scale)).collect();
        let mean = ok.iter().fold(DVector::zeros(oracle.len()), |a, e| a + e) / ok.len() as f64;
        let rel = (mean - &oracle).norm() / scale;
        diagnostics.insert(eps_key("relative_error_of_mean", eps), rel);
        diagnostics.insert("relative_error_of_mean".into(), rel);
        points.push(point(eps, &errs, failed));
    }
    diagnostics.insert("oracle_norm".into(), scale);
    if cfg.mc_samples > 0 {
        diagnostics.insert("invariant_mc_max_z".into(), invariant_mc_check(&sys, &oracle, cfg)?);
    }
    let mut out = Outcome::new(points);
    out.diagnostics = diagnostics;
    Ok(out)
}

/// Largest per-coordinate z-score of the oracle against a Monte Carlo
/// average of `(−C)⁻¹b(w, w)` over `w ~ N(0, Q∞)`.
fn invariant_mc_check(sys: &SlowFastSystem<f64>, oracle: &DVector<f64>, cfg: &ExperimentConfig) -> Result<f64> {
    let root = psd_sqrt(&sys.algebra().q_inf)?;
    let neg_c_inv = sys.c().scale(-1.0).inverse()?;
    let n = oracle.len();
    let m = sys.drivers().dim();
    let chunks = 64usize;
    let per = cfg.mc_samples.div_ceil(chunks);
    let parts: Vec<(DVector<f64>, DVector<f64>, usize)> = (0..chunks as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = crate::ou::replica_rng(cfg.seed ^ 0x5eed_0f_1d, k);
            let (mut s1, mut s2) = (DVector::zeros(n), DVector::zeros(n));
            let count = per.min(cfg.mc_samples.saturating_sub(k as usize * per));
            for _ in 0..count {
                let w = sys.drivers().embed(&root.apply(&standard_normal(&mut rng, m)));
                let x = neg_c_inv.apply(&sys.basis().structure().apply(&w, &w));
                s2 += x.component_mul(&x);
                s1 += x;
            }
            (s1, s2, count)
        })
        .collect();
    let (mut s1, mut s2, mut total) = (DVector::zeros(n), DVector::zeros(n), 0usize);
    for (a, b, c) in parts {
        s1 += a;
        s2 += b;
        total += c;
    }
    let t = total as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mean = s1[i] / t;
        let var = (s2[i] / t - mean * mean).max(0.0);
        let se = (var / t).sqrt();
        let gap = (mean - oracle[i]).abs();
        if se > 0.0 {
            worst = worst.max(gap / se);
        } else if gap > 1e-12 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

struct LimitSample {
    error: f64,
    remainder_exponent: f64,
    remainder_r_squared: f64,
    remainder_pvar: f64,
    energy_defect: f64,
}

fn slowfast_limit(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = fluid_spec(cfg)?;
    let sys = spec.system()?;
    let r_bar = sys.ito_stokes_oracle()?;
    let u0 = spec.initial_velocity(sys.n_coords());
    let r0 = DVector::zeros(sys.n_coords());
    let grid = UniformGrid::dyadic(cfg.t_end, cfg.fine_level)?;
    let stride = 1usize << (cfg.fine_level - cfg.coarse_level);
    let h_coarse = cfg.t_end / 2f64.powi(cfg.coarse_level as i32);
    let p_third = 1.0 / (3.0 * cfg.alpha);
    let mut points = Vec::new();
    let mut d = BTreeMap::new();
    let (mut min_exp, mut min_r2, mut max_energy) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for &eps in &cfg.epsilons {
        let integrator = SlowFastIntegrator::new(&sys, eps, &grid)?;
        let results = replicate(cfg.replicas, |r| -> Result<LimitSample> {
            let traj = integrator.run(&u0, &r0, cfg.seed, r)?;
            let lift = traj.limit_lift(&sys, cfg.coarse_level)?;
            let lim = rough_euler_limit(&sys, &u0, &lift.path, &r_bar)?;
            let sq: f64 = (1..=lim.grid.steps())
                .map(|k| (traj.u.column(k * stride) - lim.u.column(k)).norm_squared())
                .sum();
            let driver = assemble_driver(&traj.lift(cfg.coarse_level)?, sys.drivers())?;
            let rem = compute_remainder(&traj, &driver)?;
            let sc = remainder_scaling(&rem)?;
            let e = traj.energy(&sys);
            Ok(LimitSample {
                error: (sq * h_coarse).sqrt(),
                remainder_exponent: sc.fit.slope,
                remainder_r_squared: sc.fit.r_squared,
                remainder_pvar: holder_seminorm(&rem, p_third, SeminormMode::PVariation),
                energy_defect: e.max_defect / e.initial_energy.max(f64::MIN_POSITIVE),
            })
        });
        let (ok, failed) = successes(results)?;
        let pick = |f: fn(&LimitSample) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
        let exps = pick(|s| s.remainder_exponent);
        let r2s = pick(|s| s.remainder_r_squared);
        let energies = pick(|s| s.energy_defect);
        d.insert(eps_key("remainder_exponent", eps), mean_stderr(&exps).0);
        d.insert(eps_key("remainder_pvar", eps), mean_stderr(&pick(|s| s.remainder_pvar)).0);
        d.insert(eps_key("energy_defect", eps), energies.iter().copied().fold(0.0, f64::max));
        min_exp = exps.iter().copied().fold(min_exp, f64::min);
        min_r2 = r2s.iter().copied().fold(min_r2, f64::min);
        max_energy = energies.iter().copied().fold(max_energy, f64::max);
        points.push(point(eps, &pick(|s| s.error), failed));
    }
    // largest increase of the error beyond two combined standard errors
    let violation = points
        .windows(2)
        .map(|w| w[1].mean_error - w[0].mean_error - 2.0 * w[0].stderr.hypot(w[1].stderr))
        .fold(0.0f64, f64::max);
    d.insert("monotone_violation".into(), violation);
    d.insert("min_remainder_exponent".into(), min_exp);
    d.insert("min_remainder_r_squared".into(), min_r2);
    d.insert("max_energy_defect".into(), max_energy);
    d.insert("itostokes_norm".into(), r_bar.norm());
    let mut out = Outcome::new(points);
    out.diagnostics = d;
    Ok(out)
}

fn driver_bounds(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = fluid_spec(cfg)?;
    let sys = spec.system()?;
    let grid = UniformGrid::dyadic(cfg.t_end, cfg.fine_level)?;
    let alpha = cfg.alpha;
    let mut points = Vec::new();
    let mut d = BTreeMap::new();
    let (mut min1, mut min2, mut max1, mut max2) = (f64::INFINITY, f64::INFINITY, 0.0f64, 0.0f64);
    for &eps in &cfg.epsilons {
        let results = replicate(cfg.replicas, |r| {
            let path = sys.simulate_fast(eps, &grid, cfg.seed, r)?;
            let y = path.rescaled_integral(&sys.algebra().c)?;
            let driver = assemble_driver(&canonical_lift(&y, cfg.t_end, cfg.coarse_level)?, sys.drivers())?;
            cfg.sobolev_indices
                .iter()
                .map(|&m| driver_norm_bounds(&driver, sys.nu(), m, alpha))
                .collect::<Result<Vec<_>>>()
        });
        let (ok, failed) = successes(results)?;
        for (k, &m) in cfg.sobolev_indices.iter().enumerate() {
            let get = |f: fn(&crate::slowfast::DriverNormBound) -> f64| ok.iter().map(|v| f(&v[k])).collect::<Vec<f64>>();
            let e1 = get(|b| b.level1_exponent.slope);
            let e2 = get(|b| b.level2_exponent.slope);
            let c1 = get(|b| b.level1_constant);
            let c2 = get(|b| b.level2_constant);
            let key = |name: &str| format!("{name}[m={m},eps={eps}]");
            d.insert(key("level1_exponent"), mean_stderr(&e1).0);
            d.insert(key("level2_exponent"), mean_stderr(&e2).0);
            d.insert(key("level1_constant"), mean_stderr(&c1).0);
            d.insert(key("level2_constant"), mean_stderr(&c2).0);
            min1 = e1.iter().copied().fold(min1, f64::min);
            min2 = e2.iter().copied().fold(min2, f64::min);
            max1 = c1.iter().copied().fold(max1, f64::max);
            max2 = c2.iter().copied().fold(max2, f64::max);
            if k == 0 {
                points.push(point(eps, &c1, failed));
            }
        }
    }
    d.insert("min_level1_exponent".into(), min1);
    d.insert("min_level2_exponent".into(), min2);
    d.insert("max_level1_constant".into(), max1);
    d.insert("max_level2_constant".into(), max2);
    let mut out = Outcome::new(points);
    out.diagnostics = d;
    Ok(out)
}
