//! End-to-end runs: statistics → λ → posterior → projected draws →
//! debiasing → selection, intervals and ellipsoid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{
    nodewise_all, posterior_variance_sigma_jj, theoretical_interval, CredibleInterval, DebiasMap, IntervalKind,
    NodewiseFit,
};
use crate::design::{ar_covariance, generate, Dataset, SimConfig};
use crate::error::{Result, SpjError};
use crate::inference::{
    compute_metrics, credible_ellipsoid, mpm_select, sign_match_prob, summarize, top_model, EllipsoidRegion,
    MeanSd, Metrics, MetricsSummary, SelectionResult, DEFAULT_THRESHOLD,
};
use crate::posterior::{
    consistent_sigma_estimate, draw_one, fit_ridge_posterior, SigmaImmersion, DEFAULT_A_N,
};
use crate::projection::{
    cross_validate_lambda, lasso_fit, project, CvResult, CvRule, ProjectedDraws, ProjectionConfig, SparseVector, WARM_CHAIN,
};
use crate::rng::{Substreams, DRAW_BASE, SHARD_STREAM};
use crate::stats::{compute_shard_stats, merge, read_stats, write_stats, MergedStats};

pub const DEFAULT_DRAWS: usize = 2000;
/// Default factor between the cross-validated λ and the projection λ.
pub const DEFAULT_SELECT_MULTIPLIER: f64 = 1.5;

/// Penalty choice: cross-validated or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum LambdaChoice {
    #[default]
    #[serde(with = "cv_tag")]
    Cv,
    Fixed(f64),
}

mod cv_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("cv")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        match String::deserialize(d)?.as_str() {
            "cv" => Ok(()),
            other => Err(D::Error::custom(format!("expected \"cv\" or a number, got \"{other}\""))),
        }
    }
}

impl std::str::FromStr for LambdaChoice {
    type Err = SpjError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("cv") {
            return Ok(Self::Cv);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| SpjError::Config(format!("lambda must be \"cv\" or a number, got '{s}'")))
    }
}

/// Which support the credible ellipsoid is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EllipsoidModel {
    #[default]
    Mpm,
    TopModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub a_n: f64,
    pub lambda: LambdaChoice,
    /// Factor applied to the chosen λ before projecting draws.
    pub lambda_select_multiplier: f64,
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Thread count; `None` uses the global pool.
    pub workers: Option<usize>,
    pub cv_folds: usize,
    pub cv_rule: CvRule,
    pub debias: bool,
    /// Coordinates to debias; `None` means all.
    pub coords: Option<Vec<usize>>,
    /// Nodewise penalty; `None` reuses the chosen λ.
    pub lambda_x: Option<f64>,
    /// Penalty of the LASSO fit behind `σ̃²`; `None` uses the CV minimizer,
    /// or λ when λ is fixed.
    pub lambda_sigma: Option<f64>,
    pub threshold: f64,
    pub ellipsoid_model: EllipsoidModel,
    pub interval_kind: IntervalKind,
    /// Noise variance plugged into `Σⱼⱼ`; `None` uses `σ̃²`.
    pub sigma0_sq: Option<f64>,
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            a_n: DEFAULT_A_N,
            lambda: LambdaChoice::Cv,
            lambda_select_multiplier: DEFAULT_SELECT_MULTIPLIER,
            draws: DEFAULT_DRAWS,
            alpha: 0.05,
            seed: 1,
            workers: None,
            cv_folds: 10,
            cv_rule: CvRule::default(),
            debias: true,
            coords: None,
            lambda_x: None,
            lambda_sigma: None,
            threshold: DEFAULT_THRESHOLD,
            ellipsoid_model: EllipsoidModel::Mpm,
            interval_kind: IntervalKind::EqualTailed,
            sigma0_sq: None,
            record_timings: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SpjError::Config(msg));
        if self.draws < 1 {
            return bad("draws must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.a_n > 0.0 && self.a_n.is_finite()) {
            return bad(format!("a_n must be positive, got {}", self.a_n));
        }
        if !(self.lambda_select_multiplier > 0.0 && self.lambda_select_multiplier.is_finite()) {
            return bad("lambda_select_multiplier must be positive".into());
        }
        if let LambdaChoice::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be nonnegative, got {l}"));
            }
        }
        for (name, v) in [("lambda_x", self.lambda_x), ("lambda_sigma", self.lambda_sigma)] {
            if let Some(l) = v {
                if !(l >= 0.0 && l.is_finite()) {
                    return bad(format!("{name} must be nonnegative, got {l}"));
                }
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1), got {}", self.threshold));
        }
        if let Some(s) = self.sigma0_sq {
            if !(s > 0.0) {
                return bad("sigma0_sq must be positive".into());
            }
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `workers` threads when requested.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| SpjError::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub stats_secs: f64,
    pub lambda_secs: f64,
    pub posterior_secs: f64,
    pub draws_secs: f64,
    pub nodewise_secs: f64,
    pub summary_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedChain {
    pub master_seed: u64,
    pub replication: Option<u64>,
    pub run_seed: u64,
    /// Draw `d` uses substream `draw_substream_base + d` of `run_seed`.
    pub draw_substream_base: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaInfo {
    /// Penalty chosen by CV or fixed by the user.
    pub lambda: f64,
    /// Penalty used for the projection, `lambda · lambda_select_multiplier`.
    pub lambda_projection: f64,
    /// Penalty of the projection inside the debiasing map (`lambda`).
    pub lambda_debias: f64,
    /// Penalty of the LASSO fit behind `σ̃²` (the CV minimizer when CV runs).
    pub lambda_sigma: f64,
    pub lambda_x: f64,
    pub cv: Option<CvSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub rule: CvRule,
    pub grid_size: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub min_cv_error: f64,
    /// Position of the chosen λ on the grid, 0 = largest.
    pub grid_index: usize,
}

impl CvSummary {
    fn of(cv: &CvResult, rule: CvRule) -> Self {
        let chosen = cv.chosen(rule);
        let best = cv.grid.iter().position(|&l| l == cv.lambda).unwrap_or(0);
        Self {
            folds: cv.folds,
            rule,
            grid_size: cv.grid.len(),
            lambda_max: cv.grid.first().copied().unwrap_or(chosen),
            lambda_min: cv.lambda,
            lambda_1se: cv.lambda_1se,
            min_cv_error: cv.cv_error[best],
            grid_index: cv.grid.iter().position(|&l| l == chosen).unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceInfo {
    pub sigma_hat_n_sq: f64,
    pub sigma_tilde_sq: f64,
    pub kappa: f64,
    /// `σ₀²` plugged into `Σⱼⱼ`.
    pub sigma_sq_plugin: f64,
    pub sigma_star_sq_mean: f64,
    pub lasso_support_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub j: usize,
    pub ridge_mean: f64,
    pub projected_mean: f64,
    pub inclusion_prop: f64,
    pub point_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedInterval {
    pub interval: CredibleInterval,
    /// `Σⱼⱼ/n`
    pub sigma_jj_over_n: f64,
    pub draw_mean: f64,
    pub draw_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub software_version: String,
    pub config: RunConfig,
    pub seeds: SeedChain,
    pub n: usize,
    pub p: usize,
    pub shard_count: usize,
    pub schema_hash: u64,
    pub lambda: LambdaInfo,
    pub variance: VarianceInfo,
    pub selection: SelectionResult,
    pub coordinates: Vec<CoordinateSummary>,
    pub intervals: Vec<DebiasedInterval>,
    pub ellipsoid: Option<EllipsoidRegion>,
    pub metrics: Option<Metrics>,
    /// Fraction of draws matching the sign pattern of the true coefficients.
    pub true_sign_match_prob: Option<f64>,
    pub ellipsoid_covers_truth: Option<bool>,
    pub warnings: Vec<String>,
    pub timings: Option<Timings>,
}

/// Large per-draw outputs kept in memory but not serialized in the report.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub projected: ProjectedDraws,
    pub sigma_star: Vec<f64>,
    pub nodewise: Vec<NodewiseFit>,
    /// One row per draw, one column per entry of `debiased_coords`.
    pub debiased: Vec<DVector<f64>>,
    pub debiased_coords: Vec<usize>,
    pub theta_hat_r: DVector<f64>,
}

impl RunArtifacts {
    pub fn debiased_column(&self, k: usize) -> Vec<f64> {
        self.debiased.iter().map(|row| row[k]).collect()
    }
}

/// Known truth, for simulations.
#[derive(Debug, Clone)]
pub struct Truth {
    pub theta0: DVector<f64>,
    pub sigma: nalgebra::DMatrix<f64>,
}

/// Optional inputs that let a run skip recomputation.
#[derive(Debug, Clone, Default)]
pub struct RunInputs<'a> {
    pub cv: Option<CvResult>,
    pub nodewise: Option<Vec<NodewiseFit>>,
    pub truth: Option<&'a Truth>,
    pub replication: Option<u64>,
    pub master_seed: Option<u64>,
}

struct DrawOutput {
    projected: SparseVector,
    /// Projection at the debiasing λ when it differs from the selection λ.
    debias_base: Option<SparseVector>,
    sigma_star: f64,
    debiased: Option<DVector<f64>>,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Full pipeline on observed data; λ is cross-validated on raw rows when
/// requested.
pub fn run_fit(data: &Dataset, cfg: &RunConfig) -> Result<(RunReport, RunArtifacts)> {
    run_fit_with(data, cfg, RunInputs::default())
}

pub fn run_fit_with(data: &Dataset, cfg: &RunConfig, mut inputs: RunInputs) -> Result<(RunReport, RunArtifacts)> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let t = Instant::now();
        let stats = MergedStats::from_dataset(data)?;
        let stats_secs = secs(t);
        let t = Instant::now();
        if cfg.lambda == LambdaChoice::Cv && inputs.cv.is_none() {
            inputs.cv = Some(cross_validate_lambda(data, cfg.cv_folds, None, cfg.seed)?);
        }
        let lambda_secs = secs(t);
        let (mut report, artifacts) = run_stats_inner(&stats, cfg, inputs)?;
        if let Some(tm) = report.timings.as_mut() {
            tm.stats_secs = stats_secs;
            tm.lambda_secs = lambda_secs;
        }
        Ok((report, artifacts))
    })?
}

/// Full pipeline from merged statistics alone. Cross-validation needs raw
/// rows, so λ must be fixed or supplied through `inputs.cv`.
pub fn run_fit_stats(stats: &MergedStats, cfg: &RunConfig, inputs: RunInputs) -> Result<(RunReport, RunArtifacts)> {
    cfg.validate()?;
    with_workers(cfg.workers, || run_stats_inner(stats, cfg, inputs))?
}

fn run_stats_inner(stats: &MergedStats, cfg: &RunConfig, inputs: RunInputs) -> Result<(RunReport, RunArtifacts)> {
    let p = stats.p;
    let mut warnings = Vec::new();
    let mut timings = Timings::default();

    let t = Instant::now();
    let (lambda, lambda_sigma, cv_summary) = match (cfg.lambda, &inputs.cv) {
        (LambdaChoice::Fixed(l), _) => (l, l, None),
        (LambdaChoice::Cv, Some(cv)) => (
            cv.chosen(cfg.cv_rule),
            cv.lambda,
            Some(CvSummary::of(cv, cfg.cv_rule)),
        ),
        (LambdaChoice::Cv, None) => {
            return Err(SpjError::Config(
                "cross-validation needs raw rows; pass a fixed lambda with precomputed statistics".into(),
            ))
        }
    };
    let lambda_proj = lambda * cfg.lambda_select_multiplier;
    let lambda_x = cfg.lambda_x.unwrap_or(lambda);
    let lambda_sigma = cfg.lambda_sigma.unwrap_or(lambda_sigma);
    timings.lambda_secs = secs(t);

    let t = Instant::now();
    let post = fit_ridge_posterior(stats, cfg.a_n)?;
    let lasso = lasso_fit(stats, &ProjectionConfig::new(lambda_sigma))?;
    let sigma_tilde_sq = consistent_sigma_estimate(stats, &lasso)?;
    let imm = SigmaImmersion::new(post.resid_var(stats), sigma_tilde_sq, stats.n)?;
    let sigma_sq_plugin = cfg.sigma0_sq.unwrap_or(sigma_tilde_sq);
    timings.posterior_secs = secs(t);

    let t = Instant::now();
    let coords: Vec<usize> = match (&cfg.coords, cfg.debias) {
        (_, false) => Vec::new(),
        (Some(c), true) => {
            if let Some(&bad) = c.iter().find(|&&j| j >= p) {
                return Err(SpjError::Config(format!("coordinate {bad} out of range for p = {p}")));
            }
            c.clone()
        }
        (None, true) => (0..p).collect(),
    };
    let nodewise: Vec<NodewiseFit> = match inputs.nodewise {
        Some(cached) if !coords.is_empty() => coords
            .iter()
            .map(|&j| {
                cached
                    .iter()
                    .find(|f| f.j == j && f.p() == p)
                    .cloned()
                    .ok_or_else(|| SpjError::Config(format!("nodewise cache lacks coordinate {j}")))
            })
            .collect::<Result<_>>()?,
        _ => nodewise_all(stats, &coords, lambda_x)?,
    };
    if let Some(f) = nodewise
        .iter()
        .find(|f| (f.lambda_x - lambda_x).abs() > 1e-12 * lambda_x.abs().max(1.0))
    {
        warnings.push(format!(
            "nodewise fit for coordinate {} was computed at lambda_x = {} but the run uses {}",
            f.j, f.lambda_x, lambda_x
        ));
    }
    let map = if nodewise.is_empty() { None } else { Some(DebiasMap::new(&nodewise)?) };
    timings.nodewise_secs = secs(t);

    let t = Instant::now();
    let proj_cfg = ProjectionConfig::new(lambda_proj);
    proj_cfg.validate()?;
    // selection uses the enlarged penalty; the debiasing map keeps the estimation penalty
    let debias_cfg = (map.is_some() && lambda_proj != lambda).then(|| ProjectionConfig::new(lambda));
    let streams = Substreams::new(cfg.seed);
    let chains = cfg.draws.div_ceil(WARM_CHAIN);
    let outputs: Vec<Vec<DrawOutput>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut out: Vec<DrawOutput> = Vec::with_capacity(WARM_CHAIN);
            for d in c * WARM_CHAIN..((c + 1) * WARM_CHAIN).min(cfg.draws) {
                let draw = draw_one(&post, &imm, &streams, d);
                let wrap = |e| SpjError::Draw {
                    draw: d,
                    source: Box::new(e),
                };
                let prev = out.last();
                let projected =
                    project(&draw.theta, stats, &proj_cfg, prev.map(|o| &o.projected)).map_err(wrap)?;
                let debias_base = match &debias_cfg {
                    Some(c) => Some(
                        project(&draw.theta, stats, c, prev.and_then(|o| o.debias_base.as_ref())).map_err(wrap)?,
                    ),
                    None => None,
                };
                let debiased = map
                    .as_ref()
                    .map(|m| m.apply(&draw.theta, debias_base.as_ref().unwrap_or(&projected)));
                out.push(DrawOutput {
                    projected,
                    debias_base,
                    sigma_star: draw.sigma_star,
                    debiased,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut projected = Vec::with_capacity(cfg.draws);
    let mut sigma_star = Vec::with_capacity(cfg.draws);
    let mut debiased = Vec::new();
    for o in outputs.into_iter().flatten() {
        projected.push(o.projected);
        sigma_star.push(o.sigma_star);
        if let Some(d) = o.debiased {
            debiased.push(d);
        }
    }
    let projected = ProjectedDraws {
        lambda: lambda_proj,
        draws: projected,
    };
    timings.draws_secs = secs(t);

    let t = Instant::now();
    let selection = mpm_select(&projected, cfg.threshold)?;
    if selection.top_model_frequency() <= 0.5 {
        warnings.push(format!(
            "most frequent support has posterior frequency {:.3} (not above 1/2)",
            selection.top_model_frequency()
        ));
    }
    let r = projected.len() as f64;
    let mut projected_mean = vec![0.0; p];
    for d in &projected.draws {
        for (k, v) in d.iter() {
            projected_mean[k] += v / r;
        }
    }
    let coordinates = (0..p)
        .map(|j| CoordinateSummary {
            j,
            ridge_mean: post.theta_hat_r[j],
            projected_mean: projected_mean[j],
            inclusion_prop: selection.inclusion_prop[j],
            point_estimate: selection.point_estimate[j],
        })
        .collect();

    let sigma_tilde = sigma_tilde_sq.sqrt();
    let mut intervals = Vec::with_capacity(nodewise.len());
    for (k, fit) in nodewise.iter().enumerate() {
        let col: Vec<f64> = debiased.iter().map(|row| row[k]).collect();
        let interval = theoretical_interval(fit, &col, sigma_tilde, cfg.alpha, cfg.interval_kind)?;
        let draw_mean = crate::util::mean(&col);
        let draw_var = crate::util::std_dev(&col).powi(2);
        intervals.push(DebiasedInterval {
            interval,
            sigma_jj_over_n: posterior_variance_sigma_jj(fit, &post, sigma_sq_plugin) / stats.n as f64,
            draw_mean,
            draw_var,
        });
    }
    if cfg.draws < crate::debias::MIN_INTERVAL_DRAWS && !intervals.is_empty() {
        warnings.push(format!("intervals built from only {} draws", cfg.draws));
    }

    let s_hat = match cfg.ellipsoid_model {
        EllipsoidModel::Mpm => selection.selected.clone(),
        EllipsoidModel::TopModel => top_model(&selection),
    };
    let ellipsoid = if s_hat.is_empty() {
        warnings.push("empty selected set: no credible ellipsoid".into());
        None
    } else if s_hat.len() >= stats.n {
        warnings.push("selected set too large for a credible ellipsoid".into());
        None
    } else {
        Some(credible_ellipsoid(stats, &sigma_star, &s_hat, cfg.a_n, cfg.alpha, cfg.seed)?)
    };

    let (metrics, true_sign_match_prob, ellipsoid_covers_truth) = match inputs.truth {
        Some(truth) => {
            let est = DVector::from_column_slice(&selection.point_estimate);
            let cis: Vec<CredibleInterval> = intervals.iter().map(|d| d.interval.clone()).collect();
            (
                Some(compute_metrics(&est, &cis, &truth.theta0, &truth.sigma)?),
                Some(sign_match_prob(&projected, truth.theta0.as_slice())),
                Some(ellipsoid.as_ref().is_some_and(|e| e.contains(&truth.theta0))),
            )
        }
        None => (None, None, None),
    };
    timings.summary_secs = secs(t);

    let sigma_star_sq_mean = sigma_star.iter().map(|s| s * s).sum::<f64>() / r;
    let report = RunReport {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: SeedChain {
            master_seed: inputs.master_seed.unwrap_or(cfg.seed),
            replication: inputs.replication,
            run_seed: cfg.seed,
            draw_substream_base: DRAW_BASE,
        },
        n: stats.n,
        p,
        shard_count: stats.shard_count,
        schema_hash: stats.schema_hash,
        lambda: LambdaInfo {
            lambda,
            lambda_projection: lambda_proj,
            lambda_debias: lambda,
            lambda_sigma,
            lambda_x,
            cv: cv_summary,
        },
        variance: VarianceInfo {
            sigma_hat_n_sq: imm.sigma_hat_n_sq,
            sigma_tilde_sq,
            kappa: imm.kappa,
            sigma_sq_plugin,
            sigma_star_sq_mean,
            lasso_support_size: lasso.nnz(),
        },
        selection,
        coordinates,
        intervals,
        ellipsoid,
        metrics,
        true_sign_match_prob,
        ellipsoid_covers_truth,
        warnings,
        timings: cfg.record_timings.then_some(timings),
    };
    let artifacts = RunArtifacts {
        projected,
        sigma_star,
        nodewise,
        debiased,
        debiased_coords: coords,
        theta_hat_r: post.theta_hat_r.clone(),
    };
    Ok((report, artifacts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub software_version: String,
    pub sim: SimConfig,
    pub config: RunConfig,
    pub replications: usize,
    pub failures: usize,
    pub summary: MetricsSummary,
    pub ellipsoid_coverage: Option<f64>,
    pub true_sign_match_prob: Option<MeanSd>,
    pub lambda: Option<MeanSd>,
    pub outcomes: Vec<ReplicationOutcome>,
}

/// `replications` independent simulate-and-fit runs. Replication `r` uses
/// seed `child_seed(r)` of `cfg.seed` for both data and sampling. Failures
/// are recorded and the run continues.
pub fn run_simulate(sim: &SimConfig, cfg: &RunConfig, replications: usize) -> Result<SimulationReport> {
    cfg.validate()?;
    sim.validate()?;
    if replications < 1 {
        return Err(SpjError::Config("need at least one replication".into()));
    }
    let sigma = ar_covariance(sim.p, sim.rho)?;
    let master = Substreams::new(cfg.seed);
    let outcomes: Vec<ReplicationOutcome> = with_workers(cfg.workers, || {
        (0..replications)
            .into_par_iter()
            .map(|r| {
                let seed = master.child_seed(r as u64);
                let result = (|| {
                    let (data, theta0) = generate(&SimConfig { seed, ..sim.clone() })?;
                    let truth = Truth {
                        theta0,
                        sigma: sigma.clone(),
                    };
                    let rcfg = RunConfig {
                        seed,
                        workers: None,
                        ..cfg.clone()
                    };
                    let inputs = RunInputs {
                        truth: Some(&truth),
                        replication: Some(r as u64),
                        master_seed: Some(cfg.seed),
                        ..Default::default()
                    };
                    run_fit_with(&data, &rcfg, inputs).map(|(rep, _)| rep)
                })();
                match result {
                    Ok(report) => ReplicationOutcome {
                        index: r,
                        seed,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => ReplicationOutcome {
                        index: r,
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    })?;
    let ok: Vec<&RunReport> = outcomes.iter().filter_map(|o| o.report.as_ref()).collect();
    let metrics: Vec<Metrics> = ok.iter().filter_map(|r| r.metrics.clone()).collect();
    let covers: Vec<bool> = ok.iter().filter_map(|r| r.ellipsoid_covers_truth).collect();
    Ok(SimulationReport {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        sim: sim.clone(),
        config: cfg.clone(),
        replications,
        failures: outcomes.len() - ok.len(),
        summary: summarize(&metrics),
        ellipsoid_coverage: (!covers.is_empty())
            .then(|| covers.iter().filter(|&&c| c).count() as f64 / covers.len() as f64),
        true_sign_match_prob: MeanSd::of(&ok.iter().filter_map(|r| r.true_sign_match_prob).collect::<Vec<_>>()),
        lambda: MeanSd::of(&ok.iter().map(|r| r.lambda.lambda).collect::<Vec<_>>()),
        outcomes,
    })
}

/// Row partition of `0..n` into `shards` random groups of near-equal size.
pub fn random_partition(n: usize, shards: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Substreams::new(seed).stream(SHARD_STREAM));
    let base = n / shards;
    let extra = n % shards;
    let mut parts = Vec::with_capacity(shards);
    let mut start = 0;
    for k in 0..shards {
        let len = base + usize::from(k < extra);
        let mut rows = order[start..start + len].to_vec();
        rows.sort_unstable();
        parts.push(rows);
        start += len;
    }
    parts
}

/// Normwise relative difference `max|a − b| / max|b|`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceDiffs {
    pub xtx: f64,
    pub xty: f64,
    pub yty: f64,
    pub ridge_mean: f64,
    pub sigma_star: f64,
    pub projected_mean: f64,
    pub point_estimate: f64,
    pub interval_bounds: f64,
    pub selection_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedReport {
    pub shards: usize,
    pub shard_files: Vec<PathBuf>,
    pub shard_rows: Vec<usize>,
    /// Wall time for computing all shard statistics in parallel.
    pub shard_compute_secs: f64,
    /// Wall time for a single pass over all rows.
    pub monolithic_compute_secs: f64,
    pub merge_secs: f64,
    pub diffs: EquivalenceDiffs,
    pub report: RunReport,
}

pub fn equivalence_diffs(
    merged: &MergedStats,
    mono: &MergedStats,
    a: (&RunReport, &RunArtifacts),
    b: (&RunReport, &RunArtifacts),
) -> EquivalenceDiffs {
    let bounds = |r: &RunReport| -> Vec<f64> {
        r.intervals
            .iter()
            .flat_map(|d| [d.interval.lower, d.interval.upper])
            .collect()
    };
    let proj = |r: &RunReport| -> Vec<f64> { r.coordinates.iter().map(|c| c.projected_mean).collect() };
    EquivalenceDiffs {
        xtx: rel_diff(merged.xtx.as_slice(), mono.xtx.as_slice()),
        xty: rel_diff(merged.xty.as_slice(), mono.xty.as_slice()),
        yty: rel_diff(&[merged.yty], &[mono.yty]),
        ridge_mean: rel_diff(a.1.theta_hat_r.as_slice(), b.1.theta_hat_r.as_slice()),
        sigma_star: rel_diff(&a.1.sigma_star, &b.1.sigma_star),
        projected_mean: rel_diff(&proj(a.0), &proj(b.0)),
        point_estimate: rel_diff(&a.0.selection.point_estimate, &b.0.selection.point_estimate),
        interval_bounds: rel_diff(&bounds(a.0), &bounds(b.0)),
        selection_identical: a.0.selection.selected == b.0.selection.selected,
    }
}

/// Splits the rows into `shards` random groups, writes one `.spstats` file
/// per shard under `out_dir`, merges them back from disk and runs the
/// pipeline on the merged statistics. The same λ is used for the
/// monolithic comparison run.
pub fn run_distributed_demo(
    data: &Dataset,
    shards: usize,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<DistributedReport> {
    cfg.validate()?;
    if shards < 2 || shards > data.n() {
        return Err(SpjError::Config(format!("shards must lie in [2, n], got {shards}")));
    }
    std::fs::create_dir_all(out_dir)?;
    with_workers(cfg.workers, || {
        let hash = data.schema_hash();
        let parts = random_partition(data.n(), shards, cfg.seed);

        let t = Instant::now();
        let shard_stats = parts
            .par_iter()
            .map(|rows| {
                let (x, y) = data.select_rows(rows);
                compute_shard_stats(&x, &y, hash)
            })
            .collect::<Result<Vec<_>>>()?;
        let shard_compute_secs = secs(t);

        let t = Instant::now();
        let mono: MergedStats = compute_shard_stats(&data.x, &data.y, hash)?.into();
        let monolithic_compute_secs = secs(t);

        let mut shard_files = Vec::with_capacity(shards);
        for (k, s) in shard_stats.iter().enumerate() {
            let path = out_dir.join(format!("shard_{k:04}.spstats"));
            write_stats(s, &path)?;
            shard_files.push(path);
        }
        let t = Instant::now();
        let loaded = shard_files.iter().map(read_stats).collect::<Result<Vec<_>>>()?;
        let merged = merge(&loaded)?;
        let merge_secs = secs(t);

        let mut run_cfg = cfg.clone();
        let cv = match cfg.lambda {
            LambdaChoice::Cv => Some(cross_validate_lambda(data, cfg.cv_folds, None, cfg.seed)?),
            LambdaChoice::Fixed(_) => None,
        };
        if let Some(cv) = &cv {
            run_cfg.lambda = LambdaChoice::Fixed(cv.chosen(cfg.cv_rule));
            run_cfg.lambda_sigma = cfg.lambda_sigma.or(Some(cv.lambda));
        }
        let (report, art) = run_stats_inner(&merged, &run_cfg, RunInputs::default())?;
        let (mono_report, mono_art) = run_stats_inner(&mono, &run_cfg, RunInputs::default())?;
        let diffs = equivalence_diffs(&merged, &mono, (&report, &art), (&mono_report, &mono_art));
        Ok(DistributedReport {
            shards,
            shard_files,
            shard_rows: parts.iter().map(Vec::len).collect(),
            shard_compute_secs,
            monolithic_compute_secs,
            merge_secs,
            diffs,
            report,
        })
    })?
}
