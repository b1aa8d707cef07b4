//! Sparse projection of posterior draws.
//!
//! For a draw `θ` the projection solves
//!
//! ```text
//! θ* = argmin_u  n⁻¹ (u − θ)ᵀ XᵀX (u − θ) + λ ‖u‖₁
//! ```
//!
//! using only the Gram matrix `G = XᵀX`. The same coordinate-descent
//! engine fits ordinary LASSO regressions (replace `Gθ` by `XᵀY`) and the
//! nodewise regressions used for debiasing (one coordinate held at zero).
//!
//! With this normalization the null threshold for coordinate `j` is
//! `|(2/n)(Gθ)ⱼ| ≤ λ`; an orthonormal design (`G = nI`) reduces the map to
//! soft-thresholding at `λ/2`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::Dataset;
use crate::error::{Result, SpjError};
use crate::posterior::PosteriorDraw;
use crate::rng::{Substreams, FOLD_STREAM};
use crate::stats::MergedStats;

/// Absolute KKT tolerance every returned solution is certified against.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub lambda: f64,
    /// Convergence threshold on the largest coordinate update in a full sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl ProjectionConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SpjError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(SpjError::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(SpjError::Config("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse p-vector with strictly increasing indices and nonzero values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    indices: Vec<usize>,
    values: Vec<f64>,
    p: usize,
}

impl SparseVector {
    pub fn zeros(p: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            p,
        }
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j, *v))
            .unzip();
        Self {
            indices,
            values,
            p: dense.len(),
        }
    }

    /// Builds from (index, value) pairs; zero values are dropped.
    pub fn from_pairs(p: usize, mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        pairs.sort_by_key(|(j, _)| *j);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) || pairs.last().is_some_and(|(j, _)| *j >= p) {
            return Err(SpjError::Dimension("sparse indices must be unique and < p".into()));
        }
        let (indices, values) = pairs.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        Ok(Self { indices, values, p })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, j: usize) -> f64 {
        match self.indices.binary_search(&j) {
            Ok(k) => self.values[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.p);
        for (j, v) in self.iter() {
            out[j] = v;
        }
        out
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// `G·u` for a symmetric `G`, touching only the nonzero columns.
    pub fn gram_product(&self, gram: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(gram.nrows());
        for (j, v) in self.iter() {
            out.axpy(v, &gram.column(j), 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub max_violation_active: f64,
    pub max_violation_inactive: f64,
    pub satisfied: bool,
}

impl KktReport {
    fn from_residual(r: &[f64], u: &[f64], n: f64, lambda: f64, excluded: Option<usize>, tol: f64) -> Self {
        let mut active = 0.0f64;
        let mut inactive = 0.0f64;
        for (j, (&rj, &uj)) in r.iter().zip(u).enumerate() {
            if Some(j) == excluded {
                continue;
            }
            let g = 2.0 * rj / n;
            if uj != 0.0 {
                active = active.max((g - lambda * uj.signum()).abs());
            } else {
                inactive = inactive.max(g.abs() - lambda);
            }
        }
        Self {
            max_violation_active: active,
            max_violation_inactive: inactive.max(0.0),
            satisfied: active <= tol && inactive <= tol,
        }
    }
}

/// Soft-thresholding with the closed convention: `|z| ≤ t` maps to zero.
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent for `min_u n⁻¹(uᵀGu − 2uᵀb) + λ‖u‖₁` on a Gram matrix.
///
/// Cyclic sweeps over the active set until it settles, then a full sweep
/// to admit new coordinates. Convergence is declared on a quiet full sweep
/// and then certified against the KKT conditions on a freshly recomputed
/// residual; a failed certificate tightens the sweep tolerance and resumes.
pub(crate) struct GramLasso<'a> {
    gram: &'a DMatrix<f64>,
    n: f64,
    excluded: Option<usize>,
}

pub(crate) struct LassoSolution {
    pub u: Vec<f64>,
    pub sweeps: usize,
    pub kkt: KktReport,
}

impl<'a> GramLasso<'a> {
    pub fn new(gram: &'a DMatrix<f64>, n: usize) -> Self {
        Self {
            gram,
            n: n as f64,
            excluded: None,
        }
    }

    /// Holds coordinate `j` at zero (nodewise regressions).
    pub fn excluding(mut self, j: usize) -> Self {
        self.excluded = Some(j);
        self
    }

    fn residual(&self, b: &[f64], u: &[f64]) -> Vec<f64> {
        let mut r = DVector::from_column_slice(b);
        for (j, &v) in u.iter().enumerate() {
            if v != 0.0 {
                r.axpy(-v, &self.gram.column(j), 1.0);
            }
        }
        r.data.into()
    }

    pub fn solve(&self, b: &[f64], cfg: &ProjectionConfig, warm: Option<&[f64]>) -> Result<LassoSolution> {
        let p = b.len();
        let mut u: Vec<f64> = match warm {
            Some(w) => w.to_vec(),
            None => vec![0.0; p],
        };
        if let Some(j) = self.excluded {
            u[j] = 0.0;
        }
        let mut r = self.residual(b, &u);
        let threshold = cfg.lambda * self.n / 2.0;
        let diag: Vec<f64> = (0..p).map(|j| self.gram[(j, j)]).collect();
        let scale: Vec<f64> = diag.iter().map(|d| (d / self.n).sqrt()).collect();
        let mut tol = cfg.tol;
        let mut sweeps = 0usize;
        let mut active: Vec<usize> = Vec::new();

        let update = |j: usize, u: &mut [f64], r: &mut [f64]| -> f64 {
            let d = diag[j];
            if d <= 0.0 {
                return 0.0;
            }
            let old = u[j];
            let new = soft_threshold(r[j] + d * old, threshold) / d;
            let delta = new - old;
            if delta != 0.0 {
                u[j] = new;
                let col = self.gram.column(j);
                for (ri, gi) in r.iter_mut().zip(col.iter()) {
                    *ri -= delta * gi;
                }
            }
            delta.abs() * scale[j]
        };

        loop {
            // full sweep
            let mut max_delta = 0.0f64;
            for j in 0..p {
                if Some(j) == self.excluded {
                    continue;
                }
                max_delta = max_delta.max(update(j, &mut u, &mut r));
            }
            sweeps += 1;
            if max_delta < tol {
                r = self.residual(b, &u);
                let kkt = KktReport::from_residual(&r, &u, self.n, cfg.lambda, self.excluded, KKT_TOL);
                if kkt.satisfied {
                    return Ok(LassoSolution { u, sweeps, kkt });
                }
                if tol < 1e-15 || sweeps >= cfg.max_sweeps {
                    return Err(SpjError::NoConvergence { sweeps, report: kkt });
                }
                tol *= 0.01;
                continue;
            }
            if sweeps >= cfg.max_sweeps {
                break;
            }
            // active-set passes on the active Gram block only
            active.clear();
            active.extend((0..p).filter(|&j| u[j] != 0.0 && diag[j] > 0.0));
            let m = active.len();
            let block: Vec<f64> = active
                .iter()
                .flat_map(|&i| active.iter().map(move |&k| self.gram[(i, k)]))
                .collect();
            let mut ra: Vec<f64> = active.iter().map(|&j| r[j]).collect();
            let mut ua: Vec<f64> = active.iter().map(|&j| u[j]).collect();
            let mut passes = 0usize;
            while sweeps < cfg.max_sweeps && passes < MAX_ACTIVE_PASSES {
                passes += 1;
                if passes.is_multiple_of(NEWTON_EVERY) {
                    newton_step(&block, m, &mut ua, &mut ra, threshold);
                }
                let mut dmax = 0.0f64;
                for k in 0..m {
                    let j = active[k];
                    let d = diag[j];
                    let old = ua[k];
                    let new = soft_threshold(ra[k] + d * old, threshold) / d;
                    let delta = new - old;
                    if delta != 0.0 {
                        ua[k] = new;
                        let row = &block[k * m..(k + 1) * m];
                        for (ri, gi) in ra.iter_mut().zip(row) {
                            *ri -= delta * gi;
                        }
                    }
                    dmax = dmax.max(delta.abs() * scale[j]);
                }
                sweeps += 1;
                if dmax < tol {
                    break;
                }
            }
            for (k, &j) in active.iter().enumerate() {
                u[j] = ua[k];
            }
            r = self.residual(b, &u);
            if sweeps >= cfg.max_sweeps {
                break;
            }
        }
        let r = self.residual(b, &u);
        let kkt = KktReport::from_residual(&r, &u, self.n, cfg.lambda, self.excluded, KKT_TOL);
        if kkt.satisfied {
            return Ok(LassoSolution { u, sweeps, kkt });
        }
        Err(SpjError::NoConvergence { sweeps, report: kkt })
    }
}

/// Active-set passes between Newton steps on the active block.
const NEWTON_EVERY: usize = 25;
/// Active-set passes before returning to a full sweep.
const MAX_ACTIVE_PASSES: usize = 200;

/// One Newton step on the nonzero part of the active block, for when
/// coordinate descent crawls on an ill-conditioned block (typically
/// `p > n`). With signs `s` held fixed the block objective is quadratic
/// with gradient proportional to `r_A − t·s`; the step solves
/// `G_AA δ = r_A − t·s` by pseudo-inverse and is cut at the first sign
/// change, so the objective never increases.
fn newton_step(block: &[f64], m: usize, ua: &mut [f64], ra: &mut [f64], threshold: f64) {
    let idx: Vec<usize> = (0..m).filter(|&k| ua[k] != 0.0).collect();
    let q = idx.len();
    if q == 0 {
        return;
    }
    let g = DMatrix::from_fn(q, q, |a, b| block[idx[a] * m + idx[b]]);
    let rhs = DVector::from_fn(q, |a, _| ra[idx[a]] - threshold * ua[idx[a]].signum());
    let eig = g.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) {
        return;
    }
    let vt_r = eig.eigenvectors.tr_mul(&rhs);
    let scaled = DVector::from_fn(q, |i, _| {
        let l = eig.eigenvalues[i];
        if l > 1e-12 * top {
            vt_r[i] / l
        } else {
            0.0
        }
    });
    let delta = &eig.eigenvectors * scaled;
    let mut step = 1.0f64;
    let mut hit = None;
    for (a, &k) in idx.iter().enumerate() {
        let next = ua[k] + delta[a];
        if next * ua[k] < 0.0 || next == 0.0 {
            let t = -ua[k] / delta[a];
            if t < step {
                step = t;
                hit = Some(k);
            }
        }
    }
    if !(step > 0.0) || !delta.iter().all(|d| d.is_finite()) {
        return;
    }
    for (a, &k) in idx.iter().enumerate() {
        let d = step * delta[a];
        if d == 0.0 {
            continue;
        }
        ua[k] += d;
        let row = &block[k * m..(k + 1) * m];
        for (ri, gi) in ra.iter_mut().zip(row) {
            *ri -= d * gi;
        }
    }
    if let Some(k) = hit {
        // land exactly on the orthant boundary
        let d = -ua[k];
        ua[k] = 0.0;
        let row = &block[k * m..(k + 1) * m];
        for (ri, gi) in ra.iter_mut().zip(row) {
            *ri -= d * gi;
        }
    }
}

fn check_dims(theta: &DVector<f64>, stats: &MergedStats) -> Result<()> {
    if theta.len() != stats.p {
        return Err(SpjError::Dimension(format!(
            "theta has length {} but p = {}",
            theta.len(),
            stats.p
        )));
    }
    Ok(())
}

/// Sparse projection of one draw `θ`.
pub fn project(
    theta: &DVector<f64>,
    stats: &MergedStats,
    cfg: &ProjectionConfig,
    warm_start: Option<&SparseVector>,
) -> Result<SparseVector> {
    project_certified(theta, stats, cfg, warm_start).map(|o| o.solution)
}

/// A projection together with its solver certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub solution: SparseVector,
    pub sweeps: usize,
    /// KKT report at [`KKT_TOL`] on a freshly recomputed residual.
    pub kkt: KktReport,
}

/// [`project`], also returning the sweep count and KKT report.
pub fn project_certified(
    theta: &DVector<f64>,
    stats: &MergedStats,
    cfg: &ProjectionConfig,
    warm_start: Option<&SparseVector>,
) -> Result<ProjectionOutcome> {
    check_dims(theta, stats)?;
    cfg.validate()?;
    let b = &stats.xtx * theta;
    let warm = warm_start.map(|w| w.to_dense());
    let sol = GramLasso::new(&stats.xtx, stats.n).solve(b.as_slice(), cfg, warm.as_ref().map(|w| w.as_slice()))?;
    Ok(ProjectionOutcome {
        solution: SparseVector::from_dense(&sol.u),
        sweeps: sol.sweeps,
        kkt: sol.kkt,
    })
}

/// Projection objective `n⁻¹(u − θ)ᵀG(u − θ) + λ‖u‖₁`, from Gram data only.
pub fn objective(u: &DVector<f64>, theta: &DVector<f64>, stats: &MergedStats, lambda: f64) -> f64 {
    let d = u - theta;
    d.dot(&(&stats.xtx * &d)) / stats.n as f64 + lambda * u.lp_norm(1)
}

/// KKT certificate for `u` as the projection of `θ` at `λ`.
pub fn kkt_check(u: &SparseVector, theta: &DVector<f64>, stats: &MergedStats, lambda: f64, tol: f64) -> KktReport {
    let gt = &stats.xtx * theta;
    let r = gt - u.gram_product(&stats.xtx);
    let dense = u.to_dense();
    KktReport::from_residual(r.as_slice(), dense.as_slice(), stats.n as f64, lambda, None, tol)
}

/// Smallest `λ` whose projection of `θ` is the zero vector.
pub fn lambda_max(theta: &DVector<f64>, stats: &MergedStats) -> f64 {
    let g = &stats.xtx * theta;
    2.0 * g.amax() / stats.n as f64
}

/// LASSO regression of Y on X, `min n⁻¹‖Y − Xβ‖² + λ‖β‖₁`, from sufficient statistics.
pub fn lasso_fit(stats: &MergedStats, cfg: &ProjectionConfig) -> Result<SparseVector> {
    cfg.validate()?;
    let sol = GramLasso::new(&stats.xtx, stats.n).solve(stats.xty.as_slice(), cfg, None)?;
    Ok(SparseVector::from_dense(&sol.u))
}

/// Smallest `λ` with an all-zero LASSO fit: `max_j |(2/n)(XᵀY)ⱼ|`.
pub fn lasso_lambda_max(stats: &MergedStats) -> f64 {
    2.0 * stats.xty.amax() / stats.n as f64
}

/// `count` log-spaced values from `hi` down to `hi·ratio`.
pub fn log_grid(hi: f64, ratio: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let step = ratio.ln() / (count - 1) as f64;
    (0..count).map(|k| hi * (step * k as f64).exp()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    /// Minimizer of the mean held-out error.
    pub lambda: f64,
    /// Largest λ whose error is within one standard error of the minimum.
    pub lambda_1se: f64,
    pub grid: Vec<f64>,
    pub cv_error: Vec<f64>,
    /// Standard error of `cv_error` across folds.
    pub cv_se: Vec<f64>,
    pub folds: usize,
}

/// Rule for picking λ from a cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    /// λ minimizing the mean held-out error.
    Min,
    /// Largest λ within one standard error of the minimum.
    #[default]
    OneSe,
}

impl CvResult {
    pub fn chosen(&self, rule: CvRule) -> f64 {
        match rule {
            CvRule::Min => self.lambda,
            CvRule::OneSe => self.lambda_1se,
        }
    }
}

/// A training fit with residual sum of squares below this fraction of
/// `YᵀY` ends the λ path.
const SATURATION: f64 = 1e-3;

/// K-fold cross-validation of the LASSO penalty on raw rows.
///
/// Training statistics are obtained by subtracting each fold's Gram block
/// from the full-data statistics. Folds are a seeded random permutation.
/// The path stops early, for every fold, at the first λ where some fold's
/// training fit saturates or fails to converge.
pub fn cross_validate_lambda(data: &Dataset, folds: usize, grid: Option<&[f64]>, seed: u64) -> Result<CvResult> {
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(SpjError::Config(format!("folds must lie in [2, n = {n}], got {folds}")));
    }
    let full = MergedStats::from_dataset(data)?;
    let grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => {
            let mut g = g.to_vec();
            g.sort_by(|a, b| b.total_cmp(a));
            g
        }
        _ => log_grid(lasso_lambda_max(&full), 1e-3, 100),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Substreams::new(seed).stream(FOLD_STREAM));
    let fold_rows: Vec<Vec<usize>> = (0..folds)
        .map(|k| {
            let mut rows: Vec<usize> = order.iter().copied().skip(k).step_by(folds).collect();
            rows.sort_unstable();
            rows
        })
        .collect();

    let per_fold: Vec<Vec<f64>> = fold_rows
        .par_iter()
        .map(|rows| -> Result<Vec<f64>> {
            let (xf, yf) = data.select_rows(rows);
            let test = crate::stats::compute_shard_stats(&xf, &yf, full.schema_hash)?;
            let train = MergedStats {
                xtx: &full.xtx - &test.xtx,
                xty: &full.xty - &test.xty,
                yty: full.yty - test.yty,
                n: n - rows.len(),
                ..full.clone()
            };
            let engine = GramLasso::new(&train.xtx, train.n);
            let mut warm: Option<Vec<f64>> = None;
            let mut errs = Vec::with_capacity(grid.len());
            for &lambda in &grid {
                let sol = match engine.solve(train.xty.as_slice(), &ProjectionConfig::new(lambda), warm.as_deref()) {
                    Ok(sol) => sol,
                    // the rest of the path is dropped, as for a saturated fit
                    Err(SpjError::NoConvergence { .. }) if !errs.is_empty() => break,
                    Err(e) => return Err(e),
                };
                let beta = DVector::from_column_slice(&sol.u);
                let resid = &yf - &xf * &beta;
                errs.push(resid.norm_squared() / rows.len() as f64);
                let g_beta = &train.xtx * &beta;
                let train_rss = train.yty - 2.0 * beta.dot(&train.xty) + beta.dot(&g_beta);
                warm = Some(sol.u);
                if train_rss <= SATURATION * train.yty {
                    break;
                }
            }
            Ok(errs)
        })
        .collect::<Result<_>>()?;
    let usable = per_fold.iter().map(Vec::len).min().unwrap_or(0);
    let grid: Vec<f64> = grid[..usable].to_vec();

    let column = |k: usize| per_fold.iter().map(|e| e[k]).collect::<Vec<f64>>();
    let cv_error: Vec<f64> = (0..grid.len()).map(|k| crate::util::mean(&column(k))).collect();
    let cv_se: Vec<f64> = (0..grid.len())
        .map(|k| crate::util::std_dev(&column(k)) / (folds as f64).sqrt())
        .collect();
    let best = cv_error
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    // grid is decreasing, so the first index within the band is the largest λ
    let bound = cv_error[best] + cv_se[best];
    let one_se = cv_error.iter().position(|&e| e <= bound).unwrap_or(best);
    Ok(CvResult {
        lambda: grid[best],
        lambda_1se: grid[one_se],
        grid,
        cv_error,
        cv_se,
        folds,
    })
}

/// Sparse projections of a set of posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedDraws {
    pub lambda: f64,
    pub draws: Vec<SparseVector>,
}

impl ProjectedDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn p(&self) -> usize {
        self.draws.first().map_or(0, SparseVector::p)
    }
}

/// Draws per warm-start chain in [`project_all`].
pub const WARM_CHAIN: usize = 32;

/// Projects every draw. Draws are split into fixed chains of
/// [`WARM_CHAIN`] consecutive draws, each warm-starting draw `i` from draw
/// `i − 1`; chains run in parallel, so output does not depend on the
/// number of threads.
pub fn project_all(draws: &[PosteriorDraw], stats: &MergedStats, cfg: &ProjectionConfig) -> Result<ProjectedDraws> {
    if draws.is_empty() {
        return Err(SpjError::Config("no draws to project".into()));
    }
    cfg.validate()?;
    let parts: Vec<Vec<SparseVector>> = draws
        .par_chunks(WARM_CHAIN)
        .map(|chunk| {
            let mut out: Vec<SparseVector> = Vec::with_capacity(chunk.len());
            for d in chunk {
                let sol = project(&d.theta, stats, cfg, out.last()).map_err(|e| SpjError::Draw {
                    draw: d.draw_index,
                    source: Box::new(e),
                })?;
                out.push(sol);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ProjectedDraws {
        lambda: cfg.lambda,
        draws: parts.into_iter().flatten().collect(),
    })
}
