//! Conjugate ridge posterior for `θ | σ`, the marginal posterior of the
//! precision, and the variance immersion `τ ↦ κτ`.
//!
//! Given `σ`, `θ ~ N(θ̂ᴿ, σ²(XᵀX + aₙI)⁻¹)` with `θ̂ᴿ = (XᵀX + aₙI)⁻¹XᵀY`.
//! Under the flat `1/τ` prior the precision `τ = σ⁻²` has posterior
//! `Gamma(n/2, rate nσ̂ₙ²/2)`, which is inconsistent when `p` is not small
//! relative to `n`. Rescaling by `κ = σ̂ₙ²/σ̃²` gives
//! `κτ ~ Gamma(n/2, rate nσ̃²/2)`, centred at `1/σ̃²`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpjError};
use crate::projection::SparseVector;
use crate::rng::Substreams;
use crate::stats::MergedStats;

/// Default ridge prior precision `aₙ`.
pub const DEFAULT_A_N: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct RidgePosterior {
    pub theta_hat_r: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    pub a_n: f64,
    pub n: usize,
}

impl RidgePosterior {
    /// Lower-triangular `L` with `LLᵀ = XᵀX + aₙI`.
    pub fn chol_precision(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn p(&self) -> usize {
        self.theta_hat_r.len()
    }

    /// Solves `(XᵀX + aₙI) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Posterior covariance `σ²(XᵀX + aₙI)⁻¹`.
    pub fn covariance(&self, sigma: f64) -> DMatrix<f64> {
        self.chol.inverse() * (sigma * sigma)
    }

    /// `σ̂ₙ²` using the already-factored system.
    pub fn resid_var(&self, stats: &MergedStats) -> f64 {
        let fit = stats.xty.dot(&self.theta_hat_r);
        ((stats.yty - fit) / stats.n as f64).max(0.0)
    }
}

fn precision_matrix(stats: &MergedStats, a_n: f64) -> DMatrix<f64> {
    let mut a = stats.xtx.clone();
    for j in 0..stats.p {
        a[(j, j)] += a_n;
    }
    a
}

pub fn fit_ridge_posterior(stats: &MergedStats, a_n: f64) -> Result<RidgePosterior> {
    if !(a_n > 0.0) || !a_n.is_finite() {
        return Err(SpjError::Config(format!("a_n must be positive, got {a_n}")));
    }
    let a = precision_matrix(stats, a_n);
    let chol = Cholesky::new(a).ok_or_else(|| SpjError::NotPositiveDefinite("XᵀX + aₙI".into()))?;
    let theta_hat_r = chol.solve(&stats.xty);
    Ok(RidgePosterior {
        theta_hat_r,
        chol,
        a_n,
        n: stats.n,
    })
}

/// Ridge mean through the SVD of raw `X`; a diagnostic cross-check of the
/// Gram/Cholesky route when the rows are at hand.
pub fn ridge_mean_svd(x: &DMatrix<f64>, y: &DVector<f64>, a_n: f64) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let uty = u.tr_mul(y);
    let scaled = DVector::from_fn(svd.singular_values.len(), |k, _| {
        let d = svd.singular_values[k];
        d / (d * d + a_n) * uty[k]
    });
    v_t.tr_mul(&scaled)
}

/// `σ̂ₙ² = n⁻¹ Yᵀ(I − H(aₙ))Y` evaluated as `n⁻¹(YᵀY − (XᵀY)ᵀ(XᵀX + aₙI)⁻¹XᵀY)`.
pub fn bayes_resid_var(stats: &MergedStats, a_n: f64) -> Result<f64> {
    Ok(fit_ridge_posterior(stats, a_n)?.resid_var(stats))
}

/// `σ̃² = RSS / (n − ŝ)` for a LASSO fit, with `ŝ` capped at `n/2`.
pub fn consistent_sigma_estimate(stats: &MergedStats, lasso_fit: &SparseVector) -> Result<f64> {
    let s_hat = lasso_fit.nnz();
    if s_hat >= stats.n {
        return Err(SpjError::Saturated {
            selected: s_hat,
            n: stats.n,
        });
    }
    let g_beta = lasso_fit.gram_product(&stats.xtx);
    let beta = lasso_fit.to_dense();
    let rss = stats.yty - 2.0 * beta.dot(&stats.xty) + beta.dot(&g_beta);
    let df = stats.n as f64 - (s_hat as f64).min(stats.n as f64 / 2.0);
    Ok((rss / df).max(f64::MIN_POSITIVE))
}

/// The variance immersion: `κ = σ̂ₙ² / σ̃²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaImmersion {
    pub sigma_hat_n_sq: f64,
    pub sigma_tilde_sq: f64,
    pub kappa: f64,
    pub n: usize,
}

impl SigmaImmersion {
    pub fn new(sigma_hat_n_sq: f64, sigma_tilde_sq: f64, n: usize) -> Result<Self> {
        if !(sigma_hat_n_sq > 0.0 && sigma_tilde_sq > 0.0) || n == 0 {
            return Err(SpjError::Config(format!(
                "variance estimates must be positive (σ̂ₙ² = {sigma_hat_n_sq:e}, σ̃² = {sigma_tilde_sq:e})"
            )));
        }
        Ok(Self {
            sigma_hat_n_sq,
            sigma_tilde_sq,
            kappa: sigma_hat_n_sq / sigma_tilde_sq,
            n,
        })
    }
}

/// Draws the raw precision `τ ~ Gamma(n/2, rate nσ̂ₙ²/2)`.
pub fn sample_tau<R: Rng + ?Sized>(imm: &SigmaImmersion, rng: &mut R) -> f64 {
    let half_n = imm.n as f64 / 2.0;
    // Gamma(n/2, rate n/2) scaled by 1/σ̂ₙ²
    let g = Gamma::new(half_n, 1.0 / half_n).expect("positive shape and scale").sample(rng);
    g / imm.sigma_hat_n_sq
}

/// Draws `σ* = (σ̃/σ̂ₙ) τ^{-1/2}`, i.e. `σ*⁻² = κτ ~ Gamma(n/2, rate nσ̃²/2)`.
pub fn sample_sigma_star<R: Rng + ?Sized>(imm: &SigmaImmersion, rng: &mut R) -> f64 {
    let tau = sample_tau(imm, rng);
    (imm.sigma_tilde_sq / imm.sigma_hat_n_sq).sqrt() / tau.sqrt()
}

/// `θ = θ̂ᴿ + σ* L⁻ᵀ z`, `z ~ N(0, I)`.
pub fn sample_theta<R: Rng + ?Sized>(post: &RidgePosterior, sigma_star: f64, rng: &mut R) -> DVector<f64> {
    let p = post.p();
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = post.chol.l_dirty().tr_solve_lower_triangular(&z).expect("L has positive diagonal");
    w *= sigma_star;
    w + &post.theta_hat_r
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub theta: DVector<f64>,
    pub sigma_star: f64,
    pub draw_index: usize,
    pub rng_substream: u64,
}

/// Draw `draw_index` from its own substream: `σ*` first, then `θ`.
pub fn draw_one(post: &RidgePosterior, imm: &SigmaImmersion, streams: &Substreams, draw_index: usize) -> PosteriorDraw {
    let mut rng = streams.draw_stream(draw_index);
    let sigma_star = sample_sigma_star(imm, &mut rng);
    let theta = sample_theta(post, sigma_star, &mut rng);
    PosteriorDraw {
        theta,
        sigma_star,
        draw_index,
        rng_substream: crate::rng::DRAW_BASE + draw_index as u64,
    }
}

/// `count` independent posterior draws, identical for any thread count.
pub fn sample_draws(post: &RidgePosterior, imm: &SigmaImmersion, seed: u64, count: usize) -> Vec<PosteriorDraw> {
    let streams = Substreams::new(seed);
    (0..count)
        .into_par_iter()
        .map(|d| draw_one(post, imm, &streams, d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::compute_shard_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_xy(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (x, y)
    }

    fn stats_of(x: &DMatrix<f64>, y: &DVector<f64>) -> MergedStats {
        compute_shard_stats(x, y, 0).unwrap().into()
    }

    #[test]
    fn diagonal_system() {
        let n = 8usize;
        let stats = MergedStats {
            xtx: DMatrix::identity(3, 3) * n as f64,
            xty: DVector::from_vec(vec![1.0, -2.0, 4.0]),
            yty: 30.0,
            n,
            p: 3,
            schema_hash: 0,
            shard_count: 1,
        };
        let post = fit_ridge_posterior(&stats, 2.0).unwrap();
        for j in 0..3 {
            assert!((post.theta_hat_r[j] - stats.xty[j] / 10.0).abs() < 1e-15);
        }
        let l = post.chol_precision();
        assert!((0..3).all(|j| l[(j, j)] > 0.0));
        assert_eq!(l[(0, 2)], 0.0);
        assert!(fit_ridge_posterior(&stats, 0.0).is_err());
    }

    #[test]
    fn small_a_n_approaches_ols() {
        let (x, y) = random_xy(20, 5, 1);
        let stats = stats_of(&x, &y);
        let post = fit_ridge_posterior(&stats, 1e-10).unwrap();
        // least squares through QR as oracle
        let qr = x.clone().qr();
        let ols = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
        assert!((&post.theta_hat_r - ols).amax() < 1e-8);
    }

    #[test]
    fn covariance_matches_explicit_inverse() {
        let (x, y) = random_xy(5, 3, 2);
        let stats = stats_of(&x, &y);
        let post = fit_ridge_posterior(&stats, 0.7).unwrap();
        let a = &stats.xtx + DMatrix::identity(3, 3) * 0.7;
        let inv = a.clone().try_inverse().unwrap();
        assert!((post.covariance(1.3) - inv * 1.69).amax() < 1e-10);
        let resid = &a * &post.theta_hat_r - &stats.xty;
        assert!(resid.norm() <= 1e-8 * stats.xty.norm());
    }

    #[test]
    fn svd_route_agrees() {
        let (x, y) = random_xy(25, 6, 3);
        let post = fit_ridge_posterior(&stats_of(&x, &y), 1.0).unwrap();
        assert!((ridge_mean_svd(&x, &y, 1.0) - &post.theta_hat_r).amax() < 1e-10);
        let (x, y) = random_xy(8, 15, 4);
        let post = fit_ridge_posterior(&stats_of(&x, &y), 1.0).unwrap();
        assert!((ridge_mean_svd(&x, &y, 1.0) - &post.theta_hat_r).amax() < 1e-10);
    }

    #[test]
    fn resid_var_matches_hat_matrix() {
        let (x, y) = random_xy(30, 5, 5);
        let a_n = 1.0;
        let a = x.tr_mul(&x) + DMatrix::identity(5, 5) * a_n;
        let h = &x * a.try_inverse().unwrap() * x.transpose();
        let oracle = (y.transpose() * (DMatrix::identity(30, 30) - h) * &y)[0] / 30.0;
        let got = bayes_resid_var(&stats_of(&x, &y), a_n).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn resid_var_limits() {
        // Y orthogonal to the column space
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.0]);
        let v = bayes_resid_var(&stats_of(&x, &y), 1e-12).unwrap();
        assert!((v - y.norm_squared() / 4.0).abs() < 1e-10);
        // exact fit
        let (x, _) = random_xy(20, 4, 6);
        let y = &x * DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert!(bayes_resid_var(&stats_of(&x, &y), 1e-12).unwrap() < 1e-10);
    }

    #[test]
    fn sigma_tilde_null_model_and_saturation() {
        let (x, y) = random_xy(20, 4, 7);
        let stats = stats_of(&x, &y);
        let s = consistent_sigma_estimate(&stats, &SparseVector::zeros(4)).unwrap();
        assert!((s - stats.yty / 20.0).abs() < 1e-12);
        let (x, y) = random_xy(3, 5, 8);
        let stats = stats_of(&x, &y);
        let full = SparseVector::from_dense(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            consistent_sigma_estimate(&stats, &full),
            Err(SpjError::Saturated { .. })
        ));
    }

    #[test]
    fn sigma_star_is_deterministic_and_positive() {
        let imm = SigmaImmersion::new(0.5, 1.2, 100).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10).map(|_| sample_sigma_star(&imm, &mut a)).collect();
        let ys: Vec<f64> = (0..10).map(|_| sample_sigma_star(&imm, &mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|&s| s > 0.0));
        assert!((imm.kappa - 0.5 / 1.2).abs() < 1e-15);
        assert!(SigmaImmersion::new(0.0, 1.0, 10).is_err());
    }

    #[test]
    fn zero_sigma_gives_mean() {
        let (x, y) = random_xy(10, 3, 9);
        let post = fit_ridge_posterior(&stats_of(&x, &y), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_theta(&post, 0.0, &mut rng), post.theta_hat_r);
    }

    #[test]
    fn draws_independent_of_thread_count() {
        let (x, y) = random_xy(40, 6, 10);
        let stats = stats_of(&x, &y);
        let post = fit_ridge_posterior(&stats, 1.0).unwrap();
        let imm = SigmaImmersion::new(0.8, 1.0, 40).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_draws(&post, &imm, 77, 50));
        let b = four.install(|| sample_draws(&post, &imm, 77, 50));
        assert_eq!(a, b);
        let single = draw_one(&post, &imm, &Substreams::new(77), 17);
        assert_eq!(single, a[17]);
    }
}
