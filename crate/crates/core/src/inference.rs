//! Selection summaries, the post-selection credible ellipsoid and
//! evaluation metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::debias::CredibleInterval;
use crate::error::{Result, SpjError};
use crate::projection::{ProjectedDraws, SparseVector};
use crate::rng::{Substreams, ELLIPSOID_STREAM};
use crate::stats::MergedStats;
use crate::util::{quantile_sorted, sorted_copy};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Number of support signatures kept in [`SelectionResult::model_freq`].
pub const TOP_MODELS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFrequency {
    pub support: Vec<usize>,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub inclusion_prop: Vec<f64>,
    pub selected: Vec<usize>,
    pub threshold: f64,
    /// Fraction of draws whose sign pattern equals that of `point_estimate`.
    pub sign_match_prob: f64,
    /// Most frequent supports, by decreasing frequency.
    pub model_freq: Vec<ModelFrequency>,
    /// Draw mean on `selected`, zero elsewhere.
    pub point_estimate: Vec<f64>,
}

impl SelectionResult {
    /// Frequency of the most common support among the draws.
    pub fn top_model_frequency(&self) -> f64 {
        self.model_freq.first().map_or(0.0, |m| m.frequency)
    }
}

fn sign_pattern(v: &SparseVector) -> Vec<(usize, bool)> {
    v.iter().filter(|(_, x)| *x != 0.0).map(|(k, x)| (k, x > 0.0)).collect()
}

fn dense_sign_pattern(v: &[f64]) -> Vec<(usize, bool)> {
    v.iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(k, x)| (k, *x > 0.0))
        .collect()
}

/// Fraction of draws with `sign(θ*) = sign(reference)` componentwise.
pub fn sign_match_prob(projected: &ProjectedDraws, reference: &[f64]) -> f64 {
    let target = dense_sign_pattern(reference);
    let hits = projected.draws.iter().filter(|d| sign_pattern(d) == target).count();
    hits as f64 / projected.len() as f64
}

/// Median probability model: coordinates included in strictly more than
/// `threshold` of the projected draws.
pub fn mpm_select(projected: &ProjectedDraws, threshold: f64) -> Result<SelectionResult> {
    if projected.is_empty() {
        return Err(SpjError::Config("no projected draws".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(SpjError::Config(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let p = projected.p();
    let r = projected.len() as f64;
    let mut counts = vec![0usize; p];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut models: BTreeMap<&[usize], usize> = BTreeMap::new();
    for d in &projected.draws {
        for (k, v) in d.iter() {
            if v != 0.0 {
                counts[k] += 1;
                values[k].push(v);
            }
        }
        *models.entry(d.indices()).or_default() += 1;
    }
    let inclusion_prop: Vec<f64> = counts.iter().map(|&c| c as f64 / r).collect();
    let selected: Vec<usize> = (0..p).filter(|&j| inclusion_prop[j] > threshold).collect();
    let mut point_estimate = vec![0.0; p];
    for &j in &selected {
        // canonical summation order keeps the estimate independent of draw order
        point_estimate[j] = sorted_copy(&values[j]).iter().sum::<f64>() / r;
    }
    let mut model_freq: Vec<ModelFrequency> = models
        .into_iter()
        .map(|(support, c)| ModelFrequency {
            support: support.to_vec(),
            frequency: c as f64 / r,
        })
        .collect();
    // stable sort keeps lexicographic order among ties
    model_freq.sort_by(|a, b| b.frequency.total_cmp(&a.frequency));
    model_freq.truncate(TOP_MODELS);
    let sign_match_prob = sign_match_prob(projected, &point_estimate);
    Ok(SelectionResult {
        inclusion_prop,
        selected,
        threshold,
        sign_match_prob,
        model_freq,
        point_estimate,
    })
}

/// The most frequent support among the draws.
pub fn top_model(selection: &SelectionResult) -> Vec<usize> {
    selection.model_freq.first().map(|m| m.support.clone()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidRegion {
    pub s_hat: Vec<usize>,
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius: f64,
    pub level: f64,
    pub p: usize,
}

impl EllipsoidRegion {
    /// `(θ_Ŝ − c)ᵀ A (θ_Ŝ − c)` for a vector on `Ŝ`.
    pub fn quad_form(&self, theta_s: &DVector<f64>) -> f64 {
        let d = theta_s - &self.center;
        let sym = (&self.shape + self.shape.transpose()) * 0.5;
        d.dot(&(sym * &d))
    }

    pub fn contains_restricted(&self, theta_s: &DVector<f64>) -> bool {
        self.quad_form(theta_s) <= self.radius
    }

    /// Membership of a full `p`-vector: it must vanish off `Ŝ` and lie in
    /// the ellipsoid on `Ŝ`.
    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        let mut on = vec![false; self.p];
        for &j in &self.s_hat {
            on[j] = true;
        }
        if theta.iter().zip(&on).any(|(v, &inside)| !inside && *v != 0.0) {
            return false;
        }
        let theta_s = DVector::from_iterator(self.s_hat.len(), self.s_hat.iter().map(|&j| theta[j]));
        self.contains_restricted(&theta_s)
    }
}

/// Credible ellipsoid for `θ_Ŝ` after selecting `Ŝ`.
///
/// The centre is the restricted ridge estimator `(X_ŜᵀX_Ŝ + aₙI)⁻¹X_ŜᵀY`.
/// For each `σ` draw, `θ_Ŝ ~ N(c, σ²(X_ŜᵀX_Ŝ + aₙI)⁻¹)` is sampled and the
/// radius is the `(1 − α)` sample quantile of the quadratic form.
pub fn credible_ellipsoid(
    stats: &MergedStats,
    sigma_draws: &[f64],
    s_hat: &[usize],
    a_n: f64,
    alpha: f64,
    seed: u64,
) -> Result<EllipsoidRegion> {
    if s_hat.is_empty() {
        return Err(SpjError::Config("selected set is empty".into()));
    }
    if s_hat.len() >= stats.n {
        return Err(SpjError::Saturated {
            selected: s_hat.len(),
            n: stats.n,
        });
    }
    if s_hat.iter().any(|&j| j >= stats.p) {
        return Err(SpjError::Dimension("selected index out of range".into()));
    }
    if sigma_draws.is_empty() {
        return Err(SpjError::Config("no σ draws".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SpjError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let s = s_hat.len();
    let shape = DMatrix::from_fn(s, s, |a, b| stats.xtx[(s_hat[a], s_hat[b])] + if a == b { a_n } else { 0.0 });
    let xty_s = DVector::from_iterator(s, s_hat.iter().map(|&j| stats.xty[j]));
    let chol = shape
        .clone()
        .cholesky()
        .ok_or_else(|| SpjError::NotPositiveDefinite("restricted Gram block".into()))?;
    let center = chol.solve(&xty_s);
    let l = chol.l();
    let mut rng = Substreams::new(seed).stream(ELLIPSOID_STREAM);
    let mut q: Vec<f64> = Vec::with_capacity(sigma_draws.len());
    for &sigma in sigma_draws {
        let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = l.tr_solve_lower_triangular(&z).expect("positive diagonal") * sigma;
        q.push(d.dot(&(&shape * &d)));
    }
    let radius = quantile_sorted(&sorted_copy(&q), 1.0 - alpha);
    Ok(EllipsoidRegion {
        s_hat: s_hat.to_vec(),
        center,
        shape,
        radius,
        level: 1.0 - alpha,
        p: stats.p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub mse: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub fdp: f64,
    /// Set when nothing was selected and `fdp` was defined as 0.
    pub fdp_degenerate: bool,
    pub mcc: f64,
    pub signal_coverage: Option<f64>,
    pub noise_coverage: Option<f64>,
    pub signal_length: Option<f64>,
    pub noise_length: Option<f64>,
    pub signal_covered: usize,
    pub signal_intervals: usize,
    pub noise_covered: usize,
    pub noise_intervals: usize,
}

/// Confusion counts of `selected` against the support of `truth`.
pub fn confusion(selected: &[bool], truth: &[bool]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&s, &t) in selected.iter().zip(truth) {
        match (s, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// `(TP·TN − FP·FN) / √((TP+FP)(TP+FN)(TN+FP)(TN+FN))`.
///
/// When a marginal is empty the value is 1 for a perfect classification
/// and 0 otherwise.
pub fn mcc(tp: usize, fp: usize, tn: usize, fn_: usize) -> f64 {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return if fp == 0.0 && fn_ == 0.0 { 1.0 } else { 0.0 };
    }
    (tp * tn - fp * fn_) / denom
}

/// Metrics of a point estimate (selection = its support) and optional
/// per-coordinate intervals against the truth.
pub fn compute_metrics(
    estimate: &DVector<f64>,
    intervals: &[CredibleInterval],
    truth: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<Metrics> {
    let p = truth.len();
    if estimate.len() != p || sigma.shape() != (p, p) {
        return Err(SpjError::Dimension("estimate, truth and Σ must agree in p".into()));
    }
    if intervals.iter().any(|ci| ci.j >= p) {
        return Err(SpjError::Dimension("interval index out of range".into()));
    }
    let err = estimate - truth;
    let mse = err.dot(&(sigma * &err));
    let sel: Vec<bool> = estimate.iter().map(|v| *v != 0.0).collect();
    let sig: Vec<bool> = truth.iter().map(|v| *v != 0.0).collect();
    let (tp, fp, tn, fn_) = confusion(&sel, &sig);
    let tpr = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let fdp_degenerate = tp + fp == 0;
    let fdp = if fdp_degenerate { 0.0 } else { fp as f64 / (tp + fp) as f64 };

    let mut m = Metrics {
        mse,
        tp,
        fp,
        tn,
        fn_,
        tpr,
        fdp,
        fdp_degenerate,
        mcc: mcc(tp, fp, tn, fn_),
        ..Default::default()
    };
    let (mut sig_len, mut noise_len) = (0.0, 0.0);
    for ci in intervals {
        let covered = ci.contains(truth[ci.j]);
        if sig[ci.j] {
            m.signal_intervals += 1;
            m.signal_covered += covered as usize;
            sig_len += ci.length();
        } else {
            m.noise_intervals += 1;
            m.noise_covered += covered as usize;
            noise_len += ci.length();
        }
    }
    if m.signal_intervals > 0 {
        m.signal_coverage = Some(m.signal_covered as f64 / m.signal_intervals as f64);
        m.signal_length = Some(sig_len / m.signal_intervals as f64);
    }
    if m.noise_intervals > 0 {
        m.noise_coverage = Some(m.noise_covered as f64 / m.noise_intervals as f64);
        m.noise_length = Some(noise_len / m.noise_intervals as f64);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: crate::util::mean(values),
            sd: crate::util::std_dev(values),
            count: values.len(),
        })
    }
}

/// Mean (sd) summary over replications, with pooled interval coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub replications: usize,
    pub mse: Option<MeanSd>,
    pub tpr: Option<MeanSd>,
    pub fdp: Option<MeanSd>,
    pub mcc: Option<MeanSd>,
    pub signal_coverage: Option<MeanSd>,
    pub noise_coverage: Option<MeanSd>,
    pub signal_length: Option<MeanSd>,
    pub noise_length: Option<MeanSd>,
    pub pooled_signal_coverage: Option<f64>,
    pub pooled_noise_coverage: Option<f64>,
}

pub fn summarize(metrics: &[Metrics]) -> MetricsSummary {
    let col = |f: fn(&Metrics) -> f64| MeanSd::of(&metrics.iter().map(f).collect::<Vec<_>>());
    let opt = |f: fn(&Metrics) -> Option<f64>| MeanSd::of(&metrics.iter().filter_map(f).collect::<Vec<_>>());
    let pooled = |c: usize, t: usize| (t > 0).then(|| c as f64 / t as f64);
    MetricsSummary {
        replications: metrics.len(),
        mse: col(|m| m.mse),
        tpr: col(|m| m.tpr),
        fdp: col(|m| m.fdp),
        mcc: col(|m| m.mcc),
        signal_coverage: opt(|m| m.signal_coverage),
        noise_coverage: opt(|m| m.noise_coverage),
        signal_length: opt(|m| m.signal_length),
        noise_length: opt(|m| m.noise_length),
        pooled_signal_coverage: pooled(
            metrics.iter().map(|m| m.signal_covered).sum(),
            metrics.iter().map(|m| m.signal_intervals).sum(),
        ),
        pooled_noise_coverage: pooled(
            metrics.iter().map(|m| m.noise_covered).sum(),
            metrics.iter().map(|m| m.noise_intervals).sum(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::IntervalKind;
    use crate::util::normal_quantile;

    fn draws(p: usize, supports: &[&[(usize, f64)]]) -> ProjectedDraws {
        ProjectedDraws {
            lambda: 0.1,
            draws: supports
                .iter()
                .map(|s| SparseVector::from_pairs(p, s.to_vec()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn unanimous_support() {
        let pd = draws(4, &[&[(1, 1.0), (3, -2.0)], &[(1, 3.0), (3, -4.0)]]);
        let sel = mpm_select(&pd, 0.5).unwrap();
        assert_eq!(sel.selected, vec![1, 3]);
        assert_eq!(sel.inclusion_prop, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(sel.point_estimate, vec![0.0, 2.0, 0.0, -3.0]);
        assert_eq!(sel.sign_match_prob, 1.0);
        assert_eq!(top_model(&sel), vec![1, 3]);
        assert_eq!(sel.top_model_frequency(), 1.0);
    }

    #[test]
    fn half_inclusion_is_excluded() {
        let pd = draws(3, &[&[(0, 1.0), (2, 1.0)], &[(0, 1.0)]]);
        let sel = mpm_select(&pd, 0.5).unwrap();
        assert_eq!(sel.selected, vec![0]);
        assert_eq!(sel.inclusion_prop[2], 0.5);
        assert_eq!(sel.sign_match_prob, 0.5);
        assert!(mpm_select(&draws(3, &[]), 0.5).is_err());
    }

    #[test]
    fn point_estimate_averages_over_all_draws() {
        // coordinate 0 is zero in one of three draws; its mean counts that zero
        let pd = draws(2, &[&[(0, 3.0)], &[(0, 3.0)], &[(1, 1.0)]]);
        let sel = mpm_select(&pd, 0.5).unwrap();
        assert_eq!(sel.selected, vec![0]);
        assert!((sel.point_estimate[0] - 2.0).abs() < 1e-15);
        assert_eq!(sel.model_freq[0].support, vec![0]);
        assert!((sel.model_freq[0].frequency - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mcc_printed_example() {
        assert!((mcc(8, 2, 88, 2) - 700.0 / 900.0).abs() < 1e-12);
        assert_eq!(mcc(10, 0, 90, 0), 1.0);
        assert_eq!(mcc(0, 0, 10, 0), 1.0);
        assert_eq!(mcc(0, 0, 8, 2), 0.0);
    }

    #[test]
    fn perfect_and_degenerate_metrics() {
        let truth = DVector::from_vec(vec![2.0, 0.0, 0.0, -1.0]);
        let sigma = DMatrix::identity(4, 4);
        let m = compute_metrics(&truth, &[], &truth, &sigma).unwrap();
        assert_eq!((m.tpr, m.fdp, m.mcc, m.mse), (1.0, 0.0, 1.0, 0.0));
        assert!(m.signal_coverage.is_none());
        let m = compute_metrics(&DVector::zeros(4), &[], &truth, &sigma).unwrap();
        assert!(m.fdp_degenerate);
        assert_eq!((m.tpr, m.fdp), (0.0, 0.0));
        assert!((m.mse - 5.0).abs() < 1e-15);
    }

    #[test]
    fn coverage_split_by_signal() {
        let truth = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let ci = |j, lower, upper| CredibleInterval {
            j,
            lower,
            upper,
            level: 0.95,
            kind: IntervalKind::EqualTailed,
            few_draws: false,
            reference_half_width: None,
        };
        let cis = [ci(0, 1.0, 3.0), ci(1, -1.0, 1.0), ci(2, 0.5, 1.0)];
        let m = compute_metrics(&truth, &cis, &truth, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(m.signal_coverage, Some(1.0));
        assert_eq!(m.noise_coverage, Some(0.5));
        assert_eq!(m.signal_length, Some(2.0));
        assert_eq!(m.noise_length, Some(1.25));
        let s = summarize(&[m.clone(), m]);
        assert_eq!(s.pooled_noise_coverage, Some(0.5));
        assert_eq!(s.tpr.unwrap().sd, 0.0);
    }

    fn one_dim_stats(n: usize, g: f64, xty: f64) -> MergedStats {
        MergedStats {
            xtx: DMatrix::from_element(1, 1, g),
            xty: DVector::from_element(1, xty),
            yty: 1.0,
            n,
            p: 1,
            schema_hash: 0,
            shard_count: 1,
        }
    }

    #[test]
    fn scalar_ellipsoid_is_an_interval() {
        let stats = one_dim_stats(100, 100.0, 150.0);
        let sigmas = vec![1.0; 20_000];
        let e = credible_ellipsoid(&stats, &sigmas, &[0], 1.0, 0.05, 3).unwrap();
        let c = 150.0 / 101.0;
        assert!((e.center[0] - c).abs() < 1e-12);
        // Q = 101 (θ − c)² ≤ r ⇔ |θ − c| ≤ √(r/101); with σ = 1, r ≈ z²_{0.975}
        let z = normal_quantile(0.975);
        assert!((e.radius - z * z).abs() < 0.15, "radius {}", e.radius);
        let half = (e.radius / 101.0).sqrt();
        assert!(e.contains(&DVector::from_element(1, c + 0.999 * half)));
        assert!(!e.contains(&DVector::from_element(1, c + 1.001 * half)));
        assert!(e.contains(&DVector::from_element(1, c)));
    }

    #[test]
    fn ellipsoid_rejects_bad_input() {
        let stats = one_dim_stats(1, 1.0, 1.0);
        assert!(credible_ellipsoid(&stats, &[1.0], &[], 1.0, 0.05, 0).is_err());
        assert!(matches!(
            credible_ellipsoid(&stats, &[1.0], &[0], 1.0, 0.05, 0),
            Err(SpjError::Saturated { .. })
        ));
    }

    #[test]
    fn ellipsoid_requires_zero_off_support() {
        let stats = MergedStats {
            xtx: DMatrix::identity(2, 2) * 50.0,
            xty: DVector::from_vec(vec![50.0, 0.0]),
            yty: 60.0,
            n: 50,
            p: 2,
            schema_hash: 0,
            shard_count: 1,
        };
        let e = credible_ellipsoid(&stats, &[1.0; 100], &[0], 1.0, 0.05, 1).unwrap();
        assert!(e.contains(&DVector::from_vec(vec![e.center[0], 0.0])));
        assert!(!e.contains(&DVector::from_vec(vec![e.center[0], 1e-3])));
    }
}
