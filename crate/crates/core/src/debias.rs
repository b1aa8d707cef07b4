//! Nodewise LASSO residuals and the debiased projection map.
//!
//! For each coordinate `j`, `γ̂₍ⱼ₎` is the LASSO of `X⁽ʲ⁾` on the remaining
//! columns and `R⁽ʲ⁾ = X⁽ʲ⁾ − X⁽⁻ʲ⁾γ̂₍ⱼ₎`. A projected draw is corrected by
//!
//! ```text
//! θ**ⱼ = θ*ⱼ + R⁽ʲ⁾ᵀX(θ − θ*) / R⁽ʲ⁾ᵀX⁽ʲ⁾
//! ```
//!
//! Every inner product with `R⁽ʲ⁾` reduces to Gram entries because
//! `XᵀR⁽ʲ⁾ = G·,ⱼ − G γ̂₍ⱼ₎`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpjError};
use crate::posterior::RidgePosterior;
use crate::projection::{GramLasso, ProjectionConfig, SparseVector};
use crate::stats::MergedStats;
use crate::util::{normal_quantile, quantile_sorted, sorted_copy};

/// Intervals built from fewer draws than this carry a warning flag.
pub const MIN_INTERVAL_DRAWS: usize = 100;

/// Nodewise regression of column `j` on the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodewiseFit {
    pub j: usize,
    /// Length-`p` vector with entry `j` fixed at zero.
    pub gamma_hat: SparseVector,
    pub lambda_x: f64,
    /// `‖R⁽ʲ⁾‖²`
    pub r_norm_sq: f64,
    /// `X⁽ʲ⁾ᵀR⁽ʲ⁾`
    pub xjr: f64,
    /// `X⁽ᵏ⁾ᵀR⁽ʲ⁾` for `k ≠ j`, in increasing `k`.
    pub xkr: Vec<f64>,
}

impl NodewiseFit {
    pub fn p(&self) -> usize {
        self.xkr.len() + 1
    }

    /// Full `XᵀR⁽ʲ⁾` with `xjr` reinserted at position `j`.
    pub fn xtr(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.p());
        let mut it = self.xkr.iter();
        for k in 0..self.p() {
            out[k] = if k == self.j { self.xjr } else { *it.next().unwrap() };
        }
        out
    }

    /// `P_{jk} = X⁽ᵏ⁾ᵀR⁽ʲ⁾ / X⁽ʲ⁾ᵀR⁽ʲ⁾`, with `P_{jj} = 1`.
    pub fn weights(&self) -> Result<DVector<f64>> {
        let n_scale = self.r_norm_sq.max(1.0);
        if self.xjr.abs() < 1e-12 * n_scale {
            return Err(SpjError::DegenerateResidual {
                j: self.j,
                value: self.xjr,
            });
        }
        Ok(self.xtr() / self.xjr)
    }
}

pub fn nodewise_lasso(stats: &MergedStats, j: usize, lambda_x: f64) -> Result<NodewiseFit> {
    let p = stats.p;
    if j >= p {
        return Err(SpjError::Dimension(format!("coordinate {j} out of range for p = {p}")));
    }
    let cfg = ProjectionConfig::new(lambda_x);
    cfg.validate()?;
    let g = &stats.xtx;
    let target = g.column(j).clone_owned();
    let sol = GramLasso::new(g, stats.n).excluding(j).solve(target.as_slice(), &cfg, None)?;
    let gamma_hat = SparseVector::from_dense(&sol.u);
    let g_gamma = gamma_hat.gram_product(g);
    let xtr = &target - &g_gamma;
    let gamma = gamma_hat.to_dense();
    let r_norm_sq = g[(j, j)] - 2.0 * gamma.dot(&target) + gamma.dot(&g_gamma);
    let xkr = (0..p).filter(|&k| k != j).map(|k| xtr[k]).collect();
    Ok(NodewiseFit {
        j,
        gamma_hat,
        lambda_x,
        r_norm_sq,
        xjr: xtr[j],
        xkr,
    })
}

/// Nodewise fits for `coords`, computed in parallel.
pub fn nodewise_all(stats: &MergedStats, coords: &[usize], lambda_x: f64) -> Result<Vec<NodewiseFit>> {
    coords
        .par_iter()
        .map(|&j| nodewise_lasso(stats, j, lambda_x))
        .collect()
}

/// Precomputed rows `P_{j·}` for a set of coordinates.
#[derive(Debug, Clone)]
pub struct DebiasMap {
    pub coords: Vec<usize>,
    weights: DMatrix<f64>,
}

impl DebiasMap {
    pub fn new(fits: &[NodewiseFit]) -> Result<Self> {
        let p = fits.first().map_or(0, NodewiseFit::p);
        let mut weights = DMatrix::zeros(fits.len(), p);
        for (row, fit) in fits.iter().enumerate() {
            if fit.p() != p {
                return Err(SpjError::Dimension("nodewise fits disagree on p".into()));
            }
            weights.set_row(row, &fit.weights()?.transpose());
        }
        Ok(Self {
            coords: fits.iter().map(|f| f.j).collect(),
            weights,
        })
    }

    /// `θ**` restricted to `self.coords`.
    pub fn apply(&self, theta: &DVector<f64>, theta_star: &SparseVector) -> DVector<f64> {
        let mut diff = theta.clone();
        for (k, v) in theta_star.iter() {
            diff[k] -= v;
        }
        let mut out = &self.weights * diff;
        for (row, &j) in self.coords.iter().enumerate() {
            out[row] += theta_star.get(j);
        }
        out
    }

    pub fn weight_row(&self, row: usize) -> DVector<f64> {
        self.weights.row(row).transpose()
    }
}

/// Debiased draw over all `p` coordinates; `fits` must cover every `j`.
pub fn debias_draw(theta: &DVector<f64>, theta_star: &SparseVector, fits: &[NodewiseFit]) -> Result<DVector<f64>> {
    let p = theta.len();
    let mut sorted: Vec<&NodewiseFit> = fits.iter().collect();
    sorted.sort_by_key(|f| f.j);
    if sorted.len() != p || sorted.iter().enumerate().any(|(k, f)| f.j != k) {
        return Err(SpjError::Dimension("nodewise fits must cover every coordinate exactly once".into()));
    }
    let owned: Vec<NodewiseFit> = sorted.into_iter().cloned().collect();
    Ok(DebiasMap::new(&owned)?.apply(theta, theta_star))
}

/// Debiased draws for a coordinate subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebiasedDraws {
    pub coords: Vec<usize>,
    /// One row per posterior draw, one column per coordinate in `coords`.
    pub theta_dstar: DMatrix<f64>,
    /// `Σⱼⱼ/n` for each coordinate, with the plug-in variance recorded in `sigma_sq_plugin`.
    pub sigma_jj: Vec<f64>,
    pub sigma_sq_plugin: f64,
}

impl DebiasedDraws {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.theta_dstar.column(k).iter().copied().collect()
    }
}

/// `Σⱼⱼ = nσ₀² R⁽ʲ⁾ᵀH(aₙ)R⁽ʲ⁾ / |X⁽ʲ⁾ᵀR⁽ʲ⁾|²`, with
/// `R⁽ʲ⁾ᵀH(aₙ)R⁽ʲ⁾ = (XᵀR⁽ʲ⁾)ᵀ(XᵀX + aₙI)⁻¹(XᵀR⁽ʲ⁾)`.
pub fn posterior_variance_sigma_jj(fit: &NodewiseFit, post: &RidgePosterior, sigma0_sq: f64) -> f64 {
    let xtr = fit.xtr();
    let quad = xtr.dot(&post.solve(&xtr));
    post.n as f64 * sigma0_sq * quad / (fit.xjr * fit.xjr)
}

/// `R⁽ʲ⁾ᵀH(aₙ)R⁽ʲ⁾ / ‖R⁽ʲ⁾‖²`, which lies in `(0, 1]`.
pub fn smoother_ratio(fit: &NodewiseFit, post: &RidgePosterior) -> f64 {
    let xtr = fit.xtr();
    xtr.dot(&post.solve(&xtr)) / fit.r_norm_sq
}

/// Centre of the limiting normal for `θ**ⱼ`: `θ⁰ⱼ + mⱼ/√n`, where
/// `mⱼ/√n = R⁽ʲ⁾ᵀXθ̂ᴿ/R⁽ʲ⁾ᵀX⁽ʲ⁾ − Σₖ Pⱼₖθ⁰ₖ`.
pub fn limiting_center(fit: &NodewiseFit, post: &RidgePosterior, theta0: &DVector<f64>) -> Result<f64> {
    let w = fit.weights()?;
    Ok(theta0[fit.j] + w.dot(&(&post.theta_hat_r - theta0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    #[default]
    EqualTailed,
    SymmetricAboutMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub j: usize,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub kind: IntervalKind,
    /// Set when fewer than [`MIN_INTERVAL_DRAWS`] draws were available.
    pub few_draws: bool,
    /// Frequentist half-width `Φ⁻¹(1 − α/2) σ̂ ‖R⁽ʲ⁾‖ / |X⁽ʲ⁾ᵀR⁽ʲ⁾|`, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_half_width: Option<f64>,
}

impl CredibleInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Credible interval for coordinate `j` from its posterior draws.
///
/// Equal-tailed uses the `α/2` and `1 − α/2` sample quantiles. The
/// symmetric kind is `median ± q`, with `q` the `(1 − α)` quantile of
/// `|draw − median|`.
pub fn credible_interval(j: usize, draws: &[f64], alpha: f64, kind: IntervalKind) -> Result<CredibleInterval> {
    if draws.is_empty() {
        return Err(SpjError::Config("no draws for interval".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SpjError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let sorted = sorted_copy(draws);
    let (lower, upper) = match kind {
        IntervalKind::EqualTailed => (
            quantile_sorted(&sorted, alpha / 2.0),
            quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        ),
        IntervalKind::SymmetricAboutMedian => {
            let median = quantile_sorted(&sorted, 0.5);
            let dev: Vec<f64> = sorted.iter().map(|v| (v - median).abs()).collect();
            let q = quantile_sorted(&sorted_copy(&dev), 1.0 - alpha);
            (median - q, median + q)
        }
    };
    Ok(CredibleInterval {
        j,
        lower,
        upper,
        level: 1.0 - alpha,
        kind,
        few_draws: draws.len() < MIN_INTERVAL_DRAWS,
        reference_half_width: None,
    })
}

/// Credible interval from debiased draws, annotated with the frequentist
/// reference half-width for the same coordinate.
pub fn theoretical_interval(
    fit: &NodewiseFit,
    theta_dstar_draws_j: &[f64],
    sigma_hat: f64,
    alpha: f64,
    kind: IntervalKind,
) -> Result<CredibleInterval> {
    let mut ci = credible_interval(fit.j, theta_dstar_draws_j, alpha, kind)?;
    ci.reference_half_width =
        Some(normal_quantile(1.0 - alpha / 2.0) * sigma_hat * fit.r_norm_sq.sqrt() / fit.xjr.abs());
    Ok(ci)
}

const NODE_MAGIC: &[u8; 8] = b"SPJNODE\0";
const NODE_VERSION: u32 = 1;

/// Serializes nodewise fits into the `.spnode` cache format.
///
/// ```text
/// magic "SPJNODE\0" | version u32 | reserved u32 | p u64 | schema_hash u64 | count u64
/// per fit: j u64 | lambda_x f64 | xjr f64 | r_norm_sq f64 | nnz u64
///          | nnz × index u64 | nnz × value f64 | (p−1) × xkr f64
/// checksum u64 (first 8 bytes of SHA-256 of all preceding bytes)
/// ```
pub fn encode_nodewise(fits: &[NodewiseFit], schema_hash: u64) -> Vec<u8> {
    let p = fits.first().map_or(0, NodewiseFit::p);
    let mut buf = Vec::new();
    buf.extend_from_slice(NODE_MAGIC);
    buf.extend_from_slice(&NODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in [p as u64, schema_hash, fits.len() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in fits {
        buf.extend_from_slice(&(f.j as u64).to_le_bytes());
        for v in [f.lambda_x, f.xjr, f.r_norm_sq] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(f.gamma_hat.nnz() as u64).to_le_bytes());
        for &k in f.gamma_hat.indices() {
            buf.extend_from_slice(&(k as u64).to_le_bytes());
        }
        for v in f.gamma_hat.values().iter().chain(&f.xkr) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..8]);
    buf
}

pub fn decode_nodewise(bytes: &[u8], expected_schema: u64) -> Result<Vec<NodewiseFit>> {
    const HEADER: usize = 8 + 4 + 4 + 24;
    if bytes.len() < 8 || &bytes[..8] != NODE_MAGIC {
        return Err(if bytes.len() < 8 { SpjError::Checksum } else { SpjError::Format("bad magic bytes".into()) });
    }
    if bytes.len() < HEADER + 8 {
        return Err(SpjError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if Sha256::digest(body)[..8] != *tail {
        return Err(SpjError::Checksum);
    }
    let mut pos = 8usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = body
            .get(pos..pos + len)
            .ok_or_else(|| SpjError::Format("unexpected end of payload".into()))?;
        pos += len;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != NODE_VERSION {
        return Err(SpjError::Format(format!("unsupported version {version}")));
    }
    take(4)?;
    let p = u64_at(take(8)?) as usize;
    let schema = u64_at(take(8)?);
    if schema != expected_schema {
        return Err(SpjError::Schema {
            expected: expected_schema,
            found: schema,
        });
    }
    let count = u64_at(take(8)?) as usize;
    let mut fits = Vec::with_capacity(count.min(p.max(1)));
    for _ in 0..count {
        let j = u64_at(take(8)?) as usize;
        let lambda_x = f64_at(take(8)?);
        let xjr = f64_at(take(8)?);
        let r_norm_sq = f64_at(take(8)?);
        let nnz = u64_at(take(8)?) as usize;
        if nnz > p || j >= p {
            return Err(SpjError::Format("corrupt nodewise record".into()));
        }
        let mut pairs = Vec::with_capacity(nnz);
        let idx: Vec<usize> = (0..nnz).map(|_| take(8).map(|s| u64_at(s) as usize)).collect::<Result<_>>()?;
        for k in idx {
            pairs.push((k, f64_at(take(8)?)));
        }
        let xkr = (0..p - 1).map(|_| take(8).map(f64_at)).collect::<Result<Vec<f64>>>()?;
        fits.push(NodewiseFit {
            j,
            gamma_hat: SparseVector::from_pairs(p, pairs)?,
            lambda_x,
            r_norm_sq,
            xjr,
            xkr,
        });
    }
    if pos != body.len() {
        return Err(SpjError::Format("trailing bytes in payload".into()));
    }
    Ok(fits)
}

pub fn write_nodewise(fits: &[NodewiseFit], schema_hash: u64, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_nodewise(fits, schema_hash))?;
    Ok(())
}

pub fn read_nodewise(path: impl AsRef<Path>, expected_schema: u64) -> Result<Vec<NodewiseFit>> {
    decode_nodewise(&std::fs::read(path)?, expected_schema)
}
