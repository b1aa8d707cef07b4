//! Regression data: loading, simulation, and column standardization.
//!
//! Columns are scaled so that `‖X⁽ʲ⁾‖² = n`, i.e. `XᵀX/n` has unit
//! diagonal. Some texts phrase this as "Euclidean norm n"; the squared
//! norm is what the downstream algebra relies on.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpjError};
use crate::rng::{Substreams, DATA_STREAM};

/// Per-column standardization metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub center: f64,
    pub scale: f64,
}

/// Standardized design matrix and response.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub std_info: Vec<ColumnScale>,
    pub column_names: Option<Vec<String>>,
}

impl Dataset {
    /// Standardizes `x_raw` (without centering) and pairs it with `y`.
    pub fn new(x_raw: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x_raw.nrows() != y.len() {
            return Err(SpjError::Dimension(format!(
                "X has {} rows but Y has {} entries",
                x_raw.nrows(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SpjError::NonFinite("response".into()));
        }
        let (x, std_info) = standardize(&x_raw, false)?;
        Ok(Self {
            x,
            y,
            std_info,
            column_names: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `rows` of the dataset, keeping the already-standardized columns.
    pub fn select_rows(&self, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        (x, y)
    }

    pub fn schema_hash(&self) -> u64 {
        match &self.column_names {
            Some(names) => crate::stats::schema_hash(names),
            None => crate::stats::schema_hash_indices(self.p()),
        }
    }
}

/// Scales every column to squared norm `n`, optionally centering first.
///
/// A column with zero variance is rejected with its index.
pub fn standardize(x_raw: &DMatrix<f64>, center: bool) -> Result<(DMatrix<f64>, Vec<ColumnScale>)> {
    let n = x_raw.nrows();
    let p = x_raw.ncols();
    if n < 2 || p < 1 {
        return Err(SpjError::Dimension(format!(
            "need n >= 2 and p >= 1, got n = {n}, p = {p}"
        )));
    }
    let mut x = x_raw.clone();
    let mut info = Vec::with_capacity(p);
    for j in 0..p {
        let mut col = x.column_mut(j);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(SpjError::NonFinite(format!("column {j}")));
        }
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(SpjError::ConstantColumn(j));
        }
        let c = if center { col.mean() } else { 0.0 };
        if center {
            col.add_scalar_mut(-c);
        }
        let norm_sq = col.norm_squared();
        let scale = (norm_sq / n as f64).sqrt();
        col /= scale;
        info.push(ColumnScale { center: c, scale });
    }
    Ok((x, info))
}

/// AR(1) correlation matrix `Σᵢⱼ = ρ^|i−j|`.
pub fn ar_covariance(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(SpjError::Config(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    Laplace,
    ChiSquare,
}

impl NoiseKind {
    /// Draws one error with mean zero and variance `sigma0²`.
    pub fn sample<R: Rng + ?Sized>(self, sigma0: f64, rng: &mut R) -> f64 {
        let unit = match self {
            NoiseKind::Gaussian => rng.sample::<f64, _>(StandardNormal),
            NoiseKind::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            NoiseKind::Laplace => {
                // difference of two Exp(1) is Laplace(0, 1), variance 2
                let a: f64 = Exp1.sample(rng);
                let b: f64 = Exp1.sample(rng);
                (a - b) / 2f64.sqrt()
            }
            NoiseKind::ChiSquare => {
                let z: f64 = rng.sample(StandardNormal);
                (z * z - 1.0) / 2f64.sqrt()
            }
        };
        sigma0 * unit
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = SpjError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            "laplace" => Ok(NoiseKind::Laplace),
            "chi_square" | "chisquare" | "chi2" => Ok(NoiseKind::ChiSquare),
            other => Err(SpjError::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Simulation design: AR(ρ) Gaussian rows, `s0` leading signals of equal size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub s0: usize,
    pub signal_value: f64,
    pub rho: f64,
    pub noise_kind: NoiseKind,
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 100,
            s0: 10,
            signal_value: 2.0,
            rho: 0.0,
            noise_kind: NoiseKind::Gaussian,
            sigma0: 1.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(SpjError::Config("need n >= 2 and p >= 1".into()));
        }
        if self.s0 > self.p {
            return Err(SpjError::Config(format!("s0 = {} exceeds p = {}", self.s0, self.p)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(SpjError::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.sigma0 > 0.0) || !self.signal_value.is_finite() {
            return Err(SpjError::Config("sigma0 must be positive and signal finite".into()));
        }
        Ok(())
    }

    pub fn theta0(&self) -> DVector<f64> {
        DVector::from_fn(self.p, |j, _| if j < self.s0 { self.signal_value } else { 0.0 })
    }
}

/// Simulates a standardized dataset and returns it with the true coefficients.
pub fn generate(cfg: &SimConfig) -> Result<(Dataset, DVector<f64>)> {
    cfg.validate()?;
    let mut rng = Substreams::new(cfg.seed).stream(DATA_STREAM);
    let (n, p, rho) = (cfg.n, cfg.p, cfg.rho);
    let innov = (1.0 - rho * rho).sqrt();
    // AR(1) recursion gives rows ~ N(0, Σ(ρ)) exactly.
    let mut x_raw = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x_raw[(i, 0)] = prev;
        for j in 1..p {
            let z: f64 = rng.sample(StandardNormal);
            prev = rho * prev + innov * z;
            x_raw[(i, j)] = prev;
        }
    }
    let (x, std_info) = standardize(&x_raw, false)?;
    let theta0 = cfg.theta0();
    let mut y = &x * &theta0;
    for yi in y.iter_mut() {
        *yi += cfg.noise_kind.sample(cfg.sigma0, &mut rng);
    }
    Ok((
        Dataset {
            x,
            y,
            std_info,
            column_names: None,
        },
        theta0,
    ))
}

/// Blocks of `Cₙ = XᵀX/n` for an index set `S` and its complement.
#[derive(Debug, Clone)]
pub struct GramPartition {
    pub set: Vec<usize>,
    pub complement: Vec<usize>,
    pub c11: DMatrix<f64>,
    pub c12: DMatrix<f64>,
    pub c21: DMatrix<f64>,
    pub c22: DMatrix<f64>,
}

impl GramPartition {
    /// Partitions `xtx / n` by the (sorted, deduplicated) index set.
    pub fn new(xtx: &DMatrix<f64>, n: usize, set: &[usize]) -> Result<Self> {
        let p = xtx.nrows();
        let mut s: Vec<usize> = set.to_vec();
        s.sort_unstable();
        s.dedup();
        if s.last().is_some_and(|&j| j >= p) {
            return Err(SpjError::Dimension(format!("index out of range for p = {p}")));
        }
        let comp: Vec<usize> = (0..p).filter(|j| s.binary_search(j).is_err()).collect();
        let c = xtx / n as f64;
        let block = |r: &[usize], k: &[usize]| c.select_rows(r).select_columns(k);
        Ok(Self {
            c11: block(&s, &s),
            c12: block(&s, &comp),
            c21: block(&comp, &s),
            c22: block(&comp, &comp),
            set: s,
            complement: comp,
        })
    }

    /// Reassembles the full `Cₙ` in original coordinate order.
    pub fn assemble(&self) -> DMatrix<f64> {
        let p = self.set.len() + self.complement.len();
        let mut c = DMatrix::zeros(p, p);
        for (a, &i) in self.set.iter().enumerate() {
            for (b, &j) in self.set.iter().enumerate() {
                c[(i, j)] = self.c11[(a, b)];
            }
            for (b, &j) in self.complement.iter().enumerate() {
                c[(i, j)] = self.c12[(a, b)];
                c[(j, i)] = self.c21[(b, a)];
            }
        }
        for (a, &i) in self.complement.iter().enumerate() {
            for (b, &j) in self.complement.iter().enumerate() {
                c[(i, j)] = self.c22[(a, b)];
            }
        }
        c
    }

    /// Smallest eigenvalue of `C₁₁`, the eigenvalue-floor diagnostic.
    pub fn min_eigenvalue_c11(&self) -> f64 {
        if self.c11.is_empty() {
            return f64::NAN;
        }
        self.c11
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// `‖C₂₁ C₁₁⁻¹ sign‖_∞`, the irrepresentability diagnostic for the given signs.
    pub fn irrepresentable_norm(&self, signs: &[f64]) -> Result<f64> {
        let chol = self
            .c11
            .clone()
            .cholesky()
            .ok_or_else(|| SpjError::NotPositiveDefinite("C11".into()))?;
        let v = chol.solve(&DVector::from_column_slice(signs));
        Ok((&self.c21 * v).amax())
    }
}

/// Options for reading a regression dataset from CSV.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Response column: a header name, or a zero-based index.
    pub response: String,
    pub center: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            response: "0".into(),
            center: false,
        }
    }
}

/// Unstandardized table: predictors, response and optional column names.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_names: Option<Vec<String>>,
}

impl RawTable {
    pub fn schema_hash(&self) -> u64 {
        match &self.column_names {
            Some(names) => crate::stats::schema_hash(names),
            None => crate::stats::schema_hash_indices(self.x.ncols()),
        }
    }
}

pub fn read_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv_from(file, opts)
}

pub fn read_csv_from<R: Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let raw = read_csv_raw_from(reader, opts)?;
    if raw.y.iter().any(|v| !v.is_finite()) {
        return Err(SpjError::NonFinite("response".into()));
    }
    let (x, std_info) = standardize(&raw.x, opts.center)?;
    Ok(Dataset {
        x,
        y: raw.y,
        std_info,
        column_names: raw.column_names,
    })
}

/// Reads a CSV without standardizing (`opts.center` is ignored).
pub fn read_csv_raw(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    read_csv_raw_from(file, opts)
}

pub fn read_csv_raw_from<R: Read>(reader: R, opts: &CsvOptions) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Option<Vec<String>> = if opts.has_header {
        Some(rdr.headers()?.iter().map(str::to_owned).collect())
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().map_err(|_| {
                    SpjError::Format(format!("row {}, column {}: cannot parse '{}'", line + 1, c, field))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(SpjError::Dimension(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if width < 2 {
        return Err(SpjError::Format("need a response and at least one predictor column".into()));
    }
    let resp = match (&headers, opts.response.parse::<usize>()) {
        (Some(h), _) if h.iter().any(|c| c == &opts.response) => {
            h.iter().position(|c| c == &opts.response).unwrap()
        }
        (_, Ok(idx)) if idx < width => idx,
        _ => {
            return Err(SpjError::Config(format!(
                "response column '{}' not found",
                opts.response
            )))
        }
    };
    let n = rows.len();
    let p = width - 1;
    let y = DVector::from_iterator(n, rows.iter().map(|r| r[resp]));
    let x_raw = DMatrix::from_fn(n, p, |i, j| rows[i][if j < resp { j } else { j + 1 }]);
    let column_names = headers.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(c, _)| *c != resp)
            .map(|(_, name)| name)
            .collect()
    });
    Ok(RawTable {
        x: x_raw,
        y,
        column_names,
    })
}
