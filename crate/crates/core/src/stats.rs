//! Sufficient statistics `(XᵀX, XᵀY, YᵀY, n)` per shard, their merge, and
//! the `.spstats` binary format.
//!
//! Everything downstream of data loading consumes [`MergedStats`] only, so
//! shards never have to ship raw rows to the coordinator.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "SPJSTATS"
//! version      u32      = 1
//! reserved     u32      = 0
//! p            u64
//! n            u64      rows summarized
//! shard_count  u64      1 for a single shard
//! schema_hash  u64
//! yty          f64
//! xty          p × f64
//! xtx          p·p × f64, row-major, full symmetric
//! checksum     u64      first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpjError};

pub const STATS_MAGIC: &[u8; 8] = b"SPJSTATS";
pub const STATS_VERSION: u32 = 1;
/// Largest `p` accepted by default; `XᵀX` is stored densely (8·p² bytes).
pub const DEFAULT_MAX_P: usize = 20_000;

const HEADER_LEN: usize = 8 + 4 + 4 + 8 * 4 + 8;

/// Statistics computed on one shard of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardStats {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n_shard: usize,
    pub p: usize,
    pub schema_hash: u64,
}

/// Statistics summed over all shards.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedStats {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
    pub p: usize,
    pub schema_hash: u64,
    pub shard_count: usize,
}

/// Order-sensitive 64-bit hash of column names.
pub fn schema_hash<S: AsRef<str>>(names: &[S]) -> u64 {
    let mut h = Sha256::new();
    for name in names {
        let bytes = name.as_ref().as_bytes();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    first_u64(&h.finalize())
}

/// Schema hash for unnamed columns `0..p`.
pub fn schema_hash_indices(p: usize) -> u64 {
    let names: Vec<String> = (0..p).map(|j| j.to_string()).collect();
    schema_hash(&names)
}

fn first_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = x.tr_mul(x);
    // force exact symmetry
    let p = g.nrows();
    for j in 0..p {
        for i in (j + 1)..p {
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}

pub fn compute_shard_stats(x: &DMatrix<f64>, y: &DVector<f64>, schema_hash: u64) -> Result<ShardStats> {
    compute_shard_stats_capped(x, y, schema_hash, DEFAULT_MAX_P)
}

pub fn compute_shard_stats_capped(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    schema_hash: u64,
    max_p: usize,
) -> Result<ShardStats> {
    if x.nrows() != y.len() {
        return Err(SpjError::Dimension(format!(
            "shard has {} rows in X but {} responses",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(SpjError::Dimension("shard has no rows".into()));
    }
    if x.ncols() > max_p {
        return Err(SpjError::TooManyColumns { p: x.ncols(), cap: max_p });
    }
    Ok(ShardStats {
        xtx: gram(x),
        xty: x.tr_mul(y),
        yty: y.norm_squared(),
        n_shard: x.nrows(),
        p: x.ncols(),
        schema_hash,
    })
}

impl From<ShardStats> for MergedStats {
    fn from(s: ShardStats) -> Self {
        MergedStats {
            xtx: s.xtx,
            xty: s.xty,
            yty: s.yty,
            n: s.n_shard,
            p: s.p,
            schema_hash: s.schema_hash,
            shard_count: 1,
        }
    }
}

impl MergedStats {
    /// Whole-data statistics of a dataset, as a single shard.
    pub fn from_dataset(data: &crate::design::Dataset) -> Result<Self> {
        compute_shard_stats(&data.x, &data.y, data.schema_hash()).map(Into::into)
    }

    /// Checks `λ_min(XᵀX) ≥ −1e-8·trace`. Costs an eigendecomposition.
    pub fn check_psd(&self) -> Result<()> {
        let tr = self.xtx.trace();
        let min = self.xtx.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-8 * tr.abs().max(1.0) {
            return Err(SpjError::NotPositiveDefinite(format!("XᵀX has eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    /// Statistics of the column-standardized design, computed from the
    /// Gram diagonal alone: with `D = diag(√(Gⱼⱼ/n))` this returns
    /// `D⁻¹GD⁻¹` and `D⁻¹XᵀY`. Matches standardizing raw rows without
    /// centering, so shards can be summarized on their raw columns.
    pub fn standardized(&self) -> Result<(MergedStats, Vec<crate::design::ColumnScale>)> {
        let n = self.n as f64;
        let mut scales = Vec::with_capacity(self.p);
        for j in 0..self.p {
            let d = self.xtx[(j, j)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(SpjError::ConstantColumn(j));
            }
            scales.push((d / n).sqrt());
        }
        let mut xtx = self.xtx.clone();
        for j in 0..self.p {
            for i in 0..self.p {
                xtx[(i, j)] /= scales[i] * scales[j];
            }
            xtx[(j, j)] = n;
        }
        let xty = DVector::from_iterator(self.p, self.xty.iter().zip(&scales).map(|(v, s)| v / s));
        let info = scales
            .into_iter()
            .map(|scale| crate::design::ColumnScale { center: 0.0, scale })
            .collect();
        Ok((
            MergedStats {
                xtx,
                xty,
                ..self.clone()
            },
            info,
        ))
    }

    fn as_shard(&self) -> ShardStats {
        ShardStats {
            xtx: self.xtx.clone(),
            xty: self.xty.clone(),
            yty: self.yty,
            n_shard: self.n,
            p: self.p,
            schema_hash: self.schema_hash,
        }
    }
}

/// Sums shard statistics with pairwise (tree) reduction.
pub fn merge(stats: &[ShardStats]) -> Result<MergedStats> {
    let first = stats
        .first()
        .ok_or_else(|| SpjError::Config("no shards to merge".into()))?;
    for (i, s) in stats.iter().enumerate() {
        if s.p != first.p {
            return Err(SpjError::ShardMismatch {
                index: i,
                reason: format!("p = {} differs from shard 0 (p = {})", s.p, first.p),
            });
        }
        if s.schema_hash != first.schema_hash {
            return Err(SpjError::ShardMismatch {
                index: i,
                reason: format!(
                    "schema hash {:#018x} differs from shard 0 ({:#018x})",
                    s.schema_hash, first.schema_hash
                ),
            });
        }
    }
    let mut total = tree_sum(stats);
    total.schema_hash = first.schema_hash;
    Ok(MergedStats {
        shard_count: stats.len(),
        ..total.into()
    })
}

/// Merges already-merged statistics (e.g. from several coordinators).
pub fn merge_merged(parts: &[MergedStats]) -> Result<MergedStats> {
    let shards: Vec<ShardStats> = parts.iter().map(MergedStats::as_shard).collect();
    let count = parts.iter().map(|m| m.shard_count).sum();
    merge(&shards).map(|m| MergedStats { shard_count: count, ..m })
}

fn tree_sum(stats: &[ShardStats]) -> ShardStats {
    match stats {
        [one] => one.clone(),
        _ => {
            let (left, right) = stats.split_at(stats.len() / 2);
            let mut a = tree_sum(left);
            let b = tree_sum(right);
            a.xtx += &b.xtx;
            a.xty += &b.xty;
            a.yty += b.yty;
            a.n_shard += b.n_shard;
            a
        }
    }
}

fn encode(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    yty: f64,
    n: usize,
    shard_count: usize,
    schema_hash: u64,
) -> Vec<u8> {
    let p = xty.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (p + p * p) + 8);
    buf.extend_from_slice(STATS_MAGIC);
    buf.extend_from_slice(&STATS_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in [p as u64, n as u64, shard_count as u64, schema_hash] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&yty.to_le_bytes());
    for v in xty.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..p {
        for j in 0..p {
            buf.extend_from_slice(&xtx[(i, j)].to_le_bytes());
        }
    }
    let sum = first_u64(&Sha256::digest(&buf));
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

fn decode(bytes: &[u8]) -> Result<MergedStats> {
    if bytes.len() < HEADER_LEN + 8 {
        if bytes.len() >= 8 && &bytes[..8] != STATS_MAGIC {
            return Err(SpjError::Format("bad magic bytes".into()));
        }
        return Err(SpjError::Checksum);
    }
    if &bytes[..8] != STATS_MAGIC {
        return Err(SpjError::Format("bad magic bytes".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if first_u64(&Sha256::digest(body)) != stored {
        return Err(SpjError::Checksum);
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let version = cur.u32();
    if version != STATS_VERSION {
        return Err(SpjError::Format(format!("unsupported version {version}")));
    }
    let _reserved = cur.u32();
    let p = cur.u64() as usize;
    let n = cur.u64() as usize;
    let shard_count = cur.u64() as usize;
    let schema_hash = cur.u64();
    let expected = p
        .checked_mul(p)
        .and_then(|pp| pp.checked_add(p))
        .and_then(|k| k.checked_mul(8))
        .and_then(|k| k.checked_add(HEADER_LEN));
    if expected != Some(body.len()) {
        return Err(SpjError::Format(format!("payload length does not match p = {p}")));
    }
    let yty = cur.f64();
    let xty = DVector::from_iterator(p, (0..p).map(|_| cur.f64()));
    let xtx = DMatrix::from_row_iterator(p, p, (0..p * p).map(|_| cur.f64()));
    Ok(MergedStats {
        xtx,
        xty,
        yty,
        n,
        p,
        schema_hash,
        shard_count,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn encode_shard(stats: &ShardStats) -> Vec<u8> {
    encode(&stats.xtx, &stats.xty, stats.yty, stats.n_shard, 1, stats.schema_hash)
}

pub fn encode_merged(stats: &MergedStats) -> Vec<u8> {
    encode(&stats.xtx, &stats.xty, stats.yty, stats.n, stats.shard_count, stats.schema_hash)
}

pub fn decode_shard(bytes: &[u8]) -> Result<ShardStats> {
    decode(bytes).map(|m| m.as_shard())
}

pub fn decode_merged(bytes: &[u8]) -> Result<MergedStats> {
    decode(bytes)
}

pub fn write_stats(stats: &ShardStats, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_shard(stats))?;
    Ok(())
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<ShardStats> {
    decode_shard(&std::fs::read(path)?)
}

pub fn write_merged(stats: &MergedStats, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_merged(stats))?;
    Ok(())
}

pub fn read_merged(path: impl AsRef<Path>) -> Result<MergedStats> {
    decode_merged(&std::fs::read(path)?)
}
