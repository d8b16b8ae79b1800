use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Streaming mean/covariance of a feature distribution.
///
/// Holds the running mean and the centered co-moment matrix; batches and
/// partial results are combined with the pairwise (Chan et al.) update, so
/// merging is associative up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    n: u64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(d),
            comoment: DMatrix::zeros(d, d),
        }
    }

    /// Rebuilds stats from a sample count, mean and unbiased covariance.
    pub fn from_moments(n: u64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!("covariance {:?} for mean of length {d}", cov.shape())));
        }
        let scale = n.saturating_sub(1) as f64;
        Ok(Self {
            n,
            mean,
            comoment: cov * scale,
        })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased covariance; `None` until at least two samples are seen.
    pub fn cov(&self) -> Option<DMatrix<f64>> {
        (self.n >= 2).then(|| &self.comoment / (self.n - 1) as f64)
    }

    /// Folds in a row-major `(rows × d)` batch.
    pub fn accumulate(&mut self, batch: &[f64], rows: usize) -> Result<()> {
        let d = self.d();
        if batch.len() != rows * d {
            return Err(Error::Shape(format!(
                "batch of {} values is not {rows} rows of dimension {d}",
                batch.len()
            )));
        }
        if rows == 0 {
            return Ok(());
        }
        let x = DMatrix::from_row_slice(rows, d, batch);
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / rows as f64));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let comoment = centered.transpose() * &centered;
        self.merge(&Self {
            n: rows as u64,
            mean,
            comoment,
        })
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.d() != self.d() {
            return Err(Error::Shape(format!("cannot merge stats of dimension {} into {}", other.d(), self.d())));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.comoment += &other.comoment + (&delta * delta.transpose()) * (na * nb / n);
        self.comoment = (&self.comoment + self.comoment.transpose()) * 0.5;
        self.n += other.n;
        Ok(())
    }

    pub fn merged(mut self, other: &Self) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.comoment.iter()).all(|v| v.is_finite())
    }
}

const MAGIC: &[u8; 4] = b"HGFS";
const VERSION: u32 = 1;

/// Feature statistics tagged with the extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsFile {
    pub extractor_id: String,
    pub stats: FeatureStats,
}

impl StatsFile {
    /// Little-endian binary layout: magic, version, d, n, extractor id
    /// (length-prefixed UTF-8), mean (d f64), unbiased covariance (d² f64,
    /// row-major).
    pub fn write(&self, path: &Path) -> Result<()> {
        let s = &self.stats;
        let d = s.d();
        let cov = s.cov().unwrap_or_else(|| DMatrix::zeros(d, d));
        let mut buf = Vec::with_capacity(32 + self.extractor_id.len() + 8 * d * (d + 1));
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        buf.extend((d as u64).to_le_bytes());
        buf.extend(s.n.to_le_bytes());
        buf.extend((self.extractor_id.len() as u64).to_le_bytes());
        buf.extend(self.extractor_id.as_bytes());
        for v in s.mean.iter() {
            buf.extend(v.to_le_bytes());
        }
        for r in 0..d {
            for c in 0..d {
                buf.extend(cov[(r, c)].to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp).at(&tmp)?.write_all(&buf).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated stats file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("not a feature statistics file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported stats version {version}")));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let d = u64_at(take(8)?) as usize;
        let n = u64_at(take(8)?);
        let id_len = u64_at(take(8)?) as usize;
        let extractor_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("extractor id is not UTF-8"))?;
        let mut f64s = |count: usize| -> Result<Vec<f64>> {
            Ok(take(8 * count)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mean = DVector::from_vec(f64s(d)?);
        let cov = DMatrix::from_row_slice(d, d, &f64s(d * d)?);
        Ok(Self {
            extractor_id,
            stats: FeatureStats::from_moments(n, mean, cov)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqrtmResult {
    pub trace: f64,
    /// Ridge added to both inputs when the plain attempt was not PSD.
    pub stabilized_with: Option<f64>,
}

/// Symmetric square root of a PSD matrix; eigenvalues below zero are
/// clamped. Returns the smallest eigenvalue seen.
fn sym_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), min)
}

fn check_symmetric(name: &str, a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!("{name} is not square: {:?}", a.shape())));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(Error::Numerical(format!("{name} is not symmetric (max |A - Aᵀ| = {asym:e})")));
    }
    Ok(())
}

/// Trace of `(A B)^{1/2}` for symmetric PSD `A`, `B`, computed as the trace
/// of `(A^{1/2} B A^{1/2})^{1/2}`, which is similar to it and symmetric.
/// If either square root meets an eigenvalue below `-tol`, both inputs get
/// `eps_stab · I` added and the computation is repeated.
pub fn sqrtm_product(a: &DMatrix<f64>, b: &DMatrix<f64>, eps_stab: f64) -> Result<SqrtmResult> {
    check_symmetric("A", a)?;
    check_symmetric("B", b)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("A is {:?} but B is {:?}", a.shape(), b.shape())));
    }
    let attempt = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let a = (a + a.transpose()) * 0.5;
        let b = (b + b.transpose()) * 0.5;
        let scale = a.amax().max(b.amax()).max(1.0);
        let tol = 1e-10 * scale;
        let (root_a, min_a) = sym_sqrt(&a);
        let m = &root_a * b * &root_a;
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let min_m = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let trace: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        (trace, min_a >= -tol && min_m >= -tol * scale)
    };
    let (trace, ok) = attempt(a, b);
    if ok || eps_stab <= 0.0 {
        return Ok(SqrtmResult {
            trace,
            stabilized_with: None,
        });
    }
    let ridge = DMatrix::identity(a.nrows(), a.ncols()) * eps_stab;
    let (trace, _) = attempt(&(a + &ridge), &(b + &ridge));
    log::warn!("matrix square root stabilized with eps = {eps_stab:e}");
    Ok(SqrtmResult {
        trace,
        stabilized_with: Some(eps_stab),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    pub stabilized_with: Option<f64>,
}

/// `‖μa − μb‖² + tr Σa + tr Σb − 2 tr (Σa Σb)^{1/2}`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats, eps_stab: f64) -> Result<Frechet> {
    if a.d() != b.d() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.d(), b.d())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical("feature statistics contain non-finite values".into()));
    }
    let (Some(ca), Some(cb)) = (a.cov(), b.cov()) else {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples per side, got {} and {}",
            a.n, b.n
        )));
    };
    let diff = (&a.mean - &b.mean).norm_squared();
    let root = sqrtm_product(&ca, &cb, eps_stab)?;
    let distance = diff + ca.trace() + cb.trace() - 2.0 * root.trace;
    Ok(Frechet {
        distance: distance.max(0.0),
        stabilized_with: root.stabilized_with,
    })
}
