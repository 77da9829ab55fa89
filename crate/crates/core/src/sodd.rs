//! Spectral-aware online domain discriminator.
//!
//! Each known domain is a Gaussian over spectral descriptors. A batch is
//! assigned to the domain whose shrinkage-regularized Mahalanobis distance
//! to the batch-mean descriptor is smallest; when every distance exceeds
//! the novelty threshold `tau` the batch opens a new domain. Assigned
//! batches refresh their domain with likelihood-weighted closed-form
//! mean/covariance updates.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky_decompose, forward_substitute, log_det_from_cholesky, log_sum_exp,
    Matrix,
};

pub const REGISTRY_MAGIC: &[u8; 4] = b"SODD";
pub const REGISTRY_VERSION: u32 = 1;

/// Largest shrinkage tried when a regularized covariance fails to factor.
pub const MAX_SHRINKAGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    /// Cumulative weight `c`; one per absorbed batch.
    pub count: f64,
}

impl DomainStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(1−ε)Σ + εI`.
pub fn regularized_covariance(stats: &DomainStats, shrinkage: f64) -> Matrix {
    let mut m = stats.covariance.scale(1.0 - shrinkage);
    for i in 0..m.rows() {
        m[(i, i)] += shrinkage;
    }
    m
}

fn factor(stats: &DomainStats, shrinkage: f64) -> Result<Matrix> {
    cholesky_decompose(&regularized_covariance(stats, shrinkage))
        .map_err(|_| Error::DegenerateCovariance { shrinkage })
}

/// Cholesky factor of the regularized covariance, doubling the shrinkage
/// on failure up to [`MAX_SHRINKAGE`].
pub fn factor_with_retry(stats: &DomainStats, shrinkage: f64) -> Result<(Matrix, f64)> {
    let mut eps = shrinkage;
    loop {
        match factor(stats, eps) {
            Ok(l) => return Ok((l, eps)),
            Err(e) if eps >= MAX_SHRINKAGE => return Err(e),
            Err(_) => eps = (eps * 2.0).min(MAX_SHRINKAGE),
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

fn distance_with_factor(l: &Matrix, mean: &[f64], z: &[f64]) -> f64 {
    let diff: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = forward_substitute(l, &diff);
    y.iter().map(|v| v * v).sum::<f64>().max(0.0)
}

/// `(z−μ)ᵀ[(1−ε)Σ + εI]⁻¹(z−μ)` through a Cholesky solve.
pub fn mahalanobis(stats: &DomainStats, z: &[f64], shrinkage: f64) -> Result<f64> {
    check_dim(stats.dim(), z.len())?;
    let l = factor(stats, shrinkage)?;
    Ok(distance_with_factor(&l, &stats.mean, z))
}

/// Normalized `exp(−m_b/2)` over the batch, evaluated in log space.
pub fn soft_weights(stats: &DomainStats, descriptors: &[Vec<f64>], shrinkage: f64) -> Result<Vec<f64>> {
    if descriptors.is_empty() {
        return Err(Error::EmptyInput("soft_weights"));
    }
    let (l, _) = factor_with_retry(stats, shrinkage)?;
    let mut logits = Vec::with_capacity(descriptors.len());
    for z in descriptors {
        check_dim(stats.dim(), z.len())?;
        logits.push(-0.5 * distance_with_factor(&l, &stats.mean, z));
    }
    Ok(weights_from_log(&logits))
}

fn weights_from_log(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits).expect("non-empty");
    logits.iter().map(|v| (v - lse).exp()).collect()
}

/// One closed-form update: new mean and covariance (outer products taken
/// about the old mean), then `c ← c + 1`.
pub fn update_stats(stats: &DomainStats, descriptors: &[Vec<f64>], weights: &[f64]) -> Result<DomainStats> {
    if descriptors.len() != weights.len() {
        return Err(Error::Dimension {
            expected: descriptors.len(),
            got: weights.len(),
        });
    }
    let d = stats.dim();
    let c = stats.count;
    let mut mean: Vec<f64> = stats.mean.iter().map(|m| c * m).collect();
    let mut cov = stats.covariance.scale(c);
    for (z, &w) in descriptors.iter().zip(weights) {
        check_dim(d, z.len())?;
        for (m, zi) in mean.iter_mut().zip(z) {
            *m += w * zi;
        }
        let diff: Vec<f64> = z.iter().zip(&stats.mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            let wi = w * diff[i];
            for j in 0..d {
                cov[(i, j)] += wi * diff[j];
            }
        }
    }
    let denom = c + 1.0;
    mean.iter_mut().for_each(|m| *m /= denom);
    Ok(DomainStats {
        mean,
        covariance: cov.scale(1.0 / denom).symmetrized(),
        count: denom,
    })
}

pub fn batch_mean(descriptors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = descriptors.first().ok_or(Error::EmptyInput("batch"))?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for z in descriptors {
        check_dim(d, z.len())?;
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    let b = descriptors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoddConfig {
    pub shrinkage: f64,
    /// Novelty threshold; `None` means calibrate from held-out source batches.
    pub tau: Option<f64>,
    /// Initial variance of spawned domains; `None` means calibrate from source.
    pub init_variance: Option<f64>,
    /// Calibrated `tau` is this multiple of the held-out 99th percentile.
    pub tau_multiplier: f64,
    /// Once reached, novel batches route to the nearest domain instead.
    pub max_domains: Option<usize>,
}

impl Default for SoddConfig {
    fn default() -> Self {
        Self {
            shrinkage: 0.1,
            tau: None,
            init_variance: None,
            tau_multiplier: 3.0,
            max_domains: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub domain: usize,
    pub is_new: bool,
    pub distances: Vec<f64>,
    pub posterior: Vec<f64>,
    pub batch_mean: Vec<f64>,
}

/// Append-only list of domain Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRegistry {
    domains: Vec<DomainStats>,
    pub dim: usize,
    pub shrinkage: f64,
    pub tau: f64,
    pub init_variance: f64,
    pub max_domains: Option<usize>,
}

impl DomainRegistry {
    pub fn new(dim: usize, shrinkage: f64, tau: f64, init_variance: f64) -> Self {
        Self {
            domains: Vec::new(),
            dim,
            shrinkage,
            tau,
            init_variance,
            max_domains: None,
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[DomainStats] {
        &self.domains
    }

    pub fn domain(&self, id: usize) -> Option<&DomainStats> {
        self.domains.get(id)
    }

    fn factors(&self) -> Result<Vec<Matrix>> {
        self.domains
            .iter()
            .map(|s| factor_with_retry(s, self.shrinkage).map(|(l, _)| l))
            .collect()
    }

    /// Distances `m_i(z)` to every domain.
    pub fn distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        let factors = self.factors()?;
        Ok(self
            .domains
            .iter()
            .zip(&factors)
            .map(|(s, l)| distance_with_factor(l, &s.mean, z))
            .collect())
    }

    /// `P(y=i|z) ∝ exp(−m_i/2)/√det` under a uniform prior.
    pub fn posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        check_dim(self.dim, z.len())?;
        let factors = self.factors()?;
        let logits: Vec<f64> = self
            .domains
            .iter()
            .zip(&factors)
            .map(|(s, l)| -0.5 * distance_with_factor(l, &s.mean, z) - 0.5 * log_det_from_cholesky(l))
            .collect();
        Ok(weights_from_log(&logits))
    }

    /// Batch-level decision on the mean descriptor.
    pub fn assign_batch(&self, descriptors: &[Vec<f64>]) -> Result<AssignmentResult> {
        let z = batch_mean(descriptors)?;
        check_dim(self.dim, z.len())?;
        if self.is_empty() {
            return Ok(AssignmentResult {
                domain: 0,
                is_new: true,
                distances: Vec::new(),
                posterior: Vec::new(),
                batch_mean: z,
            });
        }
        let distances = self.distances(&z)?;
        let posterior = self.posterior(&z)?;
        let (nearest, &best) = distances
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            })
            .expect("non-empty registry");
        let at_cap = self.max_domains.is_some_and(|cap| self.len() >= cap);
        let is_new = best > self.tau && !at_cap;
        Ok(AssignmentResult {
            domain: if is_new { self.len() } else { nearest },
            is_new,
            distances,
            posterior,
            batch_mean: z,
        })
    }

    /// Opens a domain at the batch mean with covariance `σ0²·I`.
    pub fn spawn_domain(&mut self, descriptors: &[Vec<f64>]) -> Result<usize> {
        let mean = batch_mean(descriptors)?;
        check_dim(self.dim, mean.len())?;
        let mut covariance = Matrix::identity(self.dim);
        for i in 0..self.dim {
            covariance[(i, i)] = self.init_variance;
        }
        self.domains.push(DomainStats {
            mean,
            covariance,
            count: 1.0,
        });
        Ok(self.domains.len() - 1)
    }

    /// Appends externally built statistics.
    pub fn push_domain(&mut self, stats: DomainStats) -> Result<usize> {
        check_dim(self.dim, stats.mean.len())?;
        if stats.covariance.shape() != (self.dim, self.dim) {
            return Err(Error::Dimension {
                expected: self.dim,
                got: stats.covariance.rows(),
            });
        }
        if !stats.covariance.is_symmetric(1e-9) || !(stats.count >= 1.0) {
            return Err(Error::Config("domain covariance must be symmetric and count at least 1".into()));
        }
        self.domains.push(stats);
        Ok(self.domains.len() - 1)
    }

    /// Soft-weighted update of domain `id`; returns the weights used.
    pub fn update_domain(&mut self, id: usize, descriptors: &[Vec<f64>]) -> Result<Vec<f64>> {
        let stats = self.domains.get(id).ok_or(Error::UnknownDomainBranch {
            id,
            len: self.domains.len(),
        })?;
        let w = soft_weights(stats, descriptors, self.shrinkage)?;
        let updated = update_stats(stats, descriptors, &w)?;
        self.domains[id] = updated;
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.bytes(REGISTRY_MAGIC);
        w.u32(REGISTRY_VERSION);
        w.len_u32(self.domains.len());
        w.len_u32(self.dim);
        w.f64(self.shrinkage);
        w.f64(self.tau);
        w.f64(self.init_variance);
        for s in &self.domains {
            w.f64(s.count);
            w.f64s(&s.mean);
            w.f64s(s.covariance.as_slice());
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let reg = Self::decode(&mut r)?;
        r.finish()?;
        Ok(reg)
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(REGISTRY_MAGIC)?;
        let version = r.u32()?;
        if version != REGISTRY_VERSION {
            return Err(Error::Checkpoint(format!("unsupported SODD version {version}")));
        }
        let k = r.usize()?;
        let dim = r.usize()?;
        let shrinkage = r.f64()?;
        let tau = r.f64()?;
        let init_variance = r.f64()?;
        let mut domains = Vec::with_capacity(k);
        for _ in 0..k {
            let count = r.f64()?;
            let mean = r.f64s(dim)?;
            let covariance = Matrix::from_vec(dim, dim, r.f64s(dim * dim)?)?;
            domains.push(DomainStats {
                mean,
                covariance,
                count,
            });
        }
        Ok(Self {
            domains,
            dim,
            shrinkage,
            tau,
            init_variance,
            max_domains: None,
        })
    }
}
