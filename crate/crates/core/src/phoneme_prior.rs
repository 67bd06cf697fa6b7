//! Per-phoneme Gaussian priors over encoder latents and the negative
//! log-likelihood regularizer built from them.
//!
//! Each phoneme gets a single Gaussian whose mean and covariance are the
//! pooled maximum-likelihood estimates over every frame carrying that label,
//! across all utterances. Covariances are symmetrized and eigenvalue-floored so
//! that the density is always defined.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::PhonemeInventory;
use crate::error::{Error, Result};

pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Frame-major latent sequence: `frames` vectors of `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    dim: usize,
    data: Vec<f64>,
}

impl LatentSeq {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form {dim}-dim frames", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { utterance: "<latent>".into(), what: "latent", index: i });
        }
        Ok(LatentSeq { dim, data })
    }

    /// Converts a channel-major (dim × frames) block, as produced by the encoder.
    pub fn from_channel_major(dim: usize, frames: usize, block: &[f64]) -> Result<Self> {
        if block.len() != dim * frames {
            return Err(Error::Shape(format!("expected {dim}x{frames} latent block")));
        }
        let mut data = vec![0.0; dim * frames];
        for l in 0..dim {
            for t in 0..frames {
                data[t * dim + l] = block[l * frames + t];
            }
        }
        LatentSeq::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
    pub fn iter_frames(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    #[default]
    Full,
    /// Off-diagonal terms dropped after estimation.
    Diagonal,
}

/// What to do with frames whose phoneme has no prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenPolicy {
    #[default]
    Error,
    SkipFrame,
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    frame_count: usize,
    /// Lower Cholesky factor of the covariance, row-major.
    chol: Vec<f64>,
    log_det: f64,
}

impl PartialEq for GaussianPrior {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance && self.frame_count == other.frame_count
    }
}

impl GaussianPrior {
    /// Wraps an already regularized mean/covariance pair.
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, frame_count: usize) -> Result<Self> {
        let l = mean.len();
        if l == 0 || covariance.len() != l * l {
            return Err(Error::Shape(format!("covariance must be {l}x{l}")));
        }
        let m = DMatrix::from_row_slice(l, l, &covariance);
        let chol = nalgebra::Cholesky::new(m)
            .ok_or_else(|| Error::Factorization("covariance is not positive definite".into()))?;
        let factor = chol.l();
        let mut flat = vec![0.0; l * l];
        let mut log_det = 0.0;
        for i in 0..l {
            for j in 0..=i {
                flat[i * l + j] = factor[(i, j)];
            }
            log_det += 2.0 * libm::log(factor[(i, i)]);
        }
        Ok(GaussianPrior { mean, covariance, frame_count, chol: flat, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    /// Row-major L×L covariance.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }
    pub fn frame_count(&self) -> usize {
        self.frame_count
    }
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves L z = y - mean.
    fn whiten(&self, y: &[f64]) -> Vec<f64> {
        let l = self.dim();
        let mut z = vec![0.0; l];
        for i in 0..l {
            let mut s = y[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * l + j] * z[j];
            }
            z[i] = s / self.chol[i * l + i];
        }
        z
    }

    /// Squared Mahalanobis distance (y - mean)ᵀ Σ⁻¹ (y - mean).
    pub fn mahalanobis_sq(&self, y: &[f64]) -> f64 {
        self.whiten(y).iter().map(|v| v * v).sum()
    }

    /// Σ⁻¹ (y - mean).
    pub fn precision_times_residual(&self, y: &[f64]) -> Vec<f64> {
        let l = self.dim();
        let mut x = self.whiten(y);
        for i in (0..l).rev() {
            let mut s = x[i];
            for j in i + 1..l {
                s -= self.chol[j * l + i] * x[j];
            }
            x[i] = s / self.chol[i * l + i];
        }
        x
    }
}

/// log N(y | μ, Σ).
pub fn prior_log_density(y: &[f64], prior: &GaussianPrior) -> Result<f64> {
    if y.len() != prior.dim() {
        return Err(Error::Shape(format!("latent has {} dims, prior has {}", y.len(), prior.dim())));
    }
    let l = prior.dim() as f64;
    Ok(-0.5 * l * LN_2PI - 0.5 * prior.log_det - 0.5 * prior.mahalanobis_sq(y))
}

/// Gradient of -log N(y | μ, Σ) with respect to y, i.e. Σ⁻¹(y - μ).
pub fn asr_regularization_grad(y: &[f64], prior: &GaussianPrior) -> Result<Vec<f64>> {
    if y.len() != prior.dim() {
        return Err(Error::Shape(format!("latent has {} dims, prior has {}", y.len(), prior.dim())));
    }
    Ok(prior.precision_times_residual(y))
}

/// Gaussian priors for every phoneme that had at least one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    priors: Vec<Option<GaussianPrior>>,
    inventory: PhonemeInventory,
    latent_dim: usize,
    floor: f64,
    kind: CovarianceKind,
}

impl PriorSet {
    /// Assembles a set from explicit priors (index = zero-based phoneme).
    pub fn from_parts(
        priors: Vec<Option<GaussianPrior>>,
        inventory: PhonemeInventory,
        latent_dim: usize,
        floor: f64,
        kind: CovarianceKind,
    ) -> Result<Self> {
        if priors.len() != inventory.len() {
            return Err(Error::Shape(format!(
                "{} priors for an inventory of {}",
                priors.len(),
                inventory.len()
            )));
        }
        if priors.iter().flatten().any(|p| p.dim() != latent_dim) {
            return Err(Error::Shape("priors disagree on latent dimension".into()));
        }
        Ok(PriorSet { priors, inventory, latent_dim, floor, kind })
    }

    pub fn get(&self, phoneme: usize) -> Option<&GaussianPrior> {
        self.priors.get(phoneme).and_then(Option::as_ref)
    }
    pub fn priors(&self) -> &[Option<GaussianPrior>] {
        &self.priors
    }
    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    pub fn floor(&self) -> f64 {
        self.floor
    }
    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }
    /// Zero-based phonemes that received no frames.
    pub fn missing(&self) -> Vec<usize> {
        self.priors.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(i, _)| i).collect()
    }
}

/// Symmetrizes `cov` and raises every eigenvalue below `floor` to `floor`.
/// Matrices that already satisfy the floor are only symmetrized.
pub fn regularize_covariance(cov: &[f64], dim: usize, floor: f64, kind: CovarianceKind) -> Vec<f64> {
    let mut sym = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            sym[i * dim + j] = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
        }
    }
    if kind == CovarianceKind::Diagonal {
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    sym[i * dim + j] = 0.0;
                }
            }
            sym[i * dim + i] = sym[i * dim + i].max(floor);
        }
        return sym;
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &sym));
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
        }
    }
    out
}

/// Pooled per-phoneme maximum-likelihood means and covariances.
///
/// Accumulation runs over utterances in index order and frames in time order.
/// Labels are zero-based phoneme indices, one per latent frame.
pub fn estimate_priors(
    latents: &[LatentSeq],
    alignments: &[&[usize]],
    inventory: &PhonemeInventory,
    floor: f64,
    kind: CovarianceKind,
) -> Result<PriorSet> {
    if latents.len() != alignments.len() {
        return Err(Error::Shape(format!(
            "{} latent sequences but {} alignments",
            latents.len(),
            alignments.len()
        )));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::Config("covariance floor must be positive".into()));
    }
    let dim = latents.first().ok_or(Error::Empty("latent sequences"))?.dim();
    let k = inventory.len();
    for (u, (y, z)) in latents.iter().zip(alignments).enumerate() {
        if y.dim() != dim {
            return Err(Error::Shape("latent sequences disagree on dimension".into()));
        }
        if y.frames() != z.len() {
            return Err(Error::LengthMismatch {
                utterance: format!("#{u}"),
                expected: y.frames(),
                found: z.len(),
            });
        }
        if let Some((t, &p)) = z.iter().enumerate().find(|(_, &p)| p >= k) {
            return Err(Error::LabelOutOfRange { utterance: format!("#{u}"), frame: t, label: p + 1, k });
        }
    }
    let total: usize = alignments.iter().map(|z| z.len()).sum();
    if total == 0 {
        return Err(Error::Empty("no frames to estimate priors from"));
    }

    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (y, z) in latents.iter().zip(alignments) {
        for (frame, &p) in y.iter_frames().zip(z.iter()) {
            counts[p] += 1;
            for (s, v) in sums[p].iter_mut().zip(frame) {
                *s += v;
            }
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect())
        .collect();

    let mut scatter = vec![vec![0.0; dim * dim]; k];
    let mut centered = vec![0.0; dim];
    for (y, z) in latents.iter().zip(alignments) {
        for (frame, &p) in y.iter_frames().zip(z.iter()) {
            for ((c, v), m) in centered.iter_mut().zip(frame).zip(&means[p]) {
                *c = v - m;
            }
            let s = &mut scatter[p];
            for i in 0..dim {
                for j in 0..dim {
                    s[i * dim + j] += centered[i] * centered[j];
                }
            }
        }
    }

    let mut priors = Vec::with_capacity(k);
    for p in 0..k {
        let n = counts[p];
        if n == 0 {
            priors.push(None);
            continue;
        }
        let raw: Vec<f64> = scatter[p].iter().map(|v| v / n as f64).collect();
        let cov = regularize_covariance(&raw, dim, floor, kind);
        priors.push(Some(GaussianPrior::new(means[p].clone(), cov, n)?));
    }
    PriorSet::from_parts(priors, inventory.clone(), dim, floor, kind)
}

/// Raw negative log-likelihood summed over every labelled latent frame.
///
/// Returns the sum and the number of frames that contributed.
pub fn asr_regularization_loss(
    latents: &[LatentSeq],
    alignments: &[&[usize]],
    priors: &PriorSet,
    policy: UnseenPolicy,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut frames = 0;
    for (u, (y, z)) in latents.iter().zip(alignments).enumerate() {
        if y.frames() != z.len() {
            return Err(Error::LengthMismatch { utterance: format!("#{u}"), expected: y.frames(), found: z.len() });
        }
        for (t, (frame, &p)) in y.iter_frames().zip(z.iter()).enumerate() {
            match priors.get(p) {
                Some(prior) => {
                    total -= prior_log_density(frame, prior)?;
                    frames += 1;
                }
                None if policy == UnseenPolicy::SkipFrame => {}
                None => return Err(Error::UnseenPhoneme { utterance: u, frame: t, phoneme: p }),
            }
        }
    }
    Ok((total, frames))
}

/// Mean of (y - μ)ᵀ Σ⁻¹ (y - μ) over frames, each against its own phoneme.
/// Frames without a prior are skipped.
pub fn mean_mahalanobis(latents: &[LatentSeq], alignments: &[&[usize]], priors: &PriorSet) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (y, z) in latents.iter().zip(alignments) {
        for (frame, &p) in y.iter_frames().zip(z.iter()) {
            if let Some(prior) = priors.get(p) {
                total += prior.mahalanobis_sq(frame);
                n += 1;
            }
        }
    }
    (n > 0).then(|| total / n as f64)
}
