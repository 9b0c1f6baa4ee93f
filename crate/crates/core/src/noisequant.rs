//! Local relative noise of a patch.
//!
//! A patch is split into foreground and background with Otsu's threshold; the
//! foreground mean count `m` gives the Poisson coefficient of variation
//! `1 / sqrt(m)`. Together with the background variability this places the
//! patch in one of four noise bins, and `ln(cov)` standardized over the
//! training set becomes the scalar fed to the network's embedding layer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::Dims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("input is constant; no threshold exists")]
    ConstantInput,
    #[error("no voxel above threshold {0}")]
    EmptyMask(f64),
    #[error("fewer than two background voxels at or below threshold {0}")]
    EmptyBackground(f64),
    #[error("parameter error: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, NoiseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseBin {
    HighNoiseClean,
    LowNoiseClean,
    HighNoiseLumpy,
    LowNoiseLumpy,
}

impl NoiseBin {
    pub const ALL: [NoiseBin; 4] = [
        NoiseBin::HighNoiseClean,
        NoiseBin::LowNoiseClean,
        NoiseBin::HighNoiseLumpy,
        NoiseBin::LowNoiseLumpy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_high_noise(self) -> bool {
        matches!(self, NoiseBin::HighNoiseClean | NoiseBin::HighNoiseLumpy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub cov_split: f64,
    pub lump_split: f64,
    pub histogram_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            cov_split: 0.3,
            lump_split: 0.2,
            histogram_bins: 256,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cov_split > 0.0) || !(self.lump_split > 0.0) {
            return Err(NoiseError::Parameter(
                "binning splits must be positive".into(),
            ));
        }
        if self.histogram_bins < 2 {
            return Err(NoiseError::Parameter("histogram_bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// Training-set mean and standard deviation of `ln(cov)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedStats {
    pub mu_logcov: f64,
    pub sigma_logcov: f64,
}

impl Default for EmbedStats {
    fn default() -> Self {
        Self {
            mu_logcov: 0.0,
            sigma_logcov: 1.0,
        }
    }
}

impl EmbedStats {
    pub fn new(mu_logcov: f64, sigma_logcov: f64) -> Result<Self> {
        if !(sigma_logcov > 0.0 && sigma_logcov.is_finite()) || !mu_logcov.is_finite() {
            return Err(NoiseError::Parameter(format!(
                "invalid embedding stats mu={mu_logcov} sigma={sigma_logcov}"
            )));
        }
        Ok(Self {
            mu_logcov,
            sigma_logcov,
        })
    }

    /// Fits mean and sample standard deviation of `ln(cov)` over `covs`.
    pub fn fit(covs: &[f64]) -> Result<Self> {
        if covs.len() < 2 {
            return Err(NoiseError::Parameter("need at least two cov values".into()));
        }
        if covs.iter().any(|&c| !(c > 0.0)) {
            return Err(NoiseError::Parameter("cov values must be positive".into()));
        }
        let logs: Vec<f64> = covs.iter().map(|c| c.ln()).collect();
        let n = logs.len() as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (n - 1.0);
        Self::new(mu, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDescriptor {
    pub otsu_threshold: f64,
    pub mask_voxel_count: usize,
    pub mask_mean_counts: f64,
    pub cov: f64,
    pub lumpiness: f64,
    pub bin: NoiseBin,
    pub embed_scalar: f64,
}

/// One line of the newline-delimited descriptor manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorRecord {
    pub volume_id: String,
    pub origin: Dims,
    pub size: usize,
    pub otsu_threshold: f64,
    pub mask_mean_counts: f64,
    pub cov: f64,
    pub lumpiness: f64,
    pub bin: NoiseBin,
    pub embed_scalar: f64,
}

impl DescriptorRecord {
    pub fn new(
        volume_id: impl Into<String>,
        origin: Dims,
        size: usize,
        d: &NoiseDescriptor,
    ) -> Self {
        Self {
            volume_id: volume_id.into(),
            origin,
            size,
            otsu_threshold: d.otsu_threshold,
            mask_mean_counts: d.mask_mean_counts,
            cov: d.cov,
            lumpiness: d.lumpiness,
            bin: d.bin,
            embed_scalar: d.embed_scalar,
        }
    }
}

/// Histogram of `values` over `[min, max]` with `bins` equal-width bins.
/// Returns `(counts, min, width)`.
pub fn histogram(values: &[f32], bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    if values.is_empty() {
        return Err(NoiseError::Parameter("empty input".into()));
    }
    if bins < 2 {
        return Err(NoiseError::Parameter("histogram_bins must be >= 2".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if !(hi > lo) {
        return Err(NoiseError::ConstantInput);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[bin_of(v as f64, lo, width, bins)] += 1;
    }
    Ok((counts, lo, width))
}

#[inline]
pub fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((v - lo) / width).floor() as usize).min(bins - 1)
}

/// Between-class variance of splitting the histogram below bin `k`, as an
/// exact fraction `num / den` in bin-index units (up to the constant `1/N²`).
///
/// `n0, s0` are the count and index-sum of bins `< k`; `n, s` the totals.
/// Returns `None` when either class is empty.
pub fn between_class_fraction(n0: u64, s0: u64, n: u64, s: u64) -> Option<(u128, u128)> {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let s1 = s - s0;
    // n0*n1*(s0/n0 - s1/n1)^2 == (n1*s0 - n0*s1)^2 / (n0*n1)
    let a = n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128;
    let num = (a.unsigned_abs()).checked_mul(a.unsigned_abs())?;
    Some((num, n0 as u128 * n1 as u128))
}

/// `a/b > c/d` for non-negative fractions; falls back to `f64` when the
/// cross products overflow.
pub fn fraction_gt(a: (u128, u128), c: (u128, u128)) -> bool {
    match (a.0.checked_mul(c.1), c.0.checked_mul(a.1)) {
        (Some(l), Some(r)) => l > r,
        _ => (a.0 as f64 / a.1 as f64) > (c.0 as f64 / c.1 as f64),
    }
}

/// Otsu's threshold. Candidates are the inner bin edges `min + k*width`,
/// `k = 1..bins`; the lowest edge maximizing between-class variance wins.
/// Foreground is `value > threshold`.
pub fn otsu_threshold(values: &[f32], histogram_bins: usize) -> Result<f64> {
    let (hist, lo, width) = histogram(values, histogram_bins)?;
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    let mut best: Option<(usize, (u128, u128))> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 1..histogram_bins {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        if let Some(frac) = between_class_fraction(n0, s0, n, s) {
            match best {
                Some((_, b)) if !fraction_gt(frac, b) => {}
                _ => best = Some((k, frac)),
            }
        }
    }
    // max > min puts samples in the first and last bin, so k = 1 always splits.
    let (k, _) = best.ok_or(NoiseError::ConstantInput)?;
    Ok(lo + k as f64 * width)
}

/// Mean and voxel count of `values > threshold`.
pub fn mask_mean(values: &[f32], threshold: f64) -> Result<(f64, usize)> {
    let (sum, count) = values
        .iter()
        .filter(|&&v| v as f64 > threshold)
        .fold((0.0f64, 0usize), |(s, c), &v| (s + v as f64, c + 1));
    if count == 0 {
        return Err(NoiseError::EmptyMask(threshold));
    }
    Ok((sum / count as f64, count))
}

/// Poisson coefficient of variation `1 / sqrt(m)`.
pub fn cov(mean_counts: f64) -> Result<f64> {
    if !(mean_counts > 0.0) || !mean_counts.is_finite() {
        return Err(NoiseError::Parameter(format!(
            "mean counts must be positive, got {mean_counts}"
        )));
    }
    Ok(1.0 / mean_counts.sqrt())
}

const LUMP_EPS: f64 = 1e-6;

/// Relative variability (population std / mean) of voxels at or below the threshold.
pub fn background_lumpiness(values: &[f32], threshold: f64) -> Result<f64> {
    let bg: Vec<f64> = values
        .iter()
        .map(|&v| v as f64)
        .filter(|&v| v <= threshold)
        .collect();
    if bg.len() < 2 {
        return Err(NoiseError::EmptyBackground(threshold));
    }
    let n = bg.len() as f64;
    let mean = bg.iter().sum::<f64>() / n;
    let var = bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(0.0);
    }
    Ok(var.sqrt() / mean.abs().max(LUMP_EPS))
}

pub fn classify_bin(cov: f64, lumpiness: f64, config: &BinningConfig) -> NoiseBin {
    let high = cov >= config.cov_split;
    let lumpy = lumpiness >= config.lump_split;
    match (high, lumpy) {
        (true, false) => NoiseBin::HighNoiseClean,
        (false, false) => NoiseBin::LowNoiseClean,
        (true, true) => NoiseBin::HighNoiseLumpy,
        (false, true) => NoiseBin::LowNoiseLumpy,
    }
}

/// Standardized `ln(cov)`.
pub fn embed_scalar(cov: f64, stats: &EmbedStats) -> Result<f64> {
    if !(cov > 0.0) || !cov.is_finite() {
        return Err(NoiseError::Parameter(format!(
            "cov must be positive, got {cov}"
        )));
    }
    Ok((cov.ln() - stats.mu_logcov) / stats.sigma_logcov)
}

/// Full descriptor of a counts-domain patch.
pub fn describe_patch(
    counts: &[f32],
    config: &BinningConfig,
    stats: &EmbedStats,
) -> Result<NoiseDescriptor> {
    config.validate()?;
    let otsu = otsu_threshold(counts, config.histogram_bins)?;
    let (m, mask_voxel_count) = mask_mean(counts, otsu)?;
    let c = cov(m)?;
    let lumpiness = background_lumpiness(counts, otsu)?;
    Ok(NoiseDescriptor {
        otsu_threshold: otsu,
        mask_voxel_count,
        mask_mean_counts: m,
        cov: c,
        lumpiness,
        bin: classify_bin(c, lumpiness, config),
        embed_scalar: embed_scalar(c, stats)?,
    })
}

/// Median of finite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}
