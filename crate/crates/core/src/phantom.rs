//! Synthetic activity phantoms and count simulation.
//!
//! A phantom is a noiseless map of expected counts per voxel. One Poisson
//! realization plays the role of the full-activity acquisition; lower activity
//! fractions are produced by binomial thinning of that same realization, which
//! keeps each pair statistically consistent (Poisson(λ) thinned by `f` is
//! Poisson(fλ)). A separable Gaussian blur stands in for reconstruction.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, rng, stream_rng};
use crate::volgrid::{linear_index, Dims, Domain, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    /// Center in voxel coordinates.
    pub center: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
    /// Multiplier applied to the background rate inside the sphere.
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LumpyBlobs {
    pub count: usize,
    /// Peak added rate of each Gaussian bump, in counts.
    pub amplitude: f64,
    /// Bump standard deviation in voxels.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    /// Expected counts per background voxel.
    pub background_rate: f64,
    /// Background multipliers for equal slabs along z (a single `1.0` means untiered).
    #[serde(default = "default_tiers")]
    pub region_tiers: Vec<f64>,
    #[serde(default)]
    pub spheres: Vec<Sphere>,
    #[serde(default)]
    pub lumpy_blobs: LumpyBlobs,
    pub seed: u64,
}

fn default_tiers() -> Vec<f64> {
    vec![1.0]
}

impl PhantomSpec {
    pub fn uniform(dims: Dims, voxel_size: [f32; 3], background_rate: f64, seed: u64) -> Self {
        Self {
            dims,
            voxel_size,
            background_rate,
            region_tiers: default_tiers(),
            spheres: Vec::new(),
            lumpy_blobs: LumpyBlobs::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(PhantomError::Spec("dims must be >= 1".into()));
        }
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(PhantomError::Spec("voxel_size must be positive".into()));
        }
        if !(self.background_rate > 0.0 && self.background_rate.is_finite()) {
            return Err(PhantomError::Spec(
                "background_rate must be positive".into(),
            ));
        }
        if self.region_tiers.is_empty() || self.region_tiers.iter().any(|&t| !(t > 0.0)) {
            return Err(PhantomError::Spec(
                "region_tiers must be non-empty and positive".into(),
            ));
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.contrast > 0.0) || !(s.radius > 0.0) {
                return Err(PhantomError::Spec(format!(
                    "sphere {i}: radius and contrast must be positive"
                )));
            }
            for a in 0..3 {
                if s.center[a] < 0.0 || s.center[a] > (self.dims[a] - 1) as f64 {
                    return Err(PhantomError::Spec(format!(
                        "sphere {i} center outside dims"
                    )));
                }
            }
        }
        let b = &self.lumpy_blobs;
        if !(b.amplitude >= 0.0) || (b.count > 0 && !(b.width > 0.0)) {
            return Err(PhantomError::Spec(
                "lumpy blobs need amplitude >= 0 and width > 0".into(),
            ));
        }
        Ok(())
    }

    /// A randomized desk-scale phantom: tiered background, a few hot spheres,
    /// and (for odd `index`) a lumpy background.
    pub fn desk(index: usize, dims: Dims, voxel_size: [f32; 3], seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, index as u64));
        let background_rate = r.random_range(24.0..48.0);
        let n_spheres = r.random_range(3..=6);
        let min_dim = dims.iter().copied().min().unwrap() as f64;
        let spheres = (0..n_spheres)
            .map(|_| {
                let radius = r.random_range(0.04 * min_dim..0.1 * min_dim).max(1.0);
                let center = [0, 1, 2].map(|a| {
                    let hi = (dims[a] as f64 - 1.0 - radius).max(radius);
                    r.random_range(radius.min(hi)..=hi)
                });
                Sphere {
                    center,
                    radius,
                    contrast: r.random_range(2.0..8.0),
                }
            })
            .collect();
        let lumpy_blobs = if index % 2 == 1 {
            LumpyBlobs {
                count: (dims[0] * dims[1] * dims[2]) / 4096 + 8,
                amplitude: background_rate * r.random_range(0.5..1.5),
                width: r.random_range(0.04 * min_dim..0.08 * min_dim).max(1.0),
            }
        } else {
            LumpyBlobs::default()
        };
        Self {
            dims,
            voxel_size,
            background_rate,
            region_tiers: vec![1.0, 2.5, 6.0],
            spheres,
            lumpy_blobs,
            seed: derive_seed(seed, 1000 + index as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountSimConfig {
    pub fractions: Vec<f64>,
    pub psf_fwhm_mm: f64,
    pub seed: u64,
    /// Administered activity of the full acquisition.
    pub aa_mbq: f64,
    pub weight_kg: f64,
    /// Counts per (MBq/kg) at full activity.
    pub sensitivity: f64,
}

impl Default for CountSimConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.125, 0.25, 1.0],
            psf_fwhm_mm: 4.0,
            seed: 0,
            aa_mbq: 400.0,
            weight_kg: 80.0,
            sensitivity: 8.0,
        }
    }
}

impl CountSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(PhantomError::Parameter(
                "fractions must not be empty".into(),
            ));
        }
        if let Some(f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(PhantomError::Parameter(format!(
                "fraction {f} outside (0, 1]"
            )));
        }
        if !(self.psf_fwhm_mm >= 0.0) {
            return Err(PhantomError::Parameter("psf_fwhm_mm must be >= 0".into()));
        }
        for (name, v) in [
            ("aa_mbq", self.aa_mbq),
            ("weight_kg", self.weight_kg),
            ("sensitivity", self.sensitivity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhantomError::Parameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Noiseless expected counts.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = spec.dims;
    let mut r = rng(spec.seed);
    let blobs: Vec<[f64; 3]> = (0..spec.lumpy_blobs.count)
        .map(|_| [0, 1, 2].map(|a| r.random_range(0.0..dims[a] as f64)))
        .collect();
    let tiers = &spec.region_tiers;
    let b = spec.lumpy_blobs;
    let reach = if b.count > 0 { 4.0 * b.width } else { 0.0 };
    let mut values = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    values
        .par_chunks_mut(dims[0] * dims[1])
        .enumerate()
        .for_each(|(z, slab)| {
            let tier = tiers[(z * tiers.len() / dims[2]).min(tiers.len() - 1)];
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x as f64, y as f64, z as f64];
                    let mut rate = spec.background_rate * tier;
                    for s in &spec.spheres {
                        if dist2(p, s.center) <= s.radius * s.radius {
                            rate *= s.contrast;
                        }
                    }
                    for c in &blobs {
                        let d2 = dist2(p, *c);
                        if d2 <= reach * reach {
                            rate += b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp();
                        }
                    }
                    slab[x + dims[0] * y] = rate as f32;
                }
            }
        });
    if values.iter().any(|&v| !(v >= 0.0)) {
        return Err(PhantomError::Spec("composed rate is negative".into()));
    }
    Ok(Volume::counts(dims, spec.voxel_size, values)?)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Applies `f` to each z-slab with its own ChaCha stream, so the output is
/// independent of how slabs are distributed across threads.
fn per_slab<F>(v: &Volume, seed: u64, f: F) -> Result<Volume>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, f32) -> Result<f32> + Sync,
{
    let dims = v.dims();
    let slab = dims[0] * dims[1];
    let out: Result<Vec<Vec<f32>>> = v
        .values()
        .par_chunks(slab)
        .enumerate()
        .map(|(z, src)| {
            let mut r = stream_rng(seed, z as u64);
            src.iter().map(|&x| f(&mut r, x)).collect()
        })
        .collect();
    let values = out?.concat();
    Ok(v.with_domain(Domain::Counts, 1.0, values)?)
}

/// Independent Poisson draw per voxel.
pub fn sample_counts(lambda: &Volume, seed: u64) -> Result<Volume> {
    if let Some(bad) = lambda.values().iter().find(|&&l| !(l >= 0.0)) {
        return Err(PhantomError::Domain(format!("negative rate {bad}")));
    }
    per_slab(lambda, seed, |r, l| {
        if l == 0.0 {
            return Ok(0.0);
        }
        let d = Poisson::new(l as f64).map_err(|e| PhantomError::Domain(e.to_string()))?;
        Ok(d.sample(r) as f32)
    })
}

/// Keeps each count independently with probability `f`.
pub fn thin_counts(counts: &Volume, f: f64, seed: u64) -> Result<Volume> {
    if !(0.0..=1.0).contains(&f) {
        return Err(PhantomError::Parameter(format!(
            "fraction {f} outside [0, 1]"
        )));
    }
    if let Some(bad) = counts
        .values()
        .iter()
        .find(|&&c| !(c >= 0.0) || c.fract() != 0.0)
    {
        return Err(PhantomError::Domain(format!(
            "non-integer or negative count {bad}"
        )));
    }
    per_slab(counts, seed, |r, c| {
        let d = Binomial::new(c as u64, f).map_err(|e| PhantomError::Parameter(e.to_string()))?;
        Ok(d.sample(r) as f32)
    })
}

/// Truncated (at 3σ) and renormalized 1D Gaussian weights for `sigma` voxels.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub const FWHM_TO_SIGMA: f64 = 2.3548;

/// Separable Gaussian PSF blur with symmetric boundary reflection, which keeps
/// both constants and total counts unchanged.
pub fn recon_surrogate(v: &Volume, psf_fwhm_mm: f64) -> Result<Volume> {
    if !(psf_fwhm_mm >= 0.0) {
        return Err(PhantomError::Parameter("psf_fwhm_mm must be >= 0".into()));
    }
    if psf_fwhm_mm == 0.0 {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let vs = v.voxel_size();
    let mut data: Vec<f64> = v.values().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let sigma = psf_fwhm_mm / FWHM_TO_SIGMA / vs[axis] as f64;
        let kernel = gaussian_kernel(sigma);
        if kernel.len() > 1 {
            data = blur_axis(&data, dims, axis, &kernel);
        }
    }
    Ok(v.with_values(data.into_iter().map(|x| x as f32).collect())?)
}

fn blur_axis(data: &[f64], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let slab = dims[0] * dims[1];
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(z, dst)| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [x, y, z][axis] as i64;
                let base = linear_index(dims, x, y, z) - pos as usize * stride;
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = reflect(pos + k as i64 - radius, n);
                    acc += w * data[base + j * stride];
                }
                dst[x + dims[0] * y] = acc;
            }
        }
    });
    out
}

/// Unblurred realizations: the full-count draw and its thinned fractions.
#[derive(Debug, Clone)]
pub struct RawCounts {
    pub lambda: Volume,
    pub full: Volume,
    pub fractions: Vec<(f64, Volume)>,
}

pub fn simulate_counts(spec: &PhantomSpec, sim: &CountSimConfig) -> Result<RawCounts> {
    sim.validate()?;
    let lambda = generate_phantom(spec)?;
    let full = sample_counts(&lambda, derive_seed(sim.seed, 0))?;
    let fractions = sim
        .fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let v = if f == 1.0 {
                full.clone()
            } else {
                thin_counts(&full, f, derive_seed(sim.seed, 1 + i as u64))?
            };
            Ok((f, v))
        })
        .collect::<Result<_>>()?;
    Ok(RawCounts {
        lambda,
        full,
        fractions,
    })
}

/// Blurred paired volumes in the counts domain.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    /// Blurred noiseless expected counts at full activity.
    pub reference: Volume,
    pub full: Volume,
    pub fractions: Vec<(f64, Volume)>,
}

impl PairedDataset {
    pub fn fraction(&self, f: f64) -> Option<&Volume> {
        self.fractions.iter().find(|(g, _)| *g == f).map(|(_, v)| v)
    }
}

pub fn make_paired_dataset(spec: &PhantomSpec, sim: &CountSimConfig) -> Result<PairedDataset> {
    let raw = simulate_counts(spec, sim)?;
    let blur = |v: &Volume| recon_surrogate(v, sim.psf_fwhm_mm);
    Ok(PairedDataset {
        reference: blur(&raw.lambda)?,
        full: blur(&raw.full)?,
        fractions: raw
            .fractions
            .iter()
            .map(|(f, v)| Ok((*f, blur(v)?)))
            .collect::<Result<_>>()?,
    })
}

/// SUV normalization for a volume acquired at activity fraction `f`.
pub fn to_suv(v: &Volume, f: f64, sim: &CountSimConfig) -> Result<Volume> {
    Ok(crate::volgrid::suv_normalize(
        v,
        f * sim.aa_mbq,
        sim.weight_kg,
        sim.sensitivity,
    )?)
}

/// File stem used for a fraction in dataset directories (`f0125`, `f025`, ...).
pub fn fraction_stem(f: f64) -> String {
    if f == 1.0 {
        return "full".into();
    }
    let digits = format!("{f}");
    format!("f{}", digits.replace('.', ""))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vox() -> [f32; 3] {
        [2.5; 3]
    }

    #[test]
    fn uniform_phantom_is_constant() {
        let v = generate_phantom(&PhantomSpec::uniform([5, 4, 3], vox(), 5.0, 1)).unwrap();
        assert!(v.values().iter().all(|&x| x == 5.0));
    }

    #[test]
    fn sphere_multiplies_background() {
        let mut spec = PhantomSpec::uniform([9, 9, 9], vox(), 5.0, 1);
        spec.spheres.push(Sphere {
            center: [4.0, 4.0, 4.0],
            radius: 2.0,
            contrast: 4.0,
        });
        let v = generate_phantom(&spec).unwrap();
        assert_eq!(v.get(4, 4, 4), 20.0);
        assert_eq!(v.get(0, 0, 0), 5.0);
    }

    #[test]
    fn phantom_is_seed_deterministic() {
        let spec = PhantomSpec::desk(3, [24, 24, 24], vox(), 11);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = PhantomSpec::uniform([4, 4, 4], vox(), 5.0, 1);
        spec.spheres.push(Sphere {
            center: [9.0, 1.0, 1.0],
            radius: 1.0,
            contrast: 2.0,
        });
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::Spec(_))
        ));
        let mut spec = PhantomSpec::uniform([4, 4, 4], vox(), 5.0, 1);
        spec.lumpy_blobs = LumpyBlobs {
            count: 2,
            amplitude: -1.0,
            width: 1.0,
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn poisson_of_zero_is_zero() {
        let v = Volume::filled([4, 4, 4], vox(), 0.0).unwrap();
        let c = sample_counts(&v, 3).unwrap();
        assert!(c.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_rate_rejected() {
        let v = Volume::new([2, 1, 1], vox(), Domain::Suv, 1.0, vec![1.0, -1.0]).unwrap();
        assert!(matches!(sample_counts(&v, 0), Err(PhantomError::Domain(_))));
    }

    #[test]
    fn poisson_moments_large_sample() {
        let v = Volume::filled([100, 100, 100], vox(), 5.0).unwrap();
        let c = sample_counts(&v, 42).unwrap();
        let n = c.len() as f64;
        let mean = c.sum() / n;
        let var = c
            .values()
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((mean - 5.0).abs() / 5.0 < 0.01, "mean {mean}");
        assert!((var - 5.0).abs() / 5.0 < 0.03, "var {var}");

        let v = Volume::filled([100, 100, 100], vox(), 100.0).unwrap();
        let c = sample_counts(&v, 43).unwrap();
        let mean = c.sum() / n;
        let sd = (c
            .values()
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt();
        assert!((sd / mean - 0.1).abs() / 0.1 < 0.05);
    }

    #[test]
    fn thinning_edge_fractions() {
        let lambda = Volume::filled([20, 20, 20], vox(), 7.0).unwrap();
        let c = sample_counts(&lambda, 1).unwrap();
        assert_eq!(thin_counts(&c, 1.0, 5).unwrap().values(), c.values());
        assert!(thin_counts(&c, 0.0, 5)
            .unwrap()
            .values()
            .iter()
            .all(|&x| x == 0.0));
        assert!(matches!(
            thin_counts(&c, 1.5, 5),
            Err(PhantomError::Parameter(_))
        ));
        assert!(thin_counts(&c, -0.1, 5).is_err());
    }

    #[test]
    fn thinning_total_matches_expectation() {
        let lambda = Volume::filled([50, 50, 40], vox(), 10.0).unwrap();
        let c = sample_counts(&lambda, 2).unwrap();
        let total = c.sum();
        assert!(total >= 1e6);
        let t = thin_counts(&c, 0.125, 3).unwrap();
        assert!((t.sum() - total / 8.0).abs() / (total / 8.0) < 0.01);
        assert!(t.values().iter().zip(c.values()).all(|(a, b)| a <= b));
    }

    #[test]
    fn blur_identity_and_dc() {
        let mut rng_ = rng(5);
        let vals: Vec<f32> = (0..6 * 7 * 8)
            .map(|_| rng_.random_range(0.0..9.0))
            .collect();
        let v = Volume::counts([6, 7, 8], vox(), vals).unwrap();
        assert_eq!(recon_surrogate(&v, 0.0).unwrap(), v);
        let c = Volume::filled([6, 7, 8], vox(), 3.25).unwrap();
        let b = recon_surrogate(&c, 6.0).unwrap();
        assert!(b.values().iter().all(|&x| (x - 3.25).abs() < 1e-5));
        let bv = recon_surrogate(&v, 4.0).unwrap();
        assert!((bv.sum() - v.sum()).abs() / v.sum() < 1e-4);
    }

    #[test]
    fn impulse_matches_dense_oracle() {
        let dims = [15, 15, 15];
        let vs = [2.0f32, 2.5, 3.0];
        let mut vals = vec![0.0f32; 15 * 15 * 15];
        vals[linear_index(dims, 7, 7, 7)] = 1.0;
        let v = Volume::counts(dims, vs, vals.clone()).unwrap();
        let fwhm = 5.0;
        let out = recon_surrogate(&v, fwhm).unwrap();
        // dense 3D kernel built independently from per-axis truncated Gaussians
        let kern = |s: f64| {
            let sigma = fwhm / 2.3548 / s;
            let r = (3.0 * sigma).ceil() as i64;
            let raw: Vec<(i64, f64)> = (-r..=r)
                .map(|k| (k, (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp()))
                .collect();
            let tot: f64 = raw.iter().map(|p| p.1).sum();
            raw.into_iter()
                .map(|(k, w)| (k, w / tot))
                .collect::<Vec<_>>()
        };
        let (kx, ky, kz) = (kern(2.0), kern(2.5), kern(3.0));
        for z in 0..15i64 {
            for y in 0..15i64 {
                for x in 0..15i64 {
                    let mut acc = 0.0;
                    for &(a, wa) in &kx {
                        for &(b, wb) in &ky {
                            for &(c, wc) in &kz {
                                let (sx, sy, sz) = (x + a, y + b, z + c);
                                if (0..15).contains(&sx)
                                    && (0..15).contains(&sy)
                                    && (0..15).contains(&sz)
                                {
                                    acc += wa
                                        * wb
                                        * wc
                                        * vals[(sx + 15 * (sy + 15 * sz)) as usize] as f64;
                                }
                            }
                        }
                    }
                    let got = out.get(x as usize, y as usize, z as usize) as f64;
                    assert!((got - acc).abs() < 1e-6, "({x},{y},{z}) {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn paired_dataset_contracts() {
        let spec = PhantomSpec::desk(1, [40, 40, 40], vox(), 3);
        let sim = CountSimConfig {
            fractions: vec![1.0],
            seed: 7,
            ..Default::default()
        };
        let raw = simulate_counts(&spec, &sim).unwrap();
        let ds = make_paired_dataset(&spec, &sim).unwrap();
        let blurred = recon_surrogate(&raw.full, sim.psf_fwhm_mm).unwrap();
        assert_eq!(ds.fraction(1.0).unwrap(), &blurred);
        assert_eq!(ds.full, blurred);

        let sim = CountSimConfig {
            seed: 7,
            ..Default::default()
        };
        let a = make_paired_dataset(&spec, &sim).unwrap();
        let b = make_paired_dataset(&spec, &sim).unwrap();
        assert_eq!(
            a.fraction(0.25).unwrap().to_bytes(),
            b.fraction(0.25).unwrap().to_bytes()
        );
        let full_total = a.full.sum();
        let quarter = a.fraction(0.25).unwrap().sum();
        assert!(full_total > 1e6);
        assert!((quarter - full_total / 4.0).abs() / (full_total / 4.0) < 0.01);
        let raw = simulate_counts(&spec, &sim).unwrap();
        for (_, v) in &raw.fractions {
            assert!(v
                .values()
                .iter()
                .zip(raw.full.values())
                .all(|(t, f)| t <= f));
        }
    }

    #[test]
    fn fraction_stems() {
        assert_eq!(fraction_stem(0.125), "f0125");
        assert_eq!(fraction_stem(0.25), "f025");
        assert_eq!(fraction_stem(1.0), "full");
    }

    #[test]
    fn sim_config_rejects_bad_fraction() {
        let sim = CountSimConfig {
            fractions: vec![1.5],
            ..Default::default()
        };
        assert!(matches!(sim.validate(), Err(PhantomError::Parameter(_))));
    }
}
