//! Volume and patch data model.
//!
//! Voxels are stored as `f32` in x-fastest order (then y, then z). The on-disk
//! NVOL layout is little-endian:
//!
//! ```text
//! "NVOL" 0x01 | u32 nx ny nz | f32 sx sy sz | u8 domain | f32 counts_per_suv | f32 * nx*ny*nz
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noisequant::NoiseDescriptor;

pub const NVOL_MAGIC: &[u8; 4] = b"NVOL";
pub const NVOL_VERSION: u8 = 0x01;
pub const NVOL_HEADER_LEN: usize = 4 + 1 + 12 + 12 + 1 + 4;

pub type Dims = [usize; 3];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("voxel {index:?} is not covered by any patch")]
    Coverage { index: Dims },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Value domain of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Counts,
    Suv,
}

impl Domain {
    fn code(self) -> u8 {
        match self {
            Domain::Counts => 0,
            Domain::Suv => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Domain::Counts),
            1 => Some(Domain::Suv),
            _ => None,
        }
    }
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// A 3D grid of voxel values with geometry and calibration metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxel_size: [f32; 3],
    domain: Domain,
    counts_per_suv: f32,
    values: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: Dims,
        voxel_size: [f32; 3],
        domain: Domain,
        counts_per_suv: f32,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!(
                "dims must be >= 1, got {dims:?}"
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        if !(counts_per_suv > 0.0 && counts_per_suv.is_finite()) {
            return Err(VolumeError::Invalid(format!(
                "counts_per_suv must be positive, got {counts_per_suv}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(VolumeError::Invalid(format!(
                "expected {n} values for dims {dims:?}, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid(format!(
                "non-finite value at voxel {i}"
            )));
        }
        if domain == Domain::Counts {
            if let Some(i) = values.iter().position(|&v| v < 0.0) {
                return Err(VolumeError::Invalid(format!(
                    "negative count {} at voxel {i}",
                    values[i]
                )));
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            domain,
            counts_per_suv,
            values,
        })
    }

    /// Counts-domain volume with calibration factor 1.
    pub fn counts(dims: Dims, voxel_size: [f32; 3], values: Vec<f32>) -> Result<Self> {
        Self::new(dims, voxel_size, Domain::Counts, 1.0, values)
    }

    pub fn filled(dims: Dims, voxel_size: [f32; 3], value: f32) -> Result<Self> {
        Self::counts(dims, voxel_size, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn counts_per_suv(&self) -> f32 {
        self.counts_per_suv
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[linear_index(self.dims, x, y, z)]
    }

    /// Same geometry and calibration, new values (validated).
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(
            self.dims,
            self.voxel_size,
            self.domain,
            self.counts_per_suv,
            values,
        )
    }

    /// Same geometry, explicit domain and calibration.
    pub fn with_domain(
        &self,
        domain: Domain,
        counts_per_suv: f32,
        values: Vec<f32>,
    ) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, domain, counts_per_suv, values)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Values converted to expected counts through the calibration factor.
    pub fn to_counts(&self) -> Vec<f32> {
        match self.domain {
            Domain::Counts => self.values.clone(),
            Domain::Suv => self
                .values
                .iter()
                .map(|v| v * self.counts_per_suv)
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NVOL_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(NVOL_MAGIC);
        out.push(NVOL_VERSION);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.voxel_size {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.domain.code());
        out.extend_from_slice(&self.counts_per_suv.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NVOL_HEADER_LEN {
            return Err(VolumeError::Truncated {
                offset: bytes.len(),
                expected: NVOL_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != NVOL_MAGIC {
            return Err(VolumeError::Format {
                offset: 0,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
            });
        }
        if bytes[4] != NVOL_VERSION {
            return Err(VolumeError::Format {
                offset: 4,
                reason: format!("unsupported version {}", bytes[4]),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(5) as usize, u32_at(9) as usize, u32_at(13) as usize];
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(VolumeError::Format {
                offset: 5 + 4 * axis,
                reason: "zero dimension".into(),
            });
        }
        let voxel_size = [f32_at(17), f32_at(21), f32_at(25)];
        if let Some(axis) = voxel_size.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Format {
                offset: 17 + 4 * axis,
                reason: format!("invalid voxel size {}", voxel_size[axis]),
            });
        }
        let domain = Domain::from_code(bytes[29]).ok_or_else(|| VolumeError::Format {
            offset: 29,
            reason: format!("unknown domain code {}", bytes[29]),
        })?;
        let counts_per_suv = f32_at(30);
        if !(counts_per_suv > 0.0 && counts_per_suv.is_finite()) {
            return Err(VolumeError::Format {
                offset: 30,
                reason: format!("invalid counts_per_suv {counts_per_suv}"),
            });
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| VolumeError::Format {
                offset: 5,
                reason: "dims overflow".into(),
            })?;
        let payload = &bytes[NVOL_HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(VolumeError::Truncated {
                offset: NVOL_HEADER_LEN,
                expected: 4 * n,
                found: payload.len(),
            });
        }
        let mut values = Vec::with_capacity(n);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(VolumeError::Format {
                    offset: NVOL_HEADER_LEN + 4 * i,
                    reason: format!("non-finite voxel value {v}"),
                });
            }
            values.push(v);
        }
        Self::new(dims, voxel_size, domain, counts_per_suv, values).map_err(|e| {
            VolumeError::Format {
                offset: NVOL_HEADER_LEN,
                reason: e.to_string(),
            }
        })
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = fs::read(path)?;
    Volume::from_bytes(&bytes)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&v.to_bytes())?;
    Ok(())
}

/// A cubic sub-volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: Dims,
    pub size: usize,
    pub values: Vec<f32>,
    pub descriptor: Option<NoiseDescriptor>,
}

impl Patch {
    pub fn new(origin: Dims, size: usize, values: Vec<f32>) -> Result<Self> {
        if size == 0 || values.len() != size * size * size {
            return Err(VolumeError::Geometry(format!(
                "patch of edge {size} needs {} values, got {}",
                size * size * size,
                values.len()
            )));
        }
        Ok(Self {
            origin,
            size,
            values,
            descriptor: None,
        })
    }

    pub fn dims(&self) -> Dims {
        [self.size; 3]
    }
}

/// Copies the cube of edge `p` at `origin` out of `v`.
pub fn crop(v: &Volume, origin: Dims, p: usize) -> Result<Patch> {
    let dims = v.dims();
    for axis in 0..3 {
        if origin[axis] + p > dims[axis] {
            return Err(VolumeError::Geometry(format!(
                "patch at {origin:?} with edge {p} exceeds dims {dims:?}"
            )));
        }
    }
    let mut values = Vec::with_capacity(p * p * p);
    for z in 0..p {
        for y in 0..p {
            let start = linear_index(dims, origin[0], origin[1] + y, origin[2] + z);
            values.extend_from_slice(&v.values()[start..start + p]);
        }
    }
    Patch::new(origin, p, values)
}

/// Origins `0, stride, 2*stride, ...` with `origin + p <= dim`. With `clamp_last`
/// an extra origin `dim - p` is appended when the regular grid leaves a gap at the edge.
pub fn axis_origins(dim: usize, p: usize, stride: usize, clamp_last: bool) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=(dim - p) / stride).map(|k| k * stride).collect();
    if clamp_last && *out.last().unwrap() + p < dim {
        out.push(dim - p);
    }
    out
}

fn check_patch_geometry(dims: Dims, p: usize, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(VolumeError::Geometry("stride must be >= 1".into()));
    }
    if p == 0 || dims.iter().any(|&d| p > d) {
        return Err(VolumeError::Geometry(format!(
            "patch edge {p} does not fit dims {dims:?}"
        )));
    }
    Ok(())
}

fn grid_patches(v: &Volume, p: usize, stride: usize, clamp_last: bool) -> Result<Vec<Patch>> {
    let dims = v.dims();
    check_patch_geometry(dims, p, stride)?;
    let [ox, oy, oz] = [0, 1, 2].map(|a| axis_origins(dims[a], p, stride, clamp_last));
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push(crop(v, [x, y, z], p)?);
            }
        }
    }
    Ok(out)
}

/// Regular tiling at origins `{0, stride, ...}` per axis, x-fastest order.
pub fn extract_patches(v: &Volume, p: usize, stride: usize) -> Result<Vec<Patch>> {
    grid_patches(v, p, stride, false)
}

/// Like [`extract_patches`], but the final origin on each axis is clamped so
/// that every voxel is covered.
pub fn extract_covering_patches(v: &Volume, p: usize, stride: usize) -> Result<Vec<Patch>> {
    grid_patches(v, p, stride, true)
}

/// Averages overlapping patch values back onto the grid of `like`.
pub fn reassemble(patches: &[Patch], like: &Volume) -> Result<Volume> {
    let dims = like.dims();
    let n = dims[0] * dims[1] * dims[2];
    let mut sum = vec![0.0f64; n];
    let mut hits = vec![0u32; n];
    for patch in patches {
        let p = patch.size;
        if patch.values.len() != p * p * p || (0..3).any(|a| patch.origin[a] + p > dims[a]) {
            return Err(VolumeError::Geometry(format!(
                "patch at {:?} with edge {p} does not fit dims {dims:?}",
                patch.origin
            )));
        }
        let mut k = 0;
        for z in 0..p {
            for y in 0..p {
                let row = linear_index(
                    dims,
                    patch.origin[0],
                    patch.origin[1] + y,
                    patch.origin[2] + z,
                );
                for x in 0..p {
                    sum[row + x] += patch.values[k] as f64;
                    hits[row + x] += 1;
                    k += 1;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        return Err(VolumeError::Coverage { index: [x, y, z] });
    }
    let values = sum
        .iter()
        .zip(&hits)
        .map(|(&s, &h)| (s / h as f64) as f32)
        .collect();
    like.with_values(values)
}

/// Counts-to-SUV conversion. `sensitivity` is counts per (MBq/kg).
pub fn suv_normalize(v: &Volume, aa_mbq: f64, weight_kg: f64, sensitivity: f64) -> Result<Volume> {
    if v.domain() != Domain::Counts {
        return Err(VolumeError::Parameter("volume is already in SUV".into()));
    }
    for (name, val) in [
        ("aa", aa_mbq),
        ("weight", weight_kg),
        ("sensitivity", sensitivity),
    ] {
        if !(val > 0.0 && val.is_finite()) {
            return Err(VolumeError::Parameter(format!(
                "{name} must be positive, got {val}"
            )));
        }
    }
    let factor = sensitivity * aa_mbq / weight_kg;
    let values = v
        .values()
        .iter()
        .map(|&c| (c as f64 / factor) as f32)
        .collect();
    v.with_domain(Domain::Suv, factor as f32, values)
}

/// Which axes a flip reflected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    pub x: bool,
    pub y: bool,
}

impl Flips {
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            x: rng.random_bool(0.5),
            y: rng.random_bool(0.5),
        }
    }
}

/// Reflects a cubic patch's values in place.
pub fn apply_flips(values: &mut [f32], size: usize, flips: Flips) {
    let p = size;
    if flips.x {
        for row in values.chunks_exact_mut(p) {
            row.reverse();
        }
    }
    if flips.y {
        for slab in values.chunks_exact_mut(p * p) {
            for y in 0..p / 2 {
                let (a, b) = slab.split_at_mut((p - 1 - y) * p);
                a[y * p..y * p + p].swap_with_slice(&mut b[..p]);
            }
        }
    }
}

/// Random x/y reflection applied identically to an input/target pair.
pub fn flip_augment(input: &Patch, target: &Patch, seed: u64) -> Result<(Patch, Patch)> {
    if input.size != target.size {
        return Err(VolumeError::Geometry(format!(
            "input edge {} != target edge {}",
            input.size, target.size
        )));
    }
    let flips = Flips::draw(seed);
    let mut a = input.clone();
    let mut b = target.clone();
    apply_flips(&mut a.values, a.size, flips);
    apply_flips(&mut b.values, b.size, flips);
    Ok((a, b))
}
