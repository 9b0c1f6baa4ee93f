//! The declarative experiment document.

use std::path::{Path, PathBuf};

use nle_core::evalstat::{PsnrPeak, SsimConfig};
use nle_core::nlenet::ModelConfig;
use nle_core::noisequant::BinningConfig;
use nle_core::phantom::{CountSimConfig, PhantomSpec};
use nle_core::seeding::derive_seed;
use nle_core::train::TrainConfig;
use nle_core::volgrid::Dims;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSet {
    /// Number of randomized desk phantoms; ignored when `specs` is given.
    pub count: usize,
    /// The first `train` phantoms form the training split, the rest the test split.
    pub train: usize,
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    pub specs: Option<Vec<PhantomSpec>>,
}

impl Default for PhantomSet {
    fn default() -> Self {
        Self {
            count: 20,
            train: 16,
            dims: [64; 3],
            voxel_size: [2.5; 3],
            specs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchOptions {
    /// Count fraction used as network input; the full-count volume is the target.
    pub input_fraction: f64,
    pub stride: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            input_fraction: 0.125,
            stride: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Sliding-window stride used by `denoise`.
    pub stride: usize,
    pub peak: PsnrPeak,
    pub ssim: SsimConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stride: 16,
            peak: PsnrPeak::RefMax,
            ssim: SsimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; phantom, simulation and training seeds are derived from it.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub phantoms: PhantomSet,
    pub sim: CountSimConfig,
    pub binning: BinningConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub patches: PatchOptions,
    pub eval: EvalOptions,
}

const PHANTOM_STREAM: u64 = 10;
const SIM_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;

fn check(ok: bool, field: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {msg}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ph = &self.phantoms;
        let n = self.phantom_count();
        check(n >= 1, "phantoms.count", "at least one phantom is required")?;
        check(
            ph.train <= n,
            "phantoms.train",
            format!("{} exceeds the {n} phantoms", ph.train),
        )?;
        check(
            ph.dims.iter().all(|&d| d >= 1),
            "phantoms.dims",
            "dimensions must be >= 1",
        )?;
        check(
            ph.voxel_size.iter().all(|&s| s > 0.0 && s.is_finite()),
            "phantoms.voxel_size",
            "must be positive",
        )?;
        if let Some(specs) = &ph.specs {
            for (i, s) in specs.iter().enumerate() {
                s.validate()
                    .map_err(|e| CliError::Config(format!("phantoms.specs[{i}]: {e}")))?;
            }
        }
        let sim = &self.sim;
        check(
            !sim.fractions.is_empty(),
            "sim.fractions",
            "must not be empty",
        )?;
        for (i, &f) in sim.fractions.iter().enumerate() {
            check(
                f > 0.0 && f <= 1.0,
                &format!("sim.fractions[{i}]"),
                format!("{f} is outside (0, 1]"),
            )?;
        }
        sim.validate()
            .map_err(|e| CliError::Config(format!("sim: {e}")))?;
        self.binning
            .validate()
            .map_err(|e| CliError::Config(format!("binning: {e}")))?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        let p = &self.patches;
        check(
            sim.fractions.contains(&p.input_fraction),
            "patches.input_fraction",
            format!("{} is not one of sim.fractions", p.input_fraction),
        )?;
        check(p.stride >= 1, "patches.stride", "must be >= 1")?;
        check(
            ph.dims.iter().all(|&d| d >= self.train.patch),
            "train.patch",
            format!("{} exceeds phantom dims {:?}", self.train.patch, ph.dims),
        )?;
        check(self.eval.stride >= 1, "eval.stride", "must be >= 1")?;
        Ok(())
    }

    pub fn phantom_count(&self) -> usize {
        match &self.phantoms.specs {
            Some(s) => s.len(),
            None => self.phantoms.count,
        }
    }

    /// Phantom specifications in id order.
    pub fn phantom_specs(&self) -> Vec<PhantomSpec> {
        match &self.phantoms.specs {
            Some(s) => s.clone(),
            None => (0..self.phantoms.count)
                .map(|i| {
                    PhantomSpec::desk(
                        i,
                        self.phantoms.dims,
                        self.phantoms.voxel_size,
                        derive_seed(self.seed, PHANTOM_STREAM),
                    )
                })
                .collect(),
        }
    }

    /// Count simulation settings for phantom `index`.
    pub fn sim_for(&self, index: usize) -> CountSimConfig {
        CountSimConfig {
            seed: derive_seed(derive_seed(self.seed, SIM_STREAM), index as u64),
            ..self.sim.clone()
        }
    }

    /// Training settings with the derived seed and the ablation switch applied.
    pub fn train_for(&self, use_nle: bool) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, TRAIN_STREAM),
            use_nle,
            ..self.train.clone()
        }
    }
}
