//! Simulated phantom datasets and their on-disk layout.
//!
//! ```text
//! <out>/manifest.json
//! <out>/phantom_000/ref.nvol    blurred noiseless activity
//! <out>/phantom_000/full.nvol   full-count realization
//! <out>/phantom_000/f0125.nvol  thinned realizations, one per fraction < 1
//! ```
//! All volumes are stored in SUV with their counts-per-SUV calibration.

use std::fs;
use std::path::{Path, PathBuf};

use nle_core::phantom::{fraction_stem, make_paired_dataset, to_suv, CountSimConfig, PhantomSpec};
use nle_core::volgrid::{load_volume, save_volume, Volume};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const DATASET_FORMAT: &str = "nle-dataset-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomEntry {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
    pub sim: CountSimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub phantoms: Vec<PhantomEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PhantomEntry> {
        self.phantoms.iter().filter(move |p| p.split == split)
    }
}

/// One simulated phantom in SUV.
#[derive(Debug, Clone)]
pub struct SimulatedPhantom {
    pub entry: PhantomEntry,
    pub reference: Volume,
    pub full: Volume,
    /// Fractions below 1, in config order.
    pub fractions: Vec<(f64, Volume)>,
}

impl SimulatedPhantom {
    /// The volume for `stem` (`ref`, `full` or a fraction stem).
    pub fn volume(&self, stem: &str) -> Option<&Volume> {
        match stem {
            "ref" => Some(&self.reference),
            "full" => Some(&self.full),
            s => self
                .fractions
                .iter()
                .find(|(f, _)| fraction_stem(*f) == s)
                .map(|(_, v)| v),
        }
    }
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

pub fn simulate_phantom(entry: PhantomEntry) -> Result<SimulatedPhantom> {
    let d = make_paired_dataset(&entry.spec, &entry.sim)?;
    let sim = &entry.sim;
    let fractions = d
        .fractions
        .iter()
        .filter(|(f, _)| *f < 1.0)
        .map(|(f, v)| Ok((*f, to_suv(v, *f, sim)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedPhantom {
        reference: to_suv(&d.reference, 1.0, sim)?,
        full: to_suv(&d.full, 1.0, sim)?,
        fractions,
        entry,
    })
}

pub fn dataset_manifest(cfg: &ExperimentConfig) -> DatasetManifest {
    let phantoms = cfg
        .phantom_specs()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| PhantomEntry {
            id: phantom_id(i),
            split: if i < cfg.phantoms.train {
                Split::Train
            } else {
                Split::Test
            },
            spec,
            sim: cfg.sim_for(i),
        })
        .collect();
    DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed: cfg.seed,
        fractions: cfg.sim.fractions.clone(),
        phantoms,
    }
}

/// Simulates every phantom of the config in memory.
pub fn simulate_all(cfg: &ExperimentConfig) -> Result<(DatasetManifest, Vec<SimulatedPhantom>)> {
    cfg.validate()?;
    let manifest = dataset_manifest(cfg);
    let phantoms = manifest
        .phantoms
        .iter()
        .map(|e| {
            log::info!("simulating {}", e.id);
            simulate_phantom(e.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, phantoms))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::bad_file(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn volume_path(dir: &Path, id: &str, stem: &str) -> PathBuf {
    dir.join(id).join(format!("{stem}.nvol"))
}

pub fn save(v: &Volume, path: &Path) -> Result<()> {
    save_volume(v, path).map_err(|e| CliError::volume(path, e))
}

pub fn load(path: &Path) -> Result<Volume> {
    load_volume(path).map_err(|e| CliError::volume(path, e))
}

/// `simulate`: writes the dataset directory and returns its manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    let (manifest, phantoms) = simulate_all(cfg)?;
    create_dir(out)?;
    for p in &phantoms {
        create_dir(&out.join(&p.entry.id))?;
        save(&p.reference, &volume_path(out, &p.entry.id, "ref"))?;
        save(&p.full, &volume_path(out, &p.entry.id, "full"))?;
        for (f, v) in &p.fractions {
            save(v, &volume_path(out, &p.entry.id, &fraction_stem(*f)))?;
        }
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if m.format != DATASET_FORMAT {
        return Err(CliError::bad_file(
            dir.join("manifest.json"),
            format!("unknown format {:?}", m.format),
        ));
    }
    Ok(m)
}

/// Loads one volume of a phantom from a dataset directory.
pub fn load_phantom_volume(dir: &Path, id: &str, stem: &str) -> Result<Volume> {
    load(&volume_path(dir, id, stem))
}
