//! Paired training patches with their noise descriptors.
//!
//! A store directory holds `store.json` (settings, embedding statistics, bin
//! counts, exclusions), `descriptors.jsonl` (one record per kept patch) and
//! `patches.bin` (per record: input then target, little-endian f32).

use std::fs;
use std::path::Path;

use nle_core::noisequant::{
    describe_patch, embed_scalar, median, BinningConfig, DescriptorRecord, EmbedStats, NoiseBin,
};
use nle_core::phantom::fraction_stem;
use nle_core::train::PatchPair;
use nle_core::volgrid::{extract_patches, Dims, Volume};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{
    create_dir, load_manifest, load_phantom_volume, read_json, write_json, Split,
};
use crate::error::{CliError, Result};

pub const STORE_FORMAT: &str = "nle-patch-store-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub volume_id: String,
    pub origin: Dims,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCount {
    pub bin: NoiseBin,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub patch: usize,
    pub stride: usize,
    pub input_fraction: f64,
    pub binning: BinningConfig,
    pub embed_stats: EmbedStats,
    /// Median training embedding scalar, used for patches that cannot be described.
    pub fallback_embed: f64,
    pub total: usize,
    pub bin_counts: Vec<BinCount>,
    pub volumes: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone)]
pub struct PatchStore {
    pub manifest: StoreManifest,
    pub records: Vec<DescriptorRecord>,
    pub pairs: Vec<PatchPair>,
}

/// A training volume: its id, the low-count input and the full-count target.
pub struct SourcePair<'a> {
    pub id: &'a str,
    pub input: &'a Volume,
    pub target: &'a Volume,
}

fn patch_id(volume_id: &str, o: Dims) -> String {
    format!("{volume_id}@{},{},{}", o[0], o[1], o[2])
}

/// Extracts paired patches, describes each input patch, and standardizes the
/// embedding scalars with statistics fitted on these patches.
pub fn build_store(
    sources: &[SourcePair],
    patch: usize,
    stride: usize,
    input_fraction: f64,
    binning: BinningConfig,
) -> Result<PatchStore> {
    binning.validate()?;
    let provisional = EmbedStats::new(0.0, 1.0).expect("valid");
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for src in sources {
        if src.input.dims() != src.target.dims() {
            return Err(CliError::Config(format!(
                "{}: input and target dims differ",
                src.id
            )));
        }
        let inputs = extract_patches(src.input, patch, stride)?;
        let targets = extract_patches(src.target, patch, stride)?;
        let scale = src.input.counts_per_suv();
        for (a, b) in inputs.into_iter().zip(targets) {
            let counts: Vec<f32> = a.values.iter().map(|v| v * scale).collect();
            match describe_patch(&counts, &binning, &provisional) {
                Ok(d) => kept.push((
                    DescriptorRecord::new(src.id, a.origin, patch, &d),
                    a.values,
                    b.values,
                )),
                Err(e) => {
                    log::info!("excluding {}: {e}", patch_id(src.id, a.origin));
                    excluded.push(Exclusion {
                        volume_id: src.id.to_string(),
                        origin: a.origin,
                        reason: format!("{e:?}"),
                    });
                }
            }
        }
    }
    if kept.len() < 2 {
        return Err(CliError::Config(format!(
            "only {} usable patches; need at least 2",
            kept.len()
        )));
    }
    let covs: Vec<f64> = kept.iter().map(|(r, _, _)| r.cov).collect();
    let stats = EmbedStats::fit(&covs)?;
    let mut records = Vec::with_capacity(kept.len());
    let mut pairs = Vec::with_capacity(kept.len());
    for (mut r, input, target) in kept {
        r.embed_scalar = embed_scalar(r.cov, &stats)?;
        pairs.push(PatchPair {
            id: patch_id(&r.volume_id, r.origin),
            size: patch,
            input,
            target,
            embed: r.embed_scalar as f32,
            bin: r.bin,
        });
        records.push(r);
    }
    let embeds: Vec<f64> = records.iter().map(|r| r.embed_scalar).collect();
    let bin_counts = NoiseBin::ALL
        .iter()
        .map(|&bin| BinCount {
            bin,
            count: records.iter().filter(|r| r.bin == bin).count(),
        })
        .collect();
    let manifest = StoreManifest {
        format: STORE_FORMAT.into(),
        patch,
        stride,
        input_fraction,
        binning,
        embed_stats: stats,
        fallback_embed: median(&embeds).unwrap_or(0.0),
        total: records.len(),
        bin_counts,
        volumes: sources.iter().map(|s| s.id.to_string()).collect(),
        excluded,
    };
    Ok(PatchStore {
        manifest,
        records,
        pairs,
    })
}

pub fn save_store(store: &PatchStore, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("store.json"), &store.manifest)?;
    let mut lines = String::new();
    for r in &store.records {
        lines.push_str(&serde_json::to_string(r).expect("serializable"));
        lines.push('\n');
    }
    let path = dir.join("descriptors.jsonl");
    fs::write(&path, lines).map_err(|e| CliError::io(&path, e))?;
    let n = store.manifest.patch.pow(3);
    let mut bytes = Vec::with_capacity(store.pairs.len() * n * 8);
    for p in &store.pairs {
        for v in p.input.iter().chain(&p.target) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join("patches.bin");
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
}

pub fn load_store(dir: &Path) -> Result<PatchStore> {
    let mpath = dir.join("store.json");
    let manifest: StoreManifest = read_json(&mpath)?;
    if manifest.format != STORE_FORMAT {
        return Err(CliError::bad_file(
            &mpath,
            format!("unknown format {:?}", manifest.format),
        ));
    }
    let dpath = dir.join("descriptors.jsonl");
    let text = fs::read_to_string(&dpath).map_err(|e| CliError::io(&dpath, e))?;
    let records = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<DescriptorRecord>(l)
                .map_err(|e| CliError::bad_file(&dpath, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if records.len() != manifest.total {
        return Err(CliError::bad_file(
            &dpath,
            format!(
                "{} records, manifest says {}",
                records.len(),
                manifest.total
            ),
        ));
    }
    let bpath = dir.join("patches.bin");
    let bytes = fs::read(&bpath).map_err(|e| CliError::io(&bpath, e))?;
    let n = manifest.patch.pow(3);
    if bytes.len() != records.len() * n * 8 {
        return Err(CliError::bad_file(
            &bpath,
            format!(
                "expected {} bytes, found {}",
                records.len() * n * 8,
                bytes.len()
            ),
        ));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let pairs = records
        .iter()
        .zip(floats.chunks_exact(2 * n))
        .map(|(r, c)| PatchPair {
            id: patch_id(&r.volume_id, r.origin),
            size: manifest.patch,
            input: c[..n].to_vec(),
            target: c[n..].to_vec(),
            embed: r.embed_scalar as f32,
            bin: r.bin,
        })
        .collect();
    Ok(PatchStore {
        manifest,
        records,
        pairs,
    })
}

/// `patches`: builds the store from the training split of a dataset directory.
pub fn cmd_patches(dataset: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<PatchStore> {
    cfg.validate()?;
    let manifest = load_manifest(dataset)?;
    let f = cfg.patches.input_fraction;
    if !manifest.fractions.contains(&f) || f >= 1.0 {
        return Err(CliError::Config(format!(
            "patches.input_fraction {f} is not a thinned fraction of the dataset {:?}",
            manifest.fractions
        )));
    }
    let stem = fraction_stem(f);
    let mut volumes = Vec::new();
    for e in manifest.split(Split::Train) {
        let input = load_phantom_volume(dataset, &e.id, &stem)?;
        let target = load_phantom_volume(dataset, &e.id, "full")?;
        volumes.push((e.id.clone(), input, target));
    }
    let sources: Vec<SourcePair> = volumes
        .iter()
        .map(|(id, input, target)| SourcePair { id, input, target })
        .collect();
    let store = build_store(
        &sources,
        cfg.train.patch,
        cfg.patches.stride,
        f,
        cfg.binning,
    )?;
    save_store(&store, out)?;
    Ok(store)
}
