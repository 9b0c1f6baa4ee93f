use std::path::{Path, PathBuf};

use nle_core::nlenet::{infer_volume, NoisePipeline};
use nle_core::phantom::fraction_stem;
use nle_core::train::{load_checkpoint, Checkpoint};
use nle_core::volgrid::Volume;

use crate::config::ExperimentConfig;
use crate::dataset::{create_dir, load, load_manifest, save, volume_path, Split};
use crate::error::{CliError, Result};

pub fn pipeline(cfg: &ExperimentConfig, ck: &Checkpoint) -> NoisePipeline {
    NoisePipeline {
        binning: cfg.binning,
        stats: ck.embed_stats,
        fallback_embed: ck.fallback_embed,
        use_nle: ck.use_nle,
    }
}

pub fn patch_size(cfg: &ExperimentConfig, ck: &Checkpoint) -> usize {
    ck.train.as_ref().map_or(cfg.train.patch, |t| t.patch)
}

pub fn denoise_volume(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    v: &Volume,
    stride: usize,
) -> Result<Volume> {
    let p = patch_size(cfg, ck);
    if v.dims().iter().any(|&d| d < p) {
        return Err(CliError::Config(format!(
            "volume {:?} is smaller than the {p}^3 patch",
            v.dims()
        )));
    }
    if stride == 0 || stride > p {
        return Err(CliError::Config(format!(
            "stride {stride} must be in 1..={p}"
        )));
    }
    Ok(infer_volume(v, &ck.params, p, stride, &pipeline(cfg, ck))?)
}

pub enum DenoiseSource<'a> {
    Volume(&'a Path),
    /// Every test-split phantom of a dataset at the configured input fraction.
    Dataset(&'a Path),
}

/// `denoise`: writes one NVOL per input. With a dataset source `out` is a
/// directory receiving `<phantom id>.nvol`.
pub fn cmd_denoise(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    source: DenoiseSource,
    stride: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let stride = stride.unwrap_or(cfg.eval.stride);
    match source {
        DenoiseSource::Volume(path) => {
            let v = load(path)?;
            let d = denoise_volume(cfg, &ck, &v, stride)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save(&d, out)?;
            Ok(vec![out.to_path_buf()])
        }
        DenoiseSource::Dataset(dir) => {
            let manifest = load_manifest(dir)?;
            let stem = fraction_stem(cfg.patches.input_fraction);
            create_dir(out)?;
            let mut written = Vec::new();
            for e in manifest.split(Split::Test) {
                let v = load(&volume_path(dir, &e.id, &stem))?;
                log::info!("denoising {}", e.id);
                let d = denoise_volume(cfg, &ck, &v, stride)?;
                let path = out.join(format!("{}.nvol", e.id));
                save(&d, &path)?;
                written.push(path);
            }
            Ok(written)
        }
    }
}
