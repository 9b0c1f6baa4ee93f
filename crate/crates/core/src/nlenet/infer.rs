use log::warn;
use rayon::prelude::*;

use super::net::{orsnet_forward, NleInput};
use super::params::ModelParams;
use super::NetError;
use crate::noisequant::{describe_patch, BinningConfig, EmbedStats};
use crate::volgrid::{extract_covering_patches, reassemble, Domain, Patch, Volume};

/// Noise quantification applied to each inference patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePipeline {
    pub binning: BinningConfig,
    pub stats: EmbedStats,
    /// Embedding scalar used when a patch cannot be described (constant or empty mask).
    pub fallback_embed: f64,
    pub use_nle: bool,
}

/// Embedding scalar of a patch, computed from its own counts.
pub fn patch_embed(
    patch: &Patch,
    counts_per_suv: f32,
    domain: Domain,
    pipeline: &NoisePipeline,
) -> f64 {
    let counts: Vec<f32> = match domain {
        Domain::Counts => patch.values.clone(),
        Domain::Suv => patch.values.iter().map(|v| v * counts_per_suv).collect(),
    };
    match describe_patch(&counts, &pipeline.binning, &pipeline.stats) {
        Ok(d) => d.embed_scalar,
        Err(e) => {
            warn!(
                "patch at {:?}: {e}; using fallback embedding {}",
                patch.origin, pipeline.fallback_embed
            );
            pipeline.fallback_embed
        }
    }
}

/// Sliding-window denoising of a whole volume with uniform overlap averaging.
pub fn infer_volume(
    v: &Volume,
    params: &ModelParams<f32>,
    p: usize,
    stride: usize,
    pipeline: &NoisePipeline,
) -> Result<Volume, NetError> {
    let patches = extract_covering_patches(v, p, stride)?;
    let predicted: Result<Vec<Patch>, NetError> = patches
        .par_iter()
        .map(|patch| {
            let nle = if pipeline.use_nle {
                let s = patch_embed(patch, v.counts_per_suv(), v.domain(), pipeline);
                NleInput::Scalar(s as f32)
            } else {
                NleInput::Disabled
            };
            let out = orsnet_forward(&patch.values, patch.dims(), &nle, params)?;
            Ok(Patch {
                values: out,
                ..patch.clone()
            })
        })
        .collect();
    let predicted = predicted?;
    // predictions are unconstrained in sign, so a counts-domain input is
    // reported in the SUV domain with the same calibration
    let like = match v.domain() {
        Domain::Counts => v.with_domain(Domain::Suv, v.counts_per_suv(), v.values().to_vec())?,
        Domain::Suv => v.clone(),
    };
    Ok(reassemble(&predicted, &like)?)
}
