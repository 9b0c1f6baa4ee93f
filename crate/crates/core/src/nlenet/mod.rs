//! Noise-conditioned, downsampling-free 3D denoiser.
//!
//! A head convolution lifts the single-channel patch to `C` channels, a chain of
//! original-resolution blocks (ORBs) refines the features at full resolution,
//! and a tail convolution predicts a residual that is added back to the input.
//! Each ORB holds channel attention blocks (CABs) whose pooled channel
//! descriptor is scaled and shifted by a vector computed from the patch's noise
//! embedding scalar before the attention bottleneck. A single embedding layer
//! feeds every CAB.
//!
//! Gradients are computed by hand-written reverse passes; every layer is
//! generic over [`Scalar`] so the same code runs in `f64` for gradient checks.

mod infer;
mod net;
mod ops;
mod params;
mod scalar;

pub use infer::{infer_volume, patch_embed, NoisePipeline};
pub use net::{
    backward_trace, cab_forward, nle_forward, orsnet_forward, GradSession, Gradients, NleInput,
    NleVector, Trace,
};
pub use ops::{
    adaptive_max_pool_backward, adaptive_max_pool_global, conv3d, conv3d_backward, modulate,
    modulate_backward, relu, sigmoid, Conv, Dense,
};
pub use params::{init_params, Cab, ModelConfig, ModelParams, Nle, Orb, TensorInfo};
pub use scalar::Scalar;

use thiserror::Error;

use crate::volgrid::VolumeError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[cfg(test)]
mod tests;
