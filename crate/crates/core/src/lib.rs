//! Noise-level-aware volumetric denoising.
//!
//! * [`volgrid`]: volumes, patches, NVOL I/O, SUV calibration, flips.
//! * [`noisequant`]: Otsu segmentation, Poisson COV, noise bins, embedding scalar.
//! * [`phantom`]: synthetic phantoms, Poisson sampling, binomial thinning, PSF blur.
//! * [`nlenet`]: the downsampling-free denoiser with noise-level embedding.
//! * [`train`]: loss, Adam, cosine schedule, batch sampling, training loop, checkpoints.
//! * [`evalstat`]: PSNR, 3D SSIM, paired t-test, confidence intervals, reports.

pub mod evalstat;
pub mod nlenet;
pub mod noisequant;
pub mod phantom;
pub mod seeding;
pub mod train;
pub mod volgrid;
