//! Single-image deraining through transfer-task pretraining.
//!
//! Two teacher encoders learn from real data on tasks whose labels are cheap
//! (rain/rain-free recognition and blur reconstruction). Their knowledge is
//! distilled into one student encoder, which is then fine-tuned on a small
//! set of synthetic rainy/clean pairs. The crate also carries the analysis
//! tooling used to evaluate the approach: PSNR, SSIM, NIQE, and t-SNE.

pub mod imagedata;
pub mod losses;
pub mod metrics;
pub mod netblocks;
pub mod real;
pub mod toolcli;
pub mod trainflow;

pub use real::Real;
