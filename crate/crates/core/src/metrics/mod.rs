//! Full-reference fidelity (PSNR, SSIM), no-reference quality (NIQE),
//! exact t-SNE, metric reports, and PNG plots.

mod fidelity;
mod niqe;
mod plot;
mod report;
mod tsne;

use std::path::PathBuf;

use thiserror::Error;

use crate::imagedata::ImageDataError;
use crate::trainflow::TrainError;

pub use self::fidelity::{psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use self::niqe::{aggd_fit, ggd_fit, niqe_fit, niqe_score, AggdParams, NiqeModel, DEFAULT_PATCH_SIZE, FEATURE_DIM, MIN_CORPUS};
pub use self::plot::{embedding_tsv, histogram_png, scatter_png, EmbeddingRow};
pub use self::report::{evaluate_dataset, evaluate_with, Aggregate, MetricReport, MetricRow};
pub use self::tsne::{image_features, silhouette, tsne_embed, tsne_embed_clamped, Embedding, EXAGGERATION_ITERS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scoring failed: {0}")]
    Scoring(String),
    #[error("malformed report: {0}")]
    Format(String),
    #[error("I/O error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] ImageDataError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;
