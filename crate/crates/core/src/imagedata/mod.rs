//! Image containers, file I/O, patch sampling, blur, and the dataset
//! streams consumed by each training stage.

mod blur;
mod crop;
mod dataset;
mod image;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use self::blur::{gaussian_blur, gaussian_kernel_1d, total_variation};
pub use self::crop::{draw_offset, paired_crop, random_crop};
pub use self::dataset::{
    build_dataset, list_images, AnyDataset, BatchSampler, Dataset, DatasetRole, DatasetSpec,
    DEFAULT_BLUR_RADIUS, DEFAULT_BLUR_SIGMA,
};
pub use self::image::{load_image, save_image, Image, LabeledSample, PairedSample};

#[derive(Debug, Error)]
pub enum ImageDataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dataset configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ImageDataError>;
