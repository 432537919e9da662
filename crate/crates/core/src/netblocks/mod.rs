//! Network components with hand-written backward passes: shallow
//! projection, spatial attention, AGLF transformer blocks, spatial pyramid
//! pooling, the three decoders, parameter storage, and checkpoints.

mod aglf;
mod attention;
mod checkpoint;
mod layers;
mod models;
mod params;
mod spatial;
mod spp;
mod tensor;

use std::path::PathBuf;

use thiserror::Error;

pub use self::aglf::{AglfBlock, AglfCache};
pub use self::attention::{attention_head, head_count, SelfAttention};
pub use self::checkpoint::{Checkpoint, FORMAT_VERSION};
pub use self::layers::{gelu, gelu_grad, sigmoid, Conv2d, Gelu, Layer, LayerNorm, Linear, Tape};
pub use self::models::{
    ArchDescriptor, DecoderCache, DecoderKind, DecoderModel, DecoderNet, EncoderCache, EncoderModel, EncoderNet,
};
pub use self::params::{Gradients, Initializer, Param, ParamId, ParamStore};
pub use self::spatial::SpatialAttention;
pub use self::spp::{adaptive_avg_pool, Spp};
pub use self::tensor::FeatureMap;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;
