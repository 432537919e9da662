//! The four training stages, their optimizer and schedule, and inference.

mod infer;
mod log;
mod optim;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagedata::ImageDataError;
use crate::losses::LossError;
use crate::netblocks::NetError;

pub use self::infer::{derain, derain_checkpoint, Tiling};
pub use self::log::{LogRow, TrainLog};
pub use self::optim::{plateau_schedule, Adam, AdamConfig, MIN_LR};
pub use self::stages::{
    distill, finetune, train_reconstruction, train_recognition, StageOutcome, TeacherSet, Teachers, TrainState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training state error: {0}")]
    State(String),
    #[error(transparent)]
    Data(#[from] ImageDataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("I/O error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recog,
    Recon,
    Distill,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Recog, Stage::Recon, Stage::Distill, Stage::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Recog => "recog",
            Stage::Recon => "recon",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
        }
    }

    pub fn best_checkpoint_name(self) -> String {
        format!("{}.best.ckpt", self.as_str())
    }

    pub fn final_checkpoint_name(self) -> String {
        format!("{}.final.ckpt", self.as_str())
    }

    pub fn log_name(self) -> String {
        format!("{}.log.tsv", self.as_str())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown stage {s:?}; expected recog, recon, distill or finetune")))
    }
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub max_steps: u64,
    /// Evaluations without improvement before the learning rates decay.
    pub patience: usize,
    pub decay_factor: f64,
    /// Steps per evaluation window of the plateau schedule.
    pub eval_interval: u64,
    pub seed: u64,
}

impl StageConfig {
    pub const DEFAULT_LR: f64 = 0.0004;
    pub const DEFAULT_FINETUNE_ENCODER_LR: f64 = 0.00004;
    pub const DEFAULT_CROP: usize = 256;
    pub const DEFAULT_BATCH: usize = 8;
    pub const DEFAULT_PATIENCE: usize = 5;
    pub const DEFAULT_DECAY: f64 = 0.5;
    pub const DEFAULT_EVAL_INTERVAL: u64 = 100;

    pub fn defaults(stage: Stage, max_steps: u64) -> Self {
        let encoder_lr = match stage {
            Stage::Finetune => Self::DEFAULT_FINETUNE_ENCODER_LR,
            _ => Self::DEFAULT_LR,
        };
        Self {
            stage,
            encoder_lr,
            decoder_lr: Self::DEFAULT_LR,
            batch_size: Self::DEFAULT_BATCH,
            crop_size: Self::DEFAULT_CROP,
            max_steps,
            patience: Self::DEFAULT_PATIENCE,
            decay_factor: Self::DEFAULT_DECAY,
            eval_interval: Self::DEFAULT_EVAL_INTERVAL,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(format!("{} stage: {msg}", self.stage)));
        let lr_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        if !lr_ok(self.encoder_lr) || !lr_ok(self.decoder_lr) {
            return bad(format!(
                "learning rates must be finite and non-negative (encoder {}, decoder {})",
                self.encoder_lr, self.decoder_lr
            ));
        }
        if self.decoder_lr == 0.0 && self.stage != Stage::Distill {
            return bad("decoder_lr must be positive".into());
        }
        if self.encoder_lr == 0.0 && self.stage != Stage::Finetune {
            return bad("encoder_lr must be positive".into());
        }
        if self.stage == Stage::Finetune && self.encoder_lr >= self.decoder_lr {
            return bad(format!(
                "fine-tuning requires encoder_lr < decoder_lr (got {} >= {})",
                self.encoder_lr, self.decoder_lr
            ));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return bad("batch_size and crop_size must be positive".into());
        }
        if self.patience == 0 || self.eval_interval == 0 {
            return bad("patience and eval_interval must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        Ok(())
    }
}
