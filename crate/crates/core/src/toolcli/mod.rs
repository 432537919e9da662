//! Configuration and the library side of the command-line tool. Every
//! command of the `transderain` binary is a thin wrapper around a function
//! here.

mod config;
mod pipeline;

use std::fmt;
use std::path::PathBuf;

pub use self::config::{
    load_config, DataSection, DistillationData, InferenceSection, ModelSection, PairedData, PipelineConfig,
    RecognitionData, ReconstructionData, StageSection, StagesSection, OUTPUT_DIR_ENV,
};
pub use self::pipeline::{
    analyze_niqe, analyze_tsne, build_id, derain_paths, derained_name, evaluate, load_checkpoint, load_paired,
    prerequisites, train_stage, Corpus, DerainSummary, NiqeRow, Provenance,
};

/// Failures of a pipeline command, each mapped to a stable exit code.
#[derive(Debug)]
pub enum PipelineError {
    /// Invalid configuration or usage, with the offending key path and, when
    /// known, the line in the configuration file.
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },
    /// Artifacts that an earlier step should have produced.
    Missing(Vec<PathBuf>),
    Runtime(String),
}

impl PipelineError {
    pub const EXIT_CONFIG: i32 = 1;
    pub const EXIT_MISSING: i32 = 2;
    pub const EXIT_RUNTIME: i32 = 3;

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => Self::EXIT_CONFIG,
            PipelineError::Missing(_) => Self::EXIT_MISSING,
            PipelineError::Runtime(_) => Self::EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config { key, line, message } => {
                write!(f, "configuration error")?;
                if !key.is_empty() {
                    write!(f, " at `{key}`")?;
                }
                if let Some(l) = line {
                    write!(f, " (line {l})")?;
                }
                write!(f, ": {message}")
            }
            PipelineError::Missing(paths) => {
                let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                write!(f, "missing prerequisite: {}", names.join(", "))
            }
            PipelineError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

pub type Result<T> = std::result::Result<T, PipelineError>;
