use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::imagedata::{DatasetSpec, DEFAULT_BLUR_RADIUS, DEFAULT_BLUR_SIGMA};
use crate::netblocks::ArchDescriptor;
use crate::trainflow::{Stage, StageConfig, TeacherSet, Tiling};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "TTDR_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub downsampling: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchDescriptor::default();
        Self {
            depth: a.depth,
            base_channels: a.base_channels,
            downsampling: a.downsampling,
        }
    }
}

impl ModelSection {
    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            depth: self.depth,
            base_channels: self.base_channels,
            downsampling: self.downsampling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionData {
    pub rainy: PathBuf,
    pub clear: PathBuf,
    #[serde(default)]
    pub balance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionData {
    pub clear: Vec<PathBuf>,
    #[serde(default = "default_sigma")]
    pub blur_sigma: f64,
    #[serde(default = "default_radius")]
    pub blur_radius: usize,
}

fn default_sigma() -> f64 {
    DEFAULT_BLUR_SIGMA
}

fn default_radius() -> usize {
    DEFAULT_BLUR_RADIUS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationData {
    pub rainy: Vec<PathBuf>,
}

/// Directories of paired images matched by file name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedData {
    pub input: PathBuf,
    pub gt: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recognition: Option<RecognitionData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconstructionData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distillation: Option<DistillationData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<PairedData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<PairedData>,
}

/// One `[stages.<name>]` table. Unset fields take the stage defaults when
/// the configuration is resolved; `max_steps` has no default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Distillation only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teachers: Option<TeacherSet>,
    /// Fine-tuning only: start from a fresh encoder instead of the student.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_scratch: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesSection {
    pub recog: StageSection,
    pub recon: StageSection,
    pub distill: StageSection,
    pub finetune: StageSection,
}

impl StagesSection {
    pub fn get(&self, stage: Stage) -> &StageSection {
        match stage {
            Stage::Recog => &self.recog,
            Stage::Recon => &self.recon,
            Stage::Distill => &self.distill,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageSection {
        match stage {
            Stage::Recog => &mut self.recog,
            Stage::Recon => &mut self.recon,
            Stage::Distill => &mut self.distill,
            Stage::Finetune => &mut self.finetune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub tiled: bool,
    pub tile: usize,
    pub overlap: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let t = Tiling::default();
        Self {
            tiled: false,
            tile: t.tile,
            overlap: t.overlap,
        }
    }
}

impl InferenceSection {
    pub fn tiling(&self) -> Option<Tiling> {
        self.tiled.then_some(Tiling {
            tile: self.tile,
            overlap: self.overlap,
        })
    }
}

/// Whole-pipeline configuration: architecture, datasets, per-stage
/// settings, inference, output location and the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub stages: StagesSection,
    pub inference: InferenceSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            data: DataSection::default(),
            stages: StagesSection::default(),
            inference: InferenceSection::default(),
        }
    }
}

/// 1-based line of `key` inside the `[section]` table of `text`, if it can
/// be located.
fn key_line(text: &str, key_path: &str) -> Option<usize> {
    let (section, key) = match key_path.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", key_path),
    };
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        if current == section && k == key {
            return Some(i + 1);
        }
        if current.is_empty() && !section.is_empty() && k == key_path {
            return Some(i + 1);
        }
    }
    section_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn invalid(text: Option<&str>, key: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        key: key.to_string(),
        line: text.and_then(|t| key_line(t, key)),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// Parses, resolves defaults and validates a TOML document. Path
    /// existence is not checked here.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| PipelineError::Config {
            key: String::new(),
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        let parsed: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let line = inner
                .span()
                .map(|s| line_of_offset(text, s.start))
                .or_else(|| key_line(text, &key));
            PipelineError::Config {
                key: if key == "." { String::new() } else { key },
                line,
                message: inner.message().to_string(),
            }
        })?;
        let resolved = parsed.resolved();
        resolved.validate_with(Some(text))?;
        Ok(resolved)
    }

    /// Fills every defaultable stage field.
    pub fn resolved(mut self) -> Self {
        for stage in Stage::ALL {
            let d = StageConfig::defaults(stage, 0);
            let seed = self.seed;
            let s = self.stages.get_mut(stage);
            s.encoder_lr.get_or_insert(d.encoder_lr);
            s.decoder_lr.get_or_insert(d.decoder_lr);
            s.batch_size.get_or_insert(d.batch_size);
            s.crop_size.get_or_insert(d.crop_size);
            s.patience.get_or_insert(d.patience);
            s.decay_factor.get_or_insert(d.decay_factor);
            s.eval_interval.get_or_insert(d.eval_interval);
            s.seed.get_or_insert(seed);
            match stage {
                Stage::Distill => {
                    s.teachers.get_or_insert(TeacherSet::default());
                }
                Stage::Finetune => {
                    s.from_scratch.get_or_insert(false);
                }
                _ => {}
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<()> {
        self.model
            .arch()
            .validate()
            .map_err(|e| invalid(text, "model", e.to_string()))?;
        for stage in Stage::ALL {
            let s = self.stages.get(stage);
            let prefix = format!("stages.{stage}");
            if s.teachers.is_some() && stage != Stage::Distill {
                return Err(invalid(text, &format!("{prefix}.teachers"), "only the distill stage selects teachers"));
            }
            if s.from_scratch.is_some() && stage != Stage::Finetune {
                return Err(invalid(
                    text,
                    &format!("{prefix}.from_scratch"),
                    "only the finetune stage can start from scratch",
                ));
            }
            if let Err(e) = self.stage_config_unchecked(stage, s.max_steps.unwrap_or(1)).validate() {
                let msg = e.to_string();
                let field = ["encoder_lr", "decoder_lr", "batch_size", "crop_size", "patience", "decay_factor", "eval_interval"]
                    .into_iter()
                    .find(|f| msg.contains(f))
                    .unwrap_or("encoder_lr");
                return Err(invalid(text, &format!("{prefix}.{field}"), msg));
            }
        }
        if let Some(r) = &self.data.reconstruction {
            if !(r.blur_sigma > 0.0) {
                return Err(invalid(text, "data.reconstruction.blur_sigma", "must be positive"));
            }
            if r.clear.is_empty() {
                return Err(invalid(text, "data.reconstruction.clear", "needs at least one directory"));
            }
        }
        if let Some(d) = &self.data.distillation {
            if d.rainy.is_empty() {
                return Err(invalid(text, "data.distillation.rainy", "needs at least one directory"));
            }
        }
        let inf = &self.inference;
        if inf.tile == 0 || inf.tile % self.model.downsampling != 0 || inf.overlap >= inf.tile {
            return Err(invalid(
                text,
                "inference.tile",
                format!(
                    "tile {} must be a positive multiple of {} larger than the overlap {}",
                    inf.tile, self.model.downsampling, inf.overlap
                ),
            ));
        }
        Ok(())
    }

    fn stage_config_unchecked(&self, stage: Stage, max_steps: u64) -> StageConfig {
        let d = StageConfig::defaults(stage, max_steps);
        let s = self.stages.get(stage);
        StageConfig {
            stage,
            encoder_lr: s.encoder_lr.unwrap_or(d.encoder_lr),
            decoder_lr: s.decoder_lr.unwrap_or(d.decoder_lr),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            crop_size: s.crop_size.unwrap_or(d.crop_size),
            max_steps,
            patience: s.patience.unwrap_or(d.patience),
            decay_factor: s.decay_factor.unwrap_or(d.decay_factor),
            eval_interval: s.eval_interval.unwrap_or(d.eval_interval),
            seed: s.seed.unwrap_or(self.seed),
        }
    }

    /// Training settings for `stage`. `max_steps` must be configured.
    pub fn stage_config(&self, stage: Stage) -> Result<StageConfig> {
        let steps = self.stages.get(stage).max_steps.ok_or_else(|| PipelineError::Config {
            key: format!("stages.{stage}.max_steps"),
            line: None,
            message: "no step budget configured (set it in the file or pass --max-steps)".into(),
        })?;
        let cfg = self.stage_config_unchecked(stage, steps);
        cfg.validate()
            .map_err(|e| invalid(None, &format!("stages.{stage}"), e.to_string()))?;
        Ok(cfg)
    }

    pub fn teachers(&self) -> TeacherSet {
        self.stages.distill.teachers.unwrap_or_default()
    }

    pub fn finetune_from_scratch(&self) -> bool {
        self.stages.finetune.from_scratch.unwrap_or(false)
    }

    /// Dataset specification for a stage's training data.
    pub fn dataset_spec(&self, stage: Stage) -> Result<DatasetSpec> {
        let seed = self.stages.get(stage).seed.unwrap_or(self.seed);
        let missing = |section: &str| PipelineError::Config {
            key: format!("data.{section}"),
            line: None,
            message: format!("the {stage} stage needs a [data.{section}] table"),
        };
        let spec = match stage {
            Stage::Recog => {
                let d = self.data.recognition.as_ref().ok_or_else(|| missing("recognition"))?;
                let mut s = DatasetSpec::recognition(&d.rainy, &d.clear, seed);
                s.balance = d.balance;
                s
            }
            Stage::Recon => {
                let d = self.data.reconstruction.as_ref().ok_or_else(|| missing("reconstruction"))?;
                let mut s = DatasetSpec::reconstruction(&d.clear[0], d.blur_sigma, seed);
                s.sources = d.clear.clone();
                s.blur_radius = d.blur_radius;
                s
            }
            Stage::Distill => {
                let d = self.data.distillation.as_ref().ok_or_else(|| missing("distillation"))?;
                let mut s = DatasetSpec::distillation(&d.rainy[0], seed);
                s.sources = d.rainy.clone();
                s
            }
            Stage::Finetune => {
                let d = self.data.finetune.as_ref().ok_or_else(|| missing("finetune"))?;
                DatasetSpec::finetune(&d.input, &d.gt, seed)
            }
        };
        Ok(spec)
    }

    /// Checks that every configured data directory exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut dirs: Vec<(String, &Path)> = Vec::new();
        if let Some(d) = &self.data.recognition {
            dirs.push(("data.recognition.rainy".into(), &d.rainy));
            dirs.push(("data.recognition.clear".into(), &d.clear));
        }
        if let Some(d) = &self.data.reconstruction {
            dirs.extend(d.clear.iter().map(|p| ("data.reconstruction.clear".to_string(), p.as_path())));
        }
        if let Some(d) = &self.data.distillation {
            dirs.extend(d.rainy.iter().map(|p| ("data.distillation.rainy".to_string(), p.as_path())));
        }
        for (name, d) in [("finetune", &self.data.finetune), ("evaluation", &self.data.evaluation)] {
            if let Some(d) = d {
                dirs.push((format!("data.{name}.input"), &d.input));
                dirs.push((format!("data.{name}.gt"), &d.gt));
            }
        }
        for (key, dir) in dirs {
            if !dir.is_dir() {
                return Err(PipelineError::Config {
                    key,
                    line: None,
                    message: format!("directory {} does not exist", dir.display()),
                });
            }
        }
        Ok(())
    }

    /// Fully resolved TOML echo; parsing it yields this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }
}

/// Reads and resolves a configuration file, applies the environment
/// override and checks data paths.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config {
        key: String::new(),
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut cfg = PipelineConfig::from_toml_str(&text)?;
    cfg.apply_env();
    cfg.check_paths()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_lines_are_found_in_sections() {
        let text = "seed = 1\n\n[stages.finetune]\nencoder_lr = 0.1\ndecoder_lr = 0.01\n";
        assert_eq!(key_line(text, "stages.finetune.decoder_lr"), Some(5));
        assert_eq!(key_line(text, "seed"), Some(1));
        assert_eq!(key_line(text, "stages.finetune.patience"), Some(3));
        assert_eq!(key_line(text, "stages.recog.patience"), None);
    }

    #[test]
    fn offsets_map_to_lines() {
        assert_eq!(line_of_offset("a\nb\nc", 0), 1);
        assert_eq!(line_of_offset("a\nb\nc", 2), 2);
        assert_eq!(line_of_offset("a\nb\nc", 4), 3);
    }
}
