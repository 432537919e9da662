use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::config::{PairedData, PipelineConfig};
use super::{PipelineError, Result};
use crate::imagedata::{build_dataset, list_images, load_image, save_image, Dataset, DatasetSpec, Image, ImageDataError, PairedSample};
use crate::metrics::{
    embedding_tsv, evaluate_dataset, histogram_png, image_features, niqe_fit, niqe_score, scatter_png, tsne_embed_clamped,
    EmbeddingRow, MetricReport, MetricsError,
};
use crate::netblocks::{Checkpoint, EncoderModel, NetError};
use crate::trainflow::{
    derain_checkpoint, distill, finetune, train_reconstruction, train_recognition, Stage, StageOutcome, Teachers,
    Tiling, TrainError,
};

fn data_error(e: ImageDataError) -> PipelineError {
    match e {
        ImageDataError::Config(m) | ImageDataError::Precondition(m) => PipelineError::Config {
            key: "data".into(),
            line: None,
            message: m,
        },
        other => PipelineError::Runtime(other.to_string()),
    }
}

fn train_error(e: TrainError) -> PipelineError {
    match e {
        TrainError::Config(m) => PipelineError::Config {
            key: String::new(),
            line: None,
            message: m,
        },
        TrainError::Data(d) => data_error(d),
        other => PipelineError::Runtime(other.to_string()),
    }
}

fn metrics_error(e: MetricsError) -> PipelineError {
    match e {
        MetricsError::Config(m) => PipelineError::Config {
            key: String::new(),
            line: None,
            message: m,
        },
        MetricsError::Data(d) => data_error(d),
        other => PipelineError::Runtime(other.to_string()),
    }
}

/// Loads a checkpoint that an earlier step should have produced; a missing
/// file is a missing prerequisite.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(PipelineError::Missing(vec![path.to_path_buf()]));
    }
    Checkpoint::load(path).map_err(|e| PipelineError::Runtime(e.to_string()))
}

/// Checkpoints a stage reads from the output directory.
pub fn prerequisites(cfg: &PipelineConfig, stage: Stage) -> Vec<PathBuf> {
    let dir = &cfg.output_dir;
    match stage {
        Stage::Recog | Stage::Recon => Vec::new(),
        Stage::Distill => {
            let t = cfg.teachers();
            let mut v = Vec::new();
            if t.uses_recog() {
                v.push(dir.join(Stage::Recog.best_checkpoint_name()));
            }
            if t.uses_recon() {
                v.push(dir.join(Stage::Recon.best_checkpoint_name()));
            }
            v
        }
        Stage::Finetune if cfg.finetune_from_scratch() => Vec::new(),
        Stage::Finetune => vec![dir.join(Stage::Distill.best_checkpoint_name())],
    }
}

fn checked_arch(cfg: &PipelineConfig, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.arch != cfg.model.arch() {
        return Err(PipelineError::Config {
            key: "model".into(),
            line: None,
            message: format!(
                "{} was trained with {:?} but the configuration describes {:?}",
                path.display(),
                ckpt.arch,
                cfg.model.arch()
            ),
        });
    }
    Ok(())
}

/// Runs one training stage and writes its checkpoints and log under the
/// output directory.
pub fn train_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    let stage_cfg = cfg.stage_config(stage)?;
    let missing: Vec<PathBuf> = prerequisites(cfg, stage).into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Missing(missing));
    }
    let spec = cfg.dataset_spec(stage)?;
    let data = build_dataset(&spec).map_err(data_error)?;
    let arch = cfg.model.arch();
    let outcome = match stage {
        Stage::Recog => train_recognition(&stage_cfg, arch, &data.into_labeled().map_err(data_error)?),
        Stage::Recon => train_reconstruction(&stage_cfg, arch, &data.into_paired().map_err(data_error)?),
        Stage::Distill => {
            let paths = prerequisites(cfg, stage);
            let t = cfg.teachers();
            let mut loaded = Vec::new();
            for p in &paths {
                let ckpt = load_checkpoint(p)?;
                checked_arch(cfg, &ckpt, p)?;
                loaded.push(ckpt);
            }
            let mut it = loaded.iter();
            let recog = if t.uses_recog() { it.next() } else { None };
            let recon = if t.uses_recon() { it.next() } else { None };
            let teachers = Teachers::from_checkpoints(recog, recon).map_err(train_error)?;
            distill(&teachers, &data.into_images().map_err(data_error)?, &stage_cfg)
        }
        Stage::Finetune => {
            let encoder = if cfg.finetune_from_scratch() {
                EncoderModel::<f32>::init(stage_cfg.seed, arch).map_err(|e| PipelineError::Runtime(e.to_string()))?
            } else {
                let path = cfg.output_dir.join(Stage::Distill.best_checkpoint_name());
                let ckpt = load_checkpoint(&path)?;
                checked_arch(cfg, &ckpt, &path)?;
                ckpt.encoder_model().map_err(|e| PipelineError::Runtime(e.to_string()))?
            };
            finetune(encoder, &data.into_paired().map_err(data_error)?, &stage_cfg)
        }
    }
    .map_err(train_error)?;
    outcome.save(&cfg.output_dir).map_err(train_error)?;
    Ok(outcome)
}

/// Loads a paired evaluation set in file-name order.
pub fn load_paired(data: &PairedData) -> Result<Dataset<PairedSample>> {
    for (key, dir) in [("input", &data.input), ("gt", &data.gt)] {
        if !dir.is_dir() {
            return Err(PipelineError::Config {
                key: format!("data.evaluation.{key}"),
                line: None,
                message: format!("directory {} does not exist", dir.display()),
            });
        }
    }
    let spec = DatasetSpec::finetune(&data.input, &data.gt, 0);
    let ds = build_dataset(&spec).map_err(data_error)?.into_paired().map_err(data_error)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| ds.ids[a].cmp(&ds.ids[b]));
    Ok(Dataset::new(
        order.iter().map(|&i| ds.ids[i].clone()).collect(),
        order.iter().map(|&i| ds.samples[i].clone()).collect(),
    ))
}

/// Derains and scores a paired set, writing the report to `report_path`.
pub fn evaluate(ckpt_path: &Path, data: &PairedData, tiling: Option<Tiling>, report_path: &Path) -> Result<MetricReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ds = load_paired(data)?;
    let report = evaluate_dataset(&ckpt, &ds, tiling);
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    report.write(report_path).map_err(metrics_error)?;
    Ok(report)
}

/// Outcome of a batch derain run.
#[derive(Clone, Debug, Default)]
pub struct DerainSummary {
    pub outputs: Vec<(PathBuf, Duration)>,
    pub failures: Vec<(PathBuf, String)>,
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        list_images(input).map_err(data_error)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(PipelineError::Missing(vec![input.to_path_buf()]))
    }
}

/// Output file for `input`: same stem, PNG extension, inside `out_dir`.
pub fn derained_name(input: &Path, out_dir: &Path) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    out_dir.join(format!("{stem}.png"))
}

/// Derains one file or every image in a directory. Per-image failures are
/// collected and do not stop the run.
pub fn derain_paths(ckpt_path: &Path, input: &Path, out_dir: &Path, tiling: Option<Tiling>) -> Result<DerainSummary> {
    let ckpt = load_checkpoint(ckpt_path)?;
    if !ckpt.decoder_kind().is_some_and(|k| k.produces_image()) {
        return Err(PipelineError::Config {
            key: "checkpoint".into(),
            line: None,
            message: format!("{} holds no image decoder", ckpt_path.display()),
        });
    }
    let files = input_files(input)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut summary = DerainSummary::default();
    for file in files {
        let start = Instant::now();
        let result = load_image(&file)
            .map_err(|e| e.to_string())
            .and_then(|img| derain_checkpoint(&ckpt, &img, tiling).map_err(|e| e.to_string()))
            .and_then(|out| {
                let dest = derained_name(&file, out_dir);
                save_image(&out, &dest).map_err(|e| e.to_string()).map(|_| dest)
            });
        match result {
            Ok(dest) => summary.outputs.push((dest, start.elapsed())),
            Err(msg) => summary.failures.push((file, msg)),
        }
    }
    Ok(summary)
}

/// A named image collection read from one directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub ids: Vec<String>,
    pub images: Vec<Image>,
}

impl Corpus {
    pub fn load(name: &str, dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(PipelineError::Config {
                key: format!("corpus {name}"),
                line: None,
                message: format!("directory {} does not exist", dir.display()),
            });
        }
        let paths = list_images(dir).map_err(data_error)?;
        if paths.is_empty() {
            return Err(PipelineError::Config {
                key: format!("corpus {name}"),
                line: None,
                message: format!("{} holds no images", dir.display()),
            });
        }
        let mut ids = Vec::new();
        let mut images = Vec::new();
        for p in paths {
            images.push(load_image(&p).map_err(data_error)?);
            ids.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        }
        Ok(Self {
            name: name.to_string(),
            ids,
            images,
        })
    }
}

/// One NIQE score row.
#[derive(Clone, Debug, PartialEq)]
pub struct NiqeRow {
    pub corpus: String,
    pub id: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Fits NIQE on `pristine`, scores every corpus image, and writes
/// `niqe.tsv` plus one `niqe_<corpus>.png` histogram per corpus.
pub fn analyze_niqe(pristine: &Corpus, corpora: &[Corpus], patch_size: usize, out_dir: &Path) -> Result<Vec<NiqeRow>> {
    let model = niqe_fit(&pristine.images, patch_size).map_err(metrics_error)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut rows = Vec::new();
    let mut text = String::from("corpus\tid\tniqe\n");
    for c in corpora {
        let mut scores = Vec::new();
        for (id, img) in c.ids.iter().zip(&c.images) {
            let row = match niqe_score(img, &model) {
                Ok(s) => {
                    scores.push(s);
                    text.push_str(&format!("{}\t{id}\t{s}\n", c.name));
                    NiqeRow { corpus: c.name.clone(), id: id.clone(), score: Some(s), error: None }
                }
                Err(e) => {
                    text.push_str(&format!("{}\t{id}\tfailed: {e}\n", c.name));
                    NiqeRow { corpus: c.name.clone(), id: id.clone(), score: None, error: Some(e.to_string()) }
                }
            };
            rows.push(row);
        }
        histogram_png(&scores, 20, out_dir.join(format!("niqe_{}.png", c.name))).map_err(metrics_error)?;
    }
    write(&out_dir.join("niqe.tsv"), &text)?;
    Ok(rows)
}

/// Embeds every corpus image with t-SNE and writes `tsne.tsv` and
/// `tsne.png`. Returns the rows and the perplexity actually used.
pub fn analyze_tsne(
    corpora: &[Corpus],
    perplexity: f64,
    iterations: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(Vec<EmbeddingRow>, f64)> {
    let mut features = Vec::new();
    let mut meta = Vec::new();
    for c in corpora {
        for (id, img) in c.ids.iter().zip(&c.images) {
            features.push(image_features(img));
            meta.push((id.clone(), c.name.clone()));
        }
    }
    let (embedding, used) = tsne_embed_clamped(&features, perplexity, iterations, seed).map_err(metrics_error)?;
    let rows: Vec<EmbeddingRow> = meta
        .into_iter()
        .zip(&embedding.points)
        .map(|((id, group), p)| EmbeddingRow { id, x: p[0], y: p[1], group })
        .collect();
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out_dir.display())))?;
    write(&out_dir.join("tsne.tsv"), &embedding_tsv(&rows))?;
    scatter_png(&rows, out_dir.join("tsne.png")).map_err(metrics_error)?;
    Ok((rows, used))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))
}

/// Record written beside every run's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub build: String,
    pub seeds: BTreeMap<String, u64>,
    pub arguments: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
}

pub fn build_id() -> String {
    format!(
        "{} {} ({}, {}, {})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

impl Provenance {
    pub fn new(command: impl Into<String>, config: Option<&PipelineConfig>) -> Self {
        let mut seeds = BTreeMap::new();
        if let Some(cfg) = config {
            seeds.insert("global".into(), cfg.seed);
            for s in Stage::ALL {
                seeds.insert(s.to_string(), cfg.stages.get(s).seed.unwrap_or(cfg.seed));
            }
        }
        Self {
            command: command.into(),
            build: build_id(),
            seeds,
            arguments: BTreeMap::new(),
            config: config.cloned(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.arguments.insert(key.to_string(), value.to_string());
        self
    }

    pub fn seed(mut self, key: &str, value: u64) -> Self {
        self.seeds.insert(key.to_string(), value);
        self
    }

    /// Writes `<name>.provenance.toml` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{name}.provenance.toml"));
        let text = toml::to_string(self).map_err(|e| PipelineError::Runtime(e.to_string()))?;
        write(&path, &text)?;
        Ok(path)
    }
}

impl From<NetError> for PipelineError {
    fn from(e: NetError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}
