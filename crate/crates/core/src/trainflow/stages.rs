use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::TrainLog;
use super::optim::{plateau_schedule, Adam, AdamConfig};
use super::{Result, Stage, StageConfig, TrainError};
use crate::imagedata::{paired_crop, random_crop, BatchSampler, Dataset, Image, LabeledSample, PairedSample};
use crate::losses::{
    finetune_loss_grad, kd_direct_loss_grad, kd_indirect_loss_grad, kd_total_loss, recog_loss_grad, recon_loss_grad,
    IndirectTeacher, LossValue,
};
use crate::netblocks::{ArchDescriptor, Checkpoint, DecoderKind, DecoderModel, EncoderModel, FeatureMap, Gradients};

/// Progress of one stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    /// Total loss of every step, in step order.
    pub history: Vec<(u64, f64)>,
    /// Windowed mean loss at each plateau evaluation.
    pub evaluations: Vec<(u64, f64)>,
    pub best_loss: f64,
}

/// Result of a stage: the best-loss and final checkpoints plus the log.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub state: TrainState,
    pub log: TrainLog,
}

impl StageOutcome {
    /// Writes `<stage>.best.ckpt`, `<stage>.final.ckpt` and `<stage>.log.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(dir.to_path_buf(), e))?;
        self.best.save(dir.join(self.stage.best_checkpoint_name()))?;
        self.last.save(dir.join(self.stage.final_checkpoint_name()))?;
        self.log.write(&dir.join(self.stage.log_name()))
    }
}

/// Which teachers a distillation run learns from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSet {
    #[default]
    Both,
    Recog,
    Recon,
}

impl TeacherSet {
    pub fn uses_recog(self) -> bool {
        matches!(self, TeacherSet::Both | TeacherSet::Recog)
    }

    pub fn uses_recon(self) -> bool {
        matches!(self, TeacherSet::Both | TeacherSet::Recon)
    }
}

/// Frozen teacher encoders with their frozen decoders.
#[derive(Clone, Debug)]
pub struct Teachers {
    pub recog: Option<(EncoderModel<f32>, DecoderModel<f32>)>,
    pub recon: Option<(EncoderModel<f32>, DecoderModel<f32>)>,
}

impl Teachers {
    /// Loads the requested teachers; every supplied checkpoint must share one
    /// architecture and carry the matching decoder.
    pub fn from_checkpoints(recog: Option<&Checkpoint>, recon: Option<&Checkpoint>) -> Result<Self> {
        if let (Some(a), Some(b)) = (recog, recon) {
            if a.arch != b.arch {
                return Err(TrainError::Config(format!(
                    "teacher architectures differ: recognition {:?}, reconstruction {:?}",
                    a.arch, b.arch
                )));
            }
        }
        let load = |ckpt: Option<&Checkpoint>, kind: DecoderKind| -> Result<Option<(EncoderModel<f32>, DecoderModel<f32>)>> {
            let Some(ckpt) = ckpt else { return Ok(None) };
            if ckpt.decoder_kind() != Some(kind) {
                return Err(TrainError::Config(format!(
                    "{} checkpoint does not hold a {} decoder",
                    ckpt.stage,
                    kind.as_str()
                )));
            }
            Ok(Some((ckpt.encoder_model()?, ckpt.decoder_model()?.freeze())))
        };
        let teachers = Self {
            recog: load(recog, DecoderKind::Recognition)?,
            recon: load(recon, DecoderKind::Reconstruction)?,
        };
        if teachers.recog.is_none() && teachers.recon.is_none() {
            return Err(TrainError::Config("distillation needs at least one teacher".into()));
        }
        Ok(teachers)
    }

    pub fn arch(&self) -> ArchDescriptor {
        let (enc, _) = self.recog.as_ref().or(self.recon.as_ref()).expect("at least one teacher");
        *enc.arch()
    }
}

struct StepResult {
    loss: LossValue,
    encoder: Gradients<f32>,
    decoder: Option<Gradients<f32>>,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn sampler(len: usize, seed: u64) -> Result<BatchSampler> {
    if len == 0 {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    Ok(BatchSampler::new(len, seed.wrapping_add(2)))
}

fn check_stage(cfg: &StageConfig, expected: Stage) -> Result<()> {
    if cfg.stage != expected {
        return Err(TrainError::Config(format!(
            "expected a {expected} stage configuration, got {}",
            cfg.stage
        )));
    }
    cfg.validate()
}

/// Shared optimization loop: runs `step` for `max_steps` updates with Adam,
/// decays both learning rates together on plateaus, and keeps the
/// checkpoint with the lowest windowed loss.
fn run_stage<F>(
    cfg: &StageConfig,
    encoder: &mut EncoderModel<f32>,
    mut decoder: Option<&mut DecoderModel<f32>>,
    mut step_fn: F,
) -> Result<StageOutcome>
where
    F: FnMut(&EncoderModel<f32>, Option<&DecoderModel<f32>>, &mut ChaCha8Rng) -> Result<StepResult>,
{
    let stage = cfg.stage.as_str();
    let mut rng = data_rng(cfg.seed);
    let mut enc_opt = Adam::new(encoder.params(), AdamConfig::default());
    let mut dec_opt = decoder.as_deref().map(|d| Adam::new(d.params(), AdamConfig::default()));
    let (mut enc_lr, mut dec_lr) = (cfg.encoder_lr, cfg.decoder_lr);
    let mut log = TrainLog::new();
    let mut history = Vec::with_capacity(cfg.max_steps as usize);
    let mut evaluations = Vec::new();
    let mut eval_values = Vec::new();

    let snapshot = |step: u64, enc: &EncoderModel<f32>, dec: Option<&DecoderModel<f32>>| {
        Checkpoint::new(stage, step, enc, dec)
    };
    let mut best = snapshot(0, encoder, decoder.as_deref());
    let mut best_loss = f64::INFINITY;
    let (mut window_sum, mut window_n) = (0.0, 0u64);

    for step in 1..=cfg.max_steps {
        let mut r = step_fn(encoder, decoder.as_deref(), &mut rng)?;
        if !r.loss.value.is_finite() {
            return Err(TrainError::State(format!("{stage} loss became non-finite at step {step}")));
        }
        enc_opt.step(encoder.params_mut(), &mut r.encoder, enc_lr)?;
        if let (Some(dec), Some(opt), Some(g)) = (decoder.as_deref_mut(), dec_opt.as_mut(), r.decoder.as_mut()) {
            opt.step(dec.params_mut(), g, dec_lr)?;
        }
        for (term, value) in &r.loss.terms {
            log.push(cfg.stage, step, term, *value, (enc_lr, dec_lr));
        }
        log.push(cfg.stage, step, "total", r.loss.value, (enc_lr, dec_lr));
        history.push((step, r.loss.value));
        window_sum += r.loss.value;
        window_n += 1;

        let at_eval = step % cfg.eval_interval == 0;
        if at_eval || step == cfg.max_steps {
            let mean = window_sum / window_n as f64;
            if at_eval {
                evaluations.push((step, mean));
                eval_values.push(mean);
                enc_lr = plateau_schedule(&eval_values, cfg.patience, cfg.decay_factor, enc_lr);
                dec_lr = plateau_schedule(&eval_values, cfg.patience, cfg.decay_factor, dec_lr);
            }
            if mean < best_loss {
                best_loss = mean;
                best = snapshot(step, encoder, decoder.as_deref());
            }
            window_sum = 0.0;
            window_n = 0;
        }
    }

    let last = snapshot(cfg.max_steps, encoder, decoder.as_deref());
    Ok(StageOutcome {
        stage: cfg.stage,
        best,
        last,
        state: TrainState {
            step: cfg.max_steps,
            encoder_lr: enc_lr,
            decoder_lr: dec_lr,
            history,
            evaluations,
            best_loss,
        },
        log,
    })
}

/// Trains the recognition teacher (encoder plus scalar head) from scratch.
pub fn train_recognition(
    cfg: &StageConfig,
    arch: ArchDescriptor,
    data: &Dataset<LabeledSample>,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Recog)?;
    let mut encoder = EncoderModel::<f32>::init(cfg.seed, arch)?;
    let mut decoder = DecoderModel::<f32>::init(cfg.seed.wrapping_add(1), DecoderKind::Recognition, arch)?;
    let mut batches = sampler(data.len(), cfg.seed)?;
    run_stage(cfg, &mut encoder, Some(&mut decoder), |enc, dec, rng| {
        let dec = dec.expect("recognition decoder");
        let mut outputs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        let mut caches = Vec::with_capacity(cfg.batch_size);
        for i in batches.next_batch(cfg.batch_size) {
            let sample = &data.samples[i];
            let crop = random_crop(&sample.image, cfg.crop_size, rng)?;
            let (f, ec) = enc.forward_cached(&FeatureMap::from_image(&crop))?;
            let (o, dc) = dec.forward_cached(&f)?;
            outputs.push(o.data()[0]);
            labels.push(sample.label);
            caches.push((ec, dc));
        }
        let (loss, grads) = recog_loss_grad(&outputs, &labels)?;
        let mut ge = Gradients::for_store(enc.params());
        let mut gd = Gradients::for_store(dec.params());
        for ((ec, dc), g) in caches.iter().zip(grads) {
            let df = dec.backward(dc, &FeatureMap::scalar(g), &mut gd);
            enc.backward(ec, &df, &mut ge);
        }
        Ok(StepResult {
            loss,
            encoder: ge,
            decoder: Some(gd),
        })
    })
}

/// Shared body of the two image-to-image stages.
fn train_paired(
    cfg: &StageConfig,
    encoder: &mut EncoderModel<f32>,
    decoder: &mut DecoderModel<f32>,
    data: &Dataset<PairedSample>,
    loss_fn: fn(&[FeatureMap<f32>], &[FeatureMap<f32>]) -> crate::losses::Result<(LossValue, Vec<FeatureMap<f32>>)>,
) -> Result<StageOutcome> {
    let mut batches = sampler(data.len(), cfg.seed)?;
    run_stage(cfg, encoder, Some(decoder), |enc, dec, rng| {
        let dec = dec.expect("image decoder");
        let mut outputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut caches = Vec::with_capacity(cfg.batch_size);
        for i in batches.next_batch(cfg.batch_size) {
            let pair = paired_crop(&data.samples[i], cfg.crop_size, rng)?;
            let (f, ec) = enc.forward_cached(&FeatureMap::from_image(pair.input()))?;
            let (o, dc) = dec.forward_cached(&f)?;
            outputs.push(o);
            targets.push(FeatureMap::from_image(pair.target()));
            caches.push((ec, dc));
        }
        let (loss, grads) = loss_fn(&outputs, &targets)?;
        let mut ge = Gradients::for_store(enc.params());
        let mut gd = Gradients::for_store(dec.params());
        for ((ec, dc), g) in caches.iter().zip(&grads) {
            let df = dec.backward(dc, g, &mut gd);
            enc.backward(ec, &df, &mut ge);
        }
        Ok(StepResult {
            loss,
            encoder: ge,
            decoder: Some(gd),
        })
    })
}

/// Trains the blur-reconstruction teacher from scratch on (blurred, clear)
/// pairs.
pub fn train_reconstruction(
    cfg: &StageConfig,
    arch: ArchDescriptor,
    data: &Dataset<PairedSample>,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Recon)?;
    let mut encoder = EncoderModel::<f32>::init(cfg.seed, arch)?;
    let mut decoder = DecoderModel::<f32>::init(cfg.seed.wrapping_add(1), DecoderKind::Reconstruction, arch)?;
    train_paired(cfg, &mut encoder, &mut decoder, data, recon_loss_grad::<f32>)
}

/// Distills the teachers into a freshly initialized student encoder using
/// direct and indirect feature matching. Teachers are never modified.
pub fn distill(teachers: &Teachers, data: &Dataset<Image>, cfg: &StageConfig) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Distill)?;
    let arch = teachers.arch();
    for (enc, dec) in teachers.recog.iter().chain(&teachers.recon) {
        if *enc.arch() != arch {
            return Err(TrainError::Config("teacher architectures differ".into()));
        }
        if !dec.is_frozen() {
            return Err(TrainError::Config("teacher decoders must be frozen".into()));
        }
    }
    let mut student = EncoderModel::<f32>::init(cfg.seed, arch)?;
    let mut batches = sampler(data.len(), cfg.seed)?;
    run_stage(cfg, &mut student, None, |enc, _, rng| {
        let mut feats = Vec::with_capacity(cfg.batch_size);
        let mut caches = Vec::with_capacity(cfg.batch_size);
        let mut recog_feats = Vec::new();
        let mut recon_feats = Vec::new();
        for i in batches.next_batch(cfg.batch_size) {
            let crop = random_crop(&data.samples[i], cfg.crop_size, rng)?;
            let x = FeatureMap::from_image(&crop);
            let (f, c) = enc.forward_cached(&x)?;
            feats.push(f);
            caches.push(c);
            if let Some((t, _)) = &teachers.recog {
                recog_feats.push(t.forward_map(&x)?);
            }
            if let Some((t, _)) = &teachers.recon {
                recon_feats.push(t.forward_map(&x)?);
            }
        }
        let recog = teachers.recog.as_ref().map(|(_, d)| (recog_feats.as_slice(), d));
        let recon = teachers.recon.as_ref().map(|(_, d)| (recon_feats.as_slice(), d));
        let (direct, mut grads) = kd_direct_loss_grad(&feats, recog.map(|r| r.0), recon.map(|r| r.0))?;
        let (indirect, gi) = kd_indirect_loss_grad(
            &feats,
            recog.map(|(features, decoder)| IndirectTeacher { features, decoder }),
            recon.map(|(features, decoder)| IndirectTeacher { features, decoder }),
        )?;
        for (a, b) in grads.iter_mut().zip(&gi) {
            a.add_assign(b);
        }
        let mut ge = Gradients::for_store(enc.params());
        for (c, g) in caches.iter().zip(&grads) {
            enc.backward(c, g, &mut ge);
        }
        Ok(StepResult {
            loss: kd_total_loss(&direct, &indirect),
            encoder: ge,
            decoder: None,
        })
    })
}

/// Fine-tunes `encoder` together with a freshly initialized deraining
/// decoder on synthetic pairs; the encoder moves at the smaller rate.
///
/// Passing a freshly initialized encoder gives the from-scratch variant.
pub fn finetune(
    encoder: EncoderModel<f32>,
    data: &Dataset<PairedSample>,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Finetune)?;
    let arch = *encoder.arch();
    let mut encoder = encoder;
    let mut decoder = DecoderModel::<f32>::init(cfg.seed.wrapping_add(1), DecoderKind::Deraining, arch)?;
    train_paired(cfg, &mut encoder, &mut decoder, data, finetune_loss_grad::<f32>)
}
