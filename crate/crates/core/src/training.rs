//! Two-stage training: the generator with its feature extractor, then the
//! caption-aware adapter against the frozen generator.
//!
//! Every random draw of step `s` comes from a ChaCha stream keyed by
//! `(seed, s)`, and epoch orders from a stream keyed by `(seed, epoch)`, so a
//! run resumed from a checkpoint replays the same batches, noise and dropout.
//! Optimizer moments are not archived and restart on resume.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{adapter_loss, AdapterBatch, AdapterConfig, AdapterModel, FrozenGenerator, LossWeights};
use crate::annotation::{sample_training_pair, shuffled_epoch, Batch, BatchSizing, Bucket, BucketSet, PanelRef, DEFAULT_BUCKETS};
use crate::checkpoint::{CheckpointArchive, RngState};
use crate::dataset::Dataset;
use crate::diffusion::{DenoiserConfig, Model, ModelConfig, PanelLayout};
use crate::encoders::{CharacterTokens, EncoderConfig};
use crate::error::{Error, Result};
use crate::imaging::images_to_tensor;
use crate::nn::mse;
use crate::params::{ParamStore, STAGE1_SECTIONS};
use crate::text::TextConfig;

/// Flat training configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    /// `toy` (default widths) or `tiny` (halved widths, for smoke tests).
    pub preset: String,
    /// Defaults to 1e-5 for stage 1 and 1e-4 for stage 2.
    pub lr: Option<f64>,
    /// Defaults to 2000 for stage 1 and 500 for stage 2.
    pub steps: Option<usize>,
    pub lambda_lm: f64,
    pub lambda_mse: f64,
    pub lambda_diff: f64,
    pub self_rate: f64,
    pub alpha: f64,
    pub caption_dropout: f64,
    pub buckets: Vec<Bucket>,
    pub batch_min: usize,
    pub batch_max: usize,
    pub pixel_budget: u64,
    pub seed: u64,
    pub fourier_dialog: bool,
    pub fourier_character: bool,
    pub no_global_encoder: bool,
    pub no_adapter: bool,
    /// Leading steps trained without character conditioning.
    pub text_warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lora_rank: usize,
    /// Emit a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            preset: "toy".into(),
            lr: None,
            steps: None,
            lambda_lm: 1.0,
            lambda_mse: 6.0,
            lambda_diff: 1.0,
            self_rate: 0.5,
            alpha: 1.0,
            caption_dropout: 0.1,
            buckets: DEFAULT_BUCKETS.to_vec(),
            batch_min: 2,
            batch_max: 8,
            pixel_budget: 8 * 128 * 128,
            seed: 0,
            fourier_dialog: false,
            fourier_character: false,
            no_global_encoder: false,
            no_adapter: false,
            text_warmup_steps: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            lora_rank: 8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig::default()
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml(source: &str, text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            file: source.to_string(),
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&path.display().to_string(), &text)
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.stage == 2 { 1e-4 } else { 1e-5 })
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(if self.stage == 2 { 500 } else { 2000 })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lm: self.lambda_lm,
            mse: self.lambda_mse,
            diff: self.lambda_diff,
        }
    }

    pub fn sizing(&self) -> BatchSizing {
        BatchSizing {
            min: self.batch_min,
            max: self.batch_max,
            pixel_budget: self.pixel_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.stage == 2 && self.no_adapter {
            return bad("the no_adapter ablation has no stage 2".into());
        }
        if !matches!(self.preset.as_str(), "toy" | "tiny") {
            return bad(format!("unknown preset `{}`", self.preset));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return bad("lr must be positive".into());
        }
        for (name, p) in [("self_rate", self.self_rate), ("caption_dropout", self.caption_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be within [0, 1]"));
            }
        }
        if self.alpha < 0.0 {
            return bad("alpha must be non-negative".into());
        }
        if self.batch_min == 0 || self.batch_min > self.batch_max {
            return bad("batch bounds must satisfy 1 <= batch_min <= batch_max".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be positive".into());
        }
        self.model_config().validate()?;
        BucketSet::new(self.buckets.clone(), self.model_config().size_multiple())?;
        Ok(())
    }

    /// Generator architecture implied by the preset and ablation flags.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = if self.preset == "tiny" {
            ModelConfig {
                denoiser: DenoiserConfig {
                    channels: [16, 32],
                    context_dim: 32,
                    ..DenoiserConfig::default()
                },
                encoder: EncoderConfig {
                    dim_a: 32,
                    conv_channels: [8, 16, 32],
                    dim_b: 32,
                    width: 32,
                    resampler_depth: 1,
                    ..EncoderConfig::default()
                },
                text: TextConfig {
                    width: 32,
                    layers: 1,
                    ..TextConfig::default()
                },
                ..ModelConfig::default()
            }
        } else {
            ModelConfig::default()
        };
        m.denoiser.fourier_dialog = self.fourier_dialog;
        m.fourier_character = self.fourier_character;
        m.encoder.no_global_encoder = self.no_global_encoder;
        m
    }

    /// Hash of every field that shapes the training trajectory; run length
    /// and checkpoint cadence are excluded so a run can be extended.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("steps");
            m.remove("checkpoint_every");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub components: Vec<(String, f64)>,
    pub lr: f64,
}

/// Callbacks fired during training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) {}

    fn on_checkpoint(&mut self, _archive: &CheckpointArchive) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: CheckpointArchive,
    pub log: Vec<LossRecord>,
}

/// Write a loss log as CSV: `step,total,<components...>,lr`.
pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    if let Some(first) = log.first() {
        let mut header = vec!["step".to_string(), "total".to_string()];
        header.extend(first.components.iter().map(|(n, _)| n.clone()));
        header.push("lr".into());
        w.write_record(&header).map_err(io)?;
    }
    for r in log {
        let mut row = vec![r.step.to_string(), r.total.to_string()];
        row.extend(r.components.iter().map(|(_, v)| v.to_string()));
        row.push(r.lr.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trailing moving average of the total loss.
pub fn smoothed(log: &[LossRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..log.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s: f64 = log[lo..=i].iter().map(|r| r.total).sum();
            s / (i + 1 - lo) as f64
        })
        .collect()
}

fn stream(seed: u64, salt: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(id);
    rng
}

const STEP_SALT: u64 = 0x5354_4550;
const EPOCH_SALT: u64 = 0x4550_4f43;

/// Deterministic batch schedule over a dataset.
struct Schedule {
    epoch_len: usize,
    epoch: Option<(u64, Vec<Batch>)>,
    seed: u64,
    buckets: BucketSet,
    sizing: BatchSizing,
}

impl Schedule {
    fn new(ds: &Dataset, cfg: &TrainConfig, factor: u32) -> Result<Self> {
        let buckets = BucketSet::new(cfg.buckets.clone(), factor)?;
        let sizing = cfg.sizing();
        let mut probe = stream(cfg.seed, EPOCH_SALT, 0);
        let epoch_len = shuffled_epoch(ds.corpus(), &buckets, &sizing, &mut probe).len();
        Ok(Schedule {
            epoch_len,
            epoch: None,
            seed: cfg.seed,
            buckets,
            sizing,
        })
    }

    fn batch(&mut self, ds: &Dataset, step: u64) -> Result<Batch> {
        if self.epoch_len == 0 {
            return Err(Error::Config("training corpus has no panels".into()));
        }
        let e = step / self.epoch_len as u64;
        if self.epoch.as_ref().map(|(k, _)| *k) != Some(e) {
            let mut rng = stream(self.seed, EPOCH_SALT, e);
            self.epoch = Some((e, shuffled_epoch(ds.corpus(), &self.buckets, &self.sizing, &mut rng)));
        }
        let (_, batches) = self.epoch.as_ref().expect("epoch set above");
        Ok(batches[step as usize % self.epoch_len].clone())
    }
}

/// Inputs of one batch in panel (bucket) space.
struct PanelBatch {
    pixels: Tensor,
    captions: Vec<String>,
    layouts: Vec<PanelLayout>,
    sources: Vec<RgbImage>,
    targets: Vec<RgbImage>,
    counts: Vec<usize>,
}

fn panel_batch<R: Rng>(
    ds: &Dataset,
    items: &[PanelRef],
    bucket: Bucket,
    model: &Model,
    self_rate: f64,
    with_characters: bool,
    rng: &mut R,
) -> Result<PanelBatch> {
    let size = model.config.encoder.crop_size as u32;
    let mut images = Vec::with_capacity(items.len());
    let mut out = PanelBatch {
        pixels: Tensor::zeros(1, model.dtype(), model.device())?,
        captions: Vec::new(),
        layouts: Vec::new(),
        sources: Vec::new(),
        targets: Vec::new(),
        counts: Vec::new(),
    };
    for r in items {
        let page = &ds.pages()[r.page];
        let panel = &page.panels[r.panel];
        let sample = sample_training_pair(page, r.panel, self_rate, rng)?.capped(model.n_c());
        let to_bucket = |b: &crate::BBox| {
            b.relative_to(&panel.bbox)
                .rescale(panel.size(), (bucket.width, bucket.height))
        };
        let mut layout = PanelLayout {
            characters: Vec::new(),
            dialogs: sample.dialog_boxes.iter().map(to_bucket).collect(),
        };
        if with_characters {
            layout.characters = sample.character_boxes.iter().map(to_bucket).collect();
            for (src, tgt) in sample.sources.iter().zip(&sample.character_boxes) {
                out.sources.push(ds.reference(r.page, &src.bbox, size));
                out.targets.push(ds.reference(r.page, tgt, size));
            }
        }
        out.counts.push(layout.characters.len());
        out.layouts.push(layout);
        out.captions.push(sample.caption);
        images.push(ds.panel_image(*r, bucket));
    }
    let refs: Vec<&RgbImage> = images.iter().collect();
    out.pixels = images_to_tensor(&refs, model.dtype(), model.device())?;
    Ok(out)
}

fn crops_tensor(model: &Model, crops: &[RgbImage]) -> Result<Option<Tensor>> {
    if crops.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&RgbImage> = crops.iter().collect();
    Ok(Some(images_to_tensor(&refs, model.dtype(), model.device())?))
}

fn normal_like<R: Rng>(shape: &[usize], model: &Model, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, model.device())?.to_dtype(model.dtype())?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_resume(archive: &CheckpointArchive, kind: &str, cfg: &TrainConfig) -> Result<()> {
    if archive.kind != kind {
        return Err(Error::Checkpoint(format!(
            "cannot resume {kind} training from a {} checkpoint",
            archive.kind
        )));
    }
    if archive.config_hash != cfg.config_hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {}, config {}",
            archive.config_hash,
            cfg.config_hash()
        )));
    }
    Ok(())
}

fn snapshot(ps: &ParamStore, kind: &str, cfg: &TrainConfig, model: &ModelConfig, step: u64) -> Result<CheckpointArchive> {
    let config = serde_json::json!({ "model": model, "train": cfg });
    let mut a = CheckpointArchive::new(kind, config, &cfg.config_hash());
    a.capture(ps)?;
    a.step = step;
    a.rng = RngState::capture(&stream(cfg.seed, STEP_SALT, step));
    a.metadata.insert("stage".into(), cfg.stage.to_string());
    Ok(a)
}

/// Architecture recorded in a checkpoint.
pub fn checkpoint_model_config(archive: &CheckpointArchive) -> Result<ModelConfig> {
    let v = archive
        .config
        .get("model")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))
}

fn optimizer(ps: &ParamStore, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        ps.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?)
}

/// Build a generator from a stage-1 checkpoint in a fresh store.
pub fn load_model(archive: &CheckpointArchive) -> Result<(ParamStore, Model)> {
    let cfg = checkpoint_model_config(archive)?;
    let ps = ParamStore::new(0, DType::F32);
    archive.load_into(&ps, &STAGE1_SECTIONS)?;
    let model = Model::new(&ps, &cfg)?;
    if ps.names().len() != archive.names().filter(|n| !n.starts_with("adapter")).count() {
        return Err(Error::Checkpoint("checkpoint does not match its model config".into()));
    }
    Ok((ps, model))
}

/// Load generator plus adapter (when the checkpoint has one), all frozen.
pub fn load_pipeline(archive: &CheckpointArchive) -> Result<(ParamStore, Model, Option<AdapterModel>)> {
    let cfg = checkpoint_model_config(archive)?;
    let ps = ParamStore::new(0, DType::F32);
    archive.load_into(&ps, &STAGE1_SECTIONS)?;
    ps.freeze_prefix("");
    let model = Model::new(&ps, &cfg)?;
    let adapter = if archive.has_section("adapter") {
        archive.load_into(&ps, &["adapter"])?;
        let rank = archive
            .config
            .pointer("/train/lora_rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("adapter checkpoint has no lora_rank".into()))?;
        Some(AdapterModel::new(&ps, &AdapterConfig::for_model(&cfg, rank as usize))?)
    } else {
        None
    };
    Ok((ps, model, adapter))
}

/// Stage 1: denoising loss with character and dialog conditioning; every
/// generator and extractor parameter is trained.
pub fn train_stage1(
    ds: &Dataset,
    cfg: &TrainConfig,
    resume: Option<&CheckpointArchive>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs stage = 1".into()));
    }
    let model_cfg = cfg.model_config();
    let ps = ParamStore::new(cfg.seed, DType::F32);
    let mut start = 0;
    if let Some(a) = resume {
        check_resume(a, "stage1", cfg)?;
        a.load_into(&ps, &STAGE1_SECTIONS)?;
        start = a.step;
    }
    let model = Model::new(&ps, &model_cfg)?;
    let mut opt = optimizer(&ps, cfg)?;
    let mut sched = Schedule::new(ds, cfg, model_cfg.size_multiple())?;
    let mut log = Vec::new();
    let end = cfg.steps() as u64;
    for step in start..end {
        let mut rng = stream(cfg.seed, STEP_SALT, step);
        let batch = sched.batch(ds, step)?;
        let with_chars = step >= cfg.text_warmup_steps as u64;
        let pb = panel_batch(ds, &batch.items, batch.bucket, &model, cfg.self_rate, with_chars, &mut rng)?;
        let captions: Vec<String> = pb
            .captions
            .iter()
            .map(|c| {
                if rng.gen::<f64>() < cfg.caption_dropout {
                    String::new()
                } else {
                    c.clone()
                }
            })
            .collect();
        let z0 = model.codec.encode(&pb.pixels)?;
        let t: Vec<usize> = (0..z0.dim(0)?)
            .map(|_| rng.gen_range(0..model.schedule.t_max()))
            .collect();
        let noise = normal_like(z0.dims(), &model, &mut rng)?;
        let tokens = model
            .characters
            .tokens(crops_tensor(&model, &pb.sources)?.as_ref(), &pb.counts)?;
        let caps: Vec<&str> = captions.iter().map(|s| s.as_str()).collect();
        let prep = model.prepare(
            model.encode_text(&caps)?,
            &tokens,
            &pb.layouts,
            (batch.bucket.width, batch.bucket.height),
            cfg.alpha,
        )?;
        let z_t = model.schedule.add_noise(&z0, &noise, &t)?;
        let loss = mse(&model.predict_noise(&z_t, &t, &prep)?, &noise)?;
        opt.backward_step(&loss)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("loss diverged at step {}", step + 1)));
        }
        let rec = LossRecord {
            step: step + 1,
            total: v,
            components: vec![("diffusion".into(), v)],
            lr: cfg.lr(),
        };
        observer.on_step(&rec);
        log.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 && step + 1 < end {
            observer.on_checkpoint(&snapshot(&ps, "stage1", cfg, &model_cfg, step + 1)?)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&ps, "stage1", cfg, &model_cfg, end.max(start))?,
        log,
    })
}

/// Stage-2 batch for `items`; sources follow `self_rate`, targets are the
/// target panel's own crops of the same characters.
pub fn adapter_batch<R: Rng>(
    ds: &Dataset,
    generator: &FrozenGenerator,
    items: &[PanelRef],
    bucket: Bucket,
    self_rate: f64,
    rng: &mut R,
) -> Result<AdapterBatch> {
    let model = &generator.model;
    let pb = panel_batch(ds, items, bucket, model, self_rate, true, rng)?;
    let source = model
        .characters
        .tokens(crops_tensor(model, &pb.sources)?.as_ref(), &pb.counts)?;
    let target = model
        .characters
        .tokens(crops_tensor(model, &pb.targets)?.as_ref(), &pb.counts)?;
    let latents = model.codec.encode(&pb.pixels)?;
    let timesteps = (0..items.len())
        .map(|_| rng.gen_range(0..model.schedule.t_max()))
        .collect();
    let noise = normal_like(latents.dims(), model, rng)?;
    Ok(AdapterBatch {
        captions: pb.captions,
        source: detach(source)?,
        target: detach(target)?,
        latents,
        layouts: pb.layouts,
        panel: (bucket.width, bucket.height),
        timesteps,
        noise,
    })
}

fn detach(t: CharacterTokens) -> Result<CharacterTokens> {
    t.with_tensor(t.tensor().detach())
}

/// Stage 2: train the adapter against the frozen stage-1 generator. Aborts if
/// any stage-1 section changes.
pub fn train_stage2(
    ds: &Dataset,
    stage1: &CheckpointArchive,
    cfg: &TrainConfig,
    resume: Option<&CheckpointArchive>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs stage = 2".into()));
    }
    let model_cfg = checkpoint_model_config(stage1)?;
    let ps = ParamStore::new(cfg.seed, DType::F32);
    stage1.load_into(&ps, &STAGE1_SECTIONS)?;
    let before: Vec<Option<String>> = STAGE1_SECTIONS
        .iter()
        .map(|s| stage1.section_hash(s))
        .collect::<Result<_>>()?;
    let mut start = 0;
    if let Some(a) = resume {
        check_resume(a, "stage2", cfg)?;
        for s in STAGE1_SECTIONS {
            if a.section_hash(s)? != stage1.section_hash(s)? {
                return Err(Error::Frozen(format!("resume checkpoint has a different {s} section")));
            }
        }
        a.load_into(&ps, &["adapter"])?;
        start = a.step;
    }
    let generator = FrozenGenerator::new(&ps, &model_cfg)?;
    let adapter = AdapterModel::new(&ps, &AdapterConfig::for_model(&model_cfg, cfg.lora_rank))?;
    if let Some((name, _)) = ps.trainable().into_iter().find(|(n, _)| !n.starts_with("adapter.")) {
        return Err(Error::Frozen(format!("{name} would be trained in stage 2")));
    }
    let mut opt = optimizer(&ps, cfg)?;
    let mut sched = Schedule::new(ds, cfg, model_cfg.size_multiple())?;
    let weights = cfg.weights();
    let mut log = Vec::new();
    let end = cfg.steps() as u64;
    let verify = |ps: &ParamStore, step: u64| -> Result<CheckpointArchive> {
        let a = snapshot(ps, "stage2", cfg, &model_cfg, step)?;
        for (s, h) in STAGE1_SECTIONS.iter().zip(&before) {
            if &a.section_hash(s)? != h {
                return Err(Error::Frozen(format!("section {s} changed during stage 2")));
            }
        }
        Ok(a)
    };
    for step in start..end {
        let mut rng = stream(cfg.seed, STEP_SALT, step);
        let batch = sched.batch(ds, step)?;
        let ab = adapter_batch(ds, &generator, &batch.items, batch.bucket, cfg.self_rate, &mut rng)?;
        let parts = adapter_loss(&adapter, &generator, &ab, &weights)?;
        opt.backward_step(&parts.total)?;
        let [lm, ms, df, total] = parts.values()?;
        if !total.is_finite() {
            return Err(Error::Config(format!("loss diverged at step {}", step + 1)));
        }
        let rec = LossRecord {
            step: step + 1,
            total,
            components: vec![("lm".into(), lm), ("mse".into(), ms), ("diff".into(), df)],
            lr: cfg.lr(),
        };
        observer.on_step(&rec);
        log.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 && step + 1 < end {
            observer.on_checkpoint(&verify(&ps, step + 1)?)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: verify(&ps, end.max(start))?,
        log,
    })
}
