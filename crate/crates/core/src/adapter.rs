//! Caption-aware character feature adapter.
//!
//! A frozen random causal transformer reads `[BOS, caption, <IMG>, phi(c),
//! </IMG>]`. Trainable low-rank deltas sit on its attention projections; the
//! input resampler `phi`, output resampler `phi_out`, the two special-token
//! embeddings and the LM head are trainable. `phi_out` ends in a zero-initialized
//! projection added to the source features, so an untrained adapter returns
//! its input.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use crate::diffusion::{FeatureAdapter, Model, ModelConfig, PanelLayout};
use crate::encoders::CharacterTokens;
use crate::error::{Error, Result};
use crate::layout_attention::MASK_NEG;
use crate::nn::{attend, linear, linear_zeros, FeedForward, LayerNorm, PerceiverBlock};
use crate::params::{section_of, Init, ParamStore, STAGE1_SECTIONS};
use crate::text::tokenize;

/// Reserved ids, all below the first hashed-word id.
pub const BOS: u32 = 1;
pub const IMG: u32 = 2;
pub const IMG_END: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub rank: usize,
    pub vocab: usize,
    pub caption_len: usize,
    /// Width of the character tokens being adapted.
    pub outer_width: usize,
    /// `(n_c + 1) * n_q`.
    pub feature_tokens: usize,
    pub max_len: usize,
}

impl AdapterConfig {
    pub fn for_model(m: &ModelConfig, rank: usize) -> Self {
        AdapterConfig {
            width: 64,
            layers: 4,
            heads: 2,
            rank,
            vocab: m.text.vocab,
            caption_len: m.text.max_len,
            outer_width: m.encoder.width,
            feature_tokens: m.encoder.n_slots() * m.encoder.n_q,
            max_len: 64,
        }
    }

    pub fn seq_len(&self) -> usize {
        1 + self.caption_len + 1 + self.feature_tokens + 1
    }

    /// Hidden positions whose next-token logits must name `<IMG>` and `</IMG>`.
    pub fn special_positions(&self) -> [usize; 2] {
        let img = 1 + self.caption_len;
        [img - 1, img + self.feature_tokens]
    }
}

/// Frozen weight plus trainable `b @ a` delta.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Linear,
    a: Tensor,
    b: Tensor,
}

impl LoraLinear {
    pub fn new(ps: &ParamStore, base: &str, delta: &str, in_dim: usize, out_dim: usize, rank: usize) -> Result<Self> {
        Ok(LoraLinear {
            base: linear(ps, base, in_dim, out_dim, false)?,
            a: ps.get(&format!("{delta}.a"), &[rank, in_dim], Init::FanIn(in_dim))?,
            b: ps.get(&format!("{delta}.b"), &[out_dim, rank], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let low = x.broadcast_matmul(&self.a.t()?)?.broadcast_matmul(&self.b.t()?)?;
        Ok((self.base.forward(x)? + low)?)
    }
}

#[derive(Debug, Clone)]
struct BackboneLayer {
    ln1: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: LayerNorm,
    ff: FeedForward,
    heads: usize,
}

impl BackboneLayer {
    fn new(ps: &ParamStore, i: usize, cfg: &AdapterConfig) -> Result<Self> {
        let base = format!("adapter.backbone.layers.{i}");
        let lora = format!("adapter.lora.{i}");
        let d = cfg.width;
        let proj = |p: &str| LoraLinear::new(ps, &format!("{base}.{p}"), &format!("{lora}.{p}"), d, d, cfg.rank);
        Ok(BackboneLayer {
            ln1: LayerNorm::new(ps, &format!("{base}.ln1"), d)?,
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            o: proj("o")?,
            ln2: LayerNorm::new(ps, &format!("{base}.ln2"), d)?,
            ff: FeedForward::new(ps, &format!("{base}.ff"), d, 2)?,
            heads: cfg.heads,
        })
    }

    fn forward(&self, x: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = attend(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?, self.heads, Some(causal))?;
        let x = (x + self.o.forward(&a)?)?;
        Ok((&x + self.ff.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// `(B, 2, vocab)` next-token logits at the two special-token targets.
    pub special_logits: Tensor,
    /// `(B, feature_tokens, outer_width)` adapted features, padded slots zero.
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdapterModel {
    pub config: AdapterConfig,
    embed: Embedding,
    pos: Tensor,
    layers: Vec<BackboneLayer>,
    norm: LayerNorm,
    img: Tensor,
    img_end: Tensor,
    lm_head: Linear,
    phi_in: Linear,
    phi_pos: Tensor,
    phi_queries: Tensor,
    phi: PerceiverBlock,
    phi_out_queries: Tensor,
    phi_out: PerceiverBlock,
    phi_out_proj: Linear,
}

impl AdapterModel {
    /// Freezes the backbone prefix of `ps` before building.
    pub fn new(ps: &ParamStore, cfg: &AdapterConfig) -> Result<Self> {
        if cfg.seq_len() > cfg.max_len {
            return Err(Error::Config(format!(
                "adapter sequence of {} exceeds max length {}",
                cfg.seq_len(),
                cfg.max_len
            )));
        }
        if cfg.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        ps.freeze_prefix("adapter.backbone");
        let d = cfg.width;
        let f = cfg.feature_tokens;
        let table = ps.get("adapter.backbone.embed", &[cfg.vocab, d], Init::Normal(1.0))?;
        Ok(AdapterModel {
            config: cfg.clone(),
            embed: Embedding::new(table, d),
            pos: ps.get("adapter.backbone.pos", &[cfg.max_len, d], Init::Normal(0.02))?,
            layers: (0..cfg.layers)
                .map(|i| BackboneLayer::new(ps, i, cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, "adapter.backbone.norm", d)?,
            img: ps.get("adapter.special.img", &[1, 1, d], Init::Normal(1.0))?,
            img_end: ps.get("adapter.special.img_end", &[1, 1, d], Init::Normal(1.0))?,
            lm_head: linear(ps, "adapter.lm_head", d, cfg.vocab, true)?,
            phi_in: linear(ps, "adapter.phi.in", cfg.outer_width, d, true)?,
            phi_pos: ps.get("adapter.phi.pos", &[f, d], Init::Normal(0.02))?,
            phi_queries: ps.get("adapter.phi.queries", &[f, d], Init::Normal(1.0))?,
            phi: PerceiverBlock::new(ps, "adapter.phi.block", d, cfg.heads)?,
            phi_out_queries: ps.get("adapter.phi_out.queries", &[f, d], Init::Normal(1.0))?,
            phi_out: PerceiverBlock::new(ps, "adapter.phi_out.block", d, cfg.heads)?,
            phi_out_proj: linear_zeros(ps, "adapter.phi_out.proj", d, cfg.outer_width)?,
        })
    }

    fn causal_bias(&self, l: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f64> = (0..l * l)
            .map(|i| if i % l > i / l { MASK_NEG } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(data, (1, l, l), device)?.to_dtype(dtype)?)
    }

    /// `(h, c_hat) = adapter(caption, phi(c))`.
    pub fn forward(&self, captions: &[&str], tokens: &CharacterTokens) -> Result<AdapterOutput> {
        let cfg = &self.config;
        let c = tokens.tensor();
        let (b, f, w) = c.dims3()?;
        if f != cfg.feature_tokens || w != cfg.outer_width {
            return Err(Error::shape(
                "adapter.phi",
                format!("features {f}x{w}, expected {}x{}", cfg.feature_tokens, cfg.outer_width),
            ));
        }
        if captions.len() != b {
            return Err(Error::shape("adapter", format!("{} captions for batch {b}", captions.len())));
        }
        let l = cfg.seq_len();
        if l > cfg.max_len {
            return Err(Error::shape("adapter", format!("sequence of {l} exceeds max length {}", cfg.max_len)));
        }
        let dtype = c.dtype();
        let device = c.device();
        let d = cfg.width;

        let mut ids = Vec::with_capacity(b * (1 + cfg.caption_len));
        for cap in captions {
            ids.push(BOS);
            ids.extend(tokenize(cap, cfg.vocab, cfg.caption_len));
        }
        let ids = Tensor::from_vec(ids, (b, 1 + cfg.caption_len), device)?;
        let text = self.embed.forward(&ids)?.to_dtype(dtype)?;

        let ctx = self.phi_in.forward(c)?.broadcast_add(&self.phi_pos)?;
        let q = self.phi_queries.unsqueeze(0)?.broadcast_as((b, f, d))?.contiguous()?;
        let phi = self.phi.forward(&q, &ctx)?;

        let img = self.img.broadcast_as((b, 1, d))?;
        let img_end = self.img_end.broadcast_as((b, 1, d))?;
        let seq = Tensor::cat(&[&text, &img, &phi, &img_end], 1)?;
        let mut x = seq.broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        let causal = self.causal_bias(l, dtype, device)?;
        for layer in &self.layers {
            x = layer.forward(&x, &causal)?;
        }
        let h = self.norm.forward(&x)?;

        let [p0, p1] = cfg.special_positions();
        let special = Tensor::cat(&[h.narrow(1, p0, 1)?, h.narrow(1, p1, 1)?], 1)?;
        let special_logits = self.lm_head.forward(&special)?;

        let feat_hidden = h.narrow(1, 2 + cfg.caption_len, f)?;
        let q = self.phi_out_queries.unsqueeze(0)?.broadcast_as((b, f, d))?.contiguous()?;
        let out = self.phi_out.forward(&q, &feat_hidden)?;
        let features = (c + self.phi_out_proj.forward(&out)?)?;
        let features = tokens.with_tensor(features)?.tensor().clone();
        Ok(AdapterOutput {
            special_logits,
            features,
        })
    }
}

impl FeatureAdapter for AdapterModel {
    fn adapt(&self, caption: &str, tokens: &CharacterTokens) -> Result<Tensor> {
        if tokens.batch() != 1 {
            return Err(Error::shape("adapter", "adapt expects a single sample"));
        }
        Ok(self.forward(&[caption], tokens)?.features)
    }
}

/// Stage-1 model whose parameters are frozen in its store.
#[derive(Debug, Clone)]
pub struct FrozenGenerator {
    pub model: Model,
}

impl FrozenGenerator {
    /// Freeze every stage-1 section of `ps`, then build the model from it.
    pub fn new(ps: &ParamStore, config: &ModelConfig) -> Result<Self> {
        for p in ["denoiser", "encoders", "resampler", "dialog"] {
            ps.freeze_prefix(p);
        }
        Ok(FrozenGenerator {
            model: Model::new(ps, config)?,
        })
    }

    /// Wrap an existing model; fails unless every stage-1 parameter of `ps`
    /// is frozen.
    pub fn wrap(ps: &ParamStore, model: Model) -> Result<Self> {
        for name in ps.names() {
            if STAGE1_SECTIONS.contains(&section_of(&name)) && !ps.is_frozen(&name) {
                return Err(Error::Frozen(format!("generator parameter {name} is trainable")));
            }
        }
        Ok(FrozenGenerator { model })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lm: f64,
    pub mse: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lm: 1.0,
            mse: 6.0,
            diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, lm: &Tensor, mse: &Tensor, diff: &Tensor) -> Result<Tensor> {
        Ok((((lm * self.lm)? + (mse * self.mse)?)? + (diff * self.diff)?)?)
    }
}

/// One stage-2 batch.
#[derive(Debug, Clone)]
pub struct AdapterBatch {
    pub captions: Vec<String>,
    /// Features of the sampled source crops.
    pub source: CharacterTokens,
    /// Features of the target panel's own crops of the same characters.
    pub target: CharacterTokens,
    /// Clean target latents `(B, latent_channels, h, w)`.
    pub latents: Tensor,
    pub layouts: Vec<PanelLayout>,
    pub panel: (u32, u32),
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

#[derive(Debug, Clone)]
pub struct LossComponents {
    pub lm: Tensor,
    pub mse: Tensor,
    pub diff: Tensor,
    pub total: Tensor,
}

impl LossComponents {
    pub fn values(&self) -> Result<[f64; 4]> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([s(&self.lm)?, s(&self.mse)?, s(&self.diff)?, s(&self.total)?])
    }
}

/// Cross-entropy of the two special-token predictions.
pub fn special_token_loss(logits: &Tensor) -> Result<Tensor> {
    let (b, n, v) = logits.dims3()?;
    let flat = logits.reshape((b * n, v))?;
    let targets: Vec<u32> = (0..b).flat_map(|_| [IMG, IMG_END]).collect();
    let targets = Tensor::from_vec(targets, b * n, logits.device())?;
    let max = flat.max_keepdim(D::Minus1)?.detach();
    let shifted = flat.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let picked = shifted.gather(&targets.unsqueeze(1)?, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Mean squared error over real character slots and the void slot; padded
/// slots contribute nothing.
pub fn valid_slot_mse(pred: &Tensor, target: &CharacterTokens) -> Result<Tensor> {
    let w = target.token_weights(pred.dtype(), pred.device())?;
    let diff = (pred - target.tensor())?.broadcast_mul(&w)?;
    let count = w.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * target.width() as f64;
    Ok((diff.sqr()?.sum_all()? / count.max(1.0))?)
}

/// Weighted stage-2 objective. The generator is frozen, so gradients reach
/// only adapter parameters.
pub fn adapter_loss(
    adapter: &AdapterModel,
    generator: &FrozenGenerator,
    batch: &AdapterBatch,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let caps: Vec<&str> = batch.captions.iter().map(|s| s.as_str()).collect();
    let out = adapter.forward(&caps, &batch.source)?;
    let lm = special_token_loss(&out.special_logits)?;
    let mse = valid_slot_mse(&out.features, &batch.target)?;
    let model = &generator.model;
    let adapted = batch.source.with_tensor(out.features)?;
    let prep = model.prepare(model.encode_text(&caps)?, &adapted, &batch.layouts, batch.panel, 1.0)?;
    let z_t = model.schedule.add_noise(&batch.latents, &batch.noise, &batch.timesteps)?;
    let eps = model.predict_noise(&z_t, &batch.timesteps, &prep)?;
    let diff = (eps - &batch.noise)?.sqr()?.mean_all()?;
    let total = weights.combine(&lm, &mse, &diff)?;
    Ok(LossComponents { lm, mse, diff, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::blend_features;

    fn small() -> (ParamStore, AdapterModel, CharacterTokens) {
        let ps = ParamStore::new(11, DType::F64);
        let cfg = AdapterConfig {
            width: 16,
            layers: 2,
            heads: 2,
            rank: 2,
            vocab: 64,
            caption_len: 4,
            outer_width: 8,
            feature_tokens: 6,
            max_len: 16,
        };
        let ad = AdapterModel::new(&ps, &cfg).unwrap();
        let c = Tensor::randn(0.0f64, 1.0, (1, 6, 8), &Device::Cpu).unwrap();
        let tokens = CharacterTokens::new(c, vec![vec![true, true]], 2).unwrap();
        (ps, ad, tokens)
    }

    #[test]
    fn untrained_is_identity() {
        let (_, ad, tokens) = small();
        let out = ad.forward(&["a red door"], &tokens).unwrap();
        let d = (out.features - tokens.tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(out.special_logits.dims(), &[1, 2, 64]);
    }

    #[test]
    fn empty_caption_well_formed() {
        let (_, ad, tokens) = small();
        let out = ad.forward(&[""], &tokens).unwrap();
        assert_eq!(out.features.dims(), &[1, 6, 8]);
    }

    #[test]
    fn backbone_frozen_lora_trainable() {
        let (ps, _, _) = small();
        let trainable: Vec<String> = ps.trainable().into_iter().map(|(n, _)| n).collect();
        assert!(trainable.iter().all(|n| !n.starts_with("adapter.backbone")));
        assert!(trainable.iter().any(|n| n.starts_with("adapter.lora")));
        assert!(trainable.iter().any(|n| n == "adapter.phi_out.proj.weight"));
    }

    #[test]
    fn lm_loss_matches_manual_cross_entropy() {
        let logits = Tensor::new(&[[[1.0f64, 0.0, 2.0, -1.0], [0.5, 0.5, 0.5, 3.0]]], &Device::Cpu).unwrap();
        let got = special_token_loss(&logits).unwrap().to_scalar::<f64>().unwrap();
        let ce = |row: &[f64], k: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[k]
        };
        let want = (ce(&[1.0, 0.0, 2.0, -1.0], 2) + ce(&[0.5, 0.5, 0.5, 3.0], 3)) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn padded_slots_do_not_count() {
        let dev = Device::Cpu;
        let t = Tensor::zeros((1, 6, 8), DType::F64, &dev).unwrap();
        let target = CharacterTokens::new(t, vec![vec![true, false]], 2).unwrap();
        let mut pred = vec![0.0f64; 48];
        for v in pred.iter_mut().skip(16).take(16) {
            *v = 100.0;
        }
        let pred = Tensor::from_vec(pred, (1, 6, 8), &dev).unwrap();
        let l = valid_slot_mse(&pred, &target).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn blend_arithmetic() {
        let dev = Device::Cpu;
        let c = Tensor::zeros((1, 4, 2), DType::F64, &dev).unwrap();
        let h = Tensor::ones((1, 4, 2), DType::F64, &dev).unwrap();
        let m = blend_features(&c, &h, 0.4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(blend_features(&c, &h, 1.5).is_err());
    }
}
