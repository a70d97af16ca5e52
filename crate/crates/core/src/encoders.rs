//! Character feature extraction: two small image encoders whose outputs are
//! fused and resampled into a fixed block of character tokens.
//!
//! Encoder A is a patch transformer producing local tokens; encoder B is a
//! strided conv net producing one global vector. The resampler turns each
//! character's features into `n_q` tokens, and a separate void query set
//! (attending to a learned null token) fills the last slot.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, prepare_reference};
use crate::nn::{conv2d, Conv2d, linear, LayerNorm, PerceiverBlock, TransformerLayer};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub crop_size: usize,
    pub patch: usize,
    pub dim_a: usize,
    pub layers_a: usize,
    pub heads: usize,
    /// Channel widths of encoder B's three strided convolutions.
    pub conv_channels: [usize; 3],
    pub dim_b: usize,
    /// Width of the produced character tokens.
    pub width: usize,
    pub n_q: usize,
    pub n_c: usize,
    pub resampler_depth: usize,
    /// Drop encoder B entirely.
    pub no_global_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            crop_size: 64,
            patch: 16,
            dim_a: 64,
            layers_a: 2,
            heads: 2,
            conv_channels: [16, 32, 64],
            dim_b: 64,
            width: 64,
            n_q: 4,
            n_c: 4,
            resampler_depth: 2,
            no_global_encoder: false,
        }
    }
}

impl EncoderConfig {
    pub fn tokens_a(&self) -> usize {
        (self.crop_size / self.patch).pow(2)
    }

    pub fn n_slots(&self) -> usize {
        self.n_c + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.crop_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "crop size {} is not a multiple of patch {}",
                self.crop_size, self.patch
            )));
        }
        if self.dim_a % self.heads != 0 || self.width % self.heads != 0 {
            return Err(Error::Config("encoder widths must divide by the head count".into()));
        }
        if self.n_q == 0 {
            return Err(Error::Config("n_q must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoderOutput {
    /// `(N, tokens, dim_a)`
    pub local_tokens: Tensor,
    /// `(N, dim_b)`; absent when the global encoder is disabled.
    pub global_vector: Option<Tensor>,
}

impl ImageEncoderOutput {
    pub fn len(&self) -> usize {
        self.local_tokens.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Patch-embedding transformer.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    embed: Linear,
    pos: Tensor,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    patch: usize,
}

impl PatchEncoder {
    pub fn new(ps: &ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let patch_dim = 3 * cfg.patch * cfg.patch;
        Ok(PatchEncoder {
            embed: linear(ps, &format!("{name}.embed"), patch_dim, cfg.dim_a, true)?,
            pos: ps.get(&format!("{name}.pos"), &[cfg.tokens_a(), cfg.dim_a], Init::Normal(0.02))?,
            layers: (0..cfg.layers_a)
                .map(|i| TransformerLayer::new(ps, &format!("{name}.layers.{i}"), cfg.dim_a, cfg.heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.dim_a)?,
            patch: cfg.patch,
        })
    }

    /// `(N, 3, S, S)` -> `(N, (S/p)^2, dim_a)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let patches = x
            .reshape((n, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((n, gh * gw, c * p * p))?;
        let mut t = self.embed.forward(&patches)?.broadcast_add(&self.pos)?;
        for layer in &self.layers {
            t = layer.forward(&t, None)?;
        }
        self.norm.forward(&t)
    }
}

/// Three strided convolutions followed by global average pooling.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl ConvEncoder {
    pub fn new(ps: &ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            convs.push(conv2d(ps, &format!("{name}.conv{i}"), cin, cout, 3, 2)?);
            cin = cout;
        }
        Ok(ConvEncoder {
            convs,
            head: linear(ps, &format!("{name}.head"), cin, cfg.dim_b, true)?,
        })
    }

    /// `(N, 3, S, S)` -> `(N, dim_b)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.head.forward(&h.mean((2, 3))?)?)
    }
}

/// Query-token resampler shared by the character and void pathways.
#[derive(Debug, Clone)]
pub struct Resampler {
    proj_local: Linear,
    proj_global: Option<Linear>,
    q: Tensor,
    q_void: Tensor,
    null_token: Tensor,
    blocks: Vec<PerceiverBlock>,
    norm_out: LayerNorm,
    n_q: usize,
    width: usize,
}

impl Resampler {
    pub fn new(ps: &ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let w = cfg.width;
        Ok(Resampler {
            proj_local: linear(ps, &format!("{name}.proj_local"), cfg.dim_a, w, true)?,
            proj_global: if cfg.no_global_encoder {
                None
            } else {
                Some(linear(ps, &format!("{name}.proj_global"), cfg.dim_b, w, true)?)
            },
            q: ps.get(&format!("{name}.q"), &[cfg.n_q, w], Init::Normal(1.0))?,
            q_void: ps.get(&format!("{name}.q_void"), &[cfg.n_q, w], Init::Normal(1.0))?,
            null_token: ps.get(&format!("{name}.null"), &[1, w], Init::Normal(1.0))?,
            blocks: (0..cfg.resampler_depth)
                .map(|i| PerceiverBlock::new(ps, &format!("{name}.blocks.{i}"), w, cfg.heads))
                .collect::<Result<_>>()?,
            norm_out: LayerNorm::new(ps, &format!("{name}.norm_out"), w)?,
            n_q: cfg.n_q,
            width: w,
        })
    }

    fn run(&self, q: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let mut q = q.clone();
        for b in &self.blocks {
            q = b.forward(&q, ctx)?;
        }
        self.norm_out.forward(&q)
    }

    /// Local tokens and the broadcast global vector joined along the token axis.
    fn context(&self, enc: &ImageEncoderOutput) -> Result<Tensor> {
        let local = self.proj_local.forward(&enc.local_tokens)?;
        match (&self.proj_global, &enc.global_vector) {
            (Some(p), Some(g)) => Ok(Tensor::cat(&[&local, &p.forward(g)?.unsqueeze(1)?], 1)?),
            (None, _) => Ok(local),
            (Some(_), None) => Err(Error::shape("resampler", "global vector missing")),
        }
    }

    /// `(N, n_q, width)` tokens, one group per encoded crop.
    pub fn characters(&self, enc: &ImageEncoderOutput) -> Result<Tensor> {
        let n = enc.len();
        let ctx = self.context(enc)?;
        let q = self.q.unsqueeze(0)?.broadcast_as((n, self.n_q, self.width))?.contiguous()?;
        self.run(&q, &ctx)
    }

    /// `(1, n_q, width)`; depends only on the void query and null token.
    pub fn void_tokens(&self) -> Result<Tensor> {
        self.run(&self.q_void.unsqueeze(0)?, &self.null_token.unsqueeze(0)?)
    }
}

/// Character token block `(B, (n_c + 1) * n_q, C)` with per-slot validity.
#[derive(Debug, Clone)]
pub struct CharacterTokens {
    tokens: Tensor,
    valid: Vec<Vec<bool>>,
    n_q: usize,
}

impl CharacterTokens {
    pub fn new(tokens: Tensor, valid: Vec<Vec<bool>>, n_q: usize) -> Result<Self> {
        let (b, l, _) = tokens.dims3()?;
        if valid.len() != b {
            return Err(Error::shape("character tokens", "validity rows differ from batch"));
        }
        for v in &valid {
            if (v.len() + 1) * n_q != l {
                return Err(Error::shape(
                    "character tokens",
                    format!("{} tokens do not hold {} slots of {n_q}", l, v.len() + 1),
                ));
            }
        }
        Ok(CharacterTokens { tokens, valid, n_q })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_c(&self) -> usize {
        self.valid.first().map_or(0, |v| v.len())
    }

    pub fn n_slots(&self) -> usize {
        self.n_c() + 1
    }

    pub fn width(&self) -> usize {
        self.tokens.dim(2).unwrap_or(0)
    }

    /// Validity of the `n_c` character slots (the void slot is implicit).
    pub fn valid(&self) -> &[Vec<bool>] {
        &self.valid
    }

    pub fn valid_count(&self, b: usize) -> usize {
        self.valid[b].iter().filter(|&&v| v).count()
    }

    /// Tokens of one slot: `(n_q, C)`.
    pub fn slot(&self, b: usize, j: usize) -> Result<Tensor> {
        Ok(self.tokens.get(b)?.narrow(0, j * self.n_q, self.n_q)?)
    }

    /// `(B, slots * n_q, 1)` of 1.0 on real character slots and the void slot.
    pub fn token_weights(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::new();
        for v in &self.valid {
            for &ok in v.iter().chain(std::iter::once(&true)) {
                data.extend(std::iter::repeat_n(ok as u8 as f32, self.n_q));
            }
        }
        let l = self.n_slots() * self.n_q;
        Ok(Tensor::from_vec(data, (self.batch(), l, 1), device)?.to_dtype(dtype)?)
    }

    /// Same layout and validity with replacement features; padded slots are
    /// forced back to zero.
    pub fn with_tensor(&self, tokens: Tensor) -> Result<Self> {
        if tokens.dims() != self.tokens.dims() {
            return Err(Error::shape(
                "character tokens",
                format!("{:?} vs {:?}", tokens.dims(), self.tokens.dims()),
            ));
        }
        let w = self.token_weights(tokens.dtype(), tokens.device())?;
        CharacterTokens::new(tokens.broadcast_mul(&w)?, self.valid.clone(), self.n_q)
    }
}

/// Both encoders plus the resampler.
#[derive(Debug, Clone)]
pub struct CharacterEncoder {
    pub config: EncoderConfig,
    encoder_a: PatchEncoder,
    encoder_b: Option<ConvEncoder>,
    resampler: Resampler,
}

impl CharacterEncoder {
    pub fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CharacterEncoder {
            config: cfg.clone(),
            encoder_a: PatchEncoder::new(ps, "encoders.a", cfg)?,
            encoder_b: if cfg.no_global_encoder {
                None
            } else {
                Some(ConvEncoder::new(ps, "encoders.b", cfg)?)
            },
            resampler: Resampler::new(ps, "resampler", cfg)?,
        })
    }

    /// Encode a batch of prepared crops `(N, 3, S, S)`.
    pub fn encode(&self, crops: &Tensor) -> Result<ImageEncoderOutput> {
        let (_, c, h, w) = crops.dims4()?;
        let s = self.config.crop_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "character encoder",
                format!("expected (N, 3, {s}, {s}) crops, got {:?}", crops.dims()),
            ));
        }
        Ok(ImageEncoderOutput {
            local_tokens: self.encoder_a.forward(crops)?,
            global_vector: self.encoder_b.as_ref().map(|b| b.forward(crops)).transpose()?,
        })
    }

    /// Encode one square crop; it is resized to the encoder input size.
    pub fn encode_character(&self, crop: &RgbImage, dtype: DType, device: &Device) -> Result<ImageEncoderOutput> {
        let (w, h) = crop.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::validation("crop", "zero-area crop"));
        }
        if w != h {
            return Err(Error::validation("crop", format!("crop is {w}x{h}, not square")));
        }
        let img = prepare_reference(crop, self.config.crop_size as u32);
        self.encode(&images_to_tensor(&[&img], dtype, device)?)
    }

    pub fn resampler(&self) -> &Resampler {
        &self.resampler
    }

    /// Assemble the token block for a batch. `crops` holds every character
    /// crop of the batch in order; `counts[b]` of them belong to sample `b`.
    pub fn tokens(&self, crops: Option<&Tensor>, counts: &[usize]) -> Result<CharacterTokens> {
        let n_c = self.config.n_c;
        let n_q = self.config.n_q;
        let width = self.config.width;
        if let Some(&too_many) = counts.iter().find(|&&c| c > n_c) {
            return Err(Error::TooManyCharacters { got: too_many, cap: n_c });
        }
        let total: usize = counts.iter().sum();
        let void = self.resampler.void_tokens()?;
        let dtype = void.dtype();
        let device = void.device().clone();
        let zero = Tensor::zeros((1, n_q, width), dtype, &device)?;
        let mut table = Vec::new();
        if total > 0 {
            let crops = crops.ok_or_else(|| Error::shape("character encoder", "crops missing"))?;
            if crops.dim(0)? != total {
                return Err(Error::shape(
                    "character encoder",
                    format!("{} crops for {total} characters", crops.dim(0)?),
                ));
            }
            table.push(self.resampler.characters(&self.encode(crops)?)?);
        }
        table.push(zero);
        table.push(void);
        let table = Tensor::cat(&table, 0)?;
        let (zero_idx, void_idx) = (total as u32, total as u32 + 1);
        let mut index = Vec::with_capacity(counts.len() * (n_c + 1));
        let mut valid = Vec::with_capacity(counts.len());
        let mut next = 0u32;
        for &c in counts {
            for j in 0..n_c {
                if j < c {
                    index.push(next);
                    next += 1;
                } else {
                    index.push(zero_idx);
                }
            }
            index.push(void_idx);
            valid.push((0..n_c).map(|j| j < c).collect());
        }
        let b = counts.len();
        let index = Tensor::from_vec(index, b * (n_c + 1), &device)?;
        let tokens = table
            .index_select(&index, 0)?
            .reshape((b, (n_c + 1) * n_q, width))?;
        CharacterTokens::new(tokens, valid, n_q)
    }

    /// Convenience for one sample from raw crops.
    pub fn tokens_for_images(&self, crops: &[RgbImage], dtype: DType, device: &Device) -> Result<CharacterTokens> {
        if crops.is_empty() {
            return self.tokens(None, &[0]);
        }
        let size = self.config.crop_size as u32;
        let prepared: Vec<RgbImage> = crops.iter().map(|c| prepare_reference(c, size)).collect();
        let refs: Vec<&RgbImage> = prepared.iter().collect();
        let t = images_to_tensor(&refs, dtype, device)?;
        self.tokens(Some(&t), &[crops.len()])
    }
}

/// Per-sample token blocks built from pre-encoded outputs (batch of one).
pub fn resample_characters(
    encoder: &CharacterEncoder,
    encoded: &[ImageEncoderOutput],
    n_c_cap: usize,
) -> Result<CharacterTokens> {
    if encoded.len() > n_c_cap || n_c_cap != encoder.config.n_c {
        return Err(Error::TooManyCharacters {
            got: encoded.len(),
            cap: n_c_cap.min(encoder.config.n_c),
        });
    }
    let r = encoder.resampler();
    let void = r.void_tokens()?;
    let (_, n_q, width) = void.dims3()?;
    let mut slots = Vec::with_capacity(n_c_cap + 1);
    for e in encoded {
        slots.push(r.characters(e)?.narrow(0, 0, 1)?);
    }
    let zero = Tensor::zeros((1, n_q, width), void.dtype(), void.device())?;
    for _ in encoded.len()..n_c_cap {
        slots.push(zero.clone());
    }
    slots.push(void);
    let tokens = Tensor::cat(&slots, 1)?;
    let valid = vec![(0..n_c_cap).map(|j| j < encoded.len()).collect()];
    CharacterTokens::new(tokens, valid, n_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn setup() -> (ParamStore, CharacterEncoder) {
        let ps = ParamStore::new(3, DType::F32);
        let enc = CharacterEncoder::new(&ps, &EncoderConfig::default()).unwrap();
        (ps, enc)
    }

    #[test]
    fn token_counts() {
        let (_, enc) = setup();
        let crop = RgbImage::from_pixel(64, 64, Rgb([10, 20, 30]));
        let out = enc.encode_character(&crop, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(out.local_tokens.dims(), &[1, 16, 64]);
        assert_eq!(out.global_vector.unwrap().dims(), &[1, 64]);
    }

    #[test]
    fn rejects_non_square() {
        let (_, enc) = setup();
        let crop = RgbImage::new(64, 32);
        assert!(enc.encode_character(&crop, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn empty_block_shape_and_padding() {
        let (_, enc) = setup();
        let t = enc.tokens_for_images(&[], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.tensor().dims(), &[1, 20, 64]);
        for j in 0..4 {
            let s = t.slot(0, j).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(s, 0.0);
        }
        let v = t.slot(0, 4).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn two_characters_fill_first_slots() {
        let (_, enc) = setup();
        let a = RgbImage::from_pixel(64, 64, Rgb([255, 0, 0]));
        let b = RgbImage::from_pixel(64, 64, Rgb([0, 0, 255]));
        let t = enc.tokens_for_images(&[a, b], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.valid()[0], vec![true, true, false, false]);
        assert_eq!(t.valid_count(0), 2);
    }

    #[test]
    fn batch_assembly_matches_single() {
        let (_, enc) = setup();
        let dev = Device::Cpu;
        let a = RgbImage::from_pixel(64, 64, Rgb([255, 0, 0]));
        let b = RgbImage::from_pixel(64, 64, Rgb([0, 200, 0]));
        let single = enc.tokens_for_images(&[b.clone()], DType::F32, &dev).unwrap();
        let both = images_to_tensor(&[&a, &b], DType::F32, &dev).unwrap();
        let batch = enc.tokens(Some(&both), &[1, 1]).unwrap();
        let x = batch.tensor().get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = single.tensor().get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn too_many_characters() {
        let (_, enc) = setup();
        let crops = vec![RgbImage::from_pixel(64, 64, Rgb([0, 0, 0])); 5];
        assert!(matches!(
            enc.tokens_for_images(&crops, DType::F32, &Device::Cpu),
            Err(Error::TooManyCharacters { got: 5, cap: 4 })
        ));
    }

    #[test]
    fn without_global_encoder() {
        let ps = ParamStore::new(3, DType::F32);
        let cfg = EncoderConfig {
            no_global_encoder: true,
            ..Default::default()
        };
        let enc = CharacterEncoder::new(&ps, &cfg).unwrap();
        let crop = RgbImage::from_pixel(64, 64, Rgb([1, 2, 3]));
        let t = enc.tokens_for_images(&[crop], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.tensor().dims(), &[1, 20, 64]);
        assert!(ps.names().iter().all(|n| !n.starts_with("encoders.b")));
    }
}
