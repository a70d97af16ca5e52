use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{box_features, Denoiser, DenoiserConfig, Prepared, BOX_FEATURES};
use crate::dialog::build_dialog_mask;
use crate::encoders::{CharacterEncoder, CharacterTokens, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::LatentCodec;
use crate::layout_attention::{build_attention_mask, LayoutAttentionMask};
use crate::nn::linear;
use crate::params::ParamStore;
use crate::text::{TextConfig, TextEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub downsample: usize,
    /// Box features added to character tokens instead of masking attention.
    pub fourier_character: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            denoiser: DenoiserConfig::default(),
            encoder: EncoderConfig::default(),
            text: TextConfig::default(),
            downsample: 8,
            fourier_character: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.width != self.denoiser.context_dim || self.text.width != self.denoiser.context_dim {
            return Err(Error::Config(format!(
                "character width {} and text width {} must equal the cross-attention width {}",
                self.encoder.width, self.text.width, self.denoiser.context_dim
            )));
        }
        self.denoiser.validate()?;
        self.encoder.validate()
    }

    /// Pixel sizes must map to an even latent grid.
    pub fn size_multiple(&self) -> u32 {
        (self.downsample * 2) as u32
    }
}

/// Per-sample layout in panel pixel space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PanelLayout {
    pub characters: Vec<BBox>,
    pub dialogs: Vec<BBox>,
}

/// The stage-1 generator: text encoder, character encoders and denoiser.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub characters: CharacterEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    box_embed: Option<Linear>,
    dtype: DType,
    device: Device,
}

impl Model {
    pub fn new(ps: &ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            text: TextEncoder::new(ps, "denoiser.text", &config.text)?,
            characters: CharacterEncoder::new(ps, &config.encoder)?,
            denoiser: Denoiser::new(ps, &config.denoiser)?,
            schedule: NoiseSchedule::cosine(config.denoiser.t_max),
            codec: LatentCodec {
                factor: config.downsample,
            },
            box_embed: if config.fourier_character {
                Some(linear(ps, "resampler.box_embed", BOX_FEATURES, config.encoder.width, true)?)
            } else {
                None
            },
            dtype: ps.dtype(),
            device: ps.device().clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn n_c(&self) -> usize {
        self.config.encoder.n_c
    }

    pub fn encode_text(&self, captions: &[&str]) -> Result<Tensor> {
        self.text.encode(captions, self.dtype, &self.device)
    }

    /// Layout masks at every attention resolution for a batch.
    pub fn layout_masks(
        &self,
        layouts: &[PanelLayout],
        panel: (u32, u32),
        latent: (usize, usize),
        valid: &[usize],
    ) -> Result<BTreeMap<(usize, usize), Vec<LayoutAttentionMask>>> {
        let n_c = self.n_c();
        let mut out = BTreeMap::new();
        for res in self.config.denoiser.attention_resolutions(latent) {
            let masks = layouts
                .iter()
                .zip(valid)
                .map(|(l, &v)| {
                    if self.config.fourier_character {
                        Ok(LayoutAttentionMask::unmasked(v, n_c, res))
                    } else {
                        build_attention_mask(&l.characters, panel, res, n_c)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(res, masks);
        }
        Ok(out)
    }

    /// Box features added to each valid slot's tokens (Fourier character arm).
    fn add_box_features(&self, tokens: &CharacterTokens, layouts: &[PanelLayout], panel: (u32, u32)) -> Result<CharacterTokens> {
        let Some(proj) = &self.box_embed else {
            return Ok(tokens.clone());
        };
        let slots = tokens.n_slots();
        let mut feats = Vec::with_capacity(layouts.len() * slots * BOX_FEATURES);
        for (b, l) in layouts.iter().enumerate() {
            for j in 0..slots {
                match l.characters.get(j) {
                    Some(bb) if j < tokens.n_c() && tokens.valid()[b][j] => feats.extend(box_features(bb, panel)),
                    _ => feats.extend(std::iter::repeat_n(0.0, BOX_FEATURES)),
                }
            }
        }
        let f = Tensor::from_vec(feats, (layouts.len(), slots, BOX_FEATURES), &self.device)?.to_dtype(self.dtype)?;
        let e = proj.forward(&f)?;
        let (b, _, w) = e.dims3()?;
        let nq = tokens.n_q();
        let e = e
            .unsqueeze(2)?
            .broadcast_as((b, slots, nq, w))?
            .reshape((b, slots * nq, w))?;
        tokens.with_tensor((tokens.tensor() + e)?)
    }

    /// Conditioning for a batch of panels of one size.
    pub fn prepare(
        &self,
        text: Tensor,
        tokens: &CharacterTokens,
        layouts: &[PanelLayout],
        panel: (u32, u32),
        alpha: f64,
    ) -> Result<Prepared> {
        if layouts.len() != tokens.batch() {
            return Err(Error::shape("prepare", "layouts differ from character batch"));
        }
        let latent = self.codec.latent_size(panel.0, panel.1);
        self.config.denoiser.check_latent(latent)?;
        let valid: Vec<usize> = (0..tokens.batch()).map(|b| tokens.valid_count(b)).collect();
        for (l, &v) in layouts.iter().zip(&valid) {
            if l.characters.len() != v {
                return Err(Error::shape(
                    "prepare",
                    format!("{} boxes for {v} character slots", l.characters.len()),
                ));
            }
        }
        let tokens = self.add_box_features(tokens, layouts, panel)?;
        let masks = self.layout_masks(layouts, panel, latent, &valid)?;
        let mut prep = if self.config.denoiser.fourier_dialog {
            let mut p = Prepared::new(text, Some(&tokens), &masks, &[], alpha)?;
            let mut feats = Vec::with_capacity(layouts.len() * BOX_FEATURES);
            for l in layouts {
                let mut acc = vec![0.0; BOX_FEATURES];
                for d in &l.dialogs {
                    for (a, f) in acc.iter_mut().zip(box_features(d, panel)) {
                        *a += f;
                    }
                }
                feats.extend(acc);
            }
            p.dialog_features = Some(
                Tensor::from_vec(feats, (layouts.len(), BOX_FEATURES), &self.device)?.to_dtype(self.dtype)?,
            );
            p
        } else {
            let dialog = layouts
                .iter()
                .map(|l| build_dialog_mask(&l.dialogs, panel, latent))
                .collect::<Result<Vec<_>>>()?;
            Prepared::new(text, Some(&tokens), &masks, &dialog, alpha)?
        };
        prep.alpha = alpha;
        Ok(prep)
    }

    pub fn predict_noise(&self, z_t: &Tensor, t: &[usize], prep: &Prepared) -> Result<Tensor> {
        self.denoiser.forward(z_t, t, prep)
    }
}
