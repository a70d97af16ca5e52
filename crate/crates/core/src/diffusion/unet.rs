//! Two-stage toy U-Net with dialog injection after the first convolution and
//! dual masked cross-attention blocks.
//!
//! Normalization is per pixel and there is no spatial self-attention, so with
//! 1x1 kernels a position's output depends only on its own column of the
//! latent (and its 2x2 pooling block).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::dialog::{inject_dialog_tensor, DialogEmbedding, DialogMask};
use crate::encoders::CharacterTokens;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layout_attention::{dual_attention, stack_mask_bias, DualAttentionWeights, LayoutAttentionMask};
use crate::nn::{conv2d, Conv2d, linear, sinusoidal, ChannelNorm, LayerNorm};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub channels: [usize; 2],
    pub heads: usize,
    /// Width of text and character tokens.
    pub context_dim: usize,
    pub kernel: usize,
    pub attn_down: bool,
    pub attn_mid: bool,
    pub attn_up: bool,
    pub t_max: usize,
    /// Dialog boxes enter as sinusoidal features added to the timestep
    /// embedding instead of the spatial embedding.
    pub fourier_dialog: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 3,
            channels: [32, 64],
            heads: 2,
            context_dim: 64,
            kernel: 3,
            attn_down: true,
            attn_mid: true,
            attn_up: true,
            t_max: 1000,
            fourier_dialog: false,
        }
    }
}

impl DenoiserConfig {
    pub fn temb_dim(&self) -> usize {
        self.channels[0] * 4
    }

    /// Query-grid resolutions of the attention layers for a latent size.
    pub fn attention_resolutions(&self, latent: (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.attn_down || self.attn_up {
            out.push(latent);
        }
        if self.attn_mid {
            out.push((latent.0 / 2, latent.1 / 2));
        }
        out
    }

    pub fn check_latent(&self, latent: (usize, usize)) -> Result<()> {
        if latent.0 < 2 || latent.1 < 2 || latent.0 % 2 != 0 || latent.1 % 2 != 0 {
            return Err(Error::shape(
                "denoiser",
                format!("latent {}x{} must be even in both axes", latent.0, latent.1),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.channels.iter().any(|c| c % self.heads != 0) {
            return Err(Error::Config("channel widths must divide by the head count".into()));
        }
        Ok(())
    }
}

/// Width of the per-box sinusoidal features used by the Fourier ablations.
pub const BOX_FEATURES: usize = 64;

/// Sinusoidal features of a box normalized to the panel; 16 per coordinate.
pub fn box_features(b: &BBox, panel: (u32, u32)) -> Vec<f64> {
    let coords = [
        b.x0 as f64 / panel.0 as f64,
        b.y0 as f64 / panel.1 as f64,
        b.x1 as f64 / panel.0 as f64,
        b.y1 as f64 / panel.1 as f64,
    ];
    let mut out = Vec::with_capacity(BOX_FEATURES);
    for c in coords {
        for k in 0..8 {
            let f = std::f64::consts::PI * (1u32 << k) as f64 * c;
            out.push(f.sin());
            out.push(f.cos());
        }
    }
    out
}

/// Everything the denoiser consumes besides `z_t` and `t`, prepared once per
/// sampling run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub text: Tensor,
    pub chars: Option<Tensor>,
    /// Additive character-branch bias per attention resolution.
    pub bias: BTreeMap<(usize, usize), Tensor>,
    /// `(B, 1, H, W)` dialog mask at latent resolution.
    pub dialog: Option<Tensor>,
    /// `(B, BOX_FEATURES)` summed dialog box features (Fourier arm).
    pub dialog_features: Option<Tensor>,
    pub alpha: f64,
}

impl Prepared {
    /// Build from explicit masks: `masks[res][b]`, `dialog[b]`.
    pub fn new(
        text: Tensor,
        chars: Option<&CharacterTokens>,
        masks: &BTreeMap<(usize, usize), Vec<LayoutAttentionMask>>,
        dialog: &[DialogMask],
        alpha: f64,
    ) -> Result<Self> {
        let dtype = text.dtype();
        let device = text.device().clone();
        let mut bias = BTreeMap::new();
        if let Some(ch) = chars {
            for (res, ms) in masks {
                for m in ms {
                    if m.n_slots() != ch.n_slots() {
                        return Err(Error::shape("denoiser", "mask slots differ from character slots"));
                    }
                }
                bias.insert(*res, stack_mask_bias(ms, ch.n_q(), dtype, &device)?);
            }
        }
        let dialog = if dialog.is_empty() {
            None
        } else {
            let parts = dialog
                .iter()
                .map(|m| m.to_tensor(dtype, &device))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::cat(&parts, 0)?)
        };
        Ok(Prepared {
            text,
            chars: chars.map(|c| c.tensor().clone()),
            bias,
            dialog,
            dialog_features: None,
            alpha,
        })
    }

    pub fn with_text(&self, text: Tensor) -> Self {
        Prepared { text, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: ChannelNorm,
    c1: Conv2d,
    temb: Linear,
    n2: ChannelNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &ParamStore, name: &str, cin: usize, cout: usize, temb: usize, k: usize) -> Result<Self> {
        Ok(ResBlock {
            n1: ChannelNorm::new(ps, &format!("{name}.n1"), cin)?,
            c1: conv2d(ps, &format!("{name}.c1"), cin, cout, k, 1)?,
            temb: linear(ps, &format!("{name}.temb"), temb, cout, true)?,
            n2: ChannelNorm::new(ps, &format!("{name}.n2"), cout)?,
            c2: conv2d(ps, &format!("{name}.c2"), cout, cout, k, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(conv2d(ps, &format!("{name}.skip"), cin, cout, 1, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttnBlock {
    norm: LayerNorm,
    attn: DualAttentionWeights,
    out: Linear,
}

impl CrossAttnBlock {
    fn new(ps: &ParamStore, name: &str, ch: usize, ctx: usize, heads: usize) -> Result<Self> {
        Ok(CrossAttnBlock {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), ch)?,
            attn: DualAttentionWeights::new(ps, &format!("{name}.attn"), ch, ctx, heads)?,
            out: linear(ps, &format!("{name}.out"), ch, ch, true)?,
        })
    }

    fn forward(&self, x: &Tensor, prep: &Prepared, layer: &str) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let normed = self.norm.forward(&tokens)?;
        let chars = match &prep.chars {
            Some(ch) => {
                let bias = prep.bias.get(&(h, w)).ok_or_else(|| {
                    Error::shape(layer, format!("no layout mask prepared for {h}x{w}"))
                })?;
                Some((ch, bias))
            }
            None => None,
        };
        let a = dual_attention(&normed, &prep.text, chars, &self.attn, prep.alpha)
            .map_err(|e| match e {
                Error::Shape { message, .. } => Error::shape(layer, message),
                other => other,
            })?;
        let out = (tokens + self.out.forward(&a)?)?;
        Ok(out.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    conv_in: Conv2d,
    dialog: DialogEmbedding,
    dialog_fourier: Option<Linear>,
    t1: Linear,
    t2: Linear,
    down_res: ResBlock,
    down_attn: Option<CrossAttnBlock>,
    down_conv: Conv2d,
    mid_res1: ResBlock,
    mid_attn: Option<CrossAttnBlock>,
    mid_res2: ResBlock,
    up_conv: Conv2d,
    up_res: ResBlock,
    up_attn: Option<CrossAttnBlock>,
    norm_out: ChannelNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(ps: &ParamStore, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1] = cfg.channels;
        let k = cfg.kernel;
        let td = cfg.temb_dim();
        let n = "denoiser";
        let attn = |on: bool, name: &str, ch: usize| -> Result<Option<CrossAttnBlock>> {
            if on {
                Ok(Some(CrossAttnBlock::new(ps, &format!("{n}.{name}"), ch, cfg.context_dim, cfg.heads)?))
            } else {
                Ok(None)
            }
        };
        Ok(Denoiser {
            config: cfg.clone(),
            conv_in: conv2d(ps, &format!("{n}.conv_in"), cfg.latent_channels, c0, k, 1)?,
            dialog: DialogEmbedding::new(ps, "dialog", c0)?,
            dialog_fourier: if cfg.fourier_dialog {
                Some(linear(ps, "dialog.fourier", BOX_FEATURES, td, true)?)
            } else {
                None
            },
            t1: linear(ps, &format!("{n}.time.l1"), c0, td, true)?,
            t2: linear(ps, &format!("{n}.time.l2"), td, td, true)?,
            down_res: ResBlock::new(ps, &format!("{n}.down.res"), c0, c0, td, k)?,
            down_attn: attn(cfg.attn_down, "down.attn", c0)?,
            down_conv: conv2d(ps, &format!("{n}.down.conv"), c0, c1, k, 1)?,
            mid_res1: ResBlock::new(ps, &format!("{n}.mid.res1"), c1, c1, td, k)?,
            mid_attn: attn(cfg.attn_mid, "mid.attn", c1)?,
            mid_res2: ResBlock::new(ps, &format!("{n}.mid.res2"), c1, c1, td, k)?,
            up_conv: conv2d(ps, &format!("{n}.up.conv"), c1, c0, k, 1)?,
            up_res: ResBlock::new(ps, &format!("{n}.up.res"), 2 * c0, c0, td, k)?,
            up_attn: attn(cfg.attn_up, "up.attn", c0)?,
            norm_out: ChannelNorm::new(ps, &format!("{n}.norm_out"), c0)?,
            conv_out: conv2d(ps, &format!("{n}.conv_out"), c0, cfg.latent_channels, k, 1)?,
        })
    }

    pub fn dialog_embedding(&self) -> &DialogEmbedding {
        &self.dialog
    }

    fn time_embedding(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let c0 = self.config.channels[0];
        let v: Vec<f64> = t.iter().map(|&t| t as f64).collect();
        let feats = Tensor::from_vec(sinusoidal(&v, c0, 10_000.0), (t.len(), c0), device)?.to_dtype(dtype)?;
        Ok(self.t2.forward(&self.t1.forward(&feats)?.silu()?)?)
    }

    /// The first convolution followed by dialog injection (the injection hook).
    pub fn stem(&self, z_t: &Tensor, prep: &Prepared) -> Result<Tensor> {
        let h = self.conv_in.forward(z_t)?;
        match (&prep.dialog, &self.dialog_fourier) {
            (Some(mask), None) => inject_dialog_tensor(&h, &self.dialog.e_d, mask)
                .map_err(|e| Error::shape("denoiser.dialog", e.to_string())),
            _ => Ok(h),
        }
    }

    /// Predict the noise in `z_t` (`(B, latent_channels, H, W)`), one timestep
    /// per batch element.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], prep: &Prepared) -> Result<Tensor> {
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::shape("denoiser.conv_in", format!("expected {} channels, got {c}", self.config.latent_channels)));
        }
        if t.len() != b {
            return Err(Error::shape("denoiser.time", format!("{} timesteps for batch {b}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&t| t >= self.config.t_max) {
            return Err(Error::shape("denoiser.time", format!("timestep {bad} >= {}", self.config.t_max)));
        }
        self.config.check_latent((h, w))?;
        let dtype = z_t.dtype();
        let mut temb = self.time_embedding(t, dtype, z_t.device())?;
        if let (Some(proj), Some(f)) = (&self.dialog_fourier, &prep.dialog_features) {
            temb = (temb + proj.forward(f)?)?;
        }

        let mut x = self.stem(z_t, prep)?;
        x = self.down_res.forward(&x, &temb)?;
        if let Some(a) = &self.down_attn {
            x = a.forward(&x, prep, "denoiser.down.attn")?;
        }
        let skip = x.clone();
        x = self.down_conv.forward(&x.avg_pool2d(2)?)?;
        x = self.mid_res1.forward(&x, &temb)?;
        if let Some(a) = &self.mid_attn {
            x = a.forward(&x, prep, "denoiser.mid.attn")?;
        }
        x = self.mid_res2.forward(&x, &temb)?;
        x = self.up_conv.forward(&x.upsample_nearest2d(h, w)?)?;
        x = Tensor::cat(&[&x, &skip], 1)?;
        x = self.up_res.forward(&x, &temb)?;
        if let Some(a) = &self.up_attn {
            x = a.forward(&x, prep, "denoiser.up.attn")?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?)
    }
}
