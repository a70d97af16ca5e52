use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Model, PanelLayout};
use super::schedule::{ddim_sample, SamplerOptions};
use crate::encoders::CharacterTokens;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::tensor_to_image;

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_BETA: f64 = 0.4;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 1.0;
pub const MAX_SIDE: u32 = 1024;

/// Rewrites character tokens given a caption (the stage-2 adapter).
pub trait FeatureAdapter {
    /// Adapted features with the same shape as `tokens.tensor()`.
    fn adapt(&self, caption: &str, tokens: &CharacterTokens) -> Result<Tensor>;
}

/// `(1 - beta) * c + beta * c_hat`. The endpoints return an input unchanged.
pub fn blend_features(c: &Tensor, c_hat: &Tensor, beta: f64) -> Result<Tensor> {
    if c.dims() != c_hat.dims() {
        return Err(Error::shape(
            "blend_features",
            format!("{:?} vs {:?}", c.dims(), c_hat.dims()),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    if beta == 0.0 {
        return Ok(c.clone());
    }
    if beta == 1.0 {
        return Ok(c_hat.clone());
    }
    Ok(((c * (1.0 - beta))? + (c_hat * beta)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterRef {
    /// Library id (service) or crop image path (command line).
    #[serde(alias = "image")]
    pub id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRef {
    pub bbox: BBox,
}

fn default_side() -> u32 {
    128
}

/// Wire form of a generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpecDoc {
    pub caption: String,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    #[serde(default)]
    pub characters: Vec<CharacterRef>,
    #[serde(default)]
    pub dialogs: Vec<DialogRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<f64>,
}

impl PanelSpecDoc {
    pub fn from_json(source: &str, bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            file: source.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Semantic checks; errors name the offending field.
    pub fn validate(&self, n_c: usize, size_multiple: u32) -> Result<()> {
        for (field, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v > MAX_SIDE || v % size_multiple != 0 {
                return Err(Error::validation(
                    field,
                    format!("{v} must be a positive multiple of {size_multiple} up to {MAX_SIDE}"),
                ));
            }
        }
        if self.characters.len() > n_c {
            return Err(Error::validation(
                "characters",
                format!("{} characters exceed the cap of {n_c}", self.characters.len()),
            ));
        }
        let check = |field: String, b: &BBox| {
            if !b.is_proper() || !b.within(self.width, self.height) {
                Err(Error::validation(
                    field,
                    format!(
                        "box {:?} is empty or outside the {}x{} canvas",
                        <[u32; 4]>::from(*b),
                        self.width,
                        self.height
                    ),
                ))
            } else {
                Ok(())
            }
        };
        for (i, c) in self.characters.iter().enumerate() {
            check(format!("characters[{i}].bbox"), &c.bbox)?;
        }
        for (i, d) in self.dialogs.iter().enumerate() {
            check(format!("dialogs[{i}].bbox"), &d.bbox)?;
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::validation("alpha", "must be finite and non-negative"));
            }
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::validation("beta", "must be within [0, 1]"));
            }
        }
        if let Some(s) = self.steps {
            if s == 0 || s > 1000 {
                return Err(Error::validation("steps", "must be within 1..=1000"));
            }
        }
        if let Some(g) = self.guidance {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::validation("guidance", "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Resolve character references to crop images.
    pub fn resolve<F>(&self, mut crop: F) -> Result<PanelSpec>
    where
        F: FnMut(usize, &str) -> Result<RgbImage>,
    {
        let characters = self
            .characters
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((crop(i, &c.id)?, c.bbox)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PanelSpec {
            caption: self.caption.clone(),
            width: self.width,
            height: self.height,
            characters,
            dialogs: self.dialogs.iter().map(|d| d.bbox).collect(),
            alpha: self.alpha.unwrap_or(DEFAULT_ALPHA),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            seed: self.seed,
            steps: self.steps.unwrap_or(DEFAULT_STEPS),
            guidance: self.guidance.unwrap_or(DEFAULT_GUIDANCE),
        })
    }
}

/// A generation request with crops in memory.
#[derive(Debug, Clone)]
pub struct PanelSpec {
    pub caption: String,
    pub width: u32,
    pub height: u32,
    pub characters: Vec<(RgbImage, BBox)>,
    pub dialogs: Vec<BBox>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

impl PanelSpec {
    pub fn new(caption: impl Into<String>, width: u32, height: u32) -> Self {
        PanelSpec {
            caption: caption.into(),
            width,
            height,
            characters: Vec::new(),
            dialogs: Vec::new(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seed: 0,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }

    pub fn layout(&self) -> PanelLayout {
        PanelLayout {
            characters: self.characters.iter().map(|(_, b)| *b).collect(),
            dialogs: self.dialogs.clone(),
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let doc = PanelSpecDoc {
            caption: self.caption.clone(),
            width: self.width,
            height: self.height,
            characters: self
                .characters
                .iter()
                .map(|(_, b)| CharacterRef { id: String::new(), bbox: *b })
                .collect(),
            dialogs: self.dialogs.iter().map(|&bbox| DialogRef { bbox }).collect(),
            alpha: Some(self.alpha),
            beta: Some(self.beta),
            seed: self.seed,
            steps: Some(self.steps),
            guidance: Some(self.guidance),
        };
        if self.characters.len() > model.n_c() {
            return Err(Error::TooManyCharacters {
                got: self.characters.len(),
                cap: model.n_c(),
            });
        }
        doc.validate(model.n_c(), model.config.size_multiple())
    }
}

/// Standard-normal tensor drawn from a seeded stream.
pub fn seeded_normal(seed: u64, shape: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Character tokens for a spec, adapted and blended when an adapter is given.
pub fn spec_tokens(model: &Model, adapter: Option<&dyn FeatureAdapter>, spec: &PanelSpec) -> Result<CharacterTokens> {
    let crops: Vec<RgbImage> = spec.characters.iter().map(|(c, _)| c.clone()).collect();
    let tokens = model
        .characters
        .tokens_for_images(&crops, model.dtype(), model.device())?;
    match adapter {
        Some(a) if spec.beta > 0.0 => {
            let adapted = a.adapt(&spec.caption, &tokens)?;
            tokens.with_tensor(blend_features(tokens.tensor(), &adapted, spec.beta)?)
        }
        _ => Ok(tokens),
    }
}

/// Clean latent for a spec: `(1, latent_channels, H/8, W/8)`.
pub fn generate_latent(model: &Model, adapter: Option<&dyn FeatureAdapter>, spec: &PanelSpec) -> Result<Tensor> {
    spec.validate(model)?;
    let tokens = spec_tokens(model, adapter, spec)?;
    let panel = (spec.width, spec.height);
    let cond = model.prepare(
        model.encode_text(&[spec.caption.as_str()])?,
        &tokens,
        &[spec.layout()],
        panel,
        spec.alpha,
    )?;
    let uncond = if spec.guidance != 1.0 {
        Some(cond.with_text(model.encode_text(&[""])?))
    } else {
        None
    };
    let (h, w) = model.codec.latent_size(spec.width, spec.height);
    let z_t = seeded_normal(
        spec.seed,
        &[1, model.config.denoiser.latent_channels, h, w],
        model.dtype(),
        model.device(),
    )?;
    let predict = |z: &Tensor, t: usize| -> Result<Tensor> {
        let e = model.predict_noise(z, &[t], &cond)?;
        match &uncond {
            Some(u) => {
                let eu = model.predict_noise(z, &[t], u)?;
                Ok((&eu + ((&e - &eu)? * spec.guidance)?)?)
            }
            None => Ok(e),
        }
    };
    let opts = SamplerOptions {
        steps: spec.steps,
        ..Default::default()
    };
    ddim_sample(&predict, &model.schedule, &z_t, &opts)
}

/// Generate one panel image of the requested size.
pub fn generate_panel(model: &Model, adapter: Option<&dyn FeatureAdapter>, spec: &PanelSpec) -> Result<RgbImage> {
    let z0 = generate_latent(model, adapter, spec)?;
    tensor_to_image(&model.codec.decode(&z0)?.squeeze(0)?)
}
