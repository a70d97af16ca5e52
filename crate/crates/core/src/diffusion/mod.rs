//! Toy latent diffusion: schedule, sampler, denoiser and panel generation.

mod generate;
mod model;
mod schedule;
mod unet;

pub use generate::{
    blend_features, generate_latent, generate_panel, seeded_normal, spec_tokens, CharacterRef, DialogRef,
    FeatureAdapter, PanelSpec, PanelSpecDoc, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GUIDANCE, DEFAULT_STEPS, MAX_SIDE,
};
pub use model::{Model, ModelConfig, PanelLayout};
pub use schedule::{ddim_sample, NoisePredictor, NoiseSchedule, SamplerOptions};
pub use unet::{box_features, Denoiser, DenoiserConfig, Prepared, BOX_FEATURES};
