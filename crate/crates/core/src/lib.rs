//! Character- and layout-conditioned panel generation at toy scale.

pub mod adapter;
pub mod annotation;
pub mod checkpoint;
pub mod compose;
pub mod dataset;
pub mod diffusion;
pub mod dialog;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod layout_attention;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use params::ParamStore;
