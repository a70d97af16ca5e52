//! Cosine noise schedule and the deterministic DDIM sampler.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule over `t_max` discrete steps, per-step beta capped at 0.999.
    pub fn cosine(t_max: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| (((t / t_max as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for i in 0..t_max {
            let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        NoiseSchedule { alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`, one timestep per batch element.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let b = z0.dim(0)?;
        if t.len() != b {
            return Err(Error::shape("add_noise", format!("{} timesteps for batch {b}", t.len())));
        }
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
        let a: Vec<f64> = t.iter().map(|&t| self.alpha_bar[t].sqrt()).collect();
        let s: Vec<f64> = t.iter().map(|&t| (1.0 - self.alpha_bar[t]).sqrt()).collect();
        let a = Tensor::from_vec(a, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
        let s = Tensor::from_vec(s, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler, starting
    /// from the last (noisiest) step.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max() {
            return Err(Error::Config(format!("steps must be in 1..={}", self.t_max())));
        }
        let stride = self.t_max() as f64 / steps as f64;
        Ok((0..steps)
            .rev()
            .map(|k| (((k + 1) as f64 * stride).round() as usize).clamp(1, self.t_max()) - 1)
            .collect())
    }
}

/// Anything that predicts the noise in `z_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub steps: usize,
    /// Clamp the predicted clean latent to this range at every step.
    pub clip: Option<f64>,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            steps: 50,
            clip: Some(1.0),
        }
    }
}

/// Deterministic DDIM (eta = 0) from `z_T` down to a clean latent.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    opts: &SamplerOptions,
) -> Result<Tensor> {
    let ts = schedule.sampling_timesteps(opts.steps)?;
    let mut z = z_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let eps = predictor.predict(&z, t)?;
        let mut x0 = ((&z - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        if let Some(c) = opts.clip {
            x0 = x0.clamp(-c, c)?;
        }
        z = if ts.get(i + 1).is_none() {
            x0
        } else {
            ((&x0 * ab_prev.sqrt())? + (&eps * (1.0 - ab_prev).sqrt())?)?
        };
    }
    Ok(z)
}
