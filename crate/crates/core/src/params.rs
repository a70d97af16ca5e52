//! Named, seeded parameter storage shared by every model component.
//!
//! Each parameter is a [`Var`] keyed by a dotted name. The first path segment
//! selects the checkpoint section (`denoiser.*`, `encoders.*`, ...). Freshly
//! created parameters draw from an RNG seeded by `(store seed, name)`, so the
//! initial value of a parameter does not depend on construction order.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]` with `b = 1/sqrt(fan_in)`.
    FanIn(usize),
    /// Start as an exact copy of an existing parameter.
    CopyOf(String),
}

/// Maps a parameter name to its checkpoint section.
pub fn section_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "denoiser" => "denoiser",
        "encoders" => "encoders",
        "resampler" => "resampler",
        "dialog" => "dialog-embedding",
        "adapter" => "adapter",
        _ => "misc",
    }
}

pub const STAGE1_SECTIONS: [&str; 4] = ["denoiser", "encoders", "resampler", "dialog-embedding"];

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: Mutex<BTreeMap<String, Var>>,
    frozen: Mutex<Vec<String>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("params", &self.vars.lock().unwrap().len())
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            seed,
            dtype,
            device: Device::Cpu,
            vars: Mutex::new(BTreeMap::new()),
            frozen: Mutex::new(Vec::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mark every parameter under `prefix` as frozen. Frozen parameters are
    /// handed out detached from the autograd graph and excluded from
    /// [`ParamStore::trainable_vars`]. Must be called before modules are built.
    pub fn freeze_prefix(&self, prefix: &str) {
        self.frozen.lock().unwrap().push(prefix.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen
            .lock()
            .unwrap()
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    }

    /// Fetch `name`, creating it with `init` when absent.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        let var = match vars.get(name) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::shape(
                        name,
                        format!("stored {:?}, requested {:?}", v.dims(), shape),
                    ));
                }
                v.clone()
            }
            None => {
                let t = self.initial_value(name, shape, &init, &vars)?;
                let v = Var::from_tensor(&t)?;
                vars.insert(name.to_string(), v.clone());
                v
            }
        };
        drop(vars);
        if self.is_frozen(name) {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    fn initial_value(
        &self,
        name: &str,
        shape: &[usize],
        init: &Init,
        vars: &BTreeMap<String, Var>,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (*fan_in.max(&1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            Init::CopyOf(src) => {
                let v = vars
                    .get(src)
                    .ok_or_else(|| Error::Config(format!("{name}: copy source {src} missing")))?;
                if v.dims() != shape {
                    return Err(Error::shape(name, format!("copy source {src} has shape {:?}", v.dims())));
                }
                return Ok(v.as_tensor().copy()?);
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Insert or overwrite a parameter value (used when loading checkpoints).
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        let mut vars = self.vars.lock().unwrap();
        match vars.get(name) {
            Some(v) if v.dims() == value.dims() => v.set(&value)?,
            _ => {
                vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    /// All parameters in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.all()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.all()
            .into_iter()
            .filter(|(k, _)| !self.is_frozen(k))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.all()
            .into_iter()
            .filter(|(k, _)| !self.is_frozen(k))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.all().iter().map(|(_, v)| v.elem_count()).sum()
    }
}
