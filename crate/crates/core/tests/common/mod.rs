//! Reference oracles and tiny fixtures shared by the integration and
//! acceptance tests. Oracles work in exact integer arithmetic and never call
//! the library routine they check.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use panelforge_core::adapter::{AdapterBatch, AdapterConfig, AdapterModel, FrozenGenerator};
use panelforge_core::diffusion::{DenoiserConfig, ModelConfig, PanelLayout};
use panelforge_core::encoders::{CharacterTokens, EncoderConfig};
use panelforge_core::text::TextConfig;
use panelforge_core::{BBox, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NEG: f64 = -1e9;

/// Cells along one axis whose center `(k + 1/2) * extent / cells` lies in
/// `[lo, hi)`, compared as `2 * lo * cells <= (2k + 1) * extent < 2 * hi * cells`.
fn centers_inside(lo: u32, hi: u32, extent: u32, cells: usize) -> Vec<usize> {
    (0..cells)
        .filter(|&k| {
            let c = (2 * k as u64 + 1) * extent as u64;
            2 * lo as u64 * cells as u64 <= c && c < 2 * hi as u64 * cells as u64
        })
        .collect()
}

/// Cell holding the box midpoint along one axis.
fn midpoint_cell(lo: u32, hi: u32, extent: u32, cells: usize) -> usize {
    let k = (lo as u64 + hi as u64) * cells as u64 / (2 * extent as u64);
    (k as usize).min(cells - 1)
}

/// Per-cell membership, optionally growing an empty axis to its midpoint cell.
pub fn cell_in_box(b: &BBox, panel: (u32, u32), grid: (usize, usize), row: usize, col: usize, grow: bool) -> bool {
    let (rows, cols) = grid;
    let mut xs = centers_inside(b.x0, b.x1, panel.0, cols);
    let mut ys = centers_inside(b.y0, b.y1, panel.1, rows);
    if grow && xs.is_empty() {
        xs = vec![midpoint_cell(b.x0, b.x1, panel.0, cols)];
    }
    if grow && ys.is_empty() {
        ys = vec![midpoint_cell(b.y0, b.y1, panel.1, rows)];
    }
    xs.contains(&col) && ys.contains(&row)
}

/// Brute-force layout mask: rows are cells (row-major), columns are the
/// `n_c` character slots followed by the void slot.
pub fn mask_oracle(boxes: &[BBox], panel: (u32, u32), grid: (usize, usize), n_c: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for row in 0..grid.0 {
        for col in 0..grid.1 {
            let mut line = vec![NEG; n_c + 1];
            let mut any = false;
            for (k, b) in boxes.iter().enumerate() {
                if cell_in_box(b, panel, grid, row, col, true) {
                    line[k] = 0.0;
                    any = true;
                }
            }
            if !any {
                line[n_c] = 0.0;
            }
            out.push(line);
        }
    }
    out
}

/// Brute-force dialog raster: cell centers only, no growth.
pub fn dialog_oracle(boxes: &[BBox], panel: (u32, u32), grid: (usize, usize)) -> Vec<bool> {
    let mut out = Vec::new();
    for row in 0..grid.0 {
        for col in 0..grid.1 {
            out.push(boxes.iter().any(|b| cell_in_box(b, panel, grid, row, col, false)));
        }
    }
    out
}

/// Unit-cell occupancy of a box inside a 16x16 grid.
pub fn bitset16(b: &BBox) -> [u64; 4] {
    let mut s = [0u64; 4];
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let i = (y * 16 + x) as usize;
            s[i / 64] |= 1 << (i % 64);
        }
    }
    s
}

/// IoU by counting covered unit cells.
pub fn iou_sweep(a: &[u64; 4], b: &[u64; 4]) -> f64 {
    let inter: u32 = a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum();
    let union: u32 = a.iter().zip(b).map(|(x, y)| (x | y).count_ones()).sum();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every box with integer corners in `[0, n]` and positive area.
pub fn all_boxes(n: u32) -> Vec<BBox> {
    let mut out = Vec::new();
    for y0 in 0..n {
        for y1 in y0 + 1..=n {
            for x0 in 0..n {
                for x1 in x0 + 1..=n {
                    out.push(BBox::new(x0, y0, x1, y1));
                }
            }
        }
    }
    out
}

pub fn random_box<R: Rng>(rng: &mut R, panel: (u32, u32)) -> BBox {
    let x0 = rng.gen_range(0..panel.0);
    let x1 = rng.gen_range(x0 + 1..=panel.0);
    let y0 = rng.gen_range(0..panel.1);
    let y1 = rng.gen_range(y0 + 1..=panel.1);
    BBox::new(x0, y0, x1, y1)
}

/// Smallest configuration the generator accepts, for float64 checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            latent_channels: 3,
            channels: [4, 8],
            heads: 1,
            context_dim: 8,
            kernel: 3,
            attn_down: true,
            attn_mid: true,
            attn_up: true,
            t_max: 1000,
            fourier_dialog: false,
        },
        encoder: EncoderConfig {
            crop_size: 16,
            patch: 8,
            dim_a: 8,
            layers_a: 1,
            heads: 1,
            conv_channels: [4, 4, 8],
            dim_b: 8,
            width: 8,
            n_q: 2,
            n_c: 1,
            resampler_depth: 1,
            no_global_encoder: false,
        },
        text: TextConfig {
            vocab: 32,
            max_len: 4,
            width: 8,
            layers: 1,
            heads: 1,
        },
        downsample: 8,
        fourier_character: false,
    }
}

pub fn tiny_adapter_config(m: &ModelConfig) -> AdapterConfig {
    AdapterConfig {
        width: 8,
        layers: 1,
        heads: 1,
        rank: 2,
        ..AdapterConfig::for_model(m, 2)
    }
}

/// Overwrite every trainable tensor with small random values so that
/// zero-initialized paths carry gradient.
pub fn randomize_trainables(ps: &ParamStore, seed: u64, scale: f64) {
    randomize(&ps.trainable(), seed, scale);
}

pub fn randomize(vars: &[(String, Var)], seed: u64, scale: f64) {
    for (i, (_, v)) in vars.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n = v.elem_count();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::from_vec(data, v.shape(), v.device())
            .unwrap()
            .to_dtype(v.dtype())
            .unwrap();
        v.set(&t).unwrap();
    }
}

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Worst gradient mismatch found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

/// Compare autograd gradients with five-point central differences on up to
/// `per_tensor` coordinates of every variable. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(vars: &[(String, Var)], loss: F, per_tensor: usize, h: f64, floor: f64) -> GradReport
where
    F: Fn() -> Tensor,
{
    let l = loss();
    let grads = l.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut report = GradReport {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    for (name, v) in vars {
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let n = base.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for &i in &coords {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, v.shape(), v.device()).unwrap()).unwrap();
                scalar(&loss())
            };
            let numeric = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            v.set(&Tensor::from_vec(base.clone(), v.shape(), v.device()).unwrap()).unwrap();
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_at = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// A float64 generator/adapter pair at the smallest shapes, every parameter
/// (frozen or not) randomized, plus one fixed batch of two 32x32 panels.
pub struct TinyAdapterSetup {
    pub ps: ParamStore,
    pub generator: FrozenGenerator,
    pub adapter: AdapterModel,
    pub batch: AdapterBatch,
}

pub fn tiny_adapter_setup(seed: u64) -> TinyAdapterSetup {
    let ps = ParamStore::new(seed, DType::F64);
    let cfg = tiny_model_config();
    let generator = FrozenGenerator::new(&ps, &cfg).unwrap();
    let adapter = AdapterModel::new(&ps, &tiny_adapter_config(&cfg)).unwrap();
    randomize(&ps.all(), seed, 0.3);
    let slots = cfg.encoder.n_slots() * cfg.encoder.n_q;
    let width = cfg.encoder.width;
    let valid = vec![vec![true], vec![false]];
    let source = CharacterTokens::new(randn(seed + 1, &[2, slots, width]), valid.clone(), cfg.encoder.n_q).unwrap();
    let target = CharacterTokens::new(randn(seed + 2, &[2, slots, width]), valid, cfg.encoder.n_q).unwrap();
    let batch = AdapterBatch {
        captions: vec!["red harbor figure".into(), "".into()],
        source,
        target,
        latents: randn(seed + 3, &[2, 3, 4, 4]),
        layouts: vec![
            PanelLayout {
                characters: vec![BBox::new(0, 8, 16, 32)],
                dialogs: vec![BBox::new(16, 0, 32, 16)],
            },
            PanelLayout::default(),
        ],
        panel: (32, 32),
        timesteps: vec![100, 700],
        noise: randn(seed + 4, &[2, 3, 4, 4]),
    };
    TinyAdapterSetup {
        ps,
        generator,
        adapter,
        batch,
    }
}
