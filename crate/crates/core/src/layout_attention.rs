//! Layout-masked dual cross-attention.
//!
//! Image queries attend to text tokens and, separately, to character tokens.
//! The character branch is gated by a per-slot mask: slot `j < N_c` is open at
//! a query cell iff the cell lies in character `j`'s box; the void slot `N_c`
//! is open iff the cell lies in no character box. Closed entries add a large
//! negative constant to the logits.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;

use crate::encoders::CharacterTokens;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_box, BBox};
use crate::nn::{attend, linear};
use crate::params::{Init, ParamStore};

/// Stand-in for `-inf` in additive masks; keeps arithmetic finite.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutAttentionMask {
    rows: usize,
    cols: usize,
    n_c: usize,
    /// Row-major `(rows*cols) x (n_c + 1)`; true where the entry is 0.
    open: Vec<bool>,
}

impl LayoutAttentionMask {
    pub fn resolution(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn query_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn n_slots(&self) -> usize {
        self.n_c + 1
    }

    pub fn is_open(&self, token: usize, slot: usize) -> bool {
        self.open[token * self.n_slots() + slot]
    }

    pub fn value(&self, token: usize, slot: usize) -> f64 {
        if self.is_open(token, slot) {
            0.0
        } else {
            MASK_NEG
        }
    }

    /// Dense `(tokens x slots)` matrix with entries in `{0, MASK_NEG}`.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.query_tokens())
            .map(|i| (0..self.n_slots()).map(|j| self.value(i, j)).collect())
            .collect()
    }

    fn check_rows(&self) -> Result<()> {
        for i in 0..self.query_tokens() {
            if !(0..self.n_slots()).any(|j| self.is_open(i, j)) {
                return Err(Error::shape(
                    "layout mask",
                    format!("row {i} has no open slot"),
                ));
            }
        }
        Ok(())
    }

    /// Additive bias `(tokens, slots * n_q)`: each slot column repeated over
    /// that slot's `n_q` key tokens.
    pub fn expanded_bias(&self, n_q: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.query_tokens() * self.n_slots() * n_q);
        for i in 0..self.query_tokens() {
            for j in 0..self.n_slots() {
                let v = self.value(i, j);
                data.extend(std::iter::repeat_n(v, n_q));
            }
        }
        Ok(Tensor::from_vec(data, (self.query_tokens(), self.n_slots() * n_q), device)?.to_dtype(dtype)?)
    }

    /// A mask that leaves every valid character slot and the void slot open
    /// everywhere (used when box information enters another way).
    pub fn unmasked(valid: usize, n_c: usize, resolution: (usize, usize)) -> Self {
        let (rows, cols) = resolution;
        let slots = n_c + 1;
        let mut open = vec![false; rows * cols * slots];
        for i in 0..rows * cols {
            for j in 0..valid {
                open[i * slots + j] = true;
            }
            open[i * slots + n_c] = true;
        }
        LayoutAttentionMask { rows, cols, n_c, open }
    }
}

/// Rasterize character boxes (panel pixel space) onto an attention grid.
pub fn build_attention_mask(
    char_boxes: &[BBox],
    panel_size: (u32, u32),
    attn_resolution: (usize, usize),
    n_c: usize,
) -> Result<LayoutAttentionMask> {
    if char_boxes.len() > n_c {
        return Err(Error::TooManyCharacters {
            got: char_boxes.len(),
            cap: n_c,
        });
    }
    let (rows, cols) = attn_resolution;
    if rows == 0 || cols == 0 || panel_size.0 == 0 || panel_size.1 == 0 {
        return Err(Error::shape("layout mask", "empty grid or panel"));
    }
    for (k, b) in char_boxes.iter().enumerate() {
        if !b.is_proper() || !b.within(panel_size.0, panel_size.1) {
            return Err(Error::validation(
                format!("characters[{k}].bbox"),
                format!("box {:?} outside the {}x{} panel", <[u32; 4]>::from(*b), panel_size.0, panel_size.1),
            ));
        }
    }
    let slots = n_c + 1;
    let mut open = vec![false; rows * cols * slots];
    let mut covered = vec![false; rows * cols];
    for (j, b) in char_boxes.iter().enumerate() {
        for (i, inside) in rasterize_box(b, panel_size, (rows, cols), true).into_iter().enumerate() {
            if inside {
                open[i * slots + j] = true;
                covered[i] = true;
            }
        }
    }
    for (i, c) in covered.iter().enumerate() {
        open[i * slots + n_c] = !c;
    }
    let mask = LayoutAttentionMask { rows, cols, n_c, open };
    debug_assert!(mask.check_rows().is_ok());
    Ok(mask)
}

/// Stack per-sample masks into a `(B, tokens, slots * n_q)` bias.
pub fn stack_mask_bias(masks: &[LayoutAttentionMask], n_q: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let parts = masks
        .iter()
        .map(|m| m.expanded_bias(n_q, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

/// Projections of the dual cross-attention. The character-branch key/value
/// projections start as copies of the text-branch ones.
#[derive(Debug, Clone)]
pub struct DualAttentionWeights {
    pub to_q: Linear,
    pub to_k_text: Linear,
    pub to_v_text: Linear,
    pub to_k_char: Linear,
    pub to_v_char: Linear,
    pub heads: usize,
}

impl DualAttentionWeights {
    pub fn new(ps: &ParamStore, name: &str, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if query_dim % heads != 0 {
            return Err(Error::Config(format!("{name}: width {query_dim} not divisible by {heads} heads")));
        }
        let to_k_text = linear(ps, &format!("{name}.to_k_text"), context_dim, query_dim, false)?;
        let to_v_text = linear(ps, &format!("{name}.to_v_text"), context_dim, query_dim, false)?;
        let copy = |branch: &str, src: &str| {
            ps.get(
                &format!("{name}.{branch}.weight"),
                &[query_dim, context_dim],
                Init::CopyOf(format!("{name}.{src}.weight")),
            )
        };
        Ok(DualAttentionWeights {
            to_q: linear(ps, &format!("{name}.to_q"), query_dim, query_dim, false)?,
            to_k_char: Linear::new(copy("to_k_char", "to_k_text")?, None),
            to_v_char: Linear::new(copy("to_v_char", "to_v_text")?, None),
            to_k_text,
            to_v_text,
            heads,
        })
    }
}

/// Tensor-level dual attention.
///
/// `z`: `(B, L, Dq)`; `text`: `(B, T, C)`; `chars`: optional character tokens
/// `(B, S*N_q, C)` with additive bias `(B|1, L, S*N_q)`. Without `chars` the
/// result is plain text cross-attention.
pub fn dual_attention(
    z: &Tensor,
    text: &Tensor,
    chars: Option<(&Tensor, &Tensor)>,
    w: &DualAttentionWeights,
    alpha: f64,
) -> Result<Tensor> {
    let q = w.to_q.forward(z)?;
    let text_out = attend(&q, &w.to_k_text.forward(text)?, &w.to_v_text.forward(text)?, w.heads, None)?;
    let Some((chars, bias)) = chars else {
        return Ok(text_out);
    };
    let (_, l, _) = z.dims3()?;
    let (_, keys, _) = chars.dims3()?;
    let (_, bl, bk) = bias.dims3()?;
    if bl != l || bk != keys {
        return Err(Error::shape(
            "dual attention",
            format!("mask is {bl}x{bk}, expected {l} query tokens x {keys} character tokens"),
        ));
    }
    let char_out = attend(&q, &w.to_k_char.forward(chars)?, &w.to_v_char.forward(chars)?, w.heads, Some(bias))?;
    Ok((text_out + (char_out * alpha)?)?)
}

/// Dual attention with typed inputs: one mask per batch element.
pub fn masked_dual_attention(
    z: &Tensor,
    text: &Tensor,
    tokens: &CharacterTokens,
    masks: &[LayoutAttentionMask],
    w: &DualAttentionWeights,
    alpha: f64,
) -> Result<Tensor> {
    let (b, l, _) = z.dims3()?;
    if masks.len() != b {
        return Err(Error::shape("dual attention", format!("{} masks for batch {b}", masks.len())));
    }
    for m in masks {
        if m.query_tokens() != l {
            return Err(Error::shape(
                "dual attention",
                format!("mask resolution {:?} does not match {l} query tokens", m.resolution()),
            ));
        }
        if m.n_slots() != tokens.n_slots() {
            return Err(Error::shape(
                "dual attention",
                format!("mask has {} slots, tokens have {}", m.n_slots(), tokens.n_slots()),
            ));
        }
        m.check_rows()?;
    }
    let bias = stack_mask_bias(masks, tokens.n_q(), z.dtype(), z.device())?;
    dual_attention(z, text, Some((tokens.tensor(), &bias)), w, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(mask: &LayoutAttentionMask, j: usize) -> Vec<bool> {
        (0..mask.query_tokens()).map(|i| mask.is_open(i, j)).collect()
    }

    #[test]
    fn no_characters_routes_to_void() {
        let m = build_attention_mask(&[], (64, 64), (2, 2), 3).unwrap();
        for i in 0..4 {
            assert_eq!(m.to_dense()[i], vec![MASK_NEG, MASK_NEG, MASK_NEG, 0.0]);
        }
    }

    #[test]
    fn full_panel_box_closes_void() {
        let m = build_attention_mask(&[BBox::new(0, 0, 64, 48)], (64, 48), (3, 4), 2).unwrap();
        assert!(col(&m, 0).iter().all(|&v| v));
        assert!(col(&m, 2).iter().all(|&v| !v));
        assert!(col(&m, 1).iter().all(|&v| !v));
    }

    #[test]
    fn left_half_box_on_4x4() {
        let (w, h) = (80, 40);
        let m = build_attention_mask(&[BBox::new(0, 0, w / 2, h)], (w, h), (4, 4), 4).unwrap();
        let c0 = col(&m, 0);
        let void = col(&m, 4);
        for r in 0..4 {
            for c in 0..4 {
                let i = r * 4 + c;
                assert_eq!(c0[i], c < 2);
                assert_eq!(void[i], c >= 2);
            }
        }
        assert_eq!(c0.iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn too_many_and_out_of_bounds() {
        let b = BBox::new(0, 0, 4, 4);
        assert!(matches!(
            build_attention_mask(&[b, b, b], (8, 8), (2, 2), 2),
            Err(Error::TooManyCharacters { .. })
        ));
        assert!(build_attention_mask(&[BBox::new(0, 0, 9, 4)], (8, 8), (2, 2), 2).is_err());
    }

    #[test]
    fn expanded_bias_repeats_per_slot() {
        let m = build_attention_mask(&[BBox::new(0, 0, 4, 8)], (8, 8), (1, 2), 1).unwrap();
        let t = m.expanded_bias(2, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            t.to_vec2::<f64>().unwrap(),
            vec![vec![0.0, 0.0, MASK_NEG, MASK_NEG], vec![MASK_NEG, MASK_NEG, 0.0, 0.0]]
        );
    }
}
