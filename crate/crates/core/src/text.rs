//! Hashed word tokenizer and a tiny transformer text encoder.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Embedding;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{LayerNorm, TransformerLayer};
use crate::params::{Init, ParamStore};

pub const PAD: u32 = 0;
/// First id available to hashed words.
pub const FIRST_WORD: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab: 1024,
            max_len: 16,
            width: 64,
            layers: 2,
            heads: 2,
        }
    }
}

fn word_id(word: &str, vocab: usize) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    FIRST_WORD + (h % (vocab as u64 - FIRST_WORD as u64)) as u32
}

/// Lowercased alphanumeric words, hashed into `[FIRST_WORD, vocab)`, truncated
/// and right-padded with [`PAD`] to `max_len`.
pub fn tokenize(text: &str, vocab: usize, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| word_id(&w.to_lowercase(), vocab))
        .take(max_len)
        .collect();
    ids.resize(max_len, PAD);
    ids
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    embed: Embedding,
    pos: Tensor,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(ps: &ParamStore, name: &str, cfg: &TextConfig) -> Result<Self> {
        let table = ps.get(&format!("{name}.embed"), &[cfg.vocab, cfg.width], Init::Normal(1.0))?;
        Ok(TextEncoder {
            config: cfg.clone(),
            embed: Embedding::new(table, cfg.width),
            pos: ps.get(&format!("{name}.pos"), &[cfg.max_len, cfg.width], Init::Normal(0.02))?,
            layers: (0..cfg.layers)
                .map(|i| TransformerLayer::new(ps, &format!("{name}.layers.{i}"), cfg.width, cfg.heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.width)?,
        })
    }

    pub fn token_ids(&self, captions: &[&str], device: &Device) -> Result<Tensor> {
        let l = self.config.max_len;
        let ids: Vec<u32> = captions
            .iter()
            .flat_map(|c| tokenize(c, self.config.vocab, l))
            .collect();
        Ok(Tensor::from_vec(ids, (captions.len(), l), device)?)
    }

    /// `(B, max_len, width)` token features.
    pub fn encode(&self, captions: &[&str], dtype: DType, device: &Device) -> Result<Tensor> {
        let ids = self.token_ids(captions, device)?;
        let mut x = self.embed.forward(&ids)?.to_dtype(dtype)?.broadcast_add(&self.pos)?;
        for layer in &self.layers {
            x = layer.forward(&x, None)?;
        }
        self.norm.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_case_and_punctuation_insensitive() {
        let a = tokenize("A red door.", 1024, 8);
        let b = tokenize("a RED, door", 1024, 8);
        assert_eq!(a, b);
        assert_eq!(&a[3..], &[PAD; 5]);
        assert!(a[..3].iter().all(|&t| t >= FIRST_WORD && t < 1024));
    }

    #[test]
    fn truncates_to_max_len() {
        let t = tokenize("one two three four five", 1024, 3);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|&x| x != PAD));
    }

    #[test]
    fn empty_caption_is_all_pad() {
        assert_eq!(tokenize("", 64, 4), vec![PAD; 4]);
    }

    #[test]
    fn encode_shape() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = TextEncoder::new(&ps, "denoiser.text", &TextConfig::default()).unwrap();
        let t = enc.encode(&["a cat", ""], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 16, 64]);
    }
}
