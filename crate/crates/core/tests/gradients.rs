mod common;

use candle_core::DType;
use common::*;
use panelforge_core::adapter::{adapter_loss, LossWeights};
use panelforge_core::dialog::{build_dialog_mask, inject_dialog, DialogEmbedding};
use panelforge_core::encoders::CharacterTokens;
use panelforge_core::layout_attention::{build_attention_mask, masked_dual_attention, DualAttentionWeights};
use panelforge_core::{BBox, ParamStore};

const TOL: f64 = 1e-4;
const H: f64 = 1e-3;
const FLOOR: f64 = 1e-7;

#[test]
fn masked_dual_attention_gradients() {
    let ps = ParamStore::new(3, DType::F64);
    let w = DualAttentionWeights::new(&ps, "attn", 4, 6, 2).unwrap();
    randomize_trainables(&ps, 3, 0.5);
    let boxes = [BBox::new(0, 0, 20, 32), BBox::new(12, 8, 32, 24)];
    let mask = build_attention_mask(&boxes, (32, 32), (3, 3), 2).unwrap();
    let tokens = CharacterTokens::new(randn(1, &[1, 6, 6]), vec![vec![true, true]], 2).unwrap();
    let z = randn(2, &[1, 9, 4]);
    let text = randn(3, &[1, 3, 6]);
    let r = randn(4, &[1, 9, 4]);
    let loss = || {
        let out = masked_dual_attention(&z, &text, &tokens, &[mask.clone()], &w, 0.6).unwrap();
        (out * &r).unwrap().sum_all().unwrap()
    };
    let rep = grad_check(&ps.trainable(), loss, 64, H, FLOOR);
    assert!(rep.worst <= TOL, "{rep:?}");
    assert_eq!(rep.checked, 4 * 4 + 4 * 6 * 4);
}

#[test]
fn inject_dialog_gradients() {
    let ps = ParamStore::new(5, DType::F64);
    let emb = DialogEmbedding::new(&ps, "dialog", 3).unwrap();
    randomize_trainables(&ps, 5, 0.5);
    let masks = [
        build_dialog_mask(&[BBox::new(0, 0, 16, 8)], (32, 32), (4, 4)).unwrap(),
        build_dialog_mask(&[], (32, 32), (4, 4)).unwrap(),
    ];
    let z = randn(6, &[2, 3, 4, 4]);
    let r = randn(7, &[2, 3, 4, 4]);
    let loss = || {
        let out = inject_dialog(&z, &emb, &masks).unwrap();
        (out.sqr().unwrap() * &r).unwrap().sum_all().unwrap()
    };
    let rep = grad_check(&ps.trainable(), loss, 8, H, FLOOR);
    assert!(rep.worst <= TOL, "{rep:?}");
    assert_eq!(rep.checked, 3);
}

#[test]
fn adapter_loss_gradients() {
    let s = tiny_adapter_setup(11);
    let vars = s.ps.trainable();
    assert!(vars.iter().all(|(n, _)| n.starts_with("adapter.")));
    let loss = || adapter_loss(&s.adapter, &s.generator, &s.batch, &LossWeights::default()).unwrap().total;
    let rep = grad_check(&vars, loss, 6, H, FLOOR);
    assert!(rep.worst <= TOL, "{rep:?}");
    assert!(rep.checked > 20);
}

#[test]
fn loss_total_is_weighted_sum() {
    let s = tiny_adapter_setup(12);
    let mut draws = vec![LossWeights::default()];
    for k in 0..19u64 {
        let w = randn(100 + k, &[3]).abs().unwrap().to_vec1::<f64>().unwrap();
        draws.push(LossWeights { lm: w[0], mse: w[1] * 5.0, diff: w[2] });
    }
    for w in draws {
        let c = adapter_loss(&s.adapter, &s.generator, &s.batch, &w).unwrap();
        let [lm, mse, diff, total] = c.values().unwrap();
        let want = w.lm * lm + w.mse * mse + w.diff * diff;
        assert!((total - want).abs() <= 4.0 * f64::EPSILON * want.abs(), "{w:?}: {total} vs {want}");
    }
}

#[test]
fn frozen_generator_gets_no_gradient() {
    let s = tiny_adapter_setup(13);
    let total = adapter_loss(&s.adapter, &s.generator, &s.batch, &LossWeights::default()).unwrap().total;
    let grads = total.backward().unwrap();
    for (name, v) in s.ps.all() {
        if !name.starts_with("adapter.") || name.starts_with("adapter.backbone") {
            let g = grads.get(v.as_tensor());
            let zero = g.map_or(true, |g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() == 0.0);
            assert!(zero || s.ps.is_frozen(&name), "{name}");
        }
    }
}
