mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use panelforge_core::dialog::{build_dialog_mask, inject_dialog, DialogEmbedding};
use panelforge_core::encoders::CharacterTokens;
use panelforge_core::layout_attention::{build_attention_mask, masked_dual_attention, DualAttentionWeights};
use panelforge_core::{BBox, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PANELS: [(u32, u32); 4] = [(64, 64), (40, 24), (17, 33), (128, 96)];

/// Deterministic case list: every grid up to 8x8, 0..=3 boxes, several panel
/// shapes, plus every single box on a small panel.
fn mask_cases() -> Vec<(Vec<BBox>, (u32, u32), (usize, usize))> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = Vec::new();
    for rows in 1..=8 {
        for cols in 1..=8 {
            for n in 0..=3 {
                let panel = PANELS[(rows + cols + n) % PANELS.len()];
                let boxes = (0..n).map(|_| random_box(&mut rng, panel)).collect();
                cases.push((boxes, panel, (rows, cols)));
            }
        }
    }
    for b in all_boxes(6) {
        cases.push((vec![b], (6, 6), (4, 3)));
    }
    cases
}

#[test]
fn mask_matches_oracle_on_fixture_set() {
    let cases = mask_cases();
    assert!(cases.len() >= 500);
    for (boxes, panel, grid) in &cases {
        let got = build_attention_mask(boxes, *panel, *grid, 3).unwrap().to_dense();
        assert_eq!(got, mask_oracle(boxes, *panel, *grid, 3), "{boxes:?} {panel:?} {grid:?}");
    }
}

fn layout() -> impl Strategy<Value = ((u32, u32), (usize, usize), Vec<[u32; 4]>)> {
    ((1u32..80, 1u32..80), (1usize..9, 1usize..9)).prop_flat_map(|(panel, grid)| {
        let b = (0..panel.0, 0..panel.1, 1..=panel.0, 1..=panel.1).prop_map(move |(x, y, w, h)| {
            [x, y, (x + w).min(panel.0).max(x + 1), (y + h).min(panel.1).max(y + 1)]
        });
        (Just(panel), Just(grid), prop::collection::vec(b, 0..=3))
    })
}

fn boxes_of(v: &[[u32; 4]]) -> Vec<BBox> {
    v.iter().map(|&b| BBox::from(b)).collect()
}

proptest! {
    #[test]
    fn mask_oracle_random((panel, grid, raw) in layout()) {
        let boxes = boxes_of(&raw);
        let got = build_attention_mask(&boxes, panel, grid, 3).unwrap().to_dense();
        prop_assert_eq!(got, mask_oracle(&boxes, panel, grid, 3));
    }

    #[test]
    fn every_row_has_an_open_slot_and_void_is_exclusive((panel, grid, raw) in layout()) {
        let boxes = boxes_of(&raw);
        let m = build_attention_mask(&boxes, panel, grid, 3).unwrap();
        for i in 0..m.query_tokens() {
            let chars = (0..3).filter(|&j| m.is_open(i, j)).count();
            prop_assert!(chars > 0 || m.is_open(i, 3));
            prop_assert_eq!(m.is_open(i, 3), chars == 0);
            for j in boxes.len()..3 {
                prop_assert!(!m.is_open(i, j));
            }
        }
        // A box always claims at least one cell.
        for k in 0..boxes.len() {
            prop_assert!((0..m.query_tokens()).any(|i| m.is_open(i, k)));
        }
    }

    #[test]
    fn mask_is_scale_invariant((panel, grid, raw) in layout(), s in 2u32..5) {
        let boxes = boxes_of(&raw);
        let scaled: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.x0 * s, b.y0 * s, b.x1 * s, b.y1 * s)).collect();
        let a = build_attention_mask(&boxes, panel, grid, 3).unwrap();
        let b = build_attention_mask(&scaled, (panel.0 * s, panel.1 * s), grid, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dialog_mask_matches_oracle((panel, grid, raw) in layout()) {
        let boxes = boxes_of(&raw);
        let m = build_dialog_mask(&boxes, panel, grid).unwrap();
        prop_assert_eq!(m.cells().to_vec(), dialog_oracle(&boxes, panel, grid));
    }
}

#[test]
fn empty_layout_routes_everything_to_void() {
    for (rows, cols) in [(1, 1), (3, 5), (8, 8)] {
        let m = build_attention_mask(&[], (64, 64), (rows, cols), 2).unwrap();
        for i in 0..rows * cols {
            assert!(m.is_open(i, 2));
            assert!(!m.is_open(i, 0) && !m.is_open(i, 1));
        }
    }
}

fn single_layer(seed: u64) -> (ParamStore, DualAttentionWeights) {
    let ps = ParamStore::new(seed, DType::F64);
    let w = DualAttentionWeights::new(&ps, "attn", 8, 6, 2).unwrap();
    randomize_trainables(&ps, seed, 0.5);
    (ps, w)
}

#[test]
fn perturbing_a_character_moves_only_its_cells() {
    let (_ps, w) = single_layer(1);
    let (n_c, n_q, grid, panel) = (3, 2, (4, 4), (64, 64));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let n = rng.gen_range(1..=n_c);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, panel)).collect();
        let mask = build_attention_mask(&boxes, panel, grid, n_c).unwrap();
        let valid = vec![(0..n_c).map(|j| j < n).collect::<Vec<_>>()];
        let base = randn(case, &[1, (n_c + 1) * n_q, 6]);
        let z = randn(1000 + case, &[1, 16, 8]);
        let text = randn(2000 + case, &[1, 3, 6]);
        let k = rng.gen_range(0..n);
        let mut bump = vec![0.0; (n_c + 1) * n_q * 6];
        for v in &mut bump[k * n_q * 6..(k + 1) * n_q * 6] {
            *v = rng.gen_range(0.5..1.5);
        }
        let bumped = (&base + Tensor::from_vec(bump, base.shape(), &Device::Cpu).unwrap()).unwrap();
        let run = |t: &Tensor| {
            let tokens = CharacterTokens::new(t.clone(), valid.clone(), n_q).unwrap();
            masked_dual_attention(&z, &text, &tokens, &[mask.clone()], &w, 0.6)
                .unwrap()
                .squeeze(0)
                .unwrap()
                .to_vec2::<f64>()
                .unwrap()
        };
        let (a, b) = (run(&base), run(&bumped));
        for i in 0..16 {
            let d = a[i].iter().zip(&b[i]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if mask.is_open(i, k) {
                assert!(d > 0.0, "case {case}: open cell {i} did not move");
            } else {
                assert_eq!(d, 0.0, "case {case}: closed cell {i} moved by {d}");
            }
        }
    }
}

#[test]
fn dialog_injection_is_exact() {
    let ps = ParamStore::new(2, DType::F64);
    let emb = DialogEmbedding::new(&ps, "dialog", 5).unwrap();
    randomize_trainables(&ps, 2, 1.0);
    let e_d = emb.e_d.to_vec1::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100u64 {
        let panel = (rng.gen_range(8..96), rng.gen_range(8..96));
        let grid = (rng.gen_range(1..9), rng.gen_range(1..9));
        let n = rng.gen_range(0..4);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, panel)).collect();
        let mask = build_dialog_mask(&boxes, panel, grid).unwrap();
        let want = dialog_oracle(&boxes, panel, grid);
        for z in [randn(case, &[1, 5, grid.0, grid.1]), Tensor::zeros((1, 5, grid.0, grid.1), DType::F64, &Device::Cpu).unwrap()] {
            let out = inject_dialog(&z, &emb, &[mask.clone()]).unwrap();
            let delta = (&out - &z).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
            let zero_input = z.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() == 0.0;
            for c in 0..5 {
                for r in 0..grid.0 {
                    for col in 0..grid.1 {
                        let d = delta[c][r][col];
                        if want[r * grid.1 + col] {
                            if zero_input {
                                assert_eq!(d, e_d[c]);
                            } else {
                                assert!((d - e_d[c]).abs() < 1e-12);
                            }
                        } else {
                            assert_eq!(d, 0.0, "case {case}");
                        }
                    }
                }
            }
            if boxes.is_empty() {
                let diff = (&out - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert_eq!(diff, 0.0);
            }
        }
    }
}

#[test]
fn fresh_dialog_embedding_is_identity() {
    let ps = ParamStore::new(0, DType::F64);
    let emb = DialogEmbedding::new(&ps, "dialog", 4).unwrap();
    let z = randn(1, &[2, 4, 3, 3]);
    let m = build_dialog_mask(&[BBox::new(0, 0, 30, 30)], (30, 30), (3, 3)).unwrap();
    let out = inject_dialog(&z, &emb, &[m.clone(), m]).unwrap();
    assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), z.flatten_all().unwrap().to_vec1::<f64>().unwrap());
}
