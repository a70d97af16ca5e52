mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use panelforge_core::annotation::sample_training_pair;
use panelforge_core::diffusion::{blend_features, ddim_sample, NoiseSchedule, SamplerOptions};
use panelforge_core::evaluation::dialog_f1;
use panelforge_core::synthetic::pair_fixture;
use panelforge_core::BBox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn f1_hand_cases() {
    let a = BBox::new(0, 0, 10, 10);
    let b = BBox::new(20, 20, 30, 30);
    assert_eq!(dialog_f1(&[a, b], &[a, b], 0.5).f1, 1.0);
    assert_eq!(dialog_f1(&[a], &[b], 0.5).f1, 0.0);
    // 6x10 inside 10x10: IoU 0.6, plus one unmatched prediction.
    let near = BBox::new(0, 0, 6, 10);
    assert_eq!(near.iou(&a), 0.6);
    let s = dialog_f1(&[near, b], &[a], 0.5);
    assert_eq!((s.precision, s.recall), (0.5, 1.0));
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(dialog_f1(&[], &[], 0.5).f1, 1.0);
    assert_eq!(dialog_f1(&[a], &[], 0.5).f1, 0.0);
}

#[test]
fn iou_matches_area_sweep_on_16_grid() {
    let boxes = all_boxes(16);
    assert_eq!(boxes.len(), 136 * 136);
    let sets: Vec<[u64; 4]> = boxes.iter().map(bitset16).collect();
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            let want = iou_sweep(&sets[i], &sets[j]);
            assert_eq!(a.iou(b), want, "{a:?} {b:?}");
        }
    }
}

#[test]
fn self_source_fraction() {
    let ds = pair_fixture().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut own, mut total) = (0usize, 0usize);
    for k in 0..10_000 {
        let page = &ds.pages()[k % 10];
        let s = sample_training_pair(page, k % 2, 0.5, &mut rng).unwrap();
        own += s.sources.iter().filter(|c| c.is_self()).count();
        total += s.sources.len();
    }
    let frac = own as f64 / total as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

fn oracle_sample(steps: usize, x0: &Tensor, eps: &Tensor) -> Tensor {
    let sched = NoiseSchedule::cosine(1000);
    let t0 = sched.sampling_timesteps(steps).unwrap()[0];
    let z_t = sched.add_noise(x0, eps, &[t0]).unwrap();
    // Knows the clean latent, so it always reports the exact noise.
    let predictor = |z: &Tensor, t: usize| {
        let ab = sched.alpha_bar(t);
        Ok(((z - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    };
    let opts = SamplerOptions { steps, clip: Some(1.0) };
    ddim_sample(&predictor, &sched, &z_t, &opts).unwrap()
}

#[test]
fn sampler_recovers_clean_latent_with_exact_noise() {
    let x0 = randn(1, &[1, 3, 4, 4]).clamp(-1.0, 1.0).unwrap();
    let eps = randn(2, &[1, 3, 4, 4]);
    for steps in [1, 2, 10, 50] {
        let out = oracle_sample(steps, &x0, &eps);
        let d = (out - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-6, "{steps} steps: {d}");
    }
}

#[test]
fn trailing_timesteps() {
    let s = NoiseSchedule::cosine(1000);
    assert_eq!(s.sampling_timesteps(1).unwrap(), vec![999]);
    let ts = s.sampling_timesteps(50).unwrap();
    assert_eq!((ts[0], ts[1], ts[49]), (999, 979, 19));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
}

proptest! {
    #[test]
    fn blend_endpoints_are_bitwise(seed in 0u64..1000, n in 1usize..40) {
        let c = randn(seed, &[1, n, 3]);
        let h = randn(seed + 1, &[1, n, 3]);
        let bits = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&blend_features(&c, &h, 0.0).unwrap()), bits(&c));
        prop_assert_eq!(bits(&blend_features(&c, &h, 1.0).unwrap()), bits(&h));
    }

    #[test]
    fn blend_moves_monotonically_toward_adapted(seed in 0u64..1000, b1 in 0.0f64..1.0, b2 in 0.0f64..1.0) {
        let c = randn(seed, &[2, 4]);
        let h = randn(seed + 1, &[2, 4]);
        let dist = |b: f64| (blend_features(&c, &h, b).unwrap() - &h).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(dist(hi) <= dist(lo) + 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0u32..60, 0u32..60, 1u32..60, 1u32..60), b in (0u32..60, 0u32..60, 1u32..60, 1u32..60)) {
        let a = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let b = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        prop_assert_eq!(a.iou(&b), b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&a.iou(&b)));
        prop_assert_eq!(a.iou(&a), 1.0);
    }
}

#[test]
fn blend_rejects_mismatched_shapes() {
    let c = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
    let h = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
    assert!(blend_features(&c, &h, 0.4).is_err());
    assert!(blend_features(&c, &c, 1.5).is_err());
}
