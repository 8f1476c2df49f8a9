use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ura::harness::{evaluate, relative_drop, Condition, IdentityRestorer};
use ura::imaging::{load_paired_dataset, save_paired_dataset, Image, PairedSample};
use ura::metrics::{confidence_bias, identify_error, psnr_from_mse, ssim, BiasMode, Detection, DetectorReport, SsimParams};
use ura::nets::{Generator, GeneratorConfig};
use ura::nn::ModelParams;
use ura::rain::{synth_dataset, SynthMode, SynthParams};
use ura::warp::{random_flow, spatial_transform, FlowField, FlowMapping};

fn image(seed: u64, h: usize, w: usize) -> Image<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..3 * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn window5() -> SsimParams {
    SsimParams {
        window_size: 5,
        ..SsimParams::default()
    }
}

fn mapping(literal: bool) -> FlowMapping {
    if literal {
        FlowMapping::Literal
    } else {
        FlowMapping::Centered
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_self_is_one_and_bounded(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let x = image(seed, h, w);
        let y = image(seed ^ 1, h, w);
        let p = SsimParams::default();
        prop_assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() <= 1e-9);
        let v = ssim(&x, &y, &p).unwrap();
        prop_assert!(v.abs() <= 1.0);
        prop_assert!((v - ssim(&y, &x, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-8f64..10.0, b in 1e-8f64..10.0, max in 0.5f64..2.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(psnr_from_mse(lo, max) > psnr_from_mse(hi, max));
    }

    #[test]
    fn identical_reports_are_neutral(entries in prop::collection::vec((0usize..6, 0.01f64..=1.0), 1..12)) {
        let r = DetectorReport::new(6, entries.iter().map(|&(label, confidence)| Detection { label, confidence }).collect()).unwrap();
        prop_assert_eq!(identify_error(&r, &r).unwrap(), 0.0);
        prop_assert!((confidence_bias(&r, &r, BiasMode::Ratio).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(confidence_bias(&r, &r, BiasMode::Difference).unwrap(), 0.0);
    }

    #[test]
    fn warp_identity_is_exact(seed in any::<u64>(), h in 2usize..16, w in 2usize..16, eps in 0.1f64..5.0) {
        let img = image(seed, h.max(8), w.max(8));
        let f = FlowField::identity(img.height(), img.width(), eps).unwrap();
        prop_assert_eq!(spatial_transform(&img, &f).unwrap(), img);
    }

    #[test]
    fn warp_stays_in_input_range(seed in any::<u64>(), literal in any::<bool>(), eps in 0.1f64..5.0, lo in 0.0f64..0.5, span in 0.0f64..0.5) {
        let base = image(seed, 9, 11);
        let img = Image::new(9, 11, base.data().iter().map(|v| lo + span * v).collect()).unwrap();
        let (mn, mx) = img.min_max();
        let f = random_flow(seed ^ 77, 9, 11, mapping(literal), eps).unwrap();
        let out = spatial_transform(&img, &f).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= mn && v <= mx));
    }

    #[test]
    fn warp_commutes_with_channel_permutation(seed in any::<u64>(), literal in any::<bool>(), perm in 0usize..6) {
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let img = image(seed, 8, 10);
        let f = random_flow(seed ^ 3, 8, 10, mapping(literal), 2.0).unwrap();
        let a = spatial_transform(&img.permute_channels(orders[perm]), &f).unwrap();
        let b = spatial_transform(&img, &f).unwrap().permute_channels(orders[perm]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn evaluate_is_deterministic_with_consistent_drops(seed in any::<u64>()) {
        let set: Vec<PairedSample<f64>> = (0..3)
            .map(|i| PairedSample::new(format!("{i}"), image(seed + i, 8, 8), image(seed + 10 + i, 8, 8)).unwrap())
            .collect();
        let flow = random_flow(seed, 8, 8, FlowMapping::Centered, 2.0).unwrap();
        let a = evaluate(&IdentityRestorer, &flow, &set, seed ^ 5, &window5()).unwrap();
        let b = evaluate(&IdentityRestorer, &flow, &set, seed ^ 5, &window5()).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
        let base = a.row(Condition::Derain);
        for c in [Condition::DerainUnderUra, Condition::DerainUnderRandom] {
            let r = a.row(c);
            prop_assert!((r.ssim_drop.unwrap() - (base.ssim - r.ssim) / base.ssim).abs() <= 1e-9);
            prop_assert!((r.psnr_drop.unwrap() - (base.psnr - r.psnr) / base.psnr).abs() <= 1e-9);
        }
        prop_assert!(a.rows.iter().all(|r| (-1.0..=1.0).contains(&r.ssim) && r.psnr > 0.0));
        prop_assert_eq!(relative_drop(0.0, 1.0), None);
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>(), mode in 0usize..3) {
        let mode = [SynthMode::Streaks, SynthMode::Drops, SynthMode::Combined][mode];
        let p = SynthParams { seed, streak_count: 12, ..SynthParams::default() };
        let a = synth_dataset::<f32>(&p, mode, 2, 12, 12).unwrap();
        let b = synth_dataset::<f32>(&p, mode, 2, 12, 12).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_order_is_deterministic(ids in prop::collection::hash_set("[a-z]{1,6}", 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let set: Vec<PairedSample<f32>> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| PairedSample::new(id.clone(), image(i as u64, 8, 8).cast(), image(i as u64 + 50, 8, 8).cast()).unwrap())
            .collect();
        save_paired_dataset(&set, dir.path()).unwrap();
        let a = load_paired_dataset::<f32>(dir.path()).unwrap();
        let b = load_paired_dataset::<f32>(dir.path()).unwrap();
        prop_assert_eq!(&a, &b);
        let names: Vec<&str> = a.iter().map(|s| s.id.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        prop_assert_eq!(names, sorted);
    }

    #[test]
    fn generator_output_is_a_valid_flow(seed in any::<u64>()) {
        let mut cfg = GeneratorConfig::for_size(16, 16);
        cfg.down_channels = [4, 4, 4];
        cfg.up_channels = [4, 4];
        cfg.residual_blocks = 1;
        let gen = Generator::new(cfg).unwrap();
        let p: ModelParams<f32> = gen.init(seed);
        let z = gen.sample_noise(&mut ChaCha8Rng::seed_from_u64(seed));
        let raw = gen.forward(&p, &z).unwrap();
        prop_assert!(raw.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(FlowField::new(16, 16, raw, FlowMapping::Centered, 2.0f32).is_ok());
    }
}
