//! Property tests spanning several modules.

use crate::attacks::{AttackConfig, AttackKind, AttackPlan, EvalAttacks, JpegMode};
use crate::metrics::{ncc_values, psnr, ssim, success_rate};
use crate::models::{init_params, ModelSpec};
use crate::spectral::{
    azimuthal_integral, dft2, filter_planes, focal_frequency_loss_weighted, focal_weights, Band, CutoffRadius,
    FilterShape, r_max,
};
use crate::{Image, SeededRng};
use proptest::prelude::*;

fn image(side: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, 3 * side * side).prop_map(move |d| Image::new(side, side, d).unwrap())
}

fn energy(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantization_moves_pixels_at_most_one_level(img in image(8)) {
        for (a, b) in img.data().iter().zip(img.quantized().data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn low_and_high_masks_partition(img in image(8), d in 0.0f64..=5.65) {
        let d = CutoffRadius::new(d, 8, 8).unwrap();
        let lo = filter_planes(img.data(), 8, 8, d, Band::Low, FilterShape::Ideal);
        let hi = filter_planes(img.data(), 8, 8, d, Band::High, FilterShape::Ideal);
        for ((l, h), x) in lo.iter().zip(&hi).zip(img.data()) {
            prop_assert!((l + h - x).abs() < 1e-9);
        }
    }

    #[test]
    fn low_pass_is_idempotent(img in image(16), d in 0.0f64..=11.3) {
        let d = CutoffRadius::new(d, 16, 16).unwrap();
        let once = filter_planes(img.data(), 16, 16, d, Band::Low, FilterShape::Ideal);
        let twice = filter_planes(&once, 16, 16, d, Band::Low, FilterShape::Ideal);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn low_pass_energy_grows_with_cutoff(img in image(16), a in 0.0f64..=11.3, b in 0.0f64..=11.3) {
        let (d1, d2) = if a <= b { (a, b) } else { (b, a) };
        let e = |d| energy(&filter_planes(img.data(), 16, 16, CutoffRadius::new(d, 16, 16).unwrap(), Band::Low, FilterShape::Ideal));
        prop_assert!(e(d1) <= e(d2) + 1e-9);
    }

    #[test]
    fn radial_spectrum_accounts_for_all_energy(img in image(16)) {
        let parseval: f64 = dft2(&img).iter().map(|s| s.energy()).sum();
        let radial = azimuthal_integral(&img).unwrap().total();
        prop_assert!((radial - parseval).abs() <= 1e-6 * parseval.max(1e-12));
    }

    #[test]
    fn attacks_keep_range_and_shape(img in image(16), seed in any::<u64>(), k in 0usize..7) {
        let kind = [AttackKind::LowPass, AttackKind::HighPass, AttackKind::Blur, AttackKind::Noise,
                    AttackKind::ColorJitter, AttackKind::ResizeCrop, AttackKind::Jpeg][k];
        let params = EvalAttacks::default().params(kind, 16, 16, &mut SeededRng::new(seed));
        for mode in [JpegMode::Exact, JpegMode::Differentiable] {
            let out = params.apply(&img, mode).unwrap();
            prop_assert_eq!((out.width(), out.height()), (16, 16));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn attack_layer_is_deterministic_per_seed(img in image(16), seed in any::<u64>()) {
        let cfg = AttackConfig { per_attack_probability: 0.5, include_geometric_in_training: true, ..AttackConfig::default() };
        let run = || {
            let plan = AttackPlan::sample(&cfg, 16, 16, &mut SeededRng::new(seed));
            (plan.apply(&img, JpegMode::Differentiable).unwrap(), plan.to_json_line().unwrap())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn ssim_and_ncc_are_symmetric(x in image(8), y in image(8)) {
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        if let (Ok(a), Ok(b)) = (ncc_values(x.data(), y.data()), ncc_values(y.data(), x.data())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ncc_is_scale_invariant(s in prop::collection::vec(-1.0f64..1.0, 48), t in prop::collection::vec(-1.0f64..1.0, 48), k in 1e-3f64..1e3) {
        let scaled: Vec<f64> = t.iter().map(|v| k * v).collect();
        if let Ok(base) = ncc_values(&s, &t) {
            prop_assert!((ncc_values(&s, &scaled).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn raising_threshold_never_raises_sr(nccs in prop::collection::vec(-1.0f64..=1.0, 1..40), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(success_rate(&nccs, hi).unwrap() <= success_rate(&nccs, lo).unwrap());
    }

    #[test]
    fn psnr_falls_as_offset_grows(base in 0.0f64..0.5, a in 1u8..100, b in 1u8..100) {
        prop_assume!(a != b);
        let x = Image::filled(8, base);
        let at = |k: u8| psnr(&x, &Image::filled(8, base + k as f64 / 255.0)).unwrap();
        prop_assert_eq!(a < b, at(a) > at(b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn networks_preserve_side(p in 3u32..=5, seed in any::<u64>()) {
        let side = 1usize << p;
        let spec = ModelSpec { retriever: crate::models::RetrieverSpec { residual_blocks: 1, ..crate::models::RetrieverSpec::new(side, 4) }, ..ModelSpec::new(side, 4, 8, 4) };
        let mut params = init_params::<f64, _>(&spec, &mut SeededRng::new(seed)).unwrap();
        let secret = Image::from_fn(side, side, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 6.0);
        let q = params.embed(&secret).unwrap();
        prop_assert_eq!((q.width(), q.height()), (side, side));
        let r = params.retrieve(&secret).unwrap();
        prop_assert_eq!((r.width(), r.height()), (side, side));
        prop_assert_eq!(params.retrieve(&secret).unwrap(), r, "eval mode is a pure function");
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences(p in 3u32..=5, seed in any::<u64>()) {
        use rand::Rng;
        let side = 1usize << p;
        let mut rng = SeededRng::new(seed);
        let q: Vec<f64> = (0..3 * side * side).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let d = CutoffRadius::new(0.3 * r_max(side, side), side, side).unwrap();
        let target = filter_planes(&q, side, side, d, Band::Low, FilterShape::Ideal);
        let w = focal_weights(&q, &target, side, side, 1.0);
        let (_, grad) = focal_frequency_loss_weighted(&q, &target, side, side, &w).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..q.len());
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus[i] += h;
            minus[i] -= h;
            let f = |x: &[f64]| focal_frequency_loss_weighted(x, &target, side, side, &w).unwrap().0;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel < 1e-6, "side {side} index {i}: analytic {} numeric {fd}", grad[i]);
        }
    }
}
