use proptest::prelude::*;

use freqdiff::conditioning::AvailabilityMask;
use freqdiff::frequency::{
    ghpf, glpf, select_hf_source, select_lf_source, GaussianKernel, HighPassMode,
};
use freqdiff::image::Image;
use freqdiff::metrics::{psnr, ssim, DATA_RANGE};
use freqdiff::phantoms::generate_sample;
use freqdiff::schedule::NoiseSchedule;

fn image(max_side: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Image::new(h, w, v).unwrap())
    })
}

fn image_pair(side: usize) -> impl Strategy<Value = (Image, Image)> {
    let n = side * side;
    (
        prop::collection::vec(-1.0f64..1.0, n),
        prop::collection::vec(-1.0f64..1.0, n),
    )
        .prop_map(move |(a, b)| {
            (
                Image::new(side, side, a).unwrap(),
                Image::new(side, side, b).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_text_round_trips(bits in 1u8..15) {
        let mask = AvailabilityMask::from_bits(bits, 4).unwrap();
        let parsed: AvailabilityMask = mask.to_string().parse().unwrap();
        prop_assert_eq!(parsed, mask);
        prop_assert_eq!(mask.available_count() + mask.missing_count(), 4);
    }

    #[test]
    fn low_scan_never_passes_high_scan(bits in 1u8..15) {
        let mask = AvailabilityMask::from_bits(bits, 4).unwrap();
        let (lf, hf) = (select_lf_source(mask).unwrap(), select_hf_source(mask).unwrap());
        prop_assert!(lf <= hf);
        prop_assert!(mask.is_available(lf) && mask.is_available(hf));
        prop_assert_eq!(lf == hf, mask.available_count() == 1);
    }

    #[test]
    fn low_pass_stays_within_input_range(x in image(12), half in 0usize..6) {
        let k = GaussianKernel::with_default_sigma(2 * half + 1).unwrap();
        let low = glpf(&x, &k);
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in low.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        let high = ghpf(&x, &k, HighPassMode::Residual);
        for ((l, h), v) in low.data().iter().zip(high.data()).zip(x.data()) {
            prop_assert!((l + h - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn low_pass_keeps_constants(h in 1usize..10, w in 1usize..10, c in -1.0f64..1.0) {
        let k = GaussianKernel::with_default_sigma(7).unwrap();
        let low = glpf(&Image::filled(h, w, c), &k);
        prop_assert!(low.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn schedule_tables_are_consistent(steps in 2usize..300, bs in 1e-5f64..1e-3, be in 5e-3f64..5e-2) {
        let s = NoiseSchedule::linear(steps, bs, be).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = s.alpha_bar(t).unwrap();
            prop_assert!(ab > 0.0 && ab < prev);
            prop_assert!((s.alpha(t).unwrap() + s.beta(t).unwrap() - 1.0).abs() < 1e-15);
            prev = ab;
        }
    }

    #[test]
    fn first_step_inverts(x0 in prop::collection::vec(-1.0f64..1.0, 1..64), seed in any::<u64>(), steps in 2usize..300) {
        let s = NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap();
        let eps: Vec<f64> = x0.iter().enumerate().map(|(i, _)| ((seed.wrapping_add(i as u64) % 1000) as f64 / 250.0) - 2.0).collect();
        let x1 = s.forward_sample(&x0, 1, &eps).unwrap();
        let back = s.reverse_step(&x1, 1, &eps, &[]).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fidelity_metrics_are_symmetric_and_bounded((x, y) in image_pair(8)) {
        let (pxy, pyx) = (psnr(&x, &y, DATA_RANGE).unwrap(), psnr(&y, &x, DATA_RANGE).unwrap());
        prop_assert_eq!(pxy, pyx);
        let (sxy, syx) = (ssim(&x, &y, DATA_RANGE).unwrap(), ssim(&y, &x, DATA_RANGE).unwrap());
        prop_assert!((sxy - syx).abs() < 1e-12);
        prop_assert!(sxy <= 1.0 + 1e-12 && sxy >= -1.0 - 1e-12);
        prop_assert_eq!(ssim(&x, &x, DATA_RANGE).unwrap(), 1.0);
    }

    #[test]
    fn phantoms_are_seeded_and_in_range(seed in any::<u64>()) {
        let a = generate_sample(seed, 16).unwrap();
        prop_assert_eq!(&a, &generate_sample(seed, 16).unwrap());
        prop_assert_eq!(a.modalities.len(), 4);
        for m in &a.modalities {
            prop_assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
