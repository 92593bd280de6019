mod common;

use common::count_oracle;
use fesnet_core::data::{
    flip_horizontal, flip_vertical, random_crop, resize_and_pad, rotate, zscore_normalize, BinaryMask, Sample, Split,
    ZScoreMode,
};
use fesnet_core::metrics::{aggregate, compute_metrics, confusion_counts, Aggregation, ConfusionCounts};
use fesnet_core::nn::{concat_channels, concat_channels_backward, softmax_channels};
use fesnet_core::rng::seeded;
use fesnet_core::Tensor;
use proptest::prelude::*;

fn sample_strategy(max: usize) -> impl Strategy<Value = Sample> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut rng = seeded(seed);
        let image = Tensor::<f32>::uniform(&[3, h, w], 0.0, 255.0, &mut rng);
        let bits = Tensor::<f32>::uniform(&[2, h, w], 0.0, 1.0, &mut rng);
        let mask = BinaryMask::from_fn(h, w, |y, x| bits.data()[y * w + x] > 0.7);
        let roi = BinaryMask::from_fn(h, w, |y, x| bits.data()[h * w + y * w + x] > 0.2);
        Sample {
            id: "p".into(),
            split: Split::Train,
            image,
            mask,
            roi: Some(roi),
            valid: BinaryMask::ones(h, w),
            original_size: (h, w),
            content_size: (h, w),
        }
    })
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask, BinaryMask)> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        let bits = proptest::collection::vec(0u8..=1, h * w);
        (bits.clone(), bits.clone(), bits).prop_map(move |(a, b, r)| {
            (
                BinaryMask::new(h, w, a).unwrap(),
                BinaryMask::new(h, w, b).unwrap(),
                BinaryMask::new(h, w, r).unwrap(),
            )
        })
    })
}

fn in_unit(v: Option<f64>) -> bool {
    v.is_none_or(|v| (0.0..=1.0).contains(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flips_are_involutions(s in sample_strategy(12)) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&s)), s.clone());
        prop_assert_eq!(flip_vertical(&flip_vertical(&s)), s);
    }

    #[test]
    fn quarter_turn_keeps_mask_count(n in 1usize..16, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let bits = Tensor::<f32>::uniform(&[n, n], 0.0, 1.0, &mut rng);
        let s = Sample {
            id: "q".into(),
            split: Split::Train,
            image: Tensor::uniform(&[3, n, n], 0.0, 1.0, &mut rng),
            mask: BinaryMask::from_fn(n, n, |y, x| bits.data()[y * n + x] > 0.5),
            roi: None,
            valid: BinaryMask::ones(n, n),
            original_size: (n, n),
            content_size: (n, n),
        };
        let r = rotate(&s, 90.0);
        prop_assert_eq!(r.mask.count_ones(), s.mask.count_ones());
        prop_assert_eq!(r.valid.count_ones(), n * n);
    }

    #[test]
    fn geometric_ops_keep_masks_aligned(s in sample_strategy(20), deg in 1.0f64..360.0, seed in any::<u64>()) {
        let r = rotate(&s, deg);
        prop_assert!(r.check_consistent().is_ok());
        prop_assert!(r.mask.data().iter().all(|&v| v <= 1));
        let size = 1 + (seed as usize) % s.height().min(s.width());
        let c = random_crop(&r, size, &mut seeded(seed)).unwrap();
        prop_assert_eq!((c.height(), c.width()), (size, size));
        prop_assert!(c.check_consistent().is_ok());
    }

    #[test]
    fn crop_origin_is_seed_determined(s in sample_strategy(20), seed in any::<u64>()) {
        let size = 1 + (seed as usize) % s.height().min(s.width());
        let a = random_crop(&s, size, &mut seeded(seed)).unwrap();
        let b = random_crop(&s, size, &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn resize_pad_contract(s in sample_strategy(40), width in 8usize..70, multiple in 1usize..17) {
        let r = resize_and_pad(&s, width, multiple).unwrap();
        prop_assert!(r.check_consistent().is_ok());
        prop_assert_eq!(r.width() % multiple, 0);
        prop_assert_eq!(r.height() % multiple, 0);
        prop_assert_eq!(r.content_size.1, width);
        prop_assert_eq!(r.valid.count_ones(), r.content_size.0 * r.content_size.1);
    }

    #[test]
    fn zscore_is_affine_invariant(s in sample_strategy(10), a in 0.1f32..10.0, b in -50.0f32..50.0) {
        let z = zscore_normalize(&s.image, ZScoreMode::Joint);
        let z2 = zscore_normalize(&s.image.map(|v| a * v + b), ZScoreMode::Joint);
        prop_assert!(z.max_abs_diff(&z2) < 1e-3, "{}", z.max_abs_diff(&z2));
    }

    #[test]
    fn counts_match_oracle_and_partition((p, g, r) in mask_pair()) {
        let c = confusion_counts(&p, &g, Some(&r)).unwrap();
        prop_assert_eq!([c.tp, c.tn, c.fp, c.fn_], count_oracle(p.data(), g.data(), Some(r.data())));
        prop_assert_eq!(c.total() as usize, r.count_ones());
        let swapped = confusion_counts(&g, &p, Some(&r)).unwrap();
        prop_assert_eq!(swapped, c.swapped());
        let (m, ms) = (compute_metrics(c), compute_metrics(swapped));
        prop_assert_eq!(m.acc, ms.acc);
        prop_assert_eq!(m.f1, ms.f1);
    }

    #[test]
    fn metrics_lie_in_unit_interval(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let r = compute_metrics(ConfusionCounts::new(tp, tn, fp, fn_));
        for v in [r.se, r.sp, r.acc, r.auc_balanced, r.f1] {
            prop_assert!(in_unit(v));
        }
        if let (Some(a), Some(se), Some(sp)) = (r.auc_balanced, r.se, r.sp) {
            prop_assert!((a - (se + sp) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn global_sum_is_homogeneous(tp in 0u64..500, tn in 1u64..500, fp in 0u64..500, fn_ in 1u64..500, k in 1usize..5) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        let one = aggregate(&[c], Aggregation::GlobalSum).unwrap();
        let many = aggregate(&vec![c; k], Aggregation::GlobalSum).unwrap();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (a, b) => a == b,
        };
        prop_assert!(close(one.se, many.se) && close(one.sp, many.sp) && close(one.f1, many.f1));
    }

    #[test]
    fn concat_backward_inverts_concat(c1 in 1usize..4, c2 in 1usize..4, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let a = Tensor::<f64>::randn(&[2, c1, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, c2, 3, 4], 1.0, &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = concat_channels_backward(&cat, &[c1, c2]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let x = Tensor::<f32>::randn(&[2, 2, 5, 3], scale, &mut seeded(seed));
        let p = softmax_channels(&x).unwrap();
        let d = p.data();
        for i in 0..2 {
            for q in 0..15 {
                let s = d[i * 30 + q] + d[i * 30 + 15 + q];
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}
