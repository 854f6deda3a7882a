use proptest::prelude::*;

use oner_core::backbone::{Backbone, BackboneConfig, Image};
use oner_core::metrics::{auroc, forgetting_measure_e, MetricMatrix};
use oner_core::numerics::{cosine_similarity, l2_normalize, Tensor};
use oner_core::prompt_bank::PromptBank;
use oner_core::prototypes::{select_pixel_prototype_indices, PixelPrototypeBank};

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..10, n)
                    .prop_map(|v| v.into_iter().map(f64::from).collect()),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| {
            l.iter().any(|&x| x) && l.iter().any(|&x| !x)
        })
}

proptest! {
    #[test]
    fn auroc_is_invariant_under_monotone_transforms((s, l) in scored_labels()) {
        let t: Vec<f64> = s.iter().map(|x| (0.3 * x).exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn flipping_labels_complements_auroc((s, l) in scored_labels()) {
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        let a = auroc(&s, &l).unwrap();
        let b = auroc(&s, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_decreasing_columns_give_non_positive_forgetting(
        n in 2usize..6,
        steps in prop::collection::vec(0.0f64..0.1, 36),
    ) {
        let mut m = MetricMatrix::new("m", n);
        for i in 1..=n {
            let mut v = 0.3;
            for j in i..=n {
                v += steps[(i - 1) * 6 + (j - 1)];
                m.set(j, i, v).unwrap();
            }
        }
        prop_assert!(forgetting_measure_e(&m).unwrap() <= 0.0);
    }

    #[test]
    fn selection_is_deterministic_and_distinct(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..12),
        k in 1usize..4,
    ) {
        let k = k.min(rows.len());
        let t = Tensor::from_rows(&rows).unwrap();
        let bank = PixelPrototypeBank::new(k, 3);
        let a = select_pixel_prototype_indices(&t, &bank, k).unwrap();
        prop_assert_eq!(&a, &select_pixel_prototype_indices(&t, &bank, k).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_similarity(&b, &a).unwrap());
    }

    #[test]
    fn parameter_count_follows_the_law(mc in 1usize..4, d in 1usize..10, lp in 1usize..5, tasks in 1u32..4) {
        let mut bank = PromptBank::new(mc, d, lp).unwrap();
        for t in 1..=tasks {
            bank.expand(t, 7).unwrap();
            prop_assert_eq!(bank.trainable_parameters().count, mc * (2 * d + lp * d));
        }
        prop_assert_eq!(bank.len(), mc * tasks as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_are_unit_rows_and_prompt_sensitive(
        pixels in prop::collection::vec(0.0f64..1.0, 64),
        p1 in prop::collection::vec(-1.0f64..1.0, 16),
        p2 in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let cfg = BackboneConfig { image_size: 8, patch_size: 4, dim: 8, ..BackboneConfig::default() };
        let b = Backbone::new(cfg).unwrap();
        let img = Image::new(8, pixels).unwrap();
        let f = b.encode(&img).unwrap();
        for row in f.patches.row_iter().chain(f.image.row_iter()) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        prop_assume!(p1 != p2);
        let a = b.encode_with_prompt(&img, &Tensor::matrix(2, 8, p1).unwrap()).unwrap();
        let c = b.encode_with_prompt(&img, &Tensor::matrix(2, 8, p2).unwrap()).unwrap();
        prop_assert_ne!(a, c);
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let u = l2_normalize(&v).unwrap();
        let n: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }
}
