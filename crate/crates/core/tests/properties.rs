//! Randomized invariant checks over the data pipeline, optimizer
//! schedule, parameter flattening, and metric definitions.

use indexmap::IndexMap;
use proptest::prelude::*;
use unlearn_core::data::{
    apply_badnet, apply_interclass_confusion, generate_dataset, sample_forget_set, trigger_pixels,
    GenConfig, ManipulationSpec,
};
use unlearn_core::eval::selection_score;
use unlearn_core::loss::cross_entropy;
use unlearn_core::model::{argmax_rows, build_model, flatten_params, unflatten_params, Arch};
use unlearn_core::optim::{lr_at_step, sgd_update, LrSchedule, OptimState, SgdHyper};
use unlearn_core::Tensor;

fn tiny_gen() -> GenConfig {
    GenConfig {
        num_classes: 4,
        height: 6,
        width: 6,
        train: 40,
        val: 8,
        test: 8,
        confusable_pair: (1, 3),
        ..GenConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The identified forget set is always a subset of the manipulated
    /// set, with exactly round(fraction * |S_m|) members (at least 1).
    #[test]
    fn forget_set_nests_inside_manipulated_set(
        fraction in 0.01f64..=1.0,
        n in 2usize..=12,
        seed in 0u64..1000,
    ) {
        let data = generate_dataset(&tiny_gen(), seed).unwrap();
        let md = apply_badnet(&data, &ManipulationSpec::poison(n, seed ^ 1)).unwrap();
        let md = sample_forget_set(&md, fraction, seed ^ 2).unwrap();
        let manipulated = md.manipulated_indices();
        let forget = md.forget_indices();
        prop_assert_eq!(manipulated.len(), n);
        let expected = ((fraction * n as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(forget.len(), expected);
        prop_assert!(forget.iter().all(|i| manipulated.contains(i)));
        prop_assert_eq!(
            forget.len() + md.retained_indices().len(),
            md.data.train.len()
        );
    }

    /// Every swapped sample in the confusion manipulation keeps features
    /// intact and moves its label to the paired class.
    #[test]
    fn confusion_swaps_between_pair_only(n in 2usize..=10, seed in 0u64..1000) {
        let n = n / 2 * 2;
        let n = n.max(2);
        let data = generate_dataset(&tiny_gen(), seed).unwrap();
        let (a, b) = tiny_gen().confusable_pair;
        let mut spec = ManipulationSpec::interclass_confusion(n, seed ^ 1);
        spec.class_a = a;
        spec.class_b = b;
        let md = apply_interclass_confusion(&data, &spec).unwrap();
        for i in md.manipulated_indices() {
            let orig = md.provenance[i].original_label;
            let now = md.data.train.labels()[i];
            prop_assert!(orig == a || orig == b);
            prop_assert_eq!(now, if orig == a { b } else { a });
            prop_assert_eq!(md.data.train.sample(i), data.train.sample(i));
        }
    }

    /// Generated pixels stay within [0, clamp_max] for any noise level.
    #[test]
    fn samples_respect_clamp(sigma in 0.0f64..0.6, clamp in 0.2f64..=1.0, seed in 0u64..500) {
        let gen = GenConfig { noise_sigma: sigma, clamp_max: clamp, ..tiny_gen() };
        let data = generate_dataset(&gen, seed).unwrap();
        for set in [&data.train, &data.val, &data.test] {
            let (x, labels) = set.all();
            prop_assert!(x.data().iter().all(|&v| (0.0..=clamp).contains(&v)));
            prop_assert!(labels.iter().all(|&y| y < gen.num_classes));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Warmup rises to the base rate, decay falls to zero, and the rate
    /// never leaves [0, base].
    #[test]
    fn schedule_warms_up_then_decays(
        lr in 1e-3f64..1.0,
        total in 10usize..200,
        warmup_fraction in 0.0f64..0.5,
    ) {
        let hyper = SgdHyper {
            learning_rate: lr,
            total_steps: total,
            warmup_fraction,
            ..SgdHyper::default()
        };
        let params: IndexMap<String, Tensor> =
            [("w".to_string(), Tensor::zeros(vec![1]))].into_iter().collect();
        let mut state = OptimState::new(hyper.clone(), &params).unwrap();
        let warmup = hyper.warmup_steps();
        let mut last = -1.0;
        for step in 0..=total {
            state.step = step;
            let rate = lr_at_step(&state);
            prop_assert!((0.0..=lr + 1e-12).contains(&rate));
            if step <= warmup {
                prop_assert!(rate >= last - 1e-12);
            } else {
                prop_assert!(rate <= last + 1e-12);
            }
            last = rate;
        }
        state.step = warmup;
        prop_assert!((lr_at_step(&state) - lr).abs() < 1e-12);
        state.step = total;
        prop_assert!(lr_at_step(&state).abs() < 1e-12);
    }

    /// The constant schedule ignores the step counter.
    #[test]
    fn constant_schedule_is_flat(lr in 1e-4f64..1.0, step in 0usize..10_000) {
        let hyper = SgdHyper {
            learning_rate: lr,
            schedule: LrSchedule::Constant,
            ..SgdHyper::default()
        };
        let params: IndexMap<String, Tensor> =
            [("w".to_string(), Tensor::zeros(vec![1]))].into_iter().collect();
        let mut state = OptimState::new(hyper, &params).unwrap();
        state.step = step;
        prop_assert_eq!(lr_at_step(&state), lr);
    }

    /// Flatten then unflatten reproduces any replacement vector exactly.
    #[test]
    fn flatten_roundtrip_is_exact(
        input in 2usize..10,
        hidden in 2usize..8,
        classes in 2usize..5,
        seed in 0u64..1000,
    ) {
        let arch = Arch::Mlp { input, hidden, num_classes: classes };
        let model = build_model(&arch, seed).unwrap();
        let (flat, index) = flatten_params(&model);
        prop_assert_eq!(flat.len(), index.total());
        prop_assert_eq!(flat.len(), model.num_params());

        let replaced: Vec<f64> = flat.iter().enumerate().map(|(i, v)| v + i as f64).collect();
        let rebuilt = unflatten_params(&model, &replaced).unwrap();
        let (flat2, _) = flatten_params(&rebuilt);
        prop_assert_eq!(flat2, replaced);
    }

    /// The score is w*dc + (1-w)*val, so it stays inside [0, 1] and is
    /// non-decreasing in each argument.
    #[test]
    fn selection_score_is_a_convex_blend(
        dc in 0.0f64..=1.0,
        val in 0.0f64..=1.0,
        w in 0.0f64..=1.0,
        bump in 0.0f64..=0.2,
    ) {
        let s = selection_score(dc, val, w).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((s - (w * dc + (1.0 - w) * val)).abs() < 1e-12);
        let dc2 = (dc + bump).min(1.0);
        let val2 = (val + bump).min(1.0);
        prop_assert!(selection_score(dc2, val, w).unwrap() >= s - 1e-12);
        prop_assert!(selection_score(dc, val2, w).unwrap() >= s - 1e-12);
    }

    /// Trigger pixels: max(1, ceil(0.003*h*w)) distinct cells, all in
    /// the bottom-right quadrant.
    #[test]
    fn trigger_stays_in_bottom_right_quadrant(h in 2usize..=40, w in 2usize..=40) {
        let pixels = trigger_pixels(h, w);
        let expected = ((0.003 * (h * w) as f64).ceil() as usize).max(1);
        prop_assert_eq!(pixels.len(), expected);
        let mut seen = std::collections::HashSet::new();
        for &(y, x) in &pixels {
            prop_assert!(y >= h / 2 && y < h);
            prop_assert!(x >= w / 2 && x < w);
            prop_assert!(seen.insert((y, x)));
        }
    }

    /// Ties in a logit row resolve to the lowest class index.
    #[test]
    fn argmax_prefers_lowest_index_on_ties(
        row in prop::collection::vec(prop::sample::select(vec![0.0f64, 0.5, 1.0]), 2..8),
    ) {
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|&v| v == best).unwrap();
        let logits = Tensor::new(vec![1, row.len()], row).unwrap();
        prop_assert_eq!(argmax_rows(&logits), vec![first]);
    }

    /// Adding a per-row constant to the logits leaves the loss alone.
    #[test]
    fn cross_entropy_shift_invariant(
        rows in 1usize..5,
        classes in 2usize..6,
        seed in 0u64..1000,
        shift in -5.0f64..5.0,
    ) {
        let mut rng = seed;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as f64 / (1u64 << 31) as f64 * 4.0 - 2.0
        };
        let data: Vec<f64> = (0..rows * classes).map(|_| next()).collect();
        let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
        let logits = Tensor::new(vec![rows, classes], data.clone()).unwrap();
        let shifted =
            Tensor::new(vec![rows, classes], data.iter().map(|v| v + shift).collect()).unwrap();
        let a = cross_entropy(&logits, &labels).unwrap();
        let b = cross_entropy(&shifted, &labels).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    /// Zero gradients with zero weight decay leave parameters bitwise
    /// untouched no matter the momentum or step.
    #[test]
    fn sgd_is_inert_without_gradient_or_decay(
        momentum in 0.0f64..1.0,
        lr in 1e-3f64..1.0,
        values in prop::collection::vec(-2.0f64..2.0, 1..6),
    ) {
        let hyper = SgdHyper {
            learning_rate: lr,
            momentum,
            weight_decay: 0.0,
            total_steps: 10,
            ..SgdHyper::default()
        };
        let mut params: IndexMap<String, Tensor> = [(
            "w".to_string(),
            Tensor::new(vec![values.len()], values.clone()).unwrap(),
        )]
        .into_iter()
        .collect();
        let grads: IndexMap<String, Tensor> =
            [("w".to_string(), Tensor::zeros(vec![values.len()]))].into_iter().collect();
        let mut state = OptimState::new(hyper, &params).unwrap();
        for _ in 0..3 {
            sgd_update(&mut params, &grads, &mut state).unwrap();
        }
        prop_assert_eq!(params["w"].data(), &values[..]);
    }
}
