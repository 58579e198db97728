//! Randomized invariants of the numerics, heads, losses, metrics and generator.

mod common;

use partproto::losses;
use partproto::metrics::{consistency_score, locate, stability_score, BoundingBox, BoxSize, Noise};
use partproto::model::{prototype_activations, ClassAllocation, FCHead, HeadKind, PrototypeBank, SAHead};
use partproto::synthdata::{self, GeneratorConfig};
use partproto::{Tape, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    vec(lo..hi, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[3, 7], -15.0, 15.0), dim in 0usize..2) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, dim).unwrap();
        let out = tape.value(s);
        prop_assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let sums: Vec<f64> = if dim == 1 {
            out.data().chunks(7).map(|r| r.iter().sum()).collect()
        } else {
            (0..7).map(|c| (0..3).map(|r| out.at(&[r, c])).sum()).collect()
        };
        for s in sums {
            prop_assert!((s - 1.0).abs() <= 1e-12, "sum {s}");
        }
    }

    #[test]
    fn resize_is_exact_on_constants(c in -5.0f64..5.0, h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20) {
        let t = Tensor::full(&[h, w], c);
        let up = t.bilinear_resize(oh, ow).unwrap();
        prop_assert!(up.data().iter().all(|&v| v == c));
    }

    #[test]
    fn resize_to_same_shape_is_identity(x in tensor(&[2, 5, 4], -3.0, 3.0)) {
        let same = x.bilinear_resize(5, 4).unwrap();
        prop_assert_eq!(same.data(), x.data());
    }

    #[test]
    fn detach_keeps_value_and_stops_gradient(x in tensor(&[6], -2.0, 2.0)) {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone().with_grad());
        let d = tape.detach(a);
        prop_assert_eq!(tape.data(d), x.data());
        let sq = tape.square(d);
        let both = tape.add(sq, a).unwrap();
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        // Only the direct path contributes.
        prop_assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sa_logit_ignores_other_classes(
        w in vec(-4.0f64..4.0, 12),
        g in vec(-2.0f64..2.0, 12),
        j in 0usize..12,
        bump in -50.0f64..50.0,
    ) {
        let alloc = ClassAllocation::new(4, 3);
        let head = SAHead { weights: Tensor::new(&[12], w).unwrap() };
        let base = head.logits(&g, alloc).unwrap();
        let mut moved_g = g.clone();
        moved_g[j] += bump;
        let moved = head.logits(&moved_g, alloc).unwrap();
        for k in (0..4).filter(|&k| k != alloc.class_of(j)) {
            prop_assert_eq!(base[k].to_bits(), moved[k].to_bits());
        }
    }

    #[test]
    fn sa_weights_sum_to_one_per_class(w in vec(-20.0f64..20.0, 12), shift in -10.0f64..10.0, k in 0usize..4) {
        let alloc = ClassAllocation::new(4, 3);
        let head = SAHead { weights: Tensor::new(&[12], w.clone()).unwrap() };
        let wn = head.normalized_weights(alloc);
        for c in 0..4 {
            let s: f64 = wn[alloc.range(c)].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        // Shifting one class's logits by a constant leaves its weights unchanged.
        let mut shifted = w;
        for j in alloc.range(k) {
            shifted[j] += shift;
        }
        let wn2 = SAHead { weights: Tensor::new(&[12], shifted).unwrap() }.normalized_weights(alloc);
        for (a, b) in wn.iter().zip(&wn2) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn activation_value_dominates_its_map(deep in tensor(&[4, 3, 5], -2.0, 2.0), protos in tensor(&[6, 4], -1.0, 1.0)) {
        let bank = PrototypeBank::new(protos, ClassAllocation::new(3, 2)).unwrap();
        let rec = prototype_activations(&deep, &bank).unwrap();
        for j in 0..6 {
            let map = rec.map(j);
            prop_assert!(map.iter().all(|&v| v <= rec.values[j]));
            let (r, c) = rec.argmax[j];
            prop_assert_eq!(map[r * 5 + c], rec.values[j]);
        }
    }

    #[test]
    fn fc_init_is_sign_structured(k in 1usize..6, n in 1usize..5) {
        let alloc = ClassAllocation::new(k, n);
        let head = FCHead::class_connected(alloc);
        for c in 0..k {
            for j in 0..k * n {
                let w = head.weights.at(&[c, j]);
                prop_assert_eq!(w, if alloc.class_of(j) == c { 1.0 } else { -0.5 });
            }
        }
    }

    #[test]
    fn align_is_nonnegative_and_monotone_in_gamma(
        shallow in tensor(&[1, 2, 4, 4], -1.0, 1.0),
        deep in tensor(&[1, 3, 2, 2], -1.0, 1.0),
        g0 in 0.0f64..0.5,
        dg in 0.0f64..0.5,
    ) {
        let value = |gamma: f64| {
            let mut tape = Tape::new();
            let s = tape.constant(shallow.clone());
            let d = tape.constant(deep.clone());
            let l = losses::align_loss(&mut tape, s, d, gamma).unwrap();
            tape.data(l)[0]
        };
        let (lo, hi) = (value(g0), value(g0 + dg));
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi <= lo);
    }

    #[test]
    fn ortho_vanishes_on_orthonormal_blocks(theta in vec(0.0f64..6.3, 3)) {
        // Each class block is a 2x2 rotation padded into D = 3.
        let alloc = ClassAllocation::new(3, 2);
        let mut rows = Vec::new();
        for t in &theta {
            rows.extend([t.cos(), t.sin(), 0.0, -t.sin(), t.cos(), 0.0]);
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[6, 3], rows).unwrap());
        let l = losses::ortho_loss(&mut tape, p, alloc).unwrap();
        prop_assert!(tape.data(l)[0].abs() <= 1e-24);
    }

    #[test]
    fn ortho_ignores_order_within_a_block(protos in tensor(&[6, 3], -1.0, 1.0), k in 0usize..3) {
        let alloc = ClassAllocation::new(3, 2);
        let value = |p: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(p);
            let l = losses::ortho_loss(&mut tape, v, alloc).unwrap();
            tape.data(l)[0]
        };
        let mut swapped = protos.clone();
        let d = swapped.data_mut();
        for c in 0..3 {
            d.swap(2 * k * 3 + c, (2 * k + 1) * 3 + c);
        }
        let (a, b) = (value(protos), value(swapped));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn box_contains_its_center(row in 0usize..40, col in 0usize..40, ratio in 0.01f64..1.0) {
        let size = BoxSize::from_ratio(40, ratio).unwrap();
        let b = BoundingBox::centered(row, col, size, 40, 40);
        prop_assert!(b.bottom <= 40 && b.right <= 40 && b.top < b.bottom && b.left < b.right);
        prop_assert!(b.contains(col as f64 + 0.5, row as f64 + 0.5));
    }

    #[test]
    fn located_box_centre_is_the_upsampled_argmax(map in vec(-1.0f64..1.0, 12)) {
        let size = BoxSize::from_ratio(24, 0.3).unwrap();
        let b = locate(&map, 3, 4, 24, 24, size).unwrap();
        let up = Tensor::new(&[3, 4], map).unwrap().bilinear_resize(24, 24).unwrap();
        let best = up.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(up.at(&[b.center_row, b.center_col]), best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scores_lie_in_unit_interval(seed in any::<u64>(), mu in 0.0f64..1.0, sigma in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let model = common::random_model(&mut rng, 2, 2, HeadKind::Fc);
        let images = common::random_images(&mut rng, 2, 3, 16, 3);
        let size = BoxSize::from_ratio(16, 0.3).unwrap();
        let con = consistency_score(&model, &images, 3, mu, size).unwrap().score;
        let sta = stability_score(&model, &images, 3, Noise::Gauss { sigma }, size, seed).unwrap().score;
        prop_assert!((0.0..=1.0).contains(&con));
        prop_assert!((0.0..=1.0).contains(&sta));
    }

    #[test]
    fn generated_annotations_are_in_bounds(seed in any::<u64>(), parts in 2usize..=5, occlusion in 0.0f64..1.0) {
        let cfg = GeneratorConfig {
            classes: 3,
            parts,
            train_per_class: 2,
            test_per_class: 1,
            image_size: 32,
            seed,
            occlusion_prob: occlusion,
        };
        let data = synthdata::generate(&cfg).unwrap().dataset;
        for im in data.train().iter().chain(data.test()) {
            prop_assert_eq!(im.parts.len(), parts);
            prop_assert!(im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for p in im.parts.iter().filter_map(|p| p.location) {
                prop_assert!(p.x >= 0.0 && p.x < 32.0 && p.y >= 0.0 && p.y < 32.0);
            }
        }
    }
}
