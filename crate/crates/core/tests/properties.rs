use std::collections::BTreeSet;

use proptest::prelude::*;

use r2au_core::autodiff::Tape;
use r2au_core::data::{
    augment, holdout_split, merge_masks, AugmentConfig, ElasticConfig, SamplePair, Split,
};
use r2au_core::losses::{dice_coefficient, focal_tversky, tversky_index, LossConfig};
use r2au_core::metrics::{confusion, roc_auc, scalar_metrics};
use r2au_core::nn::{AttentionGate, BatchNorm, InitScheme, Mode};
use r2au_core::training::{lr_schedule, NadamConfig, PlateauConfig};
use r2au_core::{ConvSpec, Padding, Shape, Tensor};

fn bits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
}

/// Probabilities with a binary target of the same length containing both classes.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..48).prop_flat_map(|n| {
        (prop::collection::vec(0.001f64..0.999, n), bits(n)).prop_map(|(p, mut g)| {
            g[0] = 1.0;
            g[1] = 0.0;
            (p, g)
        })
    })
}

fn all_losses() -> Vec<LossConfig> {
    vec![
        LossConfig::wbce(0.3),
        LossConfig::dice(),
        LossConfig::bce_dice(),
        LossConfig::tversky(0.3, 0.7),
        LossConfig::focal_tversky(0.3, 0.7, 0.75),
    ]
}

fn tensor(shape: Shape, v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_pixel_order((p, g) in instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = order.iter().map(|&i| p[i]).collect();
        let gs: Vec<f64> = order.iter().map(|&i| g[i]).collect();
        for cfg in all_losses() {
            let a = cfg.evaluate(&p, &g).unwrap();
            let b = cfg.evaluate(&ps, &gs).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{:?}: {} vs {}", cfg.kind, a, b);
        }
    }

    #[test]
    fn loss_ranges((p, g) in instance(), alpha in 0.0f64..=1.0, gamma in 0.3f64..3.0) {
        let ti = tversky_index(&p, &g, alpha, 1.0 - alpha, 1e-6);
        prop_assert!((0.0..=1.0).contains(&ti));
        let ftl = focal_tversky(&p, &g, alpha, 1.0 - alpha, gamma, 1e-6);
        prop_assert!((0.0..=1.0).contains(&ftl));
        for cfg in all_losses() {
            prop_assert!(cfg.evaluate(&p, &g).unwrap() >= -1e-6);
        }
    }

    #[test]
    fn tversky_loss_grows_with_beta((p, g) in instance(), alpha in 0.0f64..1.0, b0 in 0.0f64..2.0, db in 0.0f64..2.0) {
        // g holds a foreground pixel and p < 1, so the soft FN sum is positive
        let loss = |b: f64| 1.0 - tversky_index(&p, &g, alpha, b, 1e-6);
        prop_assert!(loss(b0 + db) >= loss(b0) - 1e-15);
    }

    #[test]
    fn metric_dice_matches_loss_dice(n in 1usize..64, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut bit = || if rng.random_bool(0.4) { 1.0 } else { 0.0 };
        let p: Vec<f64> = (0..n).map(|_| bit()).collect();
        let g: Vec<f64> = (0..n).map(|_| bit()).collect();
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(scalar_metrics(&c).dice, dice_coefficient(&p, &g));
    }

    #[test]
    fn swapping_prediction_and_target((p, g) in (1usize..64).prop_flat_map(|n| (bits(n), bits(n)))) {
        let a = scalar_metrics(&confusion(&p, &g).unwrap());
        let b = scalar_metrics(&confusion(&g, &p).unwrap());
        prop_assert_eq!(confusion(&g, &p).unwrap(), confusion(&p, &g).unwrap().swapped());
        prop_assert_eq!(a.dice, b.dice);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert!((-1.0..=1.0).contains(&a.kappa));
    }

    #[test]
    fn auc_is_rank_based(
        (scores, g) in (2usize..64).prop_flat_map(|n| (prop::collection::vec(0u32..50, n), bits(n))),
    ) {
        let mut g = g;
        g[0] = 1.0;
        g[1] = 0.0;
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 50.0).collect();
        let warped: Vec<f64> = s.iter().map(|&v| (3.0 * v).exp() - 7.0).collect();
        let a = roc_auc(&s, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, roc_auc(&warped, &g).unwrap());
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&flipped, &g).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn conv_transpose_is_the_adjoint(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4, side in 2usize..7,
        k in 1usize..4, stride in 1usize..3, same in any::<bool>(), seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = |s: Shape| Tensor::from_fn(s, |_| rng.random_range(-2.0..2.0));
        let spec = ConvSpec { stride: (stride, stride), padding: if same { Padding::Same } else { Padding::Valid } };
        prop_assume!(side >= k);
        let x = r(Shape::new(n, ci, side, side));
        let w = r(Shape::new(co, ci, k, k));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, spec).unwrap();
        let ys = tape.shape(y);
        let u = r(ys);
        let uv = tape.constant(u.clone());
        let back = tape.conv2d_transpose(uv, wv, spec);
        // the transposed output may be smaller than x when strides leave a remainder
        let back = match back {
            Ok(b) => b,
            Err(_) => return Ok(()),
        };
        prop_assume!(tape.shape(back) == x.shape());
        let lhs = tape.value(y).dot(&u).unwrap();
        let rhs = x.dot(tape.value(back)).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn maxpool_routes_all_gradient_mass(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |_| rng.random_range(-2i32..3) as f64);
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(x);
        let y = tape.maxpool2d(xv).unwrap();
        let up = Tensor::from_fn(tape.shape(y), |_| rng.random_range(-1.0..1.0));
        let upv = tape.constant(up.clone());
        let prod = tape.mul(y, upv).unwrap();
        let root = tape.sum(prod);
        let g = tape.backward(root).unwrap();
        let routed: f64 = g.wrt(xv).unwrap().iter().sum();
        prop_assert!((routed - up.sum()).abs() < 1e-12);
        // exactly one winner per window
        let nonzero = g.wrt(xv).unwrap().iter().filter(|&&v| v != 0.0).count();
        prop_assert!(nonzero <= up.len());
    }

    #[test]
    fn batch_norm_whitens_each_channel(n in 2usize..4, c in 1usize..4, hw in 2usize..6, scale in 0.1f64..50.0, offset in -20.0f64..20.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(n, c, hw, hw);
        let x = Tensor::from_fn(shape, |_| offset + scale * rng.random_range(-1.0..1.0));
        let bn = BatchNorm::<f64>::new("bn", c);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, xv, Mode::Train).unwrap();
        let y = tape.value(y);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| (0..hw * hw).map(move |i| (b, i)))
                .map(|(b, i)| y.at(b, ch, i / hw, i % hw)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-3, "variance {}", v);
        }
    }

    #[test]
    fn attention_coefficients_stay_in_unit_interval(c in 1usize..4, side in 1usize..5, magnitude in 0.1f64..100.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gate = AttentionGate::<f64>::new("g", c, c, 2, InitScheme::He, &mut rng).unwrap();
        let shape = Shape::new(1, c, side, side);
        let mut r = |_| magnitude * rng.random_range(-1.0..1.0);
        let h = Tensor::from_fn(shape, &mut r);
        let s = Tensor::from_fn(shape, &mut r);
        let mut tape = Tape::new();
        let (hv, sv) = (tape.constant(h), tape.constant(s));
        let (_, alpha) = gate.forward(&mut tape, hv, sv).unwrap();
        prop_assert!(tape.value(alpha).data().iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn merge_is_idempotent_with_empty_identity(masks in (1usize..20).prop_flat_map(|n| prop::collection::vec(bits(n), 1..4))) {
        let n = masks[0].len();
        let shape = Shape::new(1, 1, 1, n);
        let ts: Vec<Tensor<f32>> = masks.iter()
            .map(|m| Tensor::from_vec(shape, m.iter().map(|&v| v as f32).collect()).unwrap())
            .collect();
        let merged = merge_masks(&ts).unwrap();
        prop_assert_eq!(merge_masks(&[merged.clone(), merged.clone()]).unwrap(), merged.clone());
        prop_assert_eq!(merge_masks(&[merged.clone(), Tensor::zeros(shape)]).unwrap(), merged.clone());
        for t in &ts {
            prop_assert_eq!(merge_masks(&[merged.clone(), t.clone()]).unwrap(), merged.clone());
        }
    }

    #[test]
    fn augmentation_keeps_value_ranges(side in 4usize..20, epoch in 0u64..50, seed in any::<u64>(), elastic in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(1, 1, side, side);
        let image = Tensor::from_fn(shape, |_| rng.random_range(0.0..=1.0f32));
        let mask = Tensor::from_fn(shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let s = SamplePair::new("p", image, mask).unwrap();
        let cfg = AugmentConfig {
            elastic: elastic.then_some(ElasticConfig { alpha: 3.0, sigma: 2.0 }),
            seed,
            ..AugmentConfig::default()
        };
        let a = augment(&s, &cfg, epoch);
        prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(a, augment(&s, &cfg, epoch));
    }

    #[test]
    fn holdout_partitions_ids(n in 2usize..80, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let k = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let m = holdout_split(&ids, k, seed).unwrap();
        let val: BTreeSet<&str> = m.iter().filter(|e| e.split == Split::Val).map(|e| e.id.as_str()).collect();
        let train: BTreeSet<&str> = m.iter().filter(|e| e.split == Split::Train).map(|e| e.id.as_str()).collect();
        prop_assert_eq!(val.len(), k);
        prop_assert!(val.is_disjoint(&train));
        prop_assert_eq!(val.len() + train.len(), n);
    }

    #[test]
    fn learning_rate_never_increases(history in prop::collection::vec(0.0f64..1.0, 0..30), patience in 1usize..5) {
        let opt = NadamConfig::default();
        let plateau = PlateauConfig { patience, ..PlateauConfig::default() };
        let mut last = f64::INFINITY;
        for epoch in 0..=history.len() {
            let lr = lr_schedule(&opt, &plateau, epoch, &history);
            prop_assert!(lr <= last && lr > 0.0);
            last = lr;
        }
    }
}

#[test]
fn bn_statistics_in_eval_mode_use_running_values() {
    let bn = BatchNorm::<f64>::new("bn", 1);
    let x = tensor(Shape::new(2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = bn.forward(&mut tape, xv, Mode::Eval).unwrap();
    // fresh running statistics are mean 0, variance 1
    let expect: Vec<f64> = x
        .data()
        .iter()
        .map(|v| v / (1.0f64 + 1e-5).sqrt())
        .collect();
    for (a, b) in tape.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15);
    }
}
