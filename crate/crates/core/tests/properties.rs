use proptest::prelude::*;

use rubi_core::autodiff::{log_softmax_row, Grads, ParamStore, Tape};
use rubi_core::datagen::{Example, Family, QuestionPattern};
use rubi_core::report::{accuracy, soft_accuracy, total_variation};
use rubi_core::strategy::{apply_activation, fuse_predictions, Combine, MaskActivation};
use rubi_core::trainer::{lr_at, TrainConfig};
use rubi_core::Tensor;

fn example(answer: usize, family: Family) -> Example {
    Example {
        regions: vec![vec![0.0]],
        tokens: vec![0],
        answer,
        pattern: QuestionPattern { family, object: 0 },
    }
}

fn family(i: u8) -> Family {
    Family::ALL[i as usize % 3]
}

fn fused_ce(logits: &[f64], pre: &[f64], target: usize) -> (f64, f64) {
    let mut t = Tape::new();
    let row = |v: &[f64]| Tensor::from_rows(&[v.to_vec()]).unwrap();
    let l = t.constant(row(logits)).unwrap();
    let p = t.constant(row(pre)).unwrap();
    let m = apply_activation(&mut t, p, MaskActivation::Sigmoid).unwrap();
    let f = fuse_predictions(&mut t, l, m, Combine::Product).unwrap();
    let base = t.cross_entropy(l, &[target]).unwrap();
    let fused = t.cross_entropy(f, &[target]).unwrap();
    (t.value(base).data()[0], t.value(fused).data()[0])
}

proptest! {
    #[test]
    fn accuracy_is_permutation_invariant(
        rows in prop::collection::vec((0usize..5, 0usize..5, any::<u8>()), 1..60),
        seed in any::<u64>(),
    ) {
        let preds: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let exs: Vec<Example> = rows.iter().map(|r| example(r.1, family(r.2))).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        // deterministic shuffle from the seed
        let mut s = seed | 1;
        for i in (1..order.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            order.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let e2: Vec<Example> = order.iter().map(|&i| exs[i].clone()).collect();
        let a = accuracy(&preds, &exs).unwrap();
        let b = accuracy(&p2, &e2).unwrap();
        prop_assert_eq!(a.overall, b.overall);
        prop_assert_eq!(a.per_family, b.per_family);
    }

    #[test]
    fn overall_is_weighted_mean_of_families(
        rows in prop::collection::vec((0usize..4, 0usize..4, any::<u8>()), 1..80),
    ) {
        let preds: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let exs: Vec<Example> = rows.iter().map(|r| example(r.1, family(r.2))).collect();
        let a = accuracy(&preds, &exs).unwrap();
        let mut weighted = 0.0;
        for f in Family::ALL {
            let n = exs.iter().filter(|e| e.pattern.family == f).count();
            if let Some(v) = a.per_family.get(f) {
                weighted += v * n as f64;
            } else {
                prop_assert_eq!(n, 0);
            }
        }
        prop_assert!((weighted / exs.len() as f64 - a.overall).abs() < 1e-12);
    }

    #[test]
    fn soft_accuracy_is_exact_match_under_agreement(answer in 0usize..10, pred in 0usize..10, k in 3usize..12) {
        let v = soft_accuracy(pred, &vec![answer; k]);
        prop_assert_eq!(v, if pred == answer { 1.0 } else { 0.0 });
    }

    #[test]
    fn total_variation_is_a_bounded_symmetric_distance(
        a in prop::collection::vec(0usize..50, 4),
        b in prop::collection::vec(0usize..50, 4),
    ) {
        let d = total_variation(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, total_variation(&b, &a));
        prop_assert_eq!(total_variation(&a, &a), 0.0);
    }

    #[test]
    fn lr_is_piecewise_monotone(
        base in 1e-5f64..1e-3,
        ratio in 1.0f64..10.0,
        warmup in 0usize..10,
        plateau in 0usize..10,
        factor in 0.05f64..1.0,
        every in 1usize..5,
    ) {
        let cfg = TrainConfig {
            base_lr: base,
            peak_lr: base * ratio,
            warmup_epochs: warmup,
            decay_start_epoch: warmup + plateau,
            decay_factor: factor,
            decay_every: every,
            epochs: 40,
            ..TrainConfig::with_seed(0)
        };
        for e in 1..40 {
            let (prev, cur) = (lr_at(e - 1, &cfg), lr_at(e, &cfg));
            prop_assert!(cur > 0.0);
            if e < warmup || (e == warmup && plateau > 0) {
                prop_assert!(cur >= prev);
            }
            if e > warmup + plateau {
                prop_assert!(cur <= prev);
            }
        }
    }

    #[test]
    fn log_softmax_stays_finite(row in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let l = log_softmax_row(&row);
        prop_assert!(l.iter().all(|v| v.is_finite() && *v <= 1e-12));
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mask_favoring_the_target_lowers_the_loss(
        n in 2usize..12,
        level in 0.1f64..5.0,
        c in 0.1f64..8.0,
        target in 0usize..12,
        other in 0usize..12,
    ) {
        let (target, other) = (target % n, other % n);
        let logits = vec![level; n];
        let mut pre = vec![0.0; n];
        pre[target] = c;
        let (base, fused) = fused_ce(&logits, &pre, target);
        prop_assert!(fused < base);
        if other != target {
            let mut pre = vec![0.0; n];
            pre[other] = c;
            let (base, fused) = fused_ce(&logits, &pre, target);
            prop_assert!(fused > base);
        }
    }

    #[test]
    fn detached_leaf_gets_exactly_zero(x in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(x.clone()));
        let b = store.add("b", Tensor::vector(x));
        let mut g = Grads::zeros_like(&store);
        let mut t = Tape::with_params(&store);
        let va = t.param(a);
        let vb = t.param(b);
        let db = t.detach(vb);
        let s = t.sigmoid(db).unwrap();
        let m = t.mul(va, s).unwrap();
        let loss = t.sum(m).unwrap();
        t.backward_into(loss, &mut g).unwrap();
        prop_assert!(g.is_zero(b));
        prop_assert!(g.get(b).iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn reuse_sums_contributions(x in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(x));
        let mut g = Grads::zeros_like(&store);
        let mut t = Tape::with_params(&store);
        let va = t.param(a);
        let twice = t.add(va, va).unwrap();
        let loss = t.sum(twice).unwrap();
        t.backward_into(loss, &mut g).unwrap();
        prop_assert!(g.get(a).iter().all(|&v| v == 2.0));
    }
}
