//! Property-based invariants over attacks, injection, schedules and formats.

use proptest::prelude::*;
use slatlab::attacks;
use slatlab::metrics::{metrics_to_csv, parse_metrics_csv, MetricRecord};
use slatlab::models::{build_toy_mlp, Activation, Deltas};
use slatlab::training::cyclic_lr;
use slatlab::Tensor;

fn batch(rows: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (prop::collection::vec(0.0f64..1.0, rows * 2), prop::collection::vec(0usize..2, rows))
        .prop_map(move |(x, y)| (Tensor::new(vec![rows, 2], x).unwrap(), y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attacks_stay_in_ball_and_range((x, y) in batch(6), eps in 0.01f64..0.5, seed in 0u64..1000) {
        let model = build_toy_mlp(8, Activation::Relu, seed).unwrap();
        let clamp = Some((0.0, 1.0));
        let advs = [
            attacks::fgsm(&model, &x, &y, eps, clamp).unwrap(),
            attacks::r_fgsm(&model, &x, &y, eps, 1.25 * eps, clamp, seed).unwrap(),
            attacks::pgd(&model, &x, &y, eps, eps / 4.0, 5, 2, clamp, seed).unwrap(),
        ];
        for adv in &advs {
            prop_assert!(adv.sub(&x).unwrap().linf_norm() <= eps + 1e-12);
            prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pgd_never_worse_than_clean((x, y) in batch(4), eps in 0.01f64..0.3, seed in 0u64..1000) {
        let model = build_toy_mlp(8, Activation::Softplus, seed).unwrap();
        let adv = attacks::pgd(&model, &x, &y, eps, eps / 4.0, 10, 1, None, seed).unwrap();
        let clean = attacks::per_example_loss(&model, &x, &y).unwrap();
        let worst = attacks::per_example_loss(&model, &adv, &y).unwrap();
        for (c, w) in clean.iter().zip(&worst) {
            prop_assert!(w + 1e-9 >= *c);
        }
    }

    #[test]
    fn latent_deltas_respect_radius((x, y) in batch(5), eta0 in 0.0f64..0.3, eta1 in 0.0f64..0.3) {
        let model = build_toy_mlp(8, Activation::Relu, 1).unwrap();
        let eta = [(0, eta0), (1, eta1)].into();
        let deltas = attacks::latent_deltas(&model, &x, &y, &eta).unwrap();
        prop_assert!(deltas[&0].linf_norm() <= eta0);
        prop_assert!(deltas[&1].linf_norm() <= eta1);
        prop_assert!(deltas[&1].data().iter().all(|v| *v == 0.0 || v.abs() == eta1));
    }

    #[test]
    fn zero_deltas_equal_clean_forward((x, _y) in batch(3), seed in 0u64..100) {
        let model = build_toy_mlp(8, Activation::Softplus, seed).unwrap();
        let clean = model.predict(&x).unwrap();
        let latents = model.forward_with_latents(&x, None).unwrap().latents();
        let zeros: Deltas = latents.iter().map(|(&k, h)| (k, Tensor::zeros(h.shape()))).collect();
        let injected = model.inject(&x, &zeros).unwrap();
        prop_assert_eq!(injected.logits(), &clean);
        prop_assert_eq!(model.predict(&x).unwrap(), clean);
    }

    #[test]
    fn cyclic_lr_is_bounded(step in 0usize..2000, total in 1usize..1000, lr in 0.0f64..1.0, peak in 0.05f64..0.95) {
        let v = cyclic_lr(step, total, lr, peak);
        prop_assert!((0.0..=lr + 1e-15).contains(&v));
    }

    #[test]
    fn sign_is_three_valued(v in prop::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 1..40)) {
        let t = Tensor::from_vec(v.clone());
        for (s, x) in t.sign().data().iter().zip(&v) {
            let expected = if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
            prop_assert_eq!(*s, expected);
        }
    }

    #[test]
    fn metrics_csv_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 8), step in 0usize..10_000) {
        let rec = MetricRecord {
            step,
            epoch: vals[0].abs(),
            lr: vals[1].abs(),
            clean_acc: vals[2],
            pgd_acc: vals[3],
            adv_loss: vals[4],
            grad_align: vals[5],
            logits_l2: vals[6],
            l1_grad_norms: [(0, vals[7]), (1, vals[2])].into(),
        };
        let back = parse_metrics_csv(&metrics_to_csv(std::slice::from_ref(&rec))).unwrap();
        prop_assert_eq!(back, vec![rec]);
    }
}
