use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twinlatent::attack::{auc_rank, auc_trapezoid, entropy, member_fraction_lowest_half, prediction_entropy, EntropyRecord};
use twinlatent::frechet::{fit_gaussian, frechet_distance, GaussianFit};
use twinlatent::gan::sample_triplet;
use twinlatent::losses::{identity_losses, pose_losses, LossConfig};
use twinlatent::margin::{angular_logits, MarginHeadConfig};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.05)
        .prop_map(|v| unit(&v))
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    let d = v[0].len();
    let flat: Vec<f32> = v.iter().flatten().map(|&x| x as f32).collect();
    Tensor::from_vec(flat, (v.len(), d), &Device::Cpu).unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0).acos()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Margin-shifted target cosine, continued as `cos(theta) - m sin(m)` past
/// `pi - m`.
fn target_cos(theta: f64, m: f64) -> f64 {
    if theta <= std::f64::consts::PI - m {
        (theta + m).cos()
    } else {
        theta.cos() - m * m.sin()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_losses_match_a_direct_computation(
        batch in prop::collection::vec((unit_vec(6), unit_vec(6), unit_vec(6)), 1..6)
    ) {
        let cfg = LossConfig::default();
        let e0: Vec<_> = batch.iter().map(|t| t.0.clone()).collect();
        let ep: Vec<_> = batch.iter().map(|t| t.1.clone()).collect();
        let em: Vec<_> = batch.iter().map(|t| t.2.clone()).collect();
        let l = identity_losses(&rows(&e0), &rows(&ep), &rows(&em), &cfg).unwrap();
        let pull = mean(e0.iter().zip(&ep).map(|(a, b)| angle(a, b).max(cfg.tau_pull)));
        let push = -mean(e0.iter().zip(&em).map(|(a, b)| angle(a, b).min(cfg.tau_push)));
        prop_assert!((value(&l.l_pull) - pull).abs() < 2e-3);
        prop_assert!((value(&l.l_push) - push).abs() < 2e-3);
        prop_assert!(value(&l.l_pull) >= cfg.tau_pull - 1e-6);
        prop_assert!(value(&l.l_push) >= -cfg.tau_push - 1e-6);
        prop_assert!(value(&l.l_push) <= 1e-6);
    }

    #[test]
    fn pose_losses_are_clamped(
        batch in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 9), 1..6)
    ) {
        let cfg = LossConfig::default();
        let p0: Vec<_> = batch.iter().map(|r| r[0..3].to_vec()).collect();
        let pp: Vec<_> = batch.iter().map(|r| r[3..6].to_vec()).collect();
        let pm: Vec<_> = batch.iter().map(|r| r[6..9].to_vec()).collect();
        let l = pose_losses(&rows(&p0), &rows(&pp), &rows(&pm), &cfg).unwrap();
        let vary = -mean(p0.iter().zip(&pp).map(|(a, b)| sq(a, b).min(cfg.tau_vary)));
        let matched = mean(p0.iter().zip(&pm).map(|(a, b)| sq(a, b).min(cfg.tau_match)));
        prop_assert!((value(&l.l_vary) - vary).abs() < 1e-4);
        prop_assert!((value(&l.l_match) - matched).abs() < 1e-4);
        prop_assert!((-cfg.tau_vary - 1e-6..=1e-6).contains(&value(&l.l_vary)));
        prop_assert!((-1e-6..=cfg.tau_match + 1e-6).contains(&value(&l.l_match)));
    }

    #[test]
    fn margin_only_lowers_the_target_logit(
        e in unit_vec(5),
        w in prop::collection::vec(unit_vec(5), 2..6),
        label_seed in 0usize..100,
        m in 0.0f64..1.0,
    ) {
        let k = w.len();
        let label = label_seed % k;
        let head = MarginHeadConfig { s: 10.0, m, n_classes: k };
        let plain = MarginHeadConfig { m: 0.0, ..head.clone() };
        let with = angular_logits(&e, &w, label, &head).unwrap();
        let without = angular_logits(&e, &w, label, &plain).unwrap();
        for j in 0..k {
            if j == label {
                let theta = angle(&e, &w[j]);
                prop_assert!((with[j] - 10.0 * target_cos(theta, m)).abs() < 1e-9);
                prop_assert!(with[j] <= without[j] + 1e-12);
            } else {
                prop_assert!((with[j] - without[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_logit_decreases_with_margin(e in unit_vec(4), w in unit_vec(4), m1 in 0.0f64..0.7, dm in 0.0f64..0.7) {
        let weights = vec![w, unit(&[1.0, 0.0, 0.0, 0.0])];
        let at = |m: f64| angular_logits(&e, &weights, 0, &MarginHeadConfig { s: 1.0, m, n_classes: 2 }).unwrap()[0];
        prop_assert!(at(m1 + dm) <= at(m1) + 1e-12);
    }

    #[test]
    fn entropy_is_bounded(p in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let total: f64 = p.iter().sum();
        prop_assume!(total > 1e-9);
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_falls_as_the_scale_grows(
        e in unit_vec(4),
        w in prop::collection::vec(unit_vec(4), 2..7),
        s in 1.0f64..40.0,
        ds in 0.0f64..40.0,
    ) {
        let k = w.len();
        let at = |s: f64| prediction_entropy(&e, &w, 0, &MarginHeadConfig { s, m: 0.0, n_classes: k }).unwrap();
        let (lo, hi) = (at(s), at(s + ds));
        prop_assert!(hi <= lo + 1e-9);
        prop_assert!(lo <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_ignores_class_order(
        e in unit_vec(4),
        w in prop::collection::vec(unit_vec(4), 2..7),
        label_seed in 0usize..100,
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let k = w.len();
        let label = label_seed % k;
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| w[i].clone()).collect();
        let new_label = order.iter().position(|&i| i == label).unwrap();
        let head = MarginHeadConfig { s: 16.0, m: 0.5, n_classes: k };
        let a = prediction_entropy(&e, &w, label, &head).unwrap();
        let b = prediction_entropy(&e, &permuted, new_label, &head).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn auc_estimators_agree(
        entries in prop::collection::vec((0u8..20, any::<bool>()), 2..40)
    ) {
        prop_assume!(entries.iter().any(|e| e.1) && entries.iter().any(|e| !e.1));
        let records: Vec<EntropyRecord> = entries
            .iter()
            .enumerate()
            .map(|(i, &(h, member))| EntropyRecord { id: i.to_string(), member, entropy: h as f64 / 10.0 })
            .collect();
        let a = auc_rank(&records);
        prop_assert!((a - auc_trapezoid(&records)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let f = member_fraction_lowest_half(&records);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn triplets_share_the_right_codes(seed in any::<u64>(), n_z in 1usize..16) {
        let t = sample_triplet(&mut ChaCha8Rng::seed_from_u64(seed), n_z);
        prop_assert_eq!(&t.anchor.z1, &t.same_identity.z1);
        prop_assert_eq!(&t.anchor.z2, &t.same_pose.z2);
        prop_assert_ne!(&t.anchor.z2, &t.same_identity.z2);
        prop_assert_ne!(&t.anchor.z1, &t.same_pose.z1);
        prop_assert_eq!(t.anchor.z1.len(), n_z);
        prop_assert_eq!(t, sample_triplet(&mut ChaCha8Rng::seed_from_u64(seed), n_z));
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..20),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..20),
    ) {
        let fa = fit_gaussian(&a).unwrap();
        let fb = fit_gaussian(&b).unwrap();
        let ab = frechet_distance(&fa, &fb, 1e-6).unwrap().distance2;
        let ba = frechet_distance(&fb, &fa, 1e-6).unwrap().distance2;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-7 * (1.0 + ab));
        prop_assert!(frechet_distance(&fa, &fa, 1e-6).unwrap().distance2 < 1e-7);
    }

    #[test]
    fn shifting_one_set_adds_the_squared_shift(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..20),
        shift in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let moved: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let d = frechet_distance(&fit_gaussian(&a).unwrap(), &fit_gaussian(&moved).unwrap(), 1e-6).unwrap().distance2;
        let expected: f64 = shift.iter().map(|s| s * s).sum();
        prop_assert!((d - expected).abs() < 1e-6 * (1.0 + expected));
    }

    #[test]
    fn diagonal_covariances_have_a_closed_form(
        diag in prop::collection::vec((0.01f64..4.0, 0.01f64..4.0, -2.0f64..2.0), 1..6)
    ) {
        let d = diag.len();
        let fit = |var: Vec<f64>, mu: Vec<f64>| GaussianFit {
            mu: DVector::from_vec(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(var)),
            n: 100,
        };
        let a = fit(diag.iter().map(|t| t.0).collect(), vec![0.0; d]);
        let b = fit(diag.iter().map(|t| t.1).collect(), diag.iter().map(|t| t.2).collect());
        let expected: f64 = diag.iter().map(|(va, vb, m)| m * m + (va.sqrt() - vb.sqrt()).powi(2)).sum();
        let got = frechet_distance(&a, &b, 0.0).unwrap().distance2;
        prop_assert!((got - expected).abs() < 1e-8 * (1.0 + expected));
    }
}
