use std::collections::HashSet;

use forget::als::{self, solve_row_cg, solve_row_direct};
use forget::audit::{mi_accuracy, vulnerability_denoised, vulnerability_naive, MiDataset};
use forget::data::{sample_removal, split_holdout};
use forget::eval::{auc_score, build_eval_set};
use forget::linalg::{spd_inverse, spd_solve};
use forget::unlearn::sherman_morrison_downdate;
use forget::{
    als_loss, untrain_loss, ConfidencePolicy, ConfidenceScheme, Coord, FactorModel, Factors, Hyperparams,
    InteractionMatrix,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix_strategy(max_m: usize, max_n: usize) -> impl Strategy<Value = InteractionMatrix> {
    (1..=max_m, 1..=max_n)
        .prop_flat_map(|(m, n)| (Just(m), Just(n), proptest::collection::vec(any::<bool>(), m * n)))
        .prop_map(|(m, n, mask)| {
            let coords = mask
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| Coord::new(j / n, j % n));
            InteractionMatrix::new(m, n, coords).unwrap()
        })
}

fn factors(rows: usize, k: usize, vals: &[f64]) -> Factors {
    Factors::from_vec(rows, k, vals[..rows * k].to_vec()).unwrap()
}

/// Random SPD matrix `BᵀB + εI`.
fn spd(k: usize, vals: &[f64], eps: f64) -> DMatrix<f64> {
    let b = DMatrix::from_column_slice(k, k, &vals[..k * k]);
    b.transpose() * &b + DMatrix::identity(k, k) * eps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_observations(matrix in matrix_strategy(12, 12), frac in 0.01f64..0.99, seed in any::<u64>()) {
        prop_assume!(matrix.len() >= 2);
        let split = split_holdout(&matrix, frac, seed).unwrap();
        let test: HashSet<Coord> = split.test_positives.iter().copied().collect();
        prop_assert_eq!(test.len(), split.test_positives.len());
        prop_assert!(split.train.coords().all(|c| !test.contains(&c)));
        let mut union: Vec<Coord> = split.train.coords().chain(test.iter().copied()).collect();
        union.sort();
        prop_assert_eq!(union, matrix.coords().collect::<Vec<_>>());
        let want = ((frac * matrix.len() as f64 + 1e-9).floor() as usize).max(1);
        prop_assert_eq!(split.test_positives.len(), want);
        let again = split_holdout(&matrix, frac, seed).unwrap();
        prop_assert_eq!(again.test_positives, split.test_positives);
    }

    #[test]
    fn removal_is_contained(matrix in matrix_strategy(10, 10), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let removal = sample_removal(&matrix, frac, seed).unwrap();
        prop_assert!(removal.coords.iter().all(|&c| matrix.contains(c)));
        prop_assert_eq!(removal.len(), (frac * matrix.len() as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(sample_removal(&matrix, frac, seed).unwrap(), removal);
    }

    #[test]
    fn eval_negatives_avoid_training(matrix in matrix_strategy(10, 10), seed in any::<u64>()) {
        prop_assume!(matrix.len() >= 2 && 2 * matrix.len() < matrix.num_users() * matrix.num_items());
        let split = split_holdout(&matrix, 0.2, seed).unwrap();
        let eval = build_eval_set(&split, seed ^ 1).unwrap();
        prop_assert_eq!(eval.negatives.len(), eval.positives.len());
        for c in &eval.negatives {
            prop_assert!(!matrix.contains(*c));
        }
    }

    #[test]
    fn auc_is_rank_invariant(
        pos in proptest::collection::vec(-5.0f64..5.0, 1..30),
        neg in proptest::collection::vec(-5.0f64..5.0, 1..30),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let base = auc_score(&pos, &neg).unwrap();
        let affine = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        let cubic = |v: &[f64]| v.iter().map(|x| x * x * x + x).collect::<Vec<_>>();
        prop_assert_eq!(auc_score(&affine(&pos), &affine(&neg)).unwrap(), base);
        prop_assert_eq!(auc_score(&cubic(&pos), &cubic(&neg)).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn auc_swapping_classes_complements(pos in proptest::collection::vec(any::<u32>(), 1..30), neg in proptest::collection::vec(any::<u32>(), 1..30)) {
        // offset the classes onto disjoint lattices so there are no ties
        let p: Vec<f64> = pos.iter().map(|&v| 2.0 * v as f64).collect();
        let n: Vec<f64> = neg.iter().map(|&v| 2.0 * v as f64 + 1.0).collect();
        let sum = auc_score(&p, &n).unwrap() + auc_score(&n, &p).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untrain_loss_equals_remaining_loss(
        matrix in matrix_strategy(50, 50),
        k in 1usize..=8,
        lambda in prop_oneof![Just(0.0), Just(0.1)],
        frac in prop_oneof![Just(0.0), Just(0.1), Just(0.5), Just(1.0)],
        seed in any::<u64>(),
        linear in any::<bool>(),
    ) {
        let scheme = if linear { ConfidenceScheme::Linear { alpha: 40.0 } } else { ConfidenceScheme::Binary { low: 0.01 } };
        let model = FactorModel::random(matrix.num_users(), matrix.num_items(), k, lambda, scheme, seed);
        let removal = sample_removal(&matrix, frac, seed).unwrap();
        let policy = ConfidencePolicy::new(scheme);
        let lhs = untrain_loss(&model, &matrix, &removal, &policy);
        let rhs = als_loss(&model, &matrix.without(&removal.coords), &policy);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(f64::MIN_POSITIVE), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn downdate_matches_direct_inverse(
        k in 1usize..=16,
        vals in proptest::collection::vec(-1.0f64..1.0, 256),
        y in proptest::collection::vec(-1.0f64..1.0, 16),
        c in 0.0f64..5.0,
    ) {
        let a = spd(k, &vals, 0.5);
        let inv = spd_inverse(&a).unwrap();
        let yv = DVector::from_column_slice(&y[..k]);
        let q = c * yv.dot(&(&inv * &yv));
        prop_assume!((1.0 - q).abs() >= 1e-3);
        let down = a - c * &yv * yv.transpose();
        let got = sherman_morrison_downdate(&inv, &y[..k], c).unwrap();
        // compare through the action on the downdated system, which is
        // well-defined even when the downdate is indefinite
        let resid = (&down * &got - DMatrix::identity(k, k)).amax();
        prop_assert!(resid <= 1e-8 * (1.0 + got.amax() * down.amax()), "residual {}", resid);
    }

    #[test]
    fn direct_row_is_optimal(
        n in 2usize..10,
        k in 1usize..=4,
        vals in proptest::collection::vec(-1.0f64..1.0, 40),
        conf in proptest::collection::vec(0.0f64..5.0, 10),
        pref in proptest::collection::vec(0u8..2, 10),
        lambda in 0.01f64..1.0,
        dir in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let other = factors(n, k, &vals);
        let p: Vec<f64> = pref[..n].iter().map(|&v| v as f64).collect();
        let x = solve_row_direct(&other, &conf[..n], &p, lambda).unwrap();
        let objective = |x: &[f64]| {
            let mut t = lambda * x.iter().map(|v| v * v).sum::<f64>();
            for j in 0..n {
                let s: f64 = other.row(j).iter().zip(x).map(|(a, b)| a * b).sum();
                t += conf[j] * (p[j] - s).powi(2);
            }
            t
        };
        let norm = dir[..k].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let best = objective(&x);
        for sign in [1.0, -1.0] {
            let moved: Vec<f64> = x.iter().zip(&dir[..k]).map(|(a, d)| a + sign * 1e-3 * d / norm).collect();
            prop_assert!(objective(&moved) >= best - 1e-12 * best.abs().max(1.0));
        }
    }

    #[test]
    fn cg_agrees_with_direct(
        n in 1usize..40,
        k in 1usize..=16,
        vals in proptest::collection::vec(-1.0f64..1.0, 640),
        conf in proptest::collection::vec(0.0f64..41.0, 40),
        pref in proptest::collection::vec(0u8..2, 40),
        lambda in 1e-6f64..1.0,
        extra in 0usize..4,
    ) {
        let other = factors(n, k, &vals);
        let p: Vec<f64> = pref[..n].iter().map(|&v| v as f64).collect();
        let direct = solve_row_direct(&other, &conf[..n], &p, lambda).unwrap();
        let cg = solve_row_cg(&other, &conf[..n], &p, lambda, k + extra).unwrap();
        let err = direct.iter().zip(&cg).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-6, "err {}", err);
    }

    #[test]
    fn overrides_dominate(p in 0u8..2, value in 0.0f64..100.0, linear in any::<bool>(), u in 0usize..50, i in 0usize..50) {
        let scheme = if linear { ConfidenceScheme::Linear { alpha: 40.0 } } else { ConfidenceScheme::Binary { low: 0.2 } };
        let mut policy = ConfidencePolicy::new(scheme);
        policy.set_override(Coord::new(u, i), value).unwrap();
        prop_assert_eq!(policy.confidence_of(p as f64, Coord::new(u, i)), value);
        policy.block(Coord::new(u, i));
        prop_assert_eq!(policy.confidence_of(p as f64, Coord::new(u, i)), 0.0);
    }

    #[test]
    fn mi_accuracy_is_oriented(
        members in proptest::collection::vec(-3.0f64..3.0, 2..40),
        removed in proptest::collection::vec(-3.0f64..3.0, 2..40),
        fit_frac in 0.0f64..1.0,
    ) {
        let fit_m: Vec<usize> = (0..((members.len() as f64 * fit_frac) as usize).min(members.len() - 1)).collect();
        let fit_r: Vec<usize> = (0..((removed.len() as f64 * fit_frac) as usize).min(removed.len() - 1)).collect();
        let ds = MiDataset { member_scores: members.clone(), removed_scores: removed, split_seed: 0, member_fit: fit_m.clone(), removed_fit: fit_r };
        let acc = mi_accuracy(&ds).unwrap();
        prop_assert!((0.5..=1.0).contains(&acc));
        let same = MiDataset { member_scores: members.clone(), removed_scores: members, split_seed: 0, member_fit: fit_m.clone(), removed_fit: fit_m };
        prop_assert_eq!(mi_accuracy(&same).unwrap(), 0.5);
    }

    #[test]
    fn vulnerability_identities(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        prop_assert_eq!(vulnerability_naive(a, b), a - b);
        prop_assert_eq!(vulnerability_denoised(a, b, c), a - b - c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn training_is_deterministic(matrix in matrix_strategy(15, 15), seed in any::<u64>(), k in 1usize..4) {
        prop_assume!(!matrix.is_empty());
        let hp = Hyperparams { k, max_passes: 3, tolerance: 0.0, parallel: false, ..Default::default() };
        let a = als::train_als(&matrix, &hp, seed).unwrap().model;
        let b = als::train_als(&matrix, &hp, seed).unwrap().model;
        prop_assert_eq!(&a, &b);
        // disjoint row writes make the parallel sweep bit-identical as well
        let c = als::train_als(&matrix, &Hyperparams { parallel: true, ..hp }, seed).unwrap().model;
        prop_assert_eq!(a, c);
    }

    #[test]
    fn direct_solve_is_exact_on_spd(k in 1usize..=12, vals in proptest::collection::vec(-1.0f64..1.0, 144), b in proptest::collection::vec(-1.0f64..1.0, 12)) {
        let a = spd(k, &vals, 0.1);
        let b = DVector::from_column_slice(&b[..k]);
        let x = spd_solve(&a, &b).unwrap();
        prop_assert!((&a * x - b).amax() < 1e-9);
    }
}
