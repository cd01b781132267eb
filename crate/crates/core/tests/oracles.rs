//! Library results checked against independent, deliberately naive
//! reimplementations.

use forget::als::{self, solve_row_direct, training_objective};
use forget::data::{generate_synthetic, sample_removal, split_holdout};
use forget::eval::{auc_score, build_eval_set, evaluate_model};
use forget::unlearn::{self, apply_deletion, DowndateCache, UnlearnRequest, UnlearnSolver};
use forget::{
    als_loss, untrain_loss, ConfidencePolicy, ConfidenceScheme, Coord, FactorModel, Factors, Hyperparams,
    InteractionMatrix, RemovalSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, density: f64) -> InteractionMatrix {
    let mut coords = Vec::new();
    for u in 0..m {
        for i in 0..n {
            if rng.random::<f64>() < density {
                coords.push(Coord::new(u, i));
            }
        }
    }
    InteractionMatrix::new(m, n, coords).unwrap()
}

/// Dense double loop over every (u, i): confidence and preference read from
/// the dense matrix, residuals summed only where the cell is observed.
fn naive_loss(model: &FactorModel, observed: &[Vec<bool>], conf: impl Fn(usize, usize) -> f64) -> f64 {
    let k = model.k();
    let mut total = 0.0;
    for (u, row) in observed.iter().enumerate() {
        for (i, &obs) in row.iter().enumerate() {
            if obs {
                let mut s = 0.0;
                for d in 0..k {
                    s += model.users.row(u)[d] * model.items.row(i)[d];
                }
                total += conf(u, i) * (1.0 - s) * (1.0 - s);
            }
        }
    }
    let mut reg = 0.0;
    for v in model.users.as_slice().iter().chain(model.items.as_slice()) {
        reg += v * v;
    }
    total + model.lambda * reg
}

fn dense(matrix: &InteractionMatrix) -> Vec<Vec<bool>> {
    (0..matrix.num_users())
        .map(|u| (0..matrix.num_items()).map(|i| matrix.contains(Coord::new(u, i))).collect())
        .collect()
}

#[test]
fn loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (m, n) = (rng.random_range(1..30), rng.random_range(1..30));
        let matrix = random_matrix(&mut rng, m, n, 0.2);
        let scheme = if trial % 2 == 0 {
            ConfidenceScheme::Linear { alpha: 40.0 }
        } else {
            ConfidenceScheme::Binary { low: 0.05 }
        };
        let model = FactorModel::random(m, n, rng.random_range(1..6), 0.3, scheme, trial);
        let got = als_loss(&model, &matrix, &model.policy());
        let want = naive_loss(&model, &dense(&matrix), |_, _| scheme.positive());
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

/// O(|pos|·|neg|) pair counting.
fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &q in neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        // coarse grid so ties are common
        let pos: Vec<f64> = (0..np).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let got = auc_score(&pos, &neg).unwrap();
        assert!((got - brute_auc(&pos, &neg)).abs() < 1e-12);
    }
}

/// Gaussian elimination with partial pivoting on the normal equations.
fn normal_equation_oracle(y: &[Vec<f64>], c: &[f64], p: &[f64], lambda: f64) -> Vec<f64> {
    let k = y[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for r in 0..k {
        for s in 0..k {
            a[r][s] = (0..y.len()).map(|j| c[j] * y[j][r] * y[j][s]).sum::<f64>();
        }
        a[r][r] += lambda;
        a[r][k] = (0..y.len()).map(|j| c[j] * p[j] * y[j][r]).sum::<f64>();
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &z| a[x][col].abs().total_cmp(&a[z][col].abs())).unwrap();
        a.swap(col, piv);
        for r in col + 1..k {
            let f = a[r][col] / a[col][col];
            for s in col..=k {
                a[r][s] -= f * a[col][s];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let tail: f64 = (r + 1..k).map(|s| a[r][s] * x[s]).sum();
        x[r] = (a[r][k] - tail) / a[r][r];
    }
    x
}

#[test]
fn direct_row_solve_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let k = rng.random_range(1..=4);
        let n = rng.random_range(k..12);
        let y: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let lambda = rng.random_range(0.01..1.0);
        let other = Factors::from_vec(n, k, y.concat()).unwrap();
        let got = solve_row_direct(&other, &c, &p, lambda).unwrap();
        let want = normal_equation_oracle(&y, &c, &p, lambda);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn rank_one_fully_observed_fits_exactly() {
    let coords: Vec<Coord> = (0..6).flat_map(|u| (0..5).map(move |i| Coord::new(u, i))).collect();
    let matrix = InteractionMatrix::new(6, 5, coords).unwrap();
    let hp = Hyperparams {
        k: 1,
        lambda: 1e-6,
        max_passes: 200,
        tolerance: 1e-12,
        ..Default::default()
    };
    let fit = als::train_als(&matrix, &hp, 3).unwrap();
    let model = &fit.model;
    let loss = als_loss(model, &matrix, &model.policy());
    // the ridge term alone is bounded below by 2λ√(mn), so the bound applies to the fit term
    let reg = model.lambda * (model.users.squared_norm() + model.items.squared_norm());
    assert!(loss - reg <= 1e-6, "data term {}", loss - reg);
    assert!(reg >= 2.0 * 1e-6 * 30f64.sqrt() * (1.0 - 1e-9));
}

#[test]
fn perfect_factors_have_zero_loss() {
    // x_u = (1, 0), y_i = (1, 0) scores every cell 1
    let model = FactorModel {
        users: Factors::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        items: Factors::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
        lambda: 0.0,
        scheme: ConfidenceScheme::default(),
        passes_run: 0,
        init_seed: 0,
    };
    let matrix = InteractionMatrix::new(2, 3, [Coord::new(0, 0), Coord::new(1, 2)]).unwrap();
    assert_eq!(als_loss(&model, &matrix, &model.policy()), 0.0);
}

#[test]
fn converged_untrain_loss_equals_remaining_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train = random_matrix(&mut rng, 25, 20, 0.25);
    let hp = Hyperparams { k: 3, max_passes: 30, tolerance: 0.0, ..Default::default() };
    let base = als::train_als(&train, &hp, 1).unwrap().model;
    let removal = sample_removal(&train, 0.2, 2).unwrap();
    let mut req = UnlearnRequest::new(&base, &train, &removal, 40);
    req.tolerance = 1e-10;
    let model = unlearn::untrain_als(&req).unwrap().model;
    let remaining = train.without(&removal.coords);
    let policy = base.policy();
    let lhs = untrain_loss(&model, &train, &removal, &policy);
    let rhs = als_loss(&model, &remaining, &policy);
    assert!((lhs - rhs).abs() <= 1e-12 * rhs, "{lhs} vs {rhs}");
}

#[test]
fn downdate_pass_matches_direct_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for (trial, fraction) in [0.0, 0.002, 0.02, 0.3].into_iter().enumerate() {
        let train = random_matrix(&mut rng, 40, 30, 0.3);
        let hp = Hyperparams { k: 6, max_passes: 8, tolerance: 0.0, ..Default::default() };
        let base = als::train_als(&train, &hp, trial as u64).unwrap().model;
        let removal = if fraction == 0.002 {
            // a single deletion
            let c = train.coords().nth(17).unwrap();
            RemovalSet::from_coords(vec![c], train.len())
        } else {
            sample_removal(&train, fraction, 9).unwrap()
        };
        let mut req = UnlearnRequest::new(&base, &train, &removal, 1);
        let direct = unlearn::untrain_als(&req).unwrap().model;
        req.solver = UnlearnSolver::Downdate;
        let fast = unlearn::untrain_als(&req).unwrap();
        let diff = direct
            .users
            .as_slice()
            .iter()
            .chain(direct.items.as_slice())
            .zip(fast.model.users.as_slice().iter().chain(fast.model.items.as_slice()))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-8, "fraction {fraction}: max diff {diff}");
        assert_eq!(fast.history[0].fallbacks, 0);
    }
}

#[test]
fn downdate_single_deletion_row_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = random_matrix(&mut rng, 15, 12, 0.4);
    let hp = Hyperparams { k: 4, max_passes: 5, tolerance: 0.0, ..Default::default() };
    let base = als::train_als(&train, &hp, 2).unwrap().model;
    let target = train.coords().nth(3).unwrap();
    let removal = RemovalSet::from_coords(vec![target], train.len());
    let cache = DowndateCache::build(&base, &train, false).unwrap();
    let mut req = UnlearnRequest::new(&base, &train, &removal, 1);
    req.parallel = false;
    let (model, _) = unlearn::untrain_pass_downdate(&req, &cache).unwrap();

    // the affected user's row against the dense blocked row of confidences
    let (_, blocked) = apply_deletion(&train, &base.policy(), &removal).unwrap();
    let u = target.user;
    let conf: Vec<f64> = (0..12)
        .map(|i| {
            let c = Coord::new(u, i);
            let p = if c != target && train.contains(c) { 1.0 } else { 0.0 };
            blocked.confidence_of(p, c)
        })
        .collect();
    let pref: Vec<f64> = (0..12)
        .map(|i| {
            let c = Coord::new(u, i);
            if c != target && train.contains(c) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let want = solve_row_direct(&base.items, &conf, &pref, base.lambda).unwrap();
    for (g, w) in model.users.row(u).iter().zip(&want) {
        assert!((g - w).abs() <= 1e-8);
    }
}

#[test]
fn half_sweeps_never_raise_the_full_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let train = random_matrix(&mut rng, 30, 25, 0.2);
    let mut policy = ConfidencePolicy::new(ConfidenceScheme::Linear { alpha: 10.0 });
    policy.block(train.coords().next().unwrap());
    let mut model = FactorModel::random(30, 25, 4, 0.1, policy.scheme, 3);
    let mut prev = training_objective(&model, &train, &policy);
    for _ in 0..10 {
        let opts = als::RunOptions {
            max_passes: 1,
            tolerance: 0.0,
            solver: forget::Solver::Direct,
            parallel: false,
        };
        als::run_passes(&mut model, &train, &policy, opts, |_, _| Ok(())).unwrap();
        let cur = training_objective(&model, &train, &policy);
        assert!(cur <= prev * (1.0 + 1e-9), "{cur} > {prev}");
        prev = cur;
    }
}

#[test]
fn synthetic_rank_one_is_separable() {
    let inst = generate_synthetic(30, 30, 1, 0.3, 6).unwrap();
    let split = split_holdout(&inst.observed, 0.1, 1).unwrap();
    let eval = build_eval_set(&split, 2).unwrap();
    // the planted factors as a model reproduce M exactly
    let truth = FactorModel {
        users: Factors::from_vec(30, 1, inst.user_factors.clone()).unwrap(),
        items: Factors::from_vec(30, 1, inst.item_factors.clone()).unwrap(),
        lambda: 0.0,
        scheme: ConfidenceScheme::default(),
        passes_run: 0,
        init_seed: 0,
    };
    assert!(evaluate_model(&truth, &eval).unwrap() >= 0.99);
}
