//! Exact unlearning: warm-started ALS on a matrix whose removed cells have
//! preference zero and confidence pinned to zero, plus the rank-one inverse
//! fast path for the first pass and the retrain-from-scratch baseline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{
    self, als_loss, relative_change, run_passes, ConfidencePolicy, Entry, FactorModel, Factors, Fit,
    Hyperparams, PassRecord, Problem, RunOptions, Side, Solver,
};
use crate::data::{Coord, InteractionMatrix, RemovalSet};
use crate::error::{Error, Result};
use crate::linalg;

/// Removes `removal` from the observed set and blocks its confidence.
///
/// The returned policy pins `c = 0` on every removed coordinate, so the block
/// holds for every pass run against it.
pub fn apply_deletion(
    train: &InteractionMatrix,
    policy: &ConfidencePolicy,
    removal: &RemovalSet,
) -> Result<(InteractionMatrix, ConfidencePolicy)> {
    check_removal(train, removal)?;
    if removal.is_empty() {
        return Ok((train.clone(), policy.clone()));
    }
    let remaining = train.without(&removal.coords);
    let mut blocked = policy.clone();
    for &c in &removal.coords {
        blocked.block(c);
    }
    Ok((remaining, blocked))
}

fn check_removal(train: &InteractionMatrix, removal: &RemovalSet) -> Result<()> {
    match removal.coords.iter().find(|&&c| !train.contains(c)) {
        Some(&c) => Err(Error::MeaninglessDeletion(c)),
        None => Ok(()),
    }
}

/// Loss of the blocked objective on the original observations: removed
/// cells keep their coordinates but contribute with confidence zero.
pub fn untrain_loss(
    model: &FactorModel,
    train: &InteractionMatrix,
    removal: &RemovalSet,
    policy: &ConfidencePolicy,
) -> f64 {
    let mut total = 0.0;
    for c in train.coords() {
        let weight = if removal.contains(c) {
            0.0
        } else {
            policy.confidence_of(1.0, c)
        };
        let r = 1.0 - model.score(c);
        total += weight * r * r;
    }
    total + model.lambda * (model.users.squared_norm() + model.items.squared_norm())
}

/// Given `A⁻¹`, returns `(A - c·y yᵀ)⁻¹ = A⁻¹ + c/(1-q) (A⁻¹y)(A⁻¹y)ᵀ` with
/// `q = c·yᵀA⁻¹y`. Fails with [`Error::SingularDowndate`] when `|1 - q| <= 1e-10`.
pub fn sherman_morrison_downdate(base_inverse: &DMatrix<f64>, y: &[f64], c: f64) -> Result<DMatrix<f64>> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("downdate weight must be >= 0, got {c}")));
    }
    if base_inverse.nrows() != base_inverse.ncols() {
        return Err(Error::ShapeMismatch("inverse must be square".into()));
    }
    linalg::rank_one_inverse_update(base_inverse, y, -c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnlearnSolver {
    Direct,
    Cg { iters: usize },
    /// First pass through cached inverses with rank-one corrections, then direct.
    Downdate,
}

#[derive(Debug, Clone, Copy)]
pub struct UnlearnRequest<'a> {
    pub base_model: &'a FactorModel,
    /// The matrix the base model was trained on.
    pub train: &'a InteractionMatrix,
    pub removal: &'a RemovalSet,
    pub untrain_passes: usize,
    pub solver: UnlearnSolver,
    /// Relative loss-change stop; 0 runs all `untrain_passes`.
    pub tolerance: f64,
    pub parallel: bool,
}

impl<'a> UnlearnRequest<'a> {
    pub fn new(base_model: &'a FactorModel, train: &'a InteractionMatrix, removal: &'a RemovalSet, untrain_passes: usize) -> Self {
        UnlearnRequest {
            base_model,
            train,
            removal,
            untrain_passes,
            solver: UnlearnSolver::Direct,
            tolerance: 0.0,
            parallel: true,
        }
    }
}

/// Untrain-ALS. The returned history holds one record per pass, whose loss is
/// the observed-coordinate loss on the remaining data.
pub fn untrain_als(req: &UnlearnRequest) -> Result<Fit> {
    untrain_als_with(req, |_, _| Ok(()))
}

/// [`untrain_als`] with a callback after every pass.
pub fn untrain_als_with<F>(req: &UnlearnRequest, mut on_pass: F) -> Result<Fit>
where
    F: FnMut(&PassRecord, &FactorModel) -> Result<()>,
{
    req.base_model.check_shape(req.train)?;
    let base_policy = req.base_model.policy();
    let (remaining, blocked) = apply_deletion(req.train, &base_policy, req.removal)?;
    let mut model = req.base_model.clone();
    if req.untrain_passes == 0 {
        return Ok(Fit {
            model,
            history: Vec::new(),
            converged: false,
        });
    }
    let solver = match req.solver {
        UnlearnSolver::Cg { iters: 0 } => {
            return Err(Error::InvalidArgument("cg iterations must be >= 1".into()));
        }
        UnlearnSolver::Cg { iters } => Solver::Cg { iters },
        UnlearnSolver::Direct | UnlearnSolver::Downdate => Solver::Direct,
    };
    let mut opts = RunOptions {
        max_passes: req.untrain_passes,
        tolerance: req.tolerance,
        solver,
        parallel: req.parallel,
    };

    let mut history = Vec::new();
    if req.solver == UnlearnSolver::Downdate {
        let cache = DowndateCache::build(req.base_model, req.train, req.parallel)?;
        let before = als_loss(req.base_model, &remaining, &blocked);
        let (first, record) = untrain_pass_downdate(req, &cache)?;
        model = first;
        on_pass(&record, &model)?;
        let settled = req.tolerance > 0.0 && relative_change(before, record.loss) < req.tolerance;
        history.push(record);
        if settled {
            return Ok(Fit { model, history, converged: true });
        }
        opts.max_passes -= 1;
    }
    let offset = history.len();
    let (rest, converged) = run_passes(&mut model, &remaining, &blocked, opts, |r, m| {
        let r = PassRecord { pass: r.pass + offset, ..r.clone() };
        on_pass(&r, m)
    })?;
    history.extend(rest.into_iter().map(|r| PassRecord { pass: r.pass + offset, ..r }));
    Ok(Fit { model, history, converged })
}

/// Inverses of every row system of a trained model, against the factors it
/// was trained to: `(ŶᵀCᵘŶ + λI)⁻¹` per user and `(X̂ᵀCⁱX̂ + λI)⁻¹` per item.
#[derive(Debug, Clone)]
pub struct DowndateCache {
    users: Factors,
    items: Factors,
    user_inverses: Vec<DMatrix<f64>>,
    item_inverses: Vec<DMatrix<f64>>,
}

impl DowndateCache {
    pub fn build(model: &FactorModel, train: &InteractionMatrix, parallel: bool) -> Result<Self> {
        model.check_shape(train)?;
        let policy = model.policy();
        let problem = Problem::new(train, &policy, model.lambda);
        let invert_side = |side: Side, other: &Factors| -> Result<Vec<DMatrix<f64>>> {
            let base = problem.base_matrix(other);
            let one = |row: usize| {
                let entries = problem.entries(side, row);
                let (a, _) = problem.row_system(&base, other, &entries);
                linalg::spd_inverse(&a)
            };
            if parallel {
                (0..problem.rows(side)).into_par_iter().map(one).collect()
            } else {
                (0..problem.rows(side)).map(one).collect()
            }
        };
        let user_inverses = invert_side(Side::Users, &model.items)?;
        let item_inverses = invert_side(Side::Items, &model.users)?;
        Ok(DowndateCache {
            users: model.users.clone(),
            items: model.items.clone(),
            user_inverses,
            item_inverses,
        })
    }

    pub fn user_inverse(&self, user: usize) -> &DMatrix<f64> {
        &self.user_inverses[user]
    }

    pub fn item_inverse(&self, item: usize) -> &DMatrix<f64> {
        &self.item_inverses[item]
    }
}

/// A signed rank-one change `w·v vᵀ` to one row system.
#[derive(Debug, Clone)]
struct RankOne {
    w: f64,
    v: Vec<f64>,
}

#[derive(Debug, Default, Clone, Copy)]
struct RowOutcome {
    fallback: bool,
    refresh: bool,
}

/// Solves one row from a cached inverse corrected by `updates`, falling back
/// to a fresh direct solve when there are too many updates or one is singular.
fn solve_with_updates(
    inverse: &DMatrix<f64>,
    updates: &[RankOne],
    max_updates: usize,
    rhs: &DVector<f64>,
    direct: impl FnOnce() -> Result<DVector<f64>>,
) -> Result<(DVector<f64>, RowOutcome)> {
    if updates.is_empty() {
        return Ok((inverse * rhs, RowOutcome::default()));
    }
    if updates.len() > max_updates {
        return Ok((direct()?, RowOutcome { fallback: false, refresh: true }));
    }
    let mut inv = inverse.clone();
    for u in updates {
        match linalg::rank_one_inverse_update_in_place(&mut inv, &u.v, u.w) {
            Ok(()) => {}
            Err(Error::SingularDowndate { .. }) => {
                return Ok((direct()?, RowOutcome { fallback: true, refresh: false }));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((&inv * rhs, RowOutcome::default()))
}

fn rhs(entries: &[Entry], other: &Factors) -> DVector<f64> {
    let mut b = DVector::zeros(other.k());
    for e in entries {
        let s = e.conf * e.pref;
        if s != 0.0 {
            for (bd, yd) in b.iter_mut().zip(other.row(e.idx)) {
                *bd += s * yd;
            }
        }
    }
    b
}

/// One Untrain-ALS pass from the cached base inverses.
///
/// User rows use their cached inverse with one downdate per removed cell.
/// Item rows use their cached inverse corrected for every user row whose
/// factor changed (`+c_new x'x'ᵀ - c_old x̂x̂ᵀ`). Any row needing more than
/// `ceil(k/2)` corrections, or hitting a singular downdate, is re-solved
/// directly. The output matches a direct-solver pass up to rounding.
pub fn untrain_pass_downdate(req: &UnlearnRequest, cache: &DowndateCache) -> Result<(FactorModel, PassRecord)> {
    let base = req.base_model;
    base.check_shape(req.train)?;
    if cache.users != base.users || cache.items != base.items {
        return Err(Error::InvalidArgument("downdate cache was built for a different model".into()));
    }
    let start = Instant::now();
    let base_policy = base.policy();
    let (remaining, blocked) = apply_deletion(req.train, &base_policy, req.removal)?;
    let problem = Problem::new(&remaining, &blocked, base.lambda);
    let k = base.k();
    let max_updates = k.div_ceil(2);
    let mut model = base.clone();

    let mut removed_by_user = vec![Vec::new(); req.train.num_users()];
    let mut removed_by_item = vec![Vec::new(); req.train.num_items()];
    for &c in &req.removal.coords {
        removed_by_user[c.user].push(c.item);
        removed_by_item[c.item].push(c.user);
    }

    let map_rows = |rows: usize, f: &(dyn Fn(usize) -> Result<(DVector<f64>, RowOutcome)> + Sync)| {
        if req.parallel {
            (0..rows).into_par_iter().map(f).collect::<Result<Vec<_>>>()
        } else {
            (0..rows).map(f).collect::<Result<Vec<_>>>()
        }
    };

    // users against the unchanged item factors
    let user_base = problem.base_matrix(&base.items);
    let user_rows = map_rows(base.num_users(), &|u| {
        let entries = problem.entries(Side::Users, u);
        let b = rhs(&entries, &base.items);
        let updates: Vec<RankOne> = removed_by_user[u]
            .iter()
            .map(|&i| {
                let c = Coord::new(u, i);
                RankOne {
                    w: blocked.confidence_of(0.0, c) - base_policy.confidence_of(1.0, c),
                    v: base.items.row(i).to_vec(),
                }
            })
            .collect();
        solve_with_updates(cache.user_inverse(u), &updates, max_updates, &b, || {
            let (a, b) = problem.row_system(&user_base, &base.items, &entries);
            linalg::spd_solve(&a, &b)
        })
    })?;
    let user_half_s = start.elapsed().as_secs_f64();
    let mut outcomes: Vec<RowOutcome> = Vec::with_capacity(base.num_users() + base.num_items());
    for (u, (x, outcome)) in user_rows.into_iter().enumerate() {
        model.users.row_mut(u).copy_from_slice(x.as_slice());
        outcomes.push(outcome);
    }

    // items against the new user factors
    let changed: Vec<usize> = (0..base.num_users())
        .filter(|&u| model.users.row(u) != cache.users.row(u))
        .collect();
    let item_base = problem.base_matrix(&model.users);
    let new_users = &model.users;
    let item_rows = map_rows(base.num_items(), &|i| {
        let entries = problem.entries(Side::Items, i);
        let b = rhs(&entries, new_users);
        let direct = || {
            let (a, b) = problem.row_system(&item_base, new_users, &entries);
            linalg::spd_solve(&a, &b)
        };
        if 2 * changed.len() + removed_by_item[i].len() > max_updates {
            return Ok((direct()?, RowOutcome { fallback: false, refresh: true }));
        }
        let mut updates = Vec::new();
        let mut touched: Vec<usize> = changed.clone();
        touched.extend(removed_by_item[i].iter().copied());
        touched.sort_unstable();
        touched.dedup();
        for u in touched {
            let c = Coord::new(u, i);
            let c_old = base_policy.confidence_of(req.train.preference(c), c);
            let c_new = blocked.confidence_of(remaining.preference(c), c);
            // add before subtracting so intermediate systems stay positive definite
            if c_new != 0.0 {
                updates.push(RankOne { w: c_new, v: new_users.row(u).to_vec() });
            }
            if c_old != 0.0 {
                updates.push(RankOne { w: -c_old, v: cache.users.row(u).to_vec() });
            }
        }
        solve_with_updates(cache.item_inverse(i), &updates, max_updates, &b, direct)
    })?;
    for (i, (y, outcome)) in item_rows.into_iter().enumerate() {
        model.items.row_mut(i).copy_from_slice(y.as_slice());
        outcomes.push(outcome);
    }

    let wall_time_s = start.elapsed().as_secs_f64();
    model.passes_run += 1;
    let loss = als_loss(&model, &remaining, &blocked);
    if !loss.is_finite() || !model.is_finite() {
        return Err(Error::NonFinite(format!("loss after downdate pass is {loss}")));
    }
    let record = PassRecord {
        pass: 1,
        loss,
        objective: problem.objective(&model),
        wall_time_s,
        user_half_s,
        item_half_s: wall_time_s - user_half_s,
        fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
        refreshes: outcomes.iter().filter(|o| o.refresh).count(),
    };
    Ok((model, record))
}

/// The privacy baseline: fresh training on `D_obs \ D_removal`, the removed
/// cells read as ordinary missing data.
pub fn retrain_from_scratch(train: &InteractionMatrix, removal: &RemovalSet, hp: &Hyperparams, seed: u64) -> Result<Fit> {
    check_removal(train, removal)?;
    let remaining = if removal.is_empty() {
        train.clone()
    } else {
        train.without(&removal.coords)
    };
    als::train_als(&remaining, hp, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::ConfidenceScheme;

    fn small() -> InteractionMatrix {
        InteractionMatrix::new(2, 3, [Coord::new(0, 0), Coord::new(0, 1), Coord::new(1, 2)]).unwrap()
    }

    #[test]
    fn deletion_moves_and_blocks() {
        let train = InteractionMatrix::new(1, 2, [Coord::new(0, 0), Coord::new(0, 1)]).unwrap();
        let policy = ConfidencePolicy::new(ConfidenceScheme::default());
        let removal = RemovalSet::from_coords(vec![Coord::new(0, 1)], train.len());
        let (m, p) = apply_deletion(&train, &policy, &removal).unwrap();
        assert_eq!(m.coords().collect::<Vec<_>>(), vec![Coord::new(0, 0)]);
        assert_eq!(p.override_of(Coord::new(0, 1)), Some(0.0));
        assert_eq!(p.num_overrides(), 1);
    }

    #[test]
    fn empty_deletion_is_identity() {
        let train = small();
        let policy = ConfidencePolicy::default();
        let (m, p) = apply_deletion(&train, &policy, &RemovalSet::empty()).unwrap();
        assert_eq!(m, train);
        assert_eq!(p, policy);
    }

    #[test]
    fn deleting_unobserved_is_meaningless() {
        let train = small();
        let removal = RemovalSet::from_coords(vec![Coord::new(5, 5)], train.len());
        let err = apply_deletion(&train, &ConfidencePolicy::default(), &removal).unwrap_err();
        assert!(matches!(err, Error::MeaninglessDeletion(c) if c == Coord::new(5, 5)));
        assert!(err.to_string().starts_with("meaningless deletion"));
    }

    #[test]
    fn downdate_hand_example() {
        // A = 2I -> A⁻¹ = I/2; removing e1 with c = 1 leaves diag(1, 2)
        let inv = DMatrix::identity(2, 2) * 0.5;
        let out = sherman_morrison_downdate(&inv, &[1.0, 0.0], 1.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        assert!((out - expected).amax() < 1e-15);
    }

    #[test]
    fn downdate_with_zero_weight_is_identity() {
        let inv = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.4]);
        assert_eq!(sherman_morrison_downdate(&inv, &[3.0, -2.0], 0.0).unwrap(), inv);
    }

    #[test]
    fn downdate_to_singular_is_refused() {
        let inv = DMatrix::identity(2, 2);
        let err = sherman_morrison_downdate(&inv, &[1.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::SingularDowndate { .. }));
        assert!(sherman_morrison_downdate(&inv, &[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn zero_passes_returns_base() {
        let train = small();
        let hp = Hyperparams { k: 2, max_passes: 3, tolerance: 0.0, ..Default::default() };
        let base = als::train_als(&train, &hp, 1).unwrap().model;
        let removal = RemovalSet::empty();
        let fit = untrain_als(&UnlearnRequest::new(&base, &train, &removal, 0)).unwrap();
        assert_eq!(fit.model, base);
        assert!(fit.history.is_empty());
    }

    #[test]
    fn untrain_loss_special_cases() {
        let train = small();
        let model = FactorModel::random(2, 3, 2, 0.3, ConfidenceScheme::default(), 4);
        let policy = model.policy();
        assert_eq!(
            untrain_loss(&model, &train, &RemovalSet::empty(), &policy),
            als_loss(&model, &train, &policy)
        );
        let everything = RemovalSet::from_coords(train.coords().collect(), train.len());
        let reg = 0.3 * (model.users.squared_norm() + model.items.squared_norm());
        assert_eq!(untrain_loss(&model, &train, &everything, &policy), reg);
    }

    #[test]
    fn updates_against_direct_inverse() {
        let k = 3;
        let a = DMatrix::from_row_slice(k, k, &[6.0, 1.0, 0.3, 1.0, 5.0, -0.4, 0.3, -0.4, 4.0]);
        let inv = linalg::spd_inverse(&a).unwrap();
        let updates = vec![
            RankOne { w: -1.5, v: vec![0.5, 0.2, -0.1] },
            RankOne { w: 2.0, v: vec![0.1, -0.3, 0.6] },
        ];
        let mut perturbed = a.clone();
        for u in &updates {
            let v = DVector::from_column_slice(&u.v);
            perturbed += u.w * &v * v.transpose();
        }
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let expected = linalg::spd_solve(&perturbed, &b).unwrap();
        let (x, outcome) = solve_with_updates(&inv, &updates, 2, &b, || unreachable!()).unwrap();
        assert!((x - &expected).amax() < 1e-12);
        assert!(!outcome.fallback && !outcome.refresh);

        // more updates than allowed -> direct path
        let (_, outcome) = solve_with_updates(&inv, &updates, 1, &b, || Ok(expected.clone())).unwrap();
        assert!(outcome.refresh);

        // singular update -> direct path, counted as a fallback
        let singular = vec![RankOne { w: -1.0, v: vec![1.0, 0.0, 0.0] }];
        let eye = DMatrix::identity(k, k);
        let (_, outcome) = solve_with_updates(&eye, &singular, 2, &b, || Ok(expected.clone())).unwrap();
        assert!(outcome.fallback);
    }

    #[test]
    fn retrain_rejects_unobserved_removal() {
        let train = small();
        let removal = RemovalSet::from_coords(vec![Coord::new(1, 0)], train.len());
        let hp = Hyperparams { k: 1, max_passes: 1, ..Default::default() };
        assert!(matches!(
            retrain_from_scratch(&train, &removal, &hp, 0),
            Err(Error::MeaninglessDeletion(_))
        ));
    }
}
