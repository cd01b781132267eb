//! Confidence-weighted alternating least squares for implicit feedback.
//!
//! Every row subproblem is the weighted ridge regression
//! `min_x Σ_j c_j (p_j - xᵀy_j)² + λ‖x‖²` over *all* cells of the row. Unobserved
//! cells read `p = 0` with the scheme's missing-confidence, so the normal matrix
//! is assembled as `c_miss·YᵀY + λI` plus one correction per observed or
//! overridden cell; the sweep never touches the dense row.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Coord, InteractionMatrix};
use crate::error::{Error, Result};
use crate::linalg;

/// Standard deviation of the random factor initialization.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum ConfidenceScheme {
    /// `c = 1 + alpha·p`.
    Linear { alpha: f64 },
    /// `c = 1` for positives and `low` for everything else.
    Binary { low: f64 },
}

impl Default for ConfidenceScheme {
    fn default() -> Self {
        ConfidenceScheme::Linear { alpha: 40.0 }
    }
}

impl ConfidenceScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConfidenceScheme::Linear { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                Error::InvalidArgument(format!("linear confidence needs alpha > 0, got {alpha}")),
            ),
            ConfidenceScheme::Binary { low } if !(0.0..1.0).contains(&low) => Err(Error::InvalidArgument(
                format!("binary confidence needs low value in [0, 1), got {low}"),
            )),
            _ => Ok(()),
        }
    }

    /// Confidence of an observed positive.
    pub fn positive(&self) -> f64 {
        match *self {
            ConfidenceScheme::Linear { alpha } => 1.0 + alpha,
            ConfidenceScheme::Binary { .. } => 1.0,
        }
    }

    /// Confidence of an unobserved cell.
    pub fn missing(&self) -> f64 {
        match *self {
            ConfidenceScheme::Linear { .. } => 1.0,
            ConfidenceScheme::Binary { low } => low,
        }
    }

    pub fn of(&self, preference: f64) -> f64 {
        match *self {
            ConfidenceScheme::Linear { alpha } => 1.0 + alpha * preference,
            ConfidenceScheme::Binary { low } => {
                if preference == 1.0 {
                    1.0
                } else {
                    low
                }
            }
        }
    }
}

/// Confidence rule plus per-cell overrides; an override always wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfidencePolicy {
    pub scheme: ConfidenceScheme,
    overrides: BTreeMap<Coord, f64>,
}

impl ConfidencePolicy {
    pub fn new(scheme: ConfidenceScheme) -> Self {
        ConfidencePolicy {
            scheme,
            overrides: BTreeMap::new(),
        }
    }

    pub fn confidence_of(&self, preference: f64, coord: Coord) -> f64 {
        match self.overrides.get(&coord) {
            Some(&c) => c,
            None => self.scheme.of(preference),
        }
    }

    pub fn set_override(&mut self, coord: Coord, confidence: f64) -> Result<()> {
        if !(confidence >= 0.0 && confidence.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "confidence override must be finite and >= 0, got {confidence}"
            )));
        }
        self.overrides.insert(coord, confidence);
        Ok(())
    }

    /// Forces the confidence of `coord` to exactly zero.
    pub fn block(&mut self, coord: Coord) {
        self.overrides.insert(coord, 0.0);
    }

    pub fn override_of(&self, coord: Coord) -> Option<f64> {
        self.overrides.get(&coord).copied()
    }

    pub fn overrides(&self) -> impl Iterator<Item = (Coord, f64)> + '_ {
        self.overrides.iter().map(|(&c, &v)| (c, v))
    }

    pub fn num_overrides(&self) -> usize {
        self.overrides.len()
    }
}

/// Dense row-major factor matrix, one `k`-vector per user or item.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    rows: usize,
    k: usize,
    data: Vec<f64>,
}

impl Factors {
    pub fn zeros(rows: usize, k: usize) -> Self {
        Factors {
            rows,
            k,
            data: vec![0.0; rows * k],
        }
    }

    pub fn from_vec(rows: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * k {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{k} factor matrix",
                data.len()
            )));
        }
        Ok(Factors { rows, k, data })
    }

    fn random(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let data = (0..rows * k).map(|_| normal.sample(rng)).collect();
        Factors { rows, k, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `FᵀF`.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut g = DMatrix::zeros(k, k);
        for row in self.data.chunks_exact(k) {
            add_outer_upper(&mut g, row, 1.0);
        }
        fill_lower(&mut g);
        g
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Adds `w·y yᵀ` to the upper triangle of `a`.
#[inline]
pub(crate) fn add_outer_upper(a: &mut DMatrix<f64>, y: &[f64], w: f64) {
    let k = y.len();
    // column-major storage: column c is data[c*k..(c+1)*k]
    let data = a.as_mut_slice();
    for c in 0..k {
        let wc = w * y[c];
        if wc == 0.0 {
            continue;
        }
        let col = &mut data[c * k..(c + 1) * k];
        for r in 0..=c {
            col[r] += y[r] * wc;
        }
    }
}

pub(crate) fn fill_lower(a: &mut DMatrix<f64>) {
    let k = a.nrows();
    for c in 0..k {
        for r in c + 1..k {
            a[(r, c)] = a[(c, r)];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bilinear model `M ≈ X Yᵀ` with the hyperparameters it was fit under.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub users: Factors,
    pub items: Factors,
    pub lambda: f64,
    pub scheme: ConfidenceScheme,
    pub passes_run: usize,
    pub init_seed: u64,
}

impl FactorModel {
    /// Factors drawn i.i.d. from `N(0, 0.1²)`, users first, from a ChaCha8 stream.
    pub fn random(
        num_users: usize,
        num_items: usize,
        k: usize,
        lambda: f64,
        scheme: ConfidenceScheme,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = Factors::random(num_users, k, &mut rng);
        let items = Factors::random(num_items, k, &mut rng);
        FactorModel {
            users,
            items,
            lambda,
            scheme,
            passes_run: 0,
            init_seed: seed,
        }
    }

    pub fn k(&self) -> usize {
        self.users.k()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn policy(&self) -> ConfidencePolicy {
        ConfidencePolicy::new(self.scheme)
    }

    pub fn check_shape(&self, matrix: &InteractionMatrix) -> Result<()> {
        if self.num_users() != matrix.num_users() || self.num_items() != matrix.num_items() {
            return Err(Error::ShapeMismatch(format!(
                "model is {}x{}, matrix is {}x{}",
                self.num_users(),
                self.num_items(),
                matrix.num_users(),
                matrix.num_items()
            )));
        }
        Ok(())
    }

    /// Unchecked score `x_uᵀ y_i`.
    #[inline]
    pub fn score(&self, c: Coord) -> f64 {
        dot(self.users.row(c.user), self.items.row(c.item))
    }

    pub fn is_finite(&self) -> bool {
        self.users.as_slice().iter().chain(self.items.as_slice()).all(|v| v.is_finite())
    }
}

pub fn predict(model: &FactorModel, user: usize, item: usize) -> Result<f64> {
    if user >= model.num_users() {
        return Err(Error::OutOfRange {
            what: "user",
            index: user,
            bound: model.num_users(),
        });
    }
    if item >= model.num_items() {
        return Err(Error::OutOfRange {
            what: "item",
            index: item,
            bound: model.num_items(),
        });
    }
    Ok(model.score(Coord::new(user, item)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    /// Cholesky solve of each row system.
    Direct,
    /// Conjugate gradient warm-started from the current row.
    Cg { iters: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub k: usize,
    pub lambda: f64,
    pub scheme: ConfidenceScheme,
    pub max_passes: usize,
    /// Stop once the relative loss change between passes drops below this; 0 disables.
    pub tolerance: f64,
    pub solver: Solver,
    /// Row solves within a half-sweep run on the rayon pool when set.
    pub parallel: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            k: 32,
            lambda: 0.1,
            scheme: ConfidenceScheme::Linear { alpha: 40.0 },
            max_passes: 25,
            tolerance: 1e-4,
            solver: Solver::Direct,
            parallel: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("rank k must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_passes == 0 {
            return Err(Error::InvalidArgument("max_passes must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        if let Solver::Cg { iters: 0 } = self.solver {
            return Err(Error::InvalidArgument("cg iterations must be >= 1".into()));
        }
        self.scheme.validate()
    }
}

/// One cell of a row subproblem: the opposite index, its confidence and preference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Entry {
    pub idx: usize,
    pub conf: f64,
    pub pref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    Users,
    Items,
}

/// Row-indexed view of a matrix and confidence policy, shared by both halves
/// of a sweep and by the loss evaluators.
pub(crate) struct Problem<'a> {
    pub matrix: &'a InteractionMatrix,
    pub scheme: ConfidenceScheme,
    pub lambda: f64,
    user_overrides: Vec<Vec<(usize, f64)>>,
    item_overrides: Vec<Vec<(usize, f64)>>,
}

impl<'a> Problem<'a> {
    pub fn new(matrix: &'a InteractionMatrix, policy: &ConfidencePolicy, lambda: f64) -> Self {
        let mut user_overrides = vec![Vec::new(); matrix.num_users()];
        let mut item_overrides = vec![Vec::new(); matrix.num_items()];
        for (c, v) in policy.overrides() {
            if c.user < matrix.num_users() && c.item < matrix.num_items() {
                user_overrides[c.user].push((c.item, v));
                item_overrides[c.item].push((c.user, v));
            }
        }
        // BTreeMap order is user-major, so user lists are sorted already
        for list in &mut item_overrides {
            list.sort_unstable_by_key(|e| e.0);
        }
        Problem {
            matrix,
            scheme: policy.scheme,
            lambda,
            user_overrides,
            item_overrides,
        }
    }

    pub fn rows(&self, side: Side) -> usize {
        match side {
            Side::Users => self.matrix.num_users(),
            Side::Items => self.matrix.num_items(),
        }
    }

    /// Cells of `row` whose confidence or preference differs from an
    /// unobserved default cell, in ascending opposite index.
    pub fn entries(&self, side: Side, row: usize) -> Vec<Entry> {
        let (observed, overrides) = match side {
            Side::Users => (self.matrix.user_items(row), &self.user_overrides[row]),
            Side::Items => (self.matrix.item_users(row), &self.item_overrides[row]),
        };
        let positive = self.scheme.positive();
        let mut out = Vec::with_capacity(observed.len() + overrides.len());
        let (mut a, mut b) = (0, 0);
        while a < observed.len() || b < overrides.len() {
            let next_obs = observed.get(a).copied();
            let next_ov = overrides.get(b).copied();
            match (next_obs, next_ov) {
                (Some(j), Some((o, c))) if j == o => {
                    out.push(Entry { idx: j, conf: c, pref: 1.0 });
                    a += 1;
                    b += 1;
                }
                (Some(j), Some((o, _))) if j < o => {
                    out.push(Entry { idx: j, conf: positive, pref: 1.0 });
                    a += 1;
                }
                (Some(j), None) => {
                    out.push(Entry { idx: j, conf: positive, pref: 1.0 });
                    a += 1;
                }
                (_, Some((o, c))) => {
                    out.push(Entry { idx: o, conf: c, pref: 0.0 });
                    b += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        out
    }

    /// `c_miss·OᵀO + λI` for the opposite factors `other`.
    pub fn base_matrix(&self, other: &Factors) -> DMatrix<f64> {
        let mut base = other.gram() * self.scheme.missing();
        for d in 0..other.k() {
            base[(d, d)] += self.lambda;
        }
        base
    }

    /// Normal equations `(A, b)` of one row given its entries.
    pub fn row_system(&self, base: &DMatrix<f64>, other: &Factors, entries: &[Entry]) -> (DMatrix<f64>, DVector<f64>) {
        let k = other.k();
        let missing = self.scheme.missing();
        let mut a = base.clone();
        let mut b = DVector::zeros(k);
        for e in entries {
            let y = other.row(e.idx);
            let w = e.conf - missing;
            if w != 0.0 {
                add_outer_upper(&mut a, y, w);
            }
            let s = e.conf * e.pref;
            if s != 0.0 {
                for (bd, yd) in b.iter_mut().zip(y) {
                    *bd += s * yd;
                }
            }
        }
        // `base` is symmetric, only the upper triangle received corrections
        fill_lower(&mut a);
        (a, b)
    }

    /// Re-solves every row of `target` against the frozen `other`.
    pub fn half_sweep(&self, side: Side, target: &mut Factors, other: &Factors, solver: Solver, parallel: bool) -> Result<()> {
        let base = self.base_matrix(other);
        let k = target.k();
        let solve = |row: usize, x: &mut [f64]| -> Result<()> {
            let entries = self.entries(side, row);
            let (a, b) = self.row_system(&base, other, &entries);
            let sol = match solver {
                Solver::Direct => linalg::spd_solve(&a, &b)?,
                Solver::Cg { iters } => {
                    linalg::conjugate_gradient(&a, &b, DVector::from_column_slice(x), iters)?.x
                }
            };
            x.copy_from_slice(sol.as_slice());
            Ok(())
        };
        if parallel {
            target
                .data
                .par_chunks_mut(k)
                .enumerate()
                .try_for_each(|(row, x)| solve(row, x))
        } else {
            target
                .data
                .chunks_mut(k)
                .enumerate()
                .try_for_each(|(row, x)| solve(row, x))
        }
    }

    /// One full pass: all user rows, then all item rows. Returns the wall
    /// time of each half.
    pub fn pass(&self, model: &mut FactorModel, solver: Solver, parallel: bool) -> Result<(f64, f64)> {
        let start = Instant::now();
        self.half_sweep(Side::Users, &mut model.users, &model.items, solver, parallel)?;
        let users = start.elapsed().as_secs_f64();
        self.half_sweep(Side::Items, &mut model.items, &model.users, solver, parallel)?;
        Ok((users, start.elapsed().as_secs_f64() - users))
    }

    /// Full weighted objective over every cell of the matrix, the quantity
    /// each half-sweep minimizes exactly under the direct solver.
    pub fn objective(&self, model: &FactorModel) -> f64 {
        let missing = self.scheme.missing();
        let gram = model.items.gram();
        let mut total = 0.0;
        for u in 0..model.num_users() {
            let x = model.users.row(u);
            if missing != 0.0 {
                let xv = DVector::from_column_slice(x);
                total += missing * (xv.transpose() * &gram * &xv)[(0, 0)];
            }
            for e in self.entries(Side::Users, u) {
                let s = dot(x, model.items.row(e.idx));
                total += e.conf * (e.pref - s).powi(2) - missing * s * s;
            }
        }
        total + self.lambda * (model.users.squared_norm() + model.items.squared_norm())
    }
}

/// Weighted ridge subproblem from a dense row: `(OᵀCO + λI)⁻¹ OᵀCp`.
fn dense_row_system(other: &Factors, conf_row: &[f64], pref_row: &[f64], lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if conf_row.len() != other.rows() || pref_row.len() != other.rows() {
        return Err(Error::ShapeMismatch(format!(
            "row vectors of length {}/{} against {} factor rows",
            conf_row.len(),
            pref_row.len(),
            other.rows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let k = other.k();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (j, (&c, &p)) in conf_row.iter().zip(pref_row).enumerate() {
        let y = other.row(j);
        add_outer_upper(&mut a, y, c);
        for (bd, yd) in b.iter_mut().zip(y) {
            *bd += c * p * yd;
        }
    }
    fill_lower(&mut a);
    for d in 0..k {
        a[(d, d)] += lambda;
    }
    Ok((a, b))
}

/// Exact minimizer of `Σ_j c_j (p_j - xᵀy_j)² + λ‖x‖²`.
pub fn solve_row_direct(other: &Factors, conf_row: &[f64], pref_row: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (a, b) = dense_row_system(other, conf_row, pref_row, lambda)?;
    Ok(linalg::spd_solve(&a, &b)?.as_slice().to_vec())
}

/// Conjugate-gradient approximation of [`solve_row_direct`], started at zero.
pub fn solve_row_cg(other: &Factors, conf_row: &[f64], pref_row: &[f64], lambda: f64, cg_iters: usize) -> Result<Vec<f64>> {
    if cg_iters == 0 {
        return Err(Error::InvalidArgument("cg iterations must be >= 1".into()));
    }
    let (a, b) = dense_row_system(other, conf_row, pref_row, lambda)?;
    let k = other.k();
    Ok(linalg::conjugate_gradient(&a, &b, DVector::zeros(k), cg_iters)?
        .x
        .as_slice()
        .to_vec())
}

/// Regularized loss summed over the observed coordinates only:
/// `Σ_{D_obs} c_ui (p_ui - x_uᵀy_i)² + λ(Σ‖x_u‖² + Σ‖y_i‖²)`.
pub fn als_loss(model: &FactorModel, matrix: &InteractionMatrix, policy: &ConfidencePolicy) -> f64 {
    let mut total = 0.0;
    for c in matrix.coords() {
        let r = 1.0 - model.score(c);
        total += policy.confidence_of(1.0, c) * r * r;
    }
    total + model.lambda * (model.users.squared_norm() + model.items.squared_norm())
}

/// Objective over every cell (observed or not) that the sweeps minimize.
pub fn training_objective(model: &FactorModel, matrix: &InteractionMatrix, policy: &ConfidencePolicy) -> f64 {
    Problem::new(matrix, policy, model.lambda).objective(model)
}

/// Per-pass record of a training or untraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    /// Observed-coordinate loss after the pass.
    pub loss: f64,
    /// Full weighted objective after the pass.
    pub objective: f64,
    pub wall_time_s: f64,
    pub user_half_s: f64,
    pub item_half_s: f64,
    /// Rows whose rank-one fast path hit a singular update and were re-solved.
    pub fallbacks: usize,
    /// Rows re-solved directly because their update count made the fast path pointless.
    pub refreshes: usize,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: FactorModel,
    pub history: Vec<PassRecord>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub max_passes: usize,
    pub tolerance: f64,
    pub solver: Solver,
    pub parallel: bool,
}

/// Relative change `|prev - cur| / |prev|`, zero when both vanish.
pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    if prev == cur {
        0.0
    } else {
        (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE)
    }
}

/// Runs up to `opts.max_passes` passes on `model` in place, calling
/// `on_pass` after each one. Returns the records and whether the tolerance
/// test stopped the run.
pub fn run_passes<F>(
    model: &mut FactorModel,
    matrix: &InteractionMatrix,
    policy: &ConfidencePolicy,
    opts: RunOptions,
    mut on_pass: F,
) -> Result<(Vec<PassRecord>, bool)>
where
    F: FnMut(&PassRecord, &FactorModel) -> Result<()>,
{
    model.check_shape(matrix)?;
    let problem = Problem::new(matrix, policy, model.lambda);
    let mut history = Vec::with_capacity(opts.max_passes);
    let mut prev = als_loss(model, matrix, policy);
    for pass in 1..=opts.max_passes {
        let start = Instant::now();
        let (user_half_s, item_half_s) = problem.pass(model, opts.solver, opts.parallel)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        model.passes_run += 1;
        let loss = als_loss(model, matrix, policy);
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!("loss after pass {pass} is {loss}")));
        }
        let record = PassRecord {
            pass,
            loss,
            objective: problem.objective(model),
            wall_time_s,
            user_half_s,
            item_half_s,
            fallbacks: 0,
            refreshes: 0,
        };
        log::debug!("pass {pass}: loss {loss:.6e} ({wall_time_s:.3}s)");
        on_pass(&record, model)?;
        history.push(record);
        if opts.tolerance > 0.0 && relative_change(prev, loss) < opts.tolerance {
            return Ok((history, true));
        }
        prev = loss;
    }
    Ok((history, false))
}

/// Trains from a seeded random initialization until the relative loss change
/// falls below `hp.tolerance` or `hp.max_passes` passes have run.
pub fn train_als(train: &InteractionMatrix, hp: &Hyperparams, seed: u64) -> Result<Fit> {
    train_als_with(train, hp, seed, |_, _| Ok(()))
}

pub fn train_als_with<F>(train: &InteractionMatrix, hp: &Hyperparams, seed: u64, on_pass: F) -> Result<Fit>
where
    F: FnMut(&PassRecord, &FactorModel) -> Result<()>,
{
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut model = FactorModel::random(train.num_users(), train.num_items(), hp.k, hp.lambda, hp.scheme, seed);
    let policy = ConfidencePolicy::new(hp.scheme);
    let opts = RunOptions {
        max_passes: hp.max_passes,
        tolerance: hp.tolerance,
        solver: hp.solver,
        parallel: hp.parallel,
    };
    let (history, converged) = run_passes(&mut model, train, &policy, opts, on_pass)?;
    Ok(Fit {
        model,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factors(rows: &[&[f64]]) -> Factors {
        let k = rows[0].len();
        Factors::from_vec(rows.len(), k, rows.concat()).unwrap()
    }

    #[test]
    fn confidence_rules() {
        let policy = ConfidencePolicy::new(ConfidenceScheme::Linear { alpha: 40.0 });
        assert_eq!(policy.confidence_of(1.0, Coord::new(0, 0)), 41.0);
        assert_eq!(policy.confidence_of(0.0, Coord::new(0, 0)), 1.0);
        let mut blocked = policy.clone();
        blocked.block(Coord::new(2, 3));
        assert_eq!(blocked.confidence_of(1.0, Coord::new(2, 3)), 0.0);
        assert_eq!(blocked.confidence_of(0.0, Coord::new(2, 3)), 0.0);

        let binary = ConfidencePolicy::new(ConfidenceScheme::Binary { low: 0.01 });
        assert_eq!(binary.confidence_of(1.0, Coord::new(0, 0)), 1.0);
        assert_eq!(binary.confidence_of(0.0, Coord::new(0, 0)), 0.01);
    }

    #[test]
    fn scheme_and_override_validation() {
        assert!(ConfidenceScheme::Linear { alpha: 0.0 }.validate().is_err());
        assert!(ConfidenceScheme::Binary { low: 1.0 }.validate().is_err());
        assert!(ConfidenceScheme::Binary { low: 0.0 }.validate().is_ok());
        let mut p = ConfidencePolicy::default();
        assert!(p.set_override(Coord::new(0, 0), -1.0).is_err());
        assert!(p.set_override(Coord::new(0, 0), f64::NAN).is_err());
        p.set_override(Coord::new(0, 0), 3.5).unwrap();
        assert_eq!(p.confidence_of(0.0, Coord::new(0, 0)), 3.5);
    }

    #[test]
    fn direct_solve_hand_example() {
        // k = 1, y = [1, 2], c = [1, 1], p = [1, 1], λ = 0 -> x = 3 / 5
        let y = factors(&[&[1.0], &[2.0]]);
        let x = solve_row_direct(&y, &[1.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((x[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn direct_solve_without_data_is_zero() {
        let y = factors(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let x = solve_row_direct(&y, &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn direct_solve_singular_without_ridge() {
        let y = factors(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let err = solve_row_direct(&y, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularSubproblem));
        assert_eq!(err.to_string(), "singular subproblem");
    }

    #[test]
    fn cg_on_identity_system_returns_rhs() {
        // OᵀCO + λI = I with O = I (2x2), c = 0.5, λ = 0.5
        let y = factors(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = solve_row_cg(&y, &[0.5, 0.5], &[2.0, -4.0], 0.5, 1).unwrap();
        // rhs = OᵀCp = (1, -2)
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 2.0).abs() < 1e-15);
        assert!(solve_row_cg(&y, &[0.5, 0.5], &[2.0, -4.0], 0.5, 0).is_err());
    }

    #[test]
    fn predict_cases() {
        let model = FactorModel {
            users: factors(&[&[1.0, 2.0], &[0.0, 0.0]]),
            items: factors(&[&[3.0, -1.0], &[1.0, 0.0]]),
            lambda: 0.1,
            scheme: ConfidenceScheme::default(),
            passes_run: 0,
            init_seed: 0,
        };
        assert_eq!(predict(&model, 0, 0).unwrap(), 1.0);
        assert_eq!(predict(&model, 1, 0).unwrap(), 0.0);
        assert_eq!(predict(&model, 1, 1).unwrap(), 0.0);
        assert!(matches!(predict(&model, 2, 0), Err(Error::OutOfRange { what: "user", .. })));
        assert!(matches!(predict(&model, 0, 5), Err(Error::OutOfRange { what: "item", .. })));

        let unit = FactorModel {
            users: factors(&[&[1.0, 0.0, 0.0]]),
            items: factors(&[&[1.0, 0.0, 0.0]]),
            ..model
        };
        assert_eq!(predict(&unit, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn loss_of_zero_factors() {
        let m = InteractionMatrix::new(3, 3, [Coord::new(0, 0), Coord::new(1, 2), Coord::new(2, 1)]).unwrap();
        let model = FactorModel {
            users: Factors::zeros(3, 2),
            items: Factors::zeros(3, 2),
            lambda: 7.0,
            scheme: ConfidenceScheme::Linear { alpha: 40.0 },
            passes_run: 0,
            init_seed: 0,
        };
        assert_eq!(als_loss(&model, &m, &model.policy()), 3.0 * 41.0);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = [
            Hyperparams { max_passes: 0, ..Default::default() },
            Hyperparams { k: 0, ..Default::default() },
            Hyperparams { lambda: -1.0, ..Default::default() },
            Hyperparams { tolerance: -1.0, ..Default::default() },
            Hyperparams { solver: Solver::Cg { iters: 0 }, ..Default::default() },
        ];
        for hp in bad {
            assert!(matches!(hp.validate(), Err(Error::InvalidArgument(_))), "{hp:?}");
        }
    }

    #[test]
    fn one_pass_runs_exactly_one_sweep() {
        let m = InteractionMatrix::new(4, 3, [Coord::new(0, 0), Coord::new(1, 1), Coord::new(3, 2)]).unwrap();
        let hp = Hyperparams { k: 2, max_passes: 1, tolerance: 0.0, ..Default::default() };
        let fit = train_als(&m, &hp, 5).unwrap();
        assert_eq!(fit.model.passes_run, 1);
        assert_eq!(fit.history.len(), 1);
        assert!(train_als(&m, &Hyperparams { max_passes: 0, ..hp }, 5).is_err());
    }

    #[test]
    fn entries_merge_observed_and_overrides() {
        let m = InteractionMatrix::new(2, 4, [Coord::new(0, 1), Coord::new(0, 3)]).unwrap();
        let mut policy = ConfidencePolicy::new(ConfidenceScheme::Linear { alpha: 2.0 });
        policy.block(Coord::new(0, 0));
        policy.set_override(Coord::new(0, 3), 0.5).unwrap();
        let problem = Problem::new(&m, &policy, 0.1);
        let e = problem.entries(Side::Users, 0);
        assert_eq!(
            e,
            vec![
                Entry { idx: 0, conf: 0.0, pref: 0.0 },
                Entry { idx: 1, conf: 3.0, pref: 1.0 },
                Entry { idx: 3, conf: 0.5, pref: 1.0 },
            ]
        );
        let e = problem.entries(Side::Items, 3);
        assert_eq!(e, vec![Entry { idx: 0, conf: 0.5, pref: 1.0 }]);
    }
}
