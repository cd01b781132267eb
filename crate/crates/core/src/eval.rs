//! Held-out ranking quality: negative sampling, AUC, and AUC-vs-passes sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{self, als_loss, FactorModel, Hyperparams, PassRecord};
use crate::data::{sample_removal, Coord, DataSplit, InteractionMatrix, RemovalSet};
use crate::error::{Error, Result};
use crate::seeds::{self, derive_seed};
use crate::unlearn::{self, UnlearnRequest, UnlearnSolver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub positives: Vec<Coord>,
    pub negatives: Vec<Coord>,
    pub seed: u64,
}

/// Uniform sample without replacement of `count` cells outside
/// `observed ∪ exclude`.
pub fn sample_negatives(
    matrix: &InteractionMatrix,
    count: usize,
    exclude: &HashSet<Coord>,
    seed: u64,
) -> Result<Vec<Coord>> {
    let (m, n) = (matrix.num_users(), matrix.num_items());
    let cells = m * n;
    let blocked = exclude
        .iter()
        .filter(|c| c.user < m && c.item < n && !matrix.contains(**c))
        .count();
    let available = cells - matrix.len() - blocked;
    if count > available {
        return Err(Error::Infeasible {
            requested: count,
            available,
        });
    }
    let free = |c: Coord| !matrix.contains(c) && !exclude.contains(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count == 0 {
        return Ok(Vec::new());
    }
    // dense enough that rejection could stall: enumerate the free cells
    if available < 2 * count || available < cells / 2 {
        let pool: Vec<Coord> = (0..m)
            .flat_map(|u| (0..n).map(move |i| Coord::new(u, i)))
            .filter(|&c| free(c))
            .collect();
        return Ok(index::sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect());
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = Coord::new(rng.random_range(0..m), rng.random_range(0..n));
        if free(c) && seen.insert(c) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Balanced evaluation set: the held-out positives plus as many negatives
/// drawn from cells neither trained on nor held out.
pub fn build_eval_set(split: &DataSplit, seed: u64) -> Result<EvalSet> {
    let exclude: HashSet<Coord> = split.test_positives.iter().copied().collect();
    let negatives = sample_negatives(&split.train, split.test_positives.len(), &exclude, seed)?;
    Ok(EvalSet {
        positives: split.test_positives.clone(),
        negatives,
        seed,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from midranks in `O(N log N)`.
pub fn auc_score(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::InvalidArgument("auc needs non-empty positive and negative scores".into()));
    }
    if pos_scores.iter().chain(neg_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // twice the midrank keeps everything integral
    let mut pos_rank_sum2: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        let ranks2 = (start + 1 + end) as u128;
        let pos_in_group = all[start..end].iter().filter(|e| e.1).count() as u128;
        pos_rank_sum2 += ranks2 * pos_in_group;
        start = end;
    }
    let p = pos_scores.len() as u128;
    let q = neg_scores.len() as u128;
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

fn scores(model: &FactorModel, coords: &[Coord]) -> Result<Vec<f64>> {
    coords.iter().map(|c| als::predict(model, c.user, c.item)).collect()
}

pub fn evaluate_model(model: &FactorModel, eval: &EvalSet) -> Result<f64> {
    auc_score(&scores(model, &eval.positives)?, &scores(model, &eval.negatives)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Retrain,
    Untrain,
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::Retrain => "retrain",
            SweepMode::Untrain => "untrain",
        })
    }
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrain" => Ok(SweepMode::Retrain),
            "untrain" => Ok(SweepMode::Untrain),
            other => Err(Error::InvalidArgument(format!("unknown sweep mode {other:?}"))),
        }
    }
}

/// One checkpoint of a sweep. Columns match the curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: SweepMode,
    pub fraction: f64,
    pub passes: usize,
    pub seed: u64,
    pub auc: f64,
    pub loss: f64,
    /// Cumulative training (or untraining) time up to this checkpoint.
    pub wall_time_s: f64,
}

pub const CURVE_HEADER: &str = "mode,fraction,passes,seed,auc,loss,wall_time_s";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode, self.fraction, self.passes, self.seed, self.auc, self.loss, self.wall_time_s
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub fractions: Vec<f64>,
    /// Pass counts to checkpoint. In untrain mode 0 is the base model itself.
    pub pass_grid: Vec<usize>,
    /// Base-model hyperparameters; in retrain mode `max_passes` is ignored
    /// in favour of the grid.
    pub hp: Hyperparams,
    pub seeds: Vec<u64>,
    pub untrain_solver: UnlearnSolver,
    /// Runs independent cells on the rayon pool.
    pub parallel_cells: bool,
}

struct Checkpoints<'a> {
    grid: &'a [usize],
    eval: &'a EvalSet,
    remaining: &'a InteractionMatrix,
    mode: SweepMode,
    fraction: f64,
    seed: u64,
    elapsed: f64,
    out: Vec<CurvePoint>,
}

impl Checkpoints<'_> {
    fn record(&mut self, passes: usize, model: &FactorModel) -> Result<()> {
        if self.grid.contains(&passes) {
            self.out.push(CurvePoint {
                mode: self.mode,
                fraction: self.fraction,
                passes,
                seed: self.seed,
                auc: evaluate_model(model, self.eval)?,
                loss: als_loss(model, self.remaining, &model.policy()),
                wall_time_s: self.elapsed,
            });
        }
        Ok(())
    }

    fn on_pass(&mut self, r: &PassRecord, model: &FactorModel) -> Result<()> {
        self.elapsed += r.wall_time_s;
        self.record(r.pass, model)
    }
}

/// AUC and loss at each grid point for every (fraction, seed) cell, all on
/// the same evaluation set. The loss is taken on the cell's remaining data.
/// Results are sorted by (fraction, passes, seed) whatever the execution order.
pub fn convergence_sweep(split: &DataSplit, eval: &EvalSet, cfg: &SweepConfig) -> Result<Vec<CurvePoint>> {
    if cfg.pass_grid.is_empty() || cfg.fractions.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    if let Some(f) = cfg.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("removal fraction {f} outside [0, 1]")));
    }
    cfg.hp.validate()?;
    let max_passes = *cfg.pass_grid.iter().max().expect("non-empty");
    let train = &split.train;

    // untrain cells share one base model per seed
    let bases: BTreeMap<u64, FactorModel> = match cfg.mode {
        SweepMode::Retrain => BTreeMap::new(),
        SweepMode::Untrain => {
            let fit_one = |&seed: &u64| -> Result<(u64, FactorModel)> {
                let fit = als::train_als(train, &cfg.hp, derive_seed(seed, seeds::INIT))?;
                Ok((seed, fit.model))
            };
            if cfg.parallel_cells {
                cfg.seeds.par_iter().map(fit_one).collect::<Result<_>>()?
            } else {
                cfg.seeds.iter().map(fit_one).collect::<Result<_>>()?
            }
        }
    };

    let cells: Vec<(f64, u64)> = cfg
        .fractions
        .iter()
        .flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let run_cell = |&(fraction, seed): &(f64, u64)| -> Result<Vec<CurvePoint>> {
        let removal = sample_removal(train, fraction, derive_seed(seed, seeds::REMOVAL))?;
        let remaining = train.without(&removal.coords);
        let mut cp = Checkpoints {
            grid: &cfg.pass_grid,
            eval,
            remaining: &remaining,
            mode: cfg.mode,
            fraction,
            seed,
            elapsed: 0.0,
            out: Vec::new(),
        };
        match cfg.mode {
            SweepMode::Retrain => {
                let hp = Hyperparams {
                    max_passes: max_passes.max(1),
                    tolerance: 0.0,
                    ..cfg.hp.clone()
                };
                let init = derive_seed(seed, seeds::INIT);
                if cfg.pass_grid.contains(&0) {
                    let m = FactorModel::random(train.num_users(), train.num_items(), hp.k, hp.lambda, hp.scheme, init);
                    cp.record(0, &m)?;
                }
                if max_passes > 0 {
                    als::train_als_with(&remaining, &hp, init, |r, m| cp.on_pass(r, m))?;
                }
            }
            SweepMode::Untrain => {
                let base = &bases[&seed];
                cp.record(0, base)?;
                let req = UnlearnRequest {
                    base_model: base,
                    train,
                    removal: &removal,
                    untrain_passes: max_passes,
                    solver: cfg.untrain_solver,
                    tolerance: 0.0,
                    parallel: cfg.hp.parallel,
                };
                unlearn::untrain_als_with(&req, |r, m| cp.on_pass(r, m))?;
            }
        }
        Ok(cp.out)
    };
    let mut points: Vec<CurvePoint> = if cfg.parallel_cells {
        cells.par_iter().map(run_cell).collect::<Result<Vec<_>>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<Vec<_>>>()?
    }
    .into_iter()
    .flatten()
    .collect();
    points.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then(a.passes.cmp(&b.passes))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(points)
}

/// The removal a sweep cell uses, for callers that need to reproduce it.
pub fn cell_removal(train: &InteractionMatrix, fraction: f64, seed: u64) -> Result<RemovalSet> {
    sample_removal(train, fraction, derive_seed(seed, seeds::REMOVAL))
}
