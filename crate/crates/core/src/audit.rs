//! Membership-inference auditing of unlearned models.
//!
//! The attacker sees one score per coordinate. Members are training
//! coordinates that were kept; the other class is the removed coordinates.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::als::{self, FactorModel, Hyperparams};
use crate::data::{Coord, DataSplit, RemovalSet};
use crate::error::{Error, Result};
use crate::eval::auc_score;
use crate::seeds::{self, derive_seed};
use crate::unlearn::{self, UnlearnRequest, UnlearnSolver};

/// Scores of both classes plus the attack-train / attack-eval partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiDataset {
    /// Scores of the sampled kept training coordinates.
    pub member_scores: Vec<f64>,
    /// Scores of the removed coordinates.
    pub removed_scores: Vec<f64>,
    pub split_seed: u64,
    /// Indices into `member_scores` used to fit the attacker; the rest evaluate it.
    pub member_fit: Vec<usize>,
    pub removed_fit: Vec<usize>,
}

impl MiDataset {
    fn pick(scores: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| scores[i]).collect()
    }

    fn complement(len: usize, idx: &[usize]) -> Vec<usize> {
        let mut mask = vec![true; len];
        for &i in idx {
            mask[i] = false;
        }
        (0..len).filter(|&i| mask[i]).collect()
    }

    /// `(members, removed)` of the attack-train partition.
    pub fn fit_partition(&self) -> (Vec<f64>, Vec<f64>) {
        (
            Self::pick(&self.member_scores, &self.member_fit),
            Self::pick(&self.removed_scores, &self.removed_fit),
        )
    }

    /// `(members, removed)` of the attack-eval partition.
    pub fn eval_partition(&self) -> (Vec<f64>, Vec<f64>) {
        let m = Self::complement(self.member_scores.len(), &self.member_fit);
        let r = Self::complement(self.removed_scores.len(), &self.removed_fit);
        (Self::pick(&self.member_scores, &m), Self::pick(&self.removed_scores, &r))
    }
}

/// Half of each class (rounded down) goes to the attack-train partition.
fn half_split(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = index::sample(rng, len, len / 2).into_vec();
    idx.sort_unstable();
    idx
}

/// Scores every removed coordinate and an equally sized uniform sample of
/// `remain_pool`, then splits each class in half. Everything random is drawn
/// from `split_seed`, so models audited with the same inputs see the same
/// coordinates in the same partitions.
pub fn build_mi_dataset(
    model: &FactorModel,
    removal: &RemovalSet,
    remain_pool: &[Coord],
    split_seed: u64,
) -> Result<MiDataset> {
    if removal.is_empty() {
        return Err(Error::NoAuditTarget);
    }
    if remain_pool.len() < removal.len() {
        return Err(Error::Infeasible {
            requested: removal.len(),
            available: remain_pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut members = index::sample(&mut rng, remain_pool.len(), removal.len()).into_vec();
    members.sort_unstable();
    let score = |c: &Coord| als::predict(model, c.user, c.item);
    let member_scores = members.iter().map(|&i| score(&remain_pool[i])).collect::<Result<Vec<_>>>()?;
    let removed_scores = removal.coords.iter().map(score).collect::<Result<Vec<_>>>()?;
    let member_fit = half_split(member_scores.len(), &mut rng);
    let removed_fit = half_split(removed_scores.len(), &mut rng);
    Ok(MiDataset {
        member_scores,
        removed_scores,
        split_seed,
        member_fit,
        removed_fit,
    })
}

/// Single-feature attacker: predicts "member" when `direction * score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAttacker {
    /// +1 when members score higher on the fit partition, -1 otherwise.
    pub direction: f64,
    pub threshold: f64,
}

impl ThresholdAttacker {
    /// Picks the direction from the fit partition's AUC and the threshold
    /// maximizing balanced accuracy there. Empty partitions give the
    /// uninformed attacker (direction +1, threshold 0).
    pub fn fit(members: &[f64], removed: &[f64]) -> Result<Self> {
        if members.is_empty() || removed.is_empty() {
            return Ok(ThresholdAttacker { direction: 1.0, threshold: 0.0 });
        }
        let direction = if auc_score(members, removed)? >= 0.5 { 1.0 } else { -1.0 };
        let mut all: Vec<(f64, bool)> = members
            .iter()
            .map(|&s| (direction * s, true))
            .chain(removed.iter().map(|&s| (direction * s, false)))
            .collect();
        all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let (pm, pr) = (members.len() as f64, removed.len() as f64);
        // threshold below everything: all predicted members
        let mut best = (0.5, all[0].0 - 1.0);
        let (mut members_below, mut removed_below) = (0.0, 0.0);
        for (j, &(s, is_member)) in all.iter().enumerate() {
            if is_member {
                members_below += 1.0;
            } else {
                removed_below += 1.0;
            }
            if j + 1 < all.len() && all[j + 1].0 == s {
                continue;
            }
            let acc = 0.5 * ((pm - members_below) / pm + removed_below / pr);
            if acc > best.0 {
                best = (acc, s);
            }
        }
        Ok(ThresholdAttacker { direction, threshold: best.1 })
    }

    pub fn predicts_member(&self, score: f64) -> bool {
        self.direction * score > self.threshold
    }
}

/// Attack AUC on the eval partition, oriented to lie in `[0.5, 1]`.
///
/// A threshold attacker on one score is a monotone function of it, so its
/// eval AUC is the AUC of the score itself in the fitted direction; the
/// orientation makes a sign-flipped attacker count as equally informative.
pub fn mi_accuracy(ds: &MiDataset) -> Result<f64> {
    let (fm, fr) = ds.fit_partition();
    let attacker = ThresholdAttacker::fit(&fm, &fr)?;
    let (em, er) = ds.eval_partition();
    let orient = |v: Vec<f64>| v.into_iter().map(|s| attacker.direction * s).collect::<Vec<_>>();
    let a = auc_score(&orient(em), &orient(er))?;
    Ok(a.max(1.0 - a))
}

pub fn vulnerability_naive(mi_untrain: f64, mi_retrain: f64) -> f64 {
    mi_untrain - mi_retrain
}

/// All three accuracies must come from the same data split and MI split seed.
pub fn vulnerability_denoised(mi_untrain: f64, mi_retrain: f64, mi_undeleted: f64) -> f64 {
    mi_untrain - mi_retrain - mi_undeleted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRecord {
    pub fraction: f64,
    pub train_passes: usize,
    pub untrain_passes: usize,
    pub seed: u64,
    pub mi_untrain: f64,
    pub mi_retrain: f64,
    pub mi_undeleted: f64,
    pub iv: f64,
    pub iv_prime: f64,
}

pub const VULNERABILITY_HEADER: &str =
    "fraction,train_passes,untrain_passes,seed,mi_untrain,mi_retrain,mi_undeleted,iv,iv_prime";

impl VulnerabilityRecord {
    pub fn new(key: AuditCell, mi_untrain: f64, mi_retrain: f64, mi_undeleted: f64) -> Self {
        VulnerabilityRecord {
            fraction: key.fraction,
            train_passes: key.train_passes,
            untrain_passes: key.untrain_passes,
            seed: key.seed,
            mi_untrain,
            mi_retrain,
            mi_undeleted,
            iv: vulnerability_naive(mi_untrain, mi_retrain),
            iv_prime: vulnerability_denoised(mi_untrain, mi_retrain, mi_undeleted),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.fraction,
            self.train_passes,
            self.untrain_passes,
            self.seed,
            self.mi_untrain,
            self.mi_retrain,
            self.mi_undeleted,
            self.iv,
            self.iv_prime
        )
    }
}

/// Coordinates of one audit cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditCell {
    pub fraction: f64,
    pub train_passes: usize,
    pub untrain_passes: usize,
    pub seed: u64,
}

impl AuditCell {
    /// Stable text key, used to resume interrupted sweeps.
    pub fn key(&self) -> String {
        format!(
            "f={}:tp={}:up={}:s={}",
            self.fraction, self.train_passes, self.untrain_passes, self.seed
        )
    }
}

/// Enumerates the grid in (fraction, train passes, untrain passes, seed) order.
pub fn audit_cells(fractions: &[f64], train_passes: &[usize], untrain_passes: &[usize], seeds: &[u64]) -> Vec<AuditCell> {
    let mut out = Vec::new();
    for &fraction in fractions {
        for &tp in train_passes {
            for &up in untrain_passes {
                for &seed in seeds {
                    out.push(AuditCell {
                        fraction,
                        train_passes: tp,
                        untrain_passes: up,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// The three models of one cell and their MI accuracies.
#[derive(Debug, Clone)]
pub struct CellModels {
    pub undeleted: FactorModel,
    pub retrain: FactorModel,
    pub untrain: FactorModel,
    pub removal: RemovalSet,
}

/// Builds M_undeleted, M_retrain and M_untrain for one cell. The two trained
/// models share the init seed; all three are audited with one MI split.
pub fn audit_cell_models(split: &DataSplit, cell: AuditCell, hp: &Hyperparams, solver: UnlearnSolver) -> Result<CellModels> {
    let train = &split.train;
    let hp = Hyperparams {
        max_passes: cell.train_passes,
        tolerance: 0.0,
        ..hp.clone()
    };
    let init = derive_seed(cell.seed, seeds::INIT);
    let removal = crate::data::sample_removal(train, cell.fraction, derive_seed(cell.seed, seeds::REMOVAL))?;
    if removal.is_empty() {
        return Err(Error::NoAuditTarget);
    }
    let undeleted = als::train_als(train, &hp, init)?.model;
    let retrain = unlearn::retrain_from_scratch(train, &removal, &hp, init)?.model;
    let req = UnlearnRequest {
        base_model: &undeleted,
        train,
        removal: &removal,
        untrain_passes: cell.untrain_passes,
        solver,
        tolerance: 0.0,
        parallel: hp.parallel,
    };
    let untrain = unlearn::untrain_als(&req)?.model;
    Ok(CellModels {
        undeleted,
        retrain,
        untrain,
        removal,
    })
}

pub fn audit_cell(split: &DataSplit, cell: AuditCell, hp: &Hyperparams, solver: UnlearnSolver) -> Result<VulnerabilityRecord> {
    let models = audit_cell_models(split, cell, hp, solver)?;
    let pool: Vec<Coord> = split.train.without(&models.removal.coords).coords().collect();
    let split_seed = derive_seed(cell.seed, seeds::MI_SPLIT);
    let mi = |m: &FactorModel| mi_accuracy(&build_mi_dataset(m, &models.removal, &pool, split_seed)?);
    Ok(VulnerabilityRecord::new(
        cell,
        mi(&models.untrain)?,
        mi(&models.retrain)?,
        mi(&models.undeleted)?,
    ))
}

/// Runs every cell, reporting each outcome through `on_cell` as it finishes.
/// A failing cell does not stop the sweep; its error is returned in place.
pub fn audit_sweep<F>(
    split: &DataSplit,
    cells: &[AuditCell],
    hp: &Hyperparams,
    solver: UnlearnSolver,
    parallel_cells: bool,
    on_cell: F,
) -> Vec<(AuditCell, Result<VulnerabilityRecord>)>
where
    F: Fn(&AuditCell, &Result<VulnerabilityRecord>) + Sync,
{
    use rayon::prelude::*;
    let run = |&cell: &AuditCell| {
        let out = audit_cell(split, cell, hp, solver);
        on_cell(&cell, &out);
        (cell, out)
    };
    if parallel_cells {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    }
}
