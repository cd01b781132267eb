//! Rating ingestion, implicit-feedback binarization, and seeded sampling of
//! holdout splits, removal sets and synthetic low-rank instances.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (user, item) cell of the preference matrix, in dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub user: usize,
    pub item: usize,
}

impl Coord {
    pub fn new(user: usize, item: usize) -> Self {
        Coord { user, item }
    }
}

impl From<(usize, usize)> for Coord {
    fn from((user, item): (usize, usize)) -> Self {
        Coord { user, item }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    /// Seconds since the epoch. Carried through, never used for training.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingFormat {
    /// MovieLens 100K `u.data`: `user\titem\trating\ttimestamp`.
    Tab100k,
    /// MovieLens 1M `ratings.dat`: `user::item::rating::timestamp`.
    Colon1m,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab100k" => Ok(RatingFormat::Tab100k),
            "colon1m" => Ok(RatingFormat::Colon1m),
            other => Err(Error::InvalidArgument(format!("unknown rating format {other:?}"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Tab100k => "tab100k",
            RatingFormat::Colon1m => "colon1m",
        })
    }
}

/// Dense-index to original-id mapping for both axes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl IdMap {
    /// Writes `users.map` and `items.map` into `dir`, one `dense\toriginal` pair per line.
    pub fn write_sidecars(&self, dir: &Path) -> Result<()> {
        for (name, ids) in [("users.map", &self.users), ("items.map", &self.items)] {
            let path = dir.join(name);
            let mut out = Vec::with_capacity(ids.len() * 12);
            for (dense, original) in ids.iter().enumerate() {
                writeln!(out, "{dense}\t{original}").expect("write to vec");
            }
            fs::write(&path, out).map_err(|source| Error::Io { path, source })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParsedRatings {
    pub records: Vec<RatingRecord>,
    pub ids: IdMap,
}

pub fn parse_movielens(path: &Path, format: RatingFormat) -> Result<ParsedRatings> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_movielens_str(&text, format)
}

/// Parses rating lines and remaps user and item ids to dense 0-based indices
/// in ascending order of the original ids.
pub fn parse_movielens_str(text: &str, format: RatingFormat) -> Result<ParsedRatings> {
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::Tab100k => line.split('\t').collect(),
            RatingFormat::Colon1m => line.split("::").collect(),
        };
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 {format} fields, found {}", fields.len()),
            });
        }
        let field = |i: usize, what: &str| -> Result<&str> {
            let f = fields[i].trim();
            if f.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("empty {what} field"),
                });
            }
            Ok(f)
        };
        let user: u64 = field(0, "user")?.parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad user id: {e}"),
        })?;
        let item: u64 = field(1, "item")?.parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad item id: {e}"),
        })?;
        let rating: f64 = field(2, "rating")?.parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad rating: {e}"),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: "rating is not finite".into(),
            });
        }
        let timestamp: i64 = field(3, "timestamp")?.parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad timestamp: {e}"),
        })?;
        raw.push((user, item, rating, timestamp));
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("no rating lines".into()));
    }

    let dense = |ids: Vec<u64>| -> (Vec<u64>, HashMap<u64, usize>) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        let lookup = ids.iter().enumerate().map(|(d, &o)| (o, d)).collect();
        (ids, lookup)
    };
    let (users, user_idx) = dense(raw.iter().map(|r| r.0).collect());
    let (items, item_idx) = dense(raw.iter().map(|r| r.1).collect());

    let records = raw
        .into_iter()
        .map(|(u, i, rating, timestamp)| RatingRecord {
            user: user_idx[&u],
            item: item_idx[&i],
            rating,
            timestamp,
        })
        .collect();
    Ok(ParsedRatings {
        records,
        ids: IdMap { users, items },
    })
}

/// Sparse binary preference matrix holding only the observed positives.
///
/// Both row (per user) and column (per item) adjacency are kept sorted so
/// either half of an alternating sweep can walk its rows directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    num_users: usize,
    num_items: usize,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    nnz: usize,
}

impl InteractionMatrix {
    /// Builds a matrix from observed coordinates; duplicates collapse.
    pub fn new<I>(num_users: usize, num_items: usize, coords: I) -> Result<Self>
    where
        I: IntoIterator<Item = Coord>,
    {
        let mut by_user = vec![Vec::new(); num_users];
        for c in coords {
            if c.user >= num_users {
                return Err(Error::OutOfRange {
                    what: "user",
                    index: c.user,
                    bound: num_users,
                });
            }
            if c.item >= num_items {
                return Err(Error::OutOfRange {
                    what: "item",
                    index: c.item,
                    bound: num_items,
                });
            }
            by_user[c.user].push(c.item);
        }
        Ok(Self::from_rows(num_items, by_user))
    }

    fn from_rows(num_items: usize, mut by_user: Vec<Vec<usize>>) -> Self {
        let mut by_item = vec![Vec::new(); num_items];
        let mut nnz = 0;
        for (u, row) in by_user.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            nnz += row.len();
            for &i in row.iter() {
                by_item[i].push(u);
            }
        }
        InteractionMatrix {
            num_users: by_user.len(),
            num_items,
            by_user,
            by_item,
            nnz,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Number of observed positives, `|D_obs|`.
    pub fn len(&self) -> usize {
        self.nnz
    }

    pub fn is_empty(&self) -> bool {
        self.nnz == 0
    }

    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn item_users(&self, item: usize) -> &[usize] {
        &self.by_item[item]
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.user < self.num_users && self.by_user[c.user].binary_search(&c.item).is_ok()
    }

    /// Preference `p_ui`: 1 for observed coordinates, 0 otherwise.
    pub fn preference(&self, c: Coord) -> f64 {
        if self.contains(c) {
            1.0
        } else {
            0.0
        }
    }

    /// Observed coordinates in user-major, item-minor order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        self.by_user
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&i| Coord::new(u, i)))
    }

    /// Copy of the matrix with the given coordinates dropped (unobserved).
    pub fn without(&self, removed: &[Coord]) -> InteractionMatrix {
        let mut rows = self.by_user.clone();
        let mut per_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for c in removed {
            per_user.entry(c.user).or_default().push(c.item);
        }
        for (u, mut drop) in per_user {
            if u >= rows.len() {
                continue;
            }
            drop.sort_unstable();
            rows[u].retain(|i| drop.binary_search(i).is_err());
        }
        InteractionMatrix::from_rows(self.num_items, rows)
    }
}

/// Smallest rating present; the default cut-point treats any rating as a like.
pub fn min_rating(records: &[RatingRecord]) -> Option<f64> {
    records.iter().map(|r| r.rating).reduce(f64::min)
}

/// Keeps coordinates whose (max over duplicates) rating reaches `threshold`.
///
/// Ratings below the threshold are dropped, i.e. read as unobserved. The
/// matrix shape covers every id seen in `records`, kept or not.
pub fn binarize(records: &[RatingRecord], threshold: f64) -> Result<InteractionMatrix> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no rating records".into()));
    }
    let num_users = records.iter().map(|r| r.user).max().unwrap_or(0) + 1;
    let num_items = records.iter().map(|r| r.item).max().unwrap_or(0) + 1;
    let mut best: HashMap<Coord, f64> = HashMap::with_capacity(records.len());
    for r in records {
        let e = best.entry(Coord::new(r.user, r.item)).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.rating);
    }
    let kept = best
        .into_iter()
        .filter(|&(_, rating)| rating >= threshold)
        .map(|(c, _)| c);
    let matrix = InteractionMatrix::new(num_users, num_items, kept)?;
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(matrix)
}

/// `floor(fraction * total)`, robust to representation error in `fraction`.
pub(crate) fn fraction_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64) + 1e-9).floor() as usize
}

fn sample_coords(pool: &[Coord], amount: usize, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Coord> = index::sample(&mut rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: InteractionMatrix,
    /// Held-out positives, sorted.
    pub test_positives: Vec<Coord>,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Uniform holdout of `max(1, floor(test_fraction * |D_obs|))` positives.
pub fn split_holdout(matrix: &InteractionMatrix, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if matrix.len() < 2 {
        return Err(Error::InvalidArgument(
            "a holdout split needs at least two observations".into(),
        ));
    }
    let pool: Vec<Coord> = matrix.coords().collect();
    let amount = fraction_count(test_fraction, pool.len()).max(1);
    let test_positives = sample_coords(&pool, amount, seed);
    let train = matrix.without(&test_positives);
    Ok(DataSplit {
        train,
        test_positives,
        seed,
        test_fraction,
    })
}

/// Coordinates requested for deletion, a subset of the training positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalSet {
    /// Sorted, unique.
    pub coords: Vec<Coord>,
    pub fraction: f64,
    pub seed: u64,
}

impl RemovalSet {
    pub fn empty() -> Self {
        RemovalSet {
            coords: Vec::new(),
            fraction: 0.0,
            seed: 0,
        }
    }

    /// Explicit removal list (e.g. from a coordinate file). Containment in the
    /// training set is checked when the deletion is applied.
    pub fn from_coords(mut coords: Vec<Coord>, total: usize) -> Self {
        coords.sort_unstable();
        coords.dedup();
        let fraction = if total == 0 {
            0.0
        } else {
            coords.len() as f64 / total as f64
        };
        RemovalSet {
            coords,
            fraction,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.coords.binary_search(&c).is_ok()
    }
}

/// Uniform sample without replacement of `floor(fraction * |D_obs|)` training positives.
pub fn sample_removal(train: &InteractionMatrix, fraction: f64, seed: u64) -> Result<RemovalSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "removal fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let pool: Vec<Coord> = train.coords().collect();
    let amount = fraction_count(fraction, pool.len()).min(pool.len());
    Ok(RemovalSet {
        coords: sample_coords(&pool, amount, seed),
        fraction,
        seed,
    })
}

/// Uniform sample of exactly `amount` training positives.
pub fn sample_removal_count(train: &InteractionMatrix, amount: usize, seed: u64) -> Result<RemovalSet> {
    let pool: Vec<Coord> = train.coords().collect();
    if amount > pool.len() {
        return Err(Error::Infeasible {
            requested: amount,
            available: pool.len(),
        });
    }
    Ok(RemovalSet {
        coords: sample_coords(&pool, amount, seed),
        fraction: amount as f64 / pool.len().max(1) as f64,
        seed,
    })
}

/// Removal fractions at every 5%: 0.05, 0.10, ..., 0.95.
pub fn five_percent_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Planted binary instance of exact rank `rank`: `M = X Yᵀ` with one-hot user
/// factors (each user belongs to one of `rank` groups) and 0/1 item factors.
/// Every positive of `M` is observed.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    pub density: f64,
    pub seed: u64,
    /// Row-major `num_users x rank`.
    pub user_factors: Vec<f64>,
    /// Row-major `num_items x rank`.
    pub item_factors: Vec<f64>,
    /// Row-major `num_users x num_items` ground truth `X Yᵀ`, entries in {0, 1}.
    pub scores: Vec<f64>,
    pub observed: InteractionMatrix,
}

impl SyntheticInstance {
    pub fn score(&self, c: Coord) -> f64 {
        self.scores[c.user * self.num_items + c.item]
    }
}

const SYNTHETIC_DRAWS: usize = 1000;

/// Item factor columns each mark the top `round(density * n)` items of a
/// Gaussian draw; users are spread round-robin over the groups in random
/// order. Redraws until `Y` has full column rank, so `rank(M) = rank`.
pub fn generate_synthetic(
    num_users: usize,
    num_items: usize,
    rank: usize,
    density: f64,
    seed: u64,
) -> Result<SyntheticInstance> {
    if rank == 0 || rank > num_users.min(num_items) {
        return Err(Error::InvalidArgument(format!(
            "rank must lie in [1, min(m, n)], got {rank}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let per_column = (density * num_items as f64).round() as usize;
    if per_column == 0 {
        return Err(Error::EmptyMatrix);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item_factors = vec![0.0; num_items * rank];
    let mut drawn = false;
    for _ in 0..SYNTHETIC_DRAWS {
        item_factors.iter_mut().for_each(|v| *v = 0.0);
        for g in 0..rank {
            let z: Vec<f64> = (0..num_items).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut order: Vec<usize> = (0..num_items).collect();
            order.sort_unstable_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
            for &i in &order[..per_column] {
                item_factors[i * rank + g] = 1.0;
            }
        }
        if nalgebra::DMatrix::from_row_slice(num_items, rank, &item_factors).rank(1e-9) == rank {
            drawn = true;
            break;
        }
    }
    if !drawn {
        return Err(Error::InvalidArgument(format!(
            "no rank-{rank} 0/1 item factors with {per_column} of {num_items} ones per column"
        )));
    }

    let mut users: Vec<usize> = (0..num_users).collect();
    users.shuffle(&mut rng);
    let mut user_factors = vec![0.0; num_users * rank];
    for (pos, &u) in users.iter().enumerate() {
        user_factors[u * rank + pos % rank] = 1.0;
    }

    let mut scores = vec![0.0; num_users * num_items];
    let mut coords = Vec::new();
    for u in 0..num_users {
        let x = &user_factors[u * rank..(u + 1) * rank];
        for i in 0..num_items {
            let y = &item_factors[i * rank..(i + 1) * rank];
            let v: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            scores[u * num_items + i] = v;
            if v > 0.5 {
                coords.push(Coord::new(u, i));
            }
        }
    }
    let observed = InteractionMatrix::new(num_users, num_items, coords)?;

    Ok(SyntheticInstance {
        num_users,
        num_items,
        rank,
        density,
        seed,
        user_factors,
        item_factors,
        scores,
        observed,
    })
}
