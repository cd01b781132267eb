//! Dataset loading shared by every command.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use forget::data::{self, Coord, DataSplit, IdMap, InteractionMatrix, RemovalSet};
use forget::eval::{self, EvalSet};
use forget::seeds::{self, derive_seed};
use serde::Serialize;

use crate::artifacts::sha256_hex;
use crate::config::{DataFormat, ExperimentConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub format: DataFormat,
    pub path: Option<PathBuf>,
    /// Of the raw input file, or of the generated positives for synthetic data.
    pub sha256: String,
    pub threshold: Option<f64>,
    pub users: usize,
    pub items: usize,
    pub positives: usize,
    pub train_positives: usize,
    pub test_positives: usize,
}

pub struct Dataset {
    pub ids: Option<IdMap>,
    pub split: DataSplit,
    pub info: DatasetInfo,
}

/// One `user\titem` line per coordinate.
pub fn coords_tsv(coords: impl IntoIterator<Item = Coord>) -> Vec<u8> {
    let mut out = Vec::new();
    for c in coords {
        writeln!(out, "{}\t{}", c.user, c.item).expect("write to vec");
    }
    out
}

pub fn load(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    let (matrix, ids, sha256, threshold) = match d.format.ratings() {
        Some(format) => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| CliError::config("data.path is required for rating files".into()))?;
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::new("parse", format!("{}: not valid UTF-8", path.display())))?;
            let parsed = data::parse_movielens_str(&text, format)?;
            let threshold = match d.threshold {
                Some(t) => t,
                None => data::min_rating(&parsed.records).ok_or_else(|| CliError::new("empty_input", "no ratings"))?,
            };
            let matrix = data::binarize(&parsed.records, threshold)?;
            (matrix, Some(parsed.ids), sha256_hex(text.as_bytes()), Some(threshold))
        }
        None => {
            let inst = data::generate_synthetic(
                d.synthetic_users,
                d.synthetic_items,
                d.synthetic_rank,
                d.synthetic_density,
                derive_seed(cfg.seeds.base, seeds::SYNTHETIC),
            )?;
            let digest = sha256_hex(&coords_tsv(inst.observed.coords()));
            (inst.observed, None, digest, None)
        }
    };
    let split = data::split_holdout(&matrix, d.test_fraction, cfg.seeds.split())?;
    let info = DatasetInfo {
        format: d.format,
        path: d.path.clone().filter(|_| d.format != DataFormat::Synthetic),
        sha256,
        threshold,
        users: matrix.num_users(),
        items: matrix.num_items(),
        positives: matrix.len(),
        train_positives: split.train.len(),
        test_positives: split.test_positives.len(),
    };
    Ok(Dataset { ids, split, info })
}

pub fn eval_set(ds: &Dataset, cfg: &ExperimentConfig) -> CliResult<EvalSet> {
    Ok(eval::build_eval_set(&ds.split, cfg.seeds.negatives())?)
}

/// Reads `user\titem` dense index pairs; blank lines and `#` comments are skipped.
pub fn read_coords(path: &Path) -> CliResult<Vec<Coord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || CliError::new("parse", format!("{}:{}: expected `user<TAB>item`", path.display(), idx + 1));
        let mut fields = line.split_whitespace();
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad());
        };
        out.push(Coord::new(u.parse().map_err(|_| bad())?, i.parse().map_err(|_| bad())?));
    }
    Ok(out)
}

/// The coordinate file when one is configured, else a seeded fraction of `train`.
pub fn removal(cfg: &ExperimentConfig, train: &InteractionMatrix) -> CliResult<RemovalSet> {
    match &cfg.unlearn.coords {
        Some(path) => {
            let coords = read_coords(path)?;
            for c in &coords {
                if c.user >= train.num_users() || c.item >= train.num_items() {
                    return Err(CliError::new(
                        "out_of_range",
                        format!("coordinate ({}, {}) outside {}x{}", c.user, c.item, train.num_users(), train.num_items()),
                    ));
                }
            }
            Ok(RemovalSet::from_coords(coords, train.len()))
        }
        None => Ok(data::sample_removal(train, cfg.unlearn.fraction, cfg.seeds.removal())?),
    }
}
