//! Experiment configuration: TOML with sections, then `FORGET_<SECTION>_<KEY>`
//! environment variables, then command-line flags, later layers winning.

use std::path::{Path, PathBuf};

use forget::als::{ConfidenceScheme, Hyperparams, Solver};
use forget::data::RatingFormat;
use forget::eval::SweepMode;
use forget::seeds::{self, derive_seed};
use forget::unlearn::UnlearnSolver;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tab100k,
    Colon1m,
    Synthetic,
}

impl DataFormat {
    pub fn ratings(self) -> Option<RatingFormat> {
        match self {
            DataFormat::Tab100k => Some(RatingFormat::Tab100k),
            DataFormat::Colon1m => Some(RatingFormat::Colon1m),
            DataFormat::Synthetic => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    /// Ratings at or above this become positives; defaults to the minimum rating.
    pub threshold: Option<f64>,
    pub test_fraction: f64,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_rank: usize,
    pub synthetic_density: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            format: DataFormat::Tab100k,
            threshold: None,
            test_fraction: 0.01,
            synthetic_users: 100,
            synthetic_items: 100,
            synthetic_rank: 2,
            synthetic_density: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Linear,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolverName {
    Direct,
    Cg,
    Downdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub lambda: f64,
    pub scheme: SchemeName,
    pub alpha: f64,
    pub low: f64,
    pub max_passes: usize,
    pub tolerance: f64,
    pub solver: SolverName,
    pub cg_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 32,
            lambda: 0.1,
            scheme: SchemeName::Linear,
            alpha: 40.0,
            low: 0.01,
            max_passes: 25,
            tolerance: 1e-4,
            solver: SolverName::Direct,
            cg_iters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub passes: usize,
    pub solver: SolverName,
    pub tolerance: f64,
    /// Fraction of training positives to remove when no coordinate file is given.
    pub fraction: f64,
    /// File of `user<TAB>item` dense indices to remove.
    pub coords: Option<PathBuf>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            passes: 10,
            solver: SolverName::Direct,
            tolerance: 0.0,
            fraction: 0.05,
            coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: SweepMode,
    pub fractions: Vec<f64>,
    /// Checkpoints of the AUC curve.
    pub pass_grid: Vec<usize>,
    pub train_passes: Vec<usize>,
    pub untrain_passes: Vec<usize>,
    /// One cell per seed; every named seed of a cell derives from it.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mode: SweepMode::Untrain,
            fractions: vec![0.05],
            pass_grid: (0..=10).collect(),
            train_passes: vec![25],
            untrain_passes: vec![10],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub k_grid: Vec<usize>,
    pub deletions: usize,
    pub base_passes: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            k_grid: vec![8, 16, 32, 64],
            deletions: 1,
            base_passes: 5,
            repeats: 3,
        }
    }
}

/// Named seeds. Unset ones derive from `base`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
    pub split: Option<u64>,
    pub negatives: Option<u64>,
    pub removal: Option<u64>,
    pub init: Option<u64>,
    pub mi_split: Option<u64>,
}

impl SeedConfig {
    fn named(&self, explicit: Option<u64>, stream: &str) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.base, stream))
    }

    pub fn split(&self) -> u64 {
        self.named(self.split, seeds::SPLIT)
    }

    pub fn negatives(&self) -> u64 {
        self.named(self.negatives, seeds::NEGATIVES)
    }

    pub fn removal(&self) -> u64 {
        self.named(self.removal, seeds::REMOVAL)
    }

    pub fn init(&self) -> u64 {
        self.named(self.init, seeds::INIT)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub unlearn: UnlearnConfig,
    pub sweep: SweepSection,
    pub bench: BenchConfig,
    pub seeds: SeedConfig,
}

pub const ENV_PREFIX: &str = "FORGET_";

/// Reads a TOML literal, falling back to a bare string.
pub fn literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` in `table`.
pub fn set_key(table: &mut toml::Table, section: &str, key: &str, value: toml::Value) -> Result<(), CliError> {
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::config(format!("[{section}] is not a section"))),
    }
}

const SECTIONS: [&str; 6] = ["data", "model", "unlearn", "sweep", "bench", "seeds"];

/// Applies `FORGET_<SECTION>_<KEY>=value` variables from `vars`.
pub fn apply_env<I>(table: &mut toml::Table, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
            continue;
        };
        let key = &rest[section.len() + 1..];
        set_key(table, section, key, literal(&raw))?;
    }
    Ok(())
}

pub fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message().trim())))
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.hyperparams(true)?.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(CliError::config(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        Ok(())
    }

    pub fn scheme(&self) -> ConfidenceScheme {
        match self.model.scheme {
            SchemeName::Linear => ConfidenceScheme::Linear { alpha: self.model.alpha },
            SchemeName::Binary => ConfidenceScheme::Binary { low: self.model.low },
        }
    }

    pub fn hyperparams(&self, parallel: bool) -> Result<Hyperparams, CliError> {
        let solver = match self.model.solver {
            SolverName::Direct => Solver::Direct,
            SolverName::Cg => Solver::Cg { iters: self.model.cg_iters },
            SolverName::Downdate => return Err(CliError::config("model.solver must be direct or cg".into())),
        };
        Ok(Hyperparams {
            k: self.model.k,
            lambda: self.model.lambda,
            scheme: self.scheme(),
            max_passes: self.model.max_passes,
            tolerance: self.model.tolerance,
            solver,
            parallel,
        })
    }

    pub fn unlearn_solver(&self) -> UnlearnSolver {
        match self.unlearn.solver {
            SolverName::Direct => UnlearnSolver::Direct,
            SolverName::Cg => UnlearnSolver::Cg { iters: self.model.cg_iters },
            SolverName::Downdate => UnlearnSolver::Downdate,
        }
    }
}
