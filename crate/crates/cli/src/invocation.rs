//! Fully resolved runs. Flags and config files are merged into an
//! [`Invocation`], which is recorded in the manifest and can be replayed.

use std::fs;
use std::path::{Path, PathBuf};

use mir_core::estimate::ModelKind;
use mir_core::simlab::{ErrorDist, SimConfig};
use mir_core::{FitOptions, GofOptions, SelectOptions};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where the weight matrices come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WeightSource {
    /// Precomputed `W_k{k}_t{t}.csv` files.
    Dir { path: PathBuf },
    /// Long-format attributes turned into similarity weights.
    Attributes {
        path: PathBuf,
        /// `None` means `10 / n`.
        density: Option<f64>,
        /// 1-based indices of discrete attributes.
        discrete: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub y: PathBuf,
    pub weights: WeightSource,
    pub x: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub config: SimConfig,
    /// Number of unrelated covariate columns written to `X.csv`.
    pub covariates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Fit { data: DataSpec, model: ModelKind, fit: FitOptions, seed: Option<u64> },
    Select { data: DataSpec, select: SelectOptions, seed: Option<u64> },
    Test { data: DataSpec, fit: FitOptions, gof: GofOptions, seed: Option<u64> },
    Simulate { table: Option<u8>, error_dist: ErrorDist, cells: Vec<SimConfig> },
    Generate(GenerateSpec),
}

impl Invocation {
    pub fn subcommand(&self) -> &'static str {
        match self {
            Invocation::Fit { .. } => "fit",
            Invocation::Select { .. } => "select",
            Invocation::Test { .. } => "test",
            Invocation::Simulate { .. } => "simulate",
            Invocation::Generate(_) => "generate",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Fit { seed, .. } | Invocation::Select { seed, .. } | Invocation::Test { seed, .. } => *seed,
            Invocation::Simulate { cells, .. } => cells.first().map(|c| c.base_seed),
            Invocation::Generate(g) => Some(g.config.base_seed),
        }
    }

    pub fn data(&self) -> Option<&DataSpec> {
        match self {
            Invocation::Fit { data, .. } | Invocation::Select { data, .. } | Invocation::Test { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Every file read by the run, in a stable order.
    pub fn input_files(&self) -> Result<Vec<PathBuf>, CliError> {
        let Some(data) = self.data() else { return Ok(Vec::new()) };
        let mut files = vec![data.y.clone()];
        match &data.weights {
            WeightSource::Dir { path } => files.extend(weight_files(path)?),
            WeightSource::Attributes { path, .. } => files.push(path.clone()),
        }
        files.extend(data.x.clone());
        Ok(files)
    }
}

fn weight_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("W_k") && n.ends_with(".csv")))
        .collect();
    files.sort();
    Ok(files)
}
