//! JSON configuration with a closed schema, and the run plan built from it.

use std::path::{Path, PathBuf};

use memlq_core::presets::heat1d_matrix;
use memlq_core::riccati::Scheme;
use memlq_core::{build_grid, AugmentedState, KernelSpec, ProblemSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MEMORY_CAP: u64 = 2_147_483_648;

/// A matrix given entry-wise (row-major) or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixEntry {
    Values(Vec<f64>),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelEntry {
    Zero,
    Exponential { a: f64 },
    Samples { values: Vec<f64> },
}

/// Control history as node samples, or the word `"zero"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistoryEntry {
    Samples(Vec<Vec<f64>>),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeEntry {
    #[default]
    Euler,
    Heun,
}

impl From<SchemeEntry> for Scheme {
    fn from(s: SchemeEntry) -> Self {
        match s {
            SchemeEntry::Euler => Scheme::Euler,
            SchemeEntry::Heun => Scheme::Heun,
        }
    }
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_cap() -> u64 {
    DEFAULT_MEMORY_CAP
}

/// The configuration document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(rename = "A")]
    pub a: MatrixEntry,
    #[serde(rename = "B")]
    pub b: MatrixEntry,
    #[serde(rename = "C")]
    pub c: MatrixEntry,
    pub kernel: KernelEntry,
    pub s_index: usize,
    pub w0: Vec<f64>,
    pub eta: HistoryEntry,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub scheme: SchemeEntry,
    #[serde(default = "default_cap")]
    pub memory_cap_bytes: u64,
}

impl ConfigFile {
    /// Config for `spec` on `steps` cells, started at time 0 from `w0`.
    pub fn from_spec(spec: &ProblemSpec, steps: usize, w0: &DVector<f64>) -> Self {
        let raw = spec.to_raw();
        let kernel = match raw.kernel {
            KernelSpec::Zero => KernelEntry::Zero,
            KernelSpec::Exponential { a } => KernelEntry::Exponential { a },
            KernelSpec::Samples(values) => KernelEntry::Samples { values },
        };
        ConfigFile {
            n: raw.n,
            m: raw.m,
            horizon: raw.horizon,
            steps,
            a: MatrixEntry::Values(raw.a),
            b: MatrixEntry::Values(raw.b),
            c: MatrixEntry::Values(raw.c),
            kernel,
            s_index: 0,
            w0: w0.iter().copied().collect(),
            eta: HistoryEntry::Named("zero".into()),
            tol: DEFAULT_TOL,
            scheme: SchemeEntry::Euler,
            memory_cap_bytes: DEFAULT_MEMORY_CAP,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        serde_json::from_value(value).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn matrix(
        &self,
        entry: &MatrixEntry,
        key: &str,
        rows: usize,
        cols: usize,
    ) -> Result<DMatrix<f64>, CliError> {
        match entry {
            MatrixEntry::Values(v) if v.len() == rows * cols => {
                Ok(DMatrix::from_row_slice(rows, cols, v))
            }
            MatrixEntry::Values(v) => Err(CliError::Schema(format!(
                "\"{key}\" needs {} entries, got {}",
                rows * cols,
                v.len()
            ))),
            MatrixEntry::Named(name) if name == "identity" && key != "A" => {
                if rows != cols {
                    return Err(CliError::Schema(format!(
                        "\"{key}\" = \"identity\" needs a square shape, got {rows}x{cols}"
                    )));
                }
                Ok(DMatrix::identity(rows, cols))
            }
            MatrixEntry::Named(name) if name == "heat1d" && key == "A" => Ok(heat1d_matrix(rows)),
            MatrixEntry::Named(name) => Err(CliError::Schema(format!(
                "unknown preset \"{name}\" for \"{key}\""
            ))),
        }
    }

    fn kernel(&self) -> Result<KernelSpec, CliError> {
        Ok(match &self.kernel {
            KernelEntry::Zero => KernelSpec::Zero,
            KernelEntry::Exponential { a } => KernelSpec::Exponential { a: *a },
            KernelEntry::Samples { values } => {
                if values.len() != self.steps + 1 {
                    return Err(CliError::Schema(format!(
                        "kernel samples need N + 1 = {} values, got {}",
                        self.steps + 1,
                        values.len()
                    )));
                }
                KernelSpec::Samples(values.clone())
            }
        })
    }

    fn initial_state(&self) -> Result<AugmentedState, CliError> {
        if self.w0.len() != self.n {
            return Err(CliError::Schema(format!(
                "\"w0\" needs {} entries, got {}",
                self.n,
                self.w0.len()
            )));
        }
        if self.s_index >= self.steps {
            return Err(CliError::Schema(format!(
                "\"s_index\" must be below N = {}, got {}",
                self.steps, self.s_index
            )));
        }
        let w0 = DVector::from_vec(self.w0.clone());
        let samples = match &self.eta {
            HistoryEntry::Named(name) if name == "zero" => {
                return Ok(AugmentedState {
                    w0,
                    ..AugmentedState::zero(self.n, self.m, self.s_index)
                });
            }
            HistoryEntry::Named(name) => {
                return Err(CliError::Schema(format!("unknown history \"{name}\"")));
            }
            HistoryEntry::Samples(rows) => rows,
        };
        let expected = self.s_index + 1;
        let empty_at_start = self.s_index == 0 && samples.is_empty();
        if samples.len() != expected && !empty_at_start {
            return Err(CliError::Schema(format!(
                "\"eta\" needs s_index + 1 = {expected} samples, got {}",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|r| r.len() != self.m) {
            return Err(CliError::Schema(format!(
                "\"eta\" samples need {} entries, got {}",
                self.m,
                bad.len()
            )));
        }
        let samples: Vec<_> = samples
            .iter()
            .map(|r| DVector::from_vec(r.clone()))
            .collect();
        AugmentedState::from_node_history(w0, &samples, self.s_index).map_err(CliError::Config)
    }
}

/// Command selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Solve,
    Feedback,
    Riccati,
    Verify,
    Report,
}

/// Everything needed to execute one command.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub spec: ProblemSpec,
    pub grid: TimeGrid,
    pub command: Command,
    pub initial: AugmentedState,
    pub tol: f64,
    pub scheme: Scheme,
    pub out_dir: PathBuf,
    pub memory_cap: u64,
    pub threads: usize,
}

impl RunPlan {
    pub fn from_config(config: &ConfigFile) -> Result<Self, CliError> {
        if config.tol.is_nan() || config.tol <= 0.0 {
            return Err(CliError::Schema(format!(
                "\"tol\" must be positive, got {}",
                config.tol
            )));
        }
        let n = config.n;
        let m = config.m;
        let raw = memlq_core::RawProblem {
            n,
            m,
            a: config
                .matrix(&config.a, "A", n, n)?
                .transpose()
                .as_slice()
                .to_vec(),
            b: config
                .matrix(&config.b, "B", n, m)?
                .transpose()
                .as_slice()
                .to_vec(),
            c: config
                .matrix(&config.c, "C", n, n)?
                .transpose()
                .as_slice()
                .to_vec(),
            kernel: config.kernel()?,
            horizon: config.horizon,
        };
        let spec = memlq_core::validate_spec(&raw).map_err(CliError::Config)?;
        let grid = build_grid(config.horizon, config.steps).map_err(CliError::Config)?;
        Ok(RunPlan {
            spec,
            grid,
            command: Command::Verify,
            initial: config.initial_state()?,
            tol: config.tol,
            scheme: config.scheme.into(),
            out_dir: PathBuf::from("."),
            memory_cap: config.memory_cap_bytes,
            threads: 1,
        })
    }

    pub fn start(&self) -> usize {
        self.initial.s_index
    }
}

/// Reads and validates a configuration file. The plan defaults to the
/// `verify` command writing into the current directory on one thread.
pub fn parse_config(path: &Path) -> Result<RunPlan, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::FileNotFound {
        path: path.to_path_buf(),
        source,
    })?;
    RunPlan::from_config(&ConfigFile::from_json(&text)?)
}
