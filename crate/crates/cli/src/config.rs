//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a full-line comment; lists are
//! comma-separated. Unknown keys are rejected so typos fail loudly.
//! See the README for the full key reference.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use instanton_mc::ControlKind;
use thiserror::Error;

/// Environment variable overriding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "INSTANTON_MC_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}` as {wanted}")]
    BadValue {
        key: &'static str,
        value: String,
        wanted: &'static str,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Which reference problem to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelName {
    OuQuartic,
    Lq,
}

impl ModelName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::OuQuartic => "ou_quartic",
            ModelName::Lq => "lq",
        }
    }

    pub fn parse(s: &str) -> Option<ModelName> {
        match s {
            "ou_quartic" => Some(ModelName::OuQuartic),
            "lq" => Some(ModelName::Lq),
            _ => None,
        }
    }
}

/// Everything a sweep run needs; see module docs for the file format.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelName,
    pub lq_a: f64,
    pub lq_q: f64,
    pub epsilons: Vec<f64>,
    pub controls: Vec<ControlKind>,
    pub n_traj: usize,
    pub dt: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub record_deviation: bool,
    pub record_residual: bool,
    pub two_run_rho: bool,
    pub dump_samples: bool,
    /// Reuse the same noise streams across controls at each epsilon.
    pub common_rng: bool,
    /// 0 means "let rayon decide".
    pub workers: usize,
    /// Emit a generation-time header line in the output files.
    pub timestamp: bool,
    pub relax: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub n_resample: usize,
    pub pde_x_min: f64,
    pub pde_x_max: f64,
    pub pde_n_x: usize,
    /// Include the PDE oracle column in summary.txt.
    pub oracle_in_summary: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelName::OuQuartic,
            lq_a: 1.0,
            lq_q: 1.0,
            epsilons: vec![0.5, 0.25, 0.125, 0.0625],
            controls: vec![ControlKind::Zero, ControlKind::Order1, ControlKind::Order2],
            n_traj: 100_000,
            dt: 5e-3,
            seed: 42,
            output_dir: default_output_dir(),
            record_deviation: false,
            record_residual: false,
            two_run_rho: false,
            dump_samples: false,
            common_rng: true,
            workers: 0,
            timestamp: true,
            relax: 0.5,
            max_iter: 500,
            tol: 1e-10,
            n_resample: 400,
            pde_x_min: -6.0,
            pde_x_max: 6.0,
            pde_n_x: 1001,
            oracle_in_summary: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_f64(key: &'static str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key,
        value: v.to_string(),
        wanted: "a real number",
    })
}

fn parse_usize(key: &'static str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key,
        value: v.to_string(),
        wanted: "a nonnegative integer",
    })
}

fn parse_u64(key: &'static str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key,
        value: v.to_string(),
        wanted: "a nonnegative integer",
    })
}

fn parse_bool(key: &'static str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key,
            value: v.to_string(),
            wanted: "a boolean (true/false)",
        }),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut saw_model = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: line_no,
                    text: line.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "model" => {
                    cfg.model = ModelName::parse(value).ok_or(ConfigError::BadValue {
                        key: "model",
                        value: value.to_string(),
                        wanted: "`ou_quartic` or `lq`",
                    })?;
                    saw_model = true;
                }
                "lq_a" => cfg.lq_a = parse_f64("lq_a", value)?,
                "lq_q" => cfg.lq_q = parse_f64("lq_q", value)?,
                "epsilons" => {
                    cfg.epsilons = value
                        .split(',')
                        .map(|s| parse_f64("epsilons", s.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "controls" => {
                    cfg.controls = value
                        .split(',')
                        .map(|s| match s.trim() {
                            "none" => Ok(ControlKind::Zero),
                            "order1" => Ok(ControlKind::Order1),
                            "order2" => Ok(ControlKind::Order2),
                            other => Err(ConfigError::BadValue {
                                key: "controls",
                                value: other.to_string(),
                                wanted: "a subset of none, order1, order2",
                            }),
                        })
                        .collect::<Result<_, _>>()?;
                }
                "n_traj" => cfg.n_traj = parse_usize("n_traj", value)?,
                "dt" => cfg.dt = parse_f64("dt", value)?,
                "seed" => cfg.seed = parse_u64("seed", value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "record_deviation" => cfg.record_deviation = parse_bool("record_deviation", value)?,
                "record_residual" => cfg.record_residual = parse_bool("record_residual", value)?,
                "two_run_rho" => cfg.two_run_rho = parse_bool("two_run_rho", value)?,
                "dump_samples" => cfg.dump_samples = parse_bool("dump_samples", value)?,
                "common_rng" => cfg.common_rng = parse_bool("common_rng", value)?,
                "workers" => cfg.workers = parse_usize("workers", value)?,
                "timestamp" => cfg.timestamp = parse_bool("timestamp", value)?,
                "relax" => cfg.relax = parse_f64("relax", value)?,
                "max_iter" => cfg.max_iter = parse_usize("max_iter", value)?,
                "tol" => cfg.tol = parse_f64("tol", value)?,
                "n_resample" => cfg.n_resample = parse_usize("n_resample", value)?,
                "pde_x_min" => cfg.pde_x_min = parse_f64("pde_x_min", value)?,
                "pde_x_max" => cfg.pde_x_max = parse_f64("pde_x_max", value)?,
                "pde_n_x" => cfg.pde_n_x = parse_usize("pde_n_x", value)?,
                "oracle_in_summary" => {
                    cfg.oracle_in_summary = parse_bool("oracle_in_summary", value)?
                }
                other => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        key: other.to_string(),
                    })
                }
            }
        }
        if !saw_model {
            return Err(ConfigError::Missing("model"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epsilons.is_empty() {
            return Err(ConfigError::Invalid("epsilons must be nonempty".into()));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(ConfigError::Invalid(
                "epsilons must all be strictly positive".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for e in &self.epsilons {
            if !seen.insert(e.to_bits()) {
                return Err(ConfigError::Invalid(format!("duplicate epsilon {e}")));
            }
        }
        if self.controls.is_empty() {
            return Err(ConfigError::Invalid("controls must be nonempty".into()));
        }
        if self.n_traj == 0 {
            return Err(ConfigError::Invalid("n_traj must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.relax > 0.0 && self.relax <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "relax must lie in (0, 1], got {}",
                self.relax
            )));
        }
        if self.n_resample < 100 {
            return Err(ConfigError::Invalid(format!(
                "n_resample must be >= 100, got {}",
                self.n_resample
            )));
        }
        Ok(())
    }
}
