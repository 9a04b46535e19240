//! Experiment configuration: JSON schema, parsing with field paths, presets.

use serde::{Deserialize, Serialize};

use crate::dyadic::{GoodnessParams, GoodnessSpec};
use crate::error::{Error, Result};
use crate::field::NormSpace;
use crate::kernel::KernelSpec;
use crate::measure::{AccretiveSpec, MeasureSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub measure: MeasureSpec,
    pub kernel: KernelSpec,
    #[serde(default = "one")]
    pub b1: AccretiveSpec,
    #[serde(default = "one")]
    pub b2: AccretiveSpec,
    pub goodness: GoodnessSpec,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "NormSpace::scalar")]
    pub x: NormSpace,
    /// Monte Carlo sign trials for randomized norms.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Kernel truncation; defaults to half the minimal atom separation.
    #[serde(default)]
    pub truncation_eps: Option<f64>,
    /// Random starting vectors for the operator-norm estimate.
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_power")]
    pub power_iterations: usize,
    /// Close pairs whose coefficient is split into the five boundary terms.
    #[serde(default = "default_close")]
    pub close_samples: usize,
    /// Operator norms are cross-checked by a dense SVD up to this many atoms.
    #[serde(default = "default_svd")]
    pub svd_max_atoms: usize,
    /// Keep the full per-pair table up to this many pairs.
    #[serde(default = "default_table")]
    pub table_max_pairs: usize,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Scale window. `top` is the coarsest level `m`; by default the smallest
/// level at which the measure meets at most `2^N` cubes, plus one.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default)]
    pub top: Option<i32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "yes")]
    pub cells_csv: bool,
    #[serde(default = "yes")]
    pub decay_csv: bool,
    #[serde(default = "yes")]
    pub decay_svg: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { cells_csv: true, decay_csv: true, decay_svg: true }
    }
}

fn one() -> AccretiveSpec {
    AccretiveSpec::One
}
fn two() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}
fn default_trials() -> usize {
    2000
}
fn default_probes() -> usize {
    4
}
fn default_power() -> usize {
    20
}
fn default_close() -> usize {
    64
}
fn default_svd() -> usize {
    1024
}
fn default_table() -> usize {
    1 << 18
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn goodness_params(&self) -> Result<GoodnessParams> {
        GoodnessParams::try_from(self.goodness.clone()).map_err(|e| at("goodness", e))
    }

    /// Checks everything that does not need the measure to be built.
    pub fn validate(&self) -> Result<()> {
        self.goodness_params()?;
        self.x.validate().map_err(|e| at("x", e))?;
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(cfg_err("p", "must lie in (1, inf)"));
        }
        if self.trials == 0 {
            return Err(cfg_err("trials", "must be positive"));
        }
        if self.probes == 0 {
            return Err(cfg_err("probes", "must be at least 1"));
        }
        if let Some(e) = self.truncation_eps {
            if !(e > 0.0) || !e.is_finite() {
                return Err(cfg_err("truncation_eps", "must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn cfg_err(path: &str, message: &str) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

/// Re-labels a parameter error with a config path.
pub(crate) fn at(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { field, reason } => Error::Config { path: format!("{prefix}.{field}"), message: reason },
        Error::Config { path, message } => Error::Config { path: format!("{prefix}.{path}"), message },
        other => Error::Config { path: prefix.into(), message: other.to_string() },
    }
}

const CANTOR_CAUCHY: &str = include_str!("../presets/cantor-cauchy.json");
const GRAPH_CAUCHY: &str = include_str!("../presets/graph-cauchy.json");
const CANTOR_SMALL: &str = include_str!("../presets/cantor-small.json");

/// Names of the bundled presets.
pub const PRESETS: [&str; 3] = ["cantor-cauchy", "graph-cauchy", "cantor-small"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        "cantor-cauchy" => CANTOR_CAUCHY,
        "graph-cauchy" => GRAPH_CAUCHY,
        "cantor-small" => CANTOR_SMALL,
        _ => return Err(cfg_err("preset", &format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")))),
    };
    ExperimentConfig::from_json(text)
}
