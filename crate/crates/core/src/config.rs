//! Declarative experiment description (TOML), dotted-path overrides and
//! validation. Every validation error names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ScheduleKind;
use crate::loss::{LossKind, LossModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Regular,
    Complete,
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    #[serde(default)]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Edge-list file for `kind = "file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub lambda: f64,
    pub d: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_classes() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl LossConfig {
    pub fn model(&self) -> Result<LossModel, ConfigError> {
        LossModel::new(self.kind, self.d, self.classes, self.lambda)
            .map(|m| m.with_bias(self.bias))
            .map_err(|e| invalid("loss", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_divergence")]
        divergence: f64,
        #[serde(default = "default_noise")]
        noise_std: f64,
        /// Finite training set per node; `None` streams fresh samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples_per_node: Option<usize>,
    },
    File {
        path: PathBuf,
        label_column: usize,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        scale: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_divergence() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            divergence: 1.0,
            noise_std: 1.0,
            samples_per_node: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleKind,
    /// Defaults to the node count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default = "default_b")]
    pub b: f64,
}

fn default_b() -> f64 {
    10.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::default(),
            a: None,
            b: default_b(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Serial,
    Async,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(Mode::Serial),
            "async" => Ok(Mode::Async),
            other => Err(invalid("mode", format!("{other:?} is not serial|async"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PFire {
    Uniform(f64),
    PerNode(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    Zeros,
    Gaussian {
        std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Pooled samples per node for streaming synthetic data.
    #[serde(default = "default_reference_samples")]
    pub samples_per_node: usize,
    #[serde(default = "default_reference_tolerance")]
    pub tolerance: f64,
}

fn default_reference_samples() -> usize {
    2000
}

fn default_reference_tolerance() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_p_grad")]
    pub p_grad: f64,
    #[serde(default)]
    pub mode: Mode,
    /// Geometric clock parameter(s) for async mode; defaults to `min(1/N, 1/2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_fire: Option<PFire>,
    pub iterations: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
    #[serde(default = "default_max_norm")]
    pub max_norm: f64,
}

fn default_p_grad() -> f64 {
    0.5
}

fn default_record_every() -> u64 {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_test_size() -> usize {
    2000
}

fn default_max_norm() -> f64 {
    1e6
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `dotted.path=value` to a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(assignment, "override must look like `dotted.path=value`"))?;
    set_path(table, path.trim(), parse_value(raw.trim()))
}

/// Sets `dotted.path` in `table` to `value`.
pub fn set_path(
    table: &mut toml::Table,
    path: &str,
    value: toml::Value,
) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(path, "empty path segment"));
    }
    let mut cur = table;
    for key in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(path, format!("`{key}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.parse::<toml::Table>()
        .map_err(|e| ConfigError::Parse(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_table(
            text.parse::<toml::Table>()
                .map_err(|e| ConfigError::Parse(e.to_string()))?,
        )
    }

    /// Reads `path` and applies every override in order before validating.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = read_table(path)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        match t.kind {
            TopologyKind::File => {
                if t.path.is_none() {
                    return Err(invalid("topology.path", "required for kind = \"file\""));
                }
            }
            _ if t.n == 0 => return Err(invalid("topology.n", "must be positive")),
            TopologyKind::Regular => {
                let k =
                    t.k.ok_or_else(|| invalid("topology.k", "required for kind = \"regular\""))?;
                if k == 0 || k >= t.n || (k * t.n) % 2 == 1 {
                    return Err(invalid(
                        "topology.k",
                        format!("no {k}-regular graph on {} nodes", t.n),
                    ));
                }
            }
            TopologyKind::Complete if t.n < 2 => {
                return Err(invalid("topology.n", "complete graph needs n >= 2"))
            }
            TopologyKind::Random => match t.p {
                Some(p) if p > 0.0 && p <= 1.0 => {}
                _ => return Err(invalid("topology.p", "edge probability in (0, 1] required")),
            },
            _ => {}
        }
        self.loss.model()?;
        match &self.data {
            DataConfig::Synthetic {
                divergence,
                noise_std,
                samples_per_node,
            } => {
                if !(*divergence >= 0.0 && divergence.is_finite()) {
                    return Err(invalid("data.divergence", "must be finite and >= 0"));
                }
                if !(*noise_std > 0.0 && noise_std.is_finite()) {
                    return Err(invalid("data.noise_std", "must be positive"));
                }
                if *samples_per_node == Some(0) {
                    return Err(invalid("data.samples_per_node", "must be positive"));
                }
            }
            DataConfig::File {
                test_fraction,
                label_column,
                ..
            } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(invalid("data.test_fraction", "must lie in [0, 1)"));
                }
                if *label_column > self.loss.d {
                    return Err(invalid("data.label_column", "beyond the row width"));
                }
            }
        }
        if let Some(a) = self.schedule.a {
            if !(a > 0.0 && a.is_finite()) {
                return Err(invalid("schedule.a", "must be positive"));
            }
        }
        if self.schedule.kind != ScheduleKind::Constant
            && !(self.schedule.b > 0.0 && self.schedule.b.is_finite())
        {
            return Err(invalid("schedule.b", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_grad) {
            return Err(invalid(
                "p_grad",
                format!("{} is not a probability", self.p_grad),
            ));
        }
        let p_ok = |p: f64| p > 0.0 && p < 1.0;
        match &self.p_fire {
            Some(PFire::Uniform(p)) if !p_ok(*p) => {
                return Err(invalid("p_fire", "must lie in (0, 1)"))
            }
            Some(PFire::PerNode(ps)) => {
                if t.kind != TopologyKind::File && ps.len() != t.n {
                    return Err(invalid(
                        "p_fire",
                        format!("expected {} entries, got {}", t.n, ps.len()),
                    ));
                }
                if !ps.iter().all(|&p| p_ok(p)) {
                    return Err(invalid("p_fire", "every entry must lie in (0, 1)"));
                }
            }
            _ => {}
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every", "must be positive"));
        }
        if let InitConfig::Gaussian { std } = self.init {
            if !(std > 0.0 && std.is_finite()) {
                return Err(invalid("init.std", "must be positive"));
            }
        }
        if let Some(r) = &self.reference {
            if r.samples_per_node == 0 {
                return Err(invalid("reference.samples_per_node", "must be positive"));
            }
            if !(r.tolerance > 0.0) {
                return Err(invalid("reference.tolerance", "must be positive"));
            }
        }
        if !(self.max_norm > 0.0) {
            return Err(invalid("max_norm", "must be positive"));
        }
        Ok(())
    }
}
