//! TOML run configurations. Every key must be present: templates from
//! `vista config` carry all defaults, and a file that omits a key is
//! rejected rather than silently filled.

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vista::backbone::{ModelConfig, PretrainOptions};
use vista::phantom::{ContrastTable, PhantomSpec, ShiftKind, ShiftSpec, DEFAULT_SHIFT_STRENGTH};
use vista::VistaConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    /// Scales the built-in target shift; 0 is neutral.
    pub strength: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub cases: usize,
    pub phantom: PhantomSpec,
    pub contrast: ContrastTable,
    pub shift: ShiftConfig,
}

impl SimulateConfig {
    pub fn source() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            cases: 20,
            phantom: PhantomSpec { seed: 1, ..Default::default() },
            contrast: ContrastTable::default(),
            shift: ShiftConfig { kind: ShiftKind::None, strength: DEFAULT_SHIFT_STRENGTH, seed: 0 },
        }
    }

    pub fn target() -> Self {
        Self {
            cases: 30,
            phantom: PhantomSpec { seed: 3, ..Default::default() },
            shift: ShiftConfig { kind: ShiftKind::Both, strength: DEFAULT_SHIFT_STRENGTH, seed: 4 },
            ..Self::source()
        }
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        match self.shift.kind {
            ShiftKind::None => ShiftSpec { seed: self.shift.seed, ..ShiftSpec::none(self.phantom.num_sequences) },
            kind => ShiftSpec::default_target(kind, self.shift.strength, self.shift.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: PretrainOptions,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, model: ModelConfig::default(), train: PretrainOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub schema_version: u32,
    pub adapt: VistaConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, adapt: VistaConfig::default() }
    }
}

/// Dotted paths of keys present in `template` but absent from `given`.
fn missing_keys(template: &toml::Table, given: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in template {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, given.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(t), Some(toml::Value::Table(g))) => missing_keys(t, g, &path, out),
            _ => {}
        }
    }
}

/// Parses `text` as a complete configuration of type `T`.
pub fn parse<T: Serialize + DeserializeOwned>(text: &str, template: &T) -> Result<T> {
    let given: toml::Table = text.parse().context("config is not valid TOML")?;
    match given.get("schema_version").and_then(toml::Value::as_integer) {
        Some(v) if v == SCHEMA_VERSION as i64 => {}
        Some(v) => bail!("unsupported schema_version {v} (expected {SCHEMA_VERSION})"),
        None => bail!("missing config key `schema_version`"),
    }
    let template = toml::Table::try_from(template).context("serialising config template")?;
    let mut missing = Vec::new();
    missing_keys(&template, &given, "", &mut missing);
    if !missing.is_empty() {
        let keys: Vec<String> = missing.iter().map(|k| format!("`{k}`")).collect();
        bail!("missing config key {}", keys.join(", "));
    }
    given.try_into().context("invalid config")
}

pub fn load<T: Serialize + DeserializeOwned>(path: &std::path::Path, template: &T) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text, template).with_context(|| format!("config {}", path.display()))
}

pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
