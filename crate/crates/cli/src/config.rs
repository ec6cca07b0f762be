//! Run configuration: one JSON document drives every subcommand, with
//! `--set key.path=value` overrides applied before schema validation so
//! a typo in an override is rejected exactly like a typo in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ensemblegen_core::completion::CompletionConfig;
use ensemblegen_core::constraint::LcTrainPlan;
use ensemblegen_core::cvae::CvaeConfig;
use ensemblegen_core::ensemble::{OrderingPolicy, SyntheticConfig};

use crate::CliError;

/// Where the ensemble comes from: generated on the fly or read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Ensb { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

/// Evaluation protocol: which realizations train, which one is held out,
/// and how much of it is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Realization ids used for ensemble training. Empty means every
    /// realization except the held-out one.
    pub train_realizations: Vec<usize>,
    /// Held-out realization id. None means the last realization.
    pub held_out: Option<usize>,
    /// Observed fraction of the held-out realization.
    pub alpha: f64,
    pub policy: OrderingPolicy,
    /// Probe locations for fragmentation and moment checks.
    pub n_probes: usize,
    /// Add decoder-scale observation noise to generated series.
    pub emit_noise: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            train_realizations: Vec::new(),
            held_out: None,
            alpha: 0.8,
            policy: OrderingPolicy::SeededRandom,
            n_probes: 32,
            emit_noise: false,
        }
    }
}

/// Sweep axes for the `ablate` command. Empty axes fall back to the
/// standard sweep for the dataset at hand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub r_train_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub policies: Vec<OrderingPolicy>,
    pub seeds: Vec<u64>,
    pub held_out: Option<usize>,
}

/// The one configuration document. Only `output_dir` is mandatory; every
/// other field has a sensible default so a two-line config is viable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub cvae: CvaeConfig,
    #[serde(default)]
    pub plan: LcTrainPlan,
    #[serde(default)]
    pub completion: CompletionConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub ablation: AblationGrid,
    /// Master seed; per-stage seeds are derived from tagged substreams.
    #[serde(default)]
    pub seed: u64,
    /// Every artifact the CLI writes lands under this directory.
    pub output_dir: PathBuf,
}

/// A loaded config plus the hash that stamps every artifact.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// SHA-256 of the canonical JSON serialization after overrides.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Parse one `key.path=value` override. The value is parsed as JSON when
/// possible and falls back to a plain string, so `--set cvae.epochs=40`,
/// `--set data.synthetic.noise_sigma=0.5`, and
/// `--set output_dir=run7` all work without quoting gymnastics.
fn parse_override(spec: &str) -> Result<(Vec<String>, serde_json::Value), CliError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Usage(format!("override '{spec}' is not of the form key.path=value"))
    })?;
    if path.is_empty() {
        return Err(CliError::Usage(format!("override '{spec}' has an empty key path")));
    }
    let segments: Vec<String> = path.split('.').map(str::to_string).collect();
    if segments.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override '{spec}' has an empty path segment")));
    }
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok((segments, value))
}

/// Walk the document tree and set a leaf, creating intermediate objects
/// for unknown segments (schema validation will reject any typo on the
/// way back out). Numeric segments index into arrays.
fn apply_override(
    doc: &mut serde_json::Value,
    segments: &[String],
    value: serde_json::Value,
    spec: &str,
) -> Result<(), CliError> {
    let mut node = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match node {
            serde_json::Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    CliError::Usage(format!(
                        "override '{spec}': '{seg}' must be an array index"
                    ))
                })?;
                if idx >= items.len() {
                    return Err(CliError::Usage(format!(
                        "override '{spec}': index {idx} out of bounds for length {}",
                        items.len()
                    )));
                }
                if last {
                    items[idx] = value;
                    return Ok(());
                }
                node = &mut items[idx];
            }
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), value);
                    return Ok(());
                }
                node = map
                    .entry(seg.clone())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()));
            }
            other => {
                return Err(CliError::Usage(format!(
                    "override '{spec}': cannot descend into {} at '{seg}'",
                    json_kind(other)
                )));
            }
        }
    }
    Ok(())
}

fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a boolean",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}

/// Load the config file, apply overrides, validate the schema, and hash
/// the result. All failures here are usage errors.
pub fn load_config(path: &Path, sets: &[String]) -> Result<LoadedConfig, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("config file not found: {}", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    for spec in sets {
        let (segments, value) = parse_override(spec)?;
        apply_override(&mut doc, &segments, value, spec)?;
    }
    let config: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Usage(format!("config rejected: {e}")))?;
    if config.output_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("output_dir must not be empty".into()));
    }
    let canonical = serde_json::to_vec(&config)
        .map_err(|e| CliError::Usage(format!("config serialization failed: {e}")))?;
    let hash = sha256_hex(&canonical);
    Ok(LoadedConfig { config, hash })
}
