//! Run configuration: built-in defaults, then a TOML/JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use ftlab::lora::LoraConfig;
use ftlab::model::{GenerationParams, TransformerConfig};
use ftlab::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub chunk_len: usize,
    pub test_fraction: f64,
    /// Date split instead of the hash split when set.
    pub cutoff: Option<NaiveDate>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            chunk_len: ftlab::corpus::DEFAULT_CHUNK_LEN,
            test_fraction: 0.1,
            cutoff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDef {
    Local {
        id: String,
        model: PathBuf,
        #[serde(default)]
        adapters: Option<PathBuf>,
    },
    Remote { id: String, url: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Source of every seed below; they are overwritten from it.
    pub seed: u64,
    pub threads: usize,
    pub timestamps: bool,
    pub model: TransformerConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub generation: GenerationParams,
    pub backends: Vec<BackendDef>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            timestamps: true,
            model: TransformerConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            generation: GenerationParams::default(),
            backends: Vec::new(),
        }
    }
}

/// Overlays `patch` on `base`. Objects merge key by key and reject keys the
/// base does not know; a tagged enum (object with "kind") or any other value
/// replaces wholesale.
fn merge(base: &mut Value, patch: Value, at: &str) -> anyhow::Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!(Invalid(format!("unknown config key {here:?}"))),
                }
            }
        }
        (slot, p) => *slot = p,
    }
    Ok(())
}

fn read_file(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value = if is_toml {
        let t: toml::Value =
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?
    };
    if !value.is_object() {
        bail!(Invalid(format!("config {} must be a table/object", path.display())));
    }
    Ok(value)
}

/// Dotted-path flag overrides, e.g. `("train.epochs", json!(3))`.
pub type Overrides = Vec<(&'static str, Value)>;

pub fn resolve(file: Option<&Path>, overrides: Overrides) -> anyhow::Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        merge(&mut value, read_file(path)?, "")?;
    }
    for (path, v) in overrides {
        let mut patch = v;
        for key in path.rsplit('.') {
            let mut m = Map::new();
            m.insert(key.to_string(), patch);
            patch = Value::Object(m);
        }
        merge(&mut value, patch, "")?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Invalid(format!("config: {e}")))?;
    cfg.model.seed = cfg.seed;
    cfg.lora.seed = cfg.seed.wrapping_add(1);
    cfg.train.seed = cfg.seed;
    cfg.generation.seed = cfg.seed;
    if cfg.threads == 0 {
        bail!(Invalid("threads must be at least 1".into()));
    }
    Ok(cfg)
}
