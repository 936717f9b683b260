use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use simbase::data::SynthSpec;
use simbase::model::ModelConfig;
use simbase::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data/synthetic".into(),
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

/// Synthetic data settings. Snippet count and feature widths come from the
/// model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub snr: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_val: 100,
            snr: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "runs/default/checkpoint".into(),
            history: "runs/default/history.json".into(),
            metrics: "runs/default/metrics.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: simbase::verify::DEFAULT_SEEDS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub output: OutputConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn synth_spec(&self, split: Split) -> SynthSpec {
        let (n_samples, seed) = match split {
            Split::Train => (self.synth.n_train, self.synth.seed),
            // Offset so the two splits never share a stream.
            Split::Val => (self.synth.n_val, self.synth.seed.wrapping_add(1)),
        };
        SynthSpec {
            n_samples,
            n_snippets: self.model.l1,
            d_video: self.model.d_in_video,
            d_text: self.model.d_in_text,
            snr: self.synth.snr,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        for split in [Split::Train, Split::Val] {
            self.synth_spec(split).validate().map_err(|e| format!("synth: {e}"))?;
        }
        if self.data.train_split.is_empty() || self.data.val_split.is_empty() {
            return Err("split names must be nonempty".into());
        }
        if self.gradcheck.seeds == 0 {
            return Err("gradcheck.seeds must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Split {
    Train,
    Val,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c=value`. The key must already exist; the value is parsed as
/// JSON and falls back to a plain string.
fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not key=value"))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| format!("unknown config key {key:?}"))?;
    }
    *node = parse_value(raw);
    Ok(())
}

/// Reads the optional config file, applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| format!("after overrides: {e}"))?;
    config.validate()?;
    Ok(config)
}
