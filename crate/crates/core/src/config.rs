//! JSON run configuration with dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_synthetic, infer_topology, load_manifest, read_manifest_rows, DomainData, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::PadConfig;
use crate::network::ModelConfig;
use crate::trainer::{Ablation, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SODA_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Exactly one of `synthetic` and `manifest` must be set. Giving a
    /// manifest without mentioning `synthetic` unsets the latter.
    pub synthetic: Option<SyntheticSpec>,
    pub manifest: Option<PathBuf>,
    /// Re-split the target domain so this fraction is labeled.
    pub target_labeled_fraction: Option<f64>,
    /// Fraction of the labeled target set held out for model selection.
    pub validation_fraction: f64,
    /// Seed of the target re-split and the validation hold-out.
    pub split_seed: u64,
    pub pad: PadConfig,
    pub ablation: Ablation,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            synthetic: Some(SyntheticSpec::default()),
            manifest: None,
            target_labeled_fraction: None,
            validation_fraction: 0.2,
            split_seed: 0,
            pad: PadConfig::default(),
            ablation: Ablation::default(),
            output_dir: None,
        }
    }
}

/// Sets `path` (dot-separated) in `doc` to `raw`, parsed as JSON when it is
/// valid JSON and taken as a string otherwise. Missing objects are created.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::invalid(format!("bad override key `{path}`")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if node.get(*key).is_none_or(Value::is_null) {
            node[*key] = Value::Object(Default::default());
        }
        node = node
            .get_mut(*key)
            .filter(|n| n.is_object())
            .ok_or_else(|| Error::invalid(format!("override `{path}`: `{key}` is not an object")))?;
    }
    node[*keys.last().expect("non-empty")] = value;
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document, applies `key=value` overrides in order, and
    /// validates the result.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        if !doc.is_object() {
            return Err(Error::invalid("config must be a JSON object"));
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        // a manifest replaces the default synthetic spec unless one is given
        if doc.get("manifest").is_some_and(|m| !m.is_null()) && doc.get("synthetic").is_none() {
            doc["synthetic"] = Value::Null;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_owned(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::invalid(
                    "exactly one of `synthetic` and `manifest` must be set",
                ))
            }
        }
        if let Some(f) = self.target_labeled_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("target_labeled_fraction must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        self.model.extractor.validate()?;
        if self.model.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        self.pad.validate()?;
        self.train.validate()
    }

    /// Explicit directory, else the environment default, else `soda-runs`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("soda-runs"))
    }

    /// Training settings with the ablation applied and checkpoint and log
    /// paths defaulted into the output directory.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        self.ablation.apply(&mut t);
        let out = self.output_dir();
        t.checkpoint_path.get_or_insert_with(|| out.join("model.ckpt"));
        t.log_path.get_or_insert_with(|| out.join("metrics.jsonl"));
        t
    }

    /// Loads or generates the datasets and splits off the validation set.
    pub fn load_data(&self) -> Result<(DomainData, Vec<Sample>)> {
        let mut data = match (&self.synthetic, &self.manifest) {
            (Some(spec), None) => {
                let e = &self.model.extractor;
                if spec.canvas_size != e.height || spec.canvas_size != e.width || e.channels != 1 {
                    return Err(Error::invalid(format!(
                        "synthetic canvas {0}x{0}x1 does not match the model input {1}x{2}x{3}",
                        spec.canvas_size, e.height, e.width, e.channels
                    )));
                }
                generate_synthetic(spec)?
            }
            (None, Some(path)) => {
                let topology = infer_topology(&read_manifest_rows(path)?)?;
                let e = &self.model.extractor;
                load_manifest(path, &topology, (e.channels, e.height, e.width))?
            }
            _ => return Err(Error::invalid("exactly one of `synthetic` and `manifest` must be set")),
        };
        if let Some(f) = self.target_labeled_fraction {
            data.resplit_target(f, self.split_seed)?;
        }
        let validation = data.take_validation(self.validation_fraction, self.split_seed)?;
        Ok((data, validation))
    }
}
