//! Run configuration: one JSON document with a `model` and a `train` section.
//!
//! Every key is required. The document is checked against the key list
//! before deserialization so errors name the offending key by path.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let template = serde_json::to_value(RunConfig::default())?;
        check_keys(&template, &doc, "")?;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Dotted paths of every accepted key, in document order.
    pub fn key_list() -> Vec<String> {
        let template = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        collect_keys(&template, "", &mut out);
        out
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_keys(template: &Value, doc: &Value, prefix: &str) -> Result<()> {
    let Value::Object(want) = template else {
        return Ok(());
    };
    let Value::Object(got) = doc else {
        let what = if prefix.is_empty() { "config" } else { prefix };
        return Err(Error::Config(format!("{what} must be a JSON object")));
    };
    for key in got.keys() {
        if !want.contains_key(key) {
            return Err(Error::Config(format!("unknown key `{}`", join(prefix, key))));
        }
    }
    for (key, sub) in want {
        match got.get(key) {
            None => return Err(Error::Config(format!("missing key `{}`", join(prefix, key)))),
            Some(v) => check_keys(sub, v, &join(prefix, key))?,
        }
    }
    Ok(())
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (key, sub) in map {
            let path = join(prefix, key);
            if sub.is_object() {
                collect_keys(sub, &path, out);
            } else {
                out.push(path);
            }
        }
    }
}
