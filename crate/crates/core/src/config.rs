//! Run configuration: network, training and data settings in one document.
//!
//! On disk it is a flat JSON object with dotted keys (`"net.hr_size": 64`),
//! written in sorted key order. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{config_err, Error, Result};
use crate::nets::NetConfig;
use crate::synth::{ParsingLayout, SynthConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory.
    pub corpus: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the scene generator.
    pub seed: u64,
    pub parsing_layout: ParsingLayout,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: "corpus".to_string(),
            n_train: 512,
            n_test: 64,
            seed: 7,
            parsing_layout: ParsingLayout::Global5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Directory receiving checkpoints, logs and reports.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: "runs/default".to_string(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| config_err!("config key {key:?} conflicts with a scalar"))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

impl RunConfig {
    /// Desk defaults with paper-scale geometry and batch size.
    pub fn paper_scale() -> Self {
        let mut c = RunConfig::default();
        c.net = NetConfig::paper_scale();
        c.train.batch_size = 14;
        c
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_value(&self) -> Value {
        Value::Object(self.to_flat().into_iter().collect())
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let nested = unflatten(flat)?;
        serde_json::from_value(nested).map_err(|e| config_err!("{e}"))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat_value()).expect("config serializes");
        s.push('\n');
        s
    }

    /// Parse a flat document. Keys absent from the document keep defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_json(text)?;
        Ok(cfg)
    }

    /// Override the keys present in a flat document; others are kept.
    pub fn apply_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text).map_err(|e| config_err!("config is not JSON: {e}"))?;
        let obj = v.as_object().ok_or_else(|| config_err!("config must be a JSON object"))?;
        let mut flat = self.to_flat();
        for (k, v) in obj {
            if !flat.contains_key(k) {
                return Err(config_err!("unknown config key {k:?}"));
            }
            flat.insert(k.clone(), v.clone());
        }
        *self = Self::from_flat(&flat)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_json(&text)
    }

    /// Override one dotted key; `value` is parsed as JSON, falling back to a
    /// plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut flat = self.to_flat();
        if !flat.contains_key(key) {
            return Err(config_err!("unknown config key {key:?}"));
        }
        let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        flat.insert(key.to_string(), v);
        *self = Self::from_flat(&flat)?;
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            hr_size: self.net.hr_size,
            scale_factor: self.net.scale_factor,
            num_landmarks: self.net.num_landmarks,
            parsing_layout: self.data.parsing_layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.synth().validate()?;
        if self.net.num_parsing_maps != self.data.parsing_layout.channels() {
            return Err(config_err!(
                "net.num_parsing_maps = {} but parsing layout {:?} has {} channels",
                self.net.num_parsing_maps,
                self.data.parsing_layout,
                self.data.parsing_layout.channels()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut c = RunConfig::default();
        c.train.learning_rate = 1e-3;
        c.data.parsing_layout = ParsingLayout::Local9;
        let text = c.to_json();
        assert!(text.contains("\"net.hr_size\": 64"));
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"net.hr": 64}"#).is_err());
        assert!(RunConfig::from_json(r#"{"net.hr_size": "big"}"#).is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        c.set("train.mode", "fsrgan").unwrap();
        c.set("net.num_hourglass", "4").unwrap();
        assert_eq!(c.train.mode, "fsrgan");
        assert_eq!(c.net.num_hourglass, 4);
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::from_json(r#"{"train.max_steps": 5}"#).unwrap();
        assert_eq!(c.train.max_steps, 5);
        assert_eq!(c.net, NetConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn parsing_channels_must_match_layout() {
        let mut c = RunConfig::default();
        c.data.parsing_layout = ParsingLayout::Local9;
        assert!(c.validate().is_err());
        c.net.num_parsing_maps = 9;
        c.validate().unwrap();
    }
}
