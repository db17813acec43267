//! Resolved run configuration and its flat dotted-key JSON form.

use std::collections::BTreeMap;
use std::path::Path;

use hitlseg::data::{BiasProfile, GroupThresholds};
use hitlseg::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Generation seed.
    pub seed: u64,
    /// Square image side.
    pub size: usize,
    pub test_per_concept: usize,
    pub quotas: BTreeMap<String, usize>,
    pub modality_weights: BTreeMap<String, f64>,
    pub attribute_weights: BTreeMap<String, f64>,
    pub head_threshold: usize,
    pub tail_threshold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = BiasProfile::default();
        let th = GroupThresholds::default();
        Self {
            seed: 0,
            size: p.image_size.0,
            test_per_concept: 30,
            quotas: p.concept_quotas,
            modality_weights: p.modality_weights,
            attribute_weights: p.attribute_weights,
            head_threshold: th.head,
            tail_threshold: th.tail,
        }
    }
}

impl DataConfig {
    pub fn profile(&self) -> BiasProfile {
        BiasProfile {
            concept_quotas: self.quotas.clone(),
            modality_weights: self.modality_weights.clone(),
            attribute_weights: self.attribute_weights.clone(),
            image_size: (self.size, self.size),
        }
    }

    pub fn thresholds(&self) -> GroupThresholds {
        GroupThresholds { head: self.head_threshold, tail: self.tail_threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Oracle corrective clicks per test sample.
    pub clicks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub step: f64,
    /// Parameter entries checked per tensor in the composed-model check.
    pub model_entries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 20, step: 1e-3, model_entries: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub session_ttl_secs: u64,
    pub static_dir: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: hitlseg_server::DEFAULT_PORT, session_ttl_secs: 3600, static_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
    pub serve: ServeConfig,
}

// Map-valued sections accept new keys; everything else must already exist.
const OPEN_PREFIXES: [&str; 3] = ["data.quotas.", "data.modality_weights.", "data.attribute_weights."];

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap_or_default();
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted key collides with a scalar key");
        }
        node.insert(last.to_string(), v.clone());
    }
    Value::Object(root)
}

/// Layered configuration: defaults, then a file, then `key=value` overrides.
pub struct Resolver {
    flat: BTreeMap<String, Value>,
}

impl Resolver {
    pub fn new() -> Self {
        let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        Self { flat: flatten(&defaults) }
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), String> {
        let known = self.flat.contains_key(key);
        if !known && !OPEN_PREFIXES.iter().any(|p| key.starts_with(p) && key.len() > p.len()) {
            return Err(format!("unknown config key `{key}`"));
        }
        self.flat.insert(key.to_string(), value);
        Ok(())
    }

    /// `key=value`; the value is parsed as JSON and falls back to a string.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), String> {
        let (key, raw) = pair.split_once('=').ok_or_else(|| format!("override `{pair}` is not key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not JSON: {e}", path.display()))?;
        if !v.is_object() {
            return Err(format!("config {} must be a JSON object", path.display()));
        }
        for (k, v) in flatten(&v) {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig, String> {
        let cfg: RunConfig = serde_json::from_value(unflatten(&self.flat)).map_err(|e| format!("invalid config: {e}"))?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        cfg.data.profile().validate().map_err(|e| e.to_string())?;
        if cfg.data.size < 16 || !cfg.data.size.is_multiple_of(4) {
            return Err(format!("data.size must be a multiple of 4 and at least 16, got {}", cfg.data.size));
        }
        if cfg.data.tail_threshold > cfg.data.head_threshold {
            return Err("data.tail_threshold exceeds data.head_threshold".into());
        }
        Ok(cfg)
    }
}

impl Default for Resolver {
    fn default() -> Self {
        Self::new()
    }
}

/// Flat dotted-key JSON of a resolved config, as echoed into output
/// directories.
pub fn echo(cfg: &RunConfig) -> String {
    let flat = flatten(&serde_json::to_value(cfg).expect("config serializes"));
    let mut text = serde_json::to_string_pretty(&flat).expect("map serializes");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flatten_round_trips_defaults() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        assert_eq!(unflatten(&flatten(&v)), v);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut r = Resolver::new();
        r.set_pair("train.uncertainty.beta_vl=0.25").unwrap();
        r.set_pair("data.quotas.cross=70").unwrap();
        r.set_pair("serve.static_dir=ui/dist").unwrap();
        let cfg = r.resolve().unwrap();
        assert_eq!(cfg.train.uncertainty.beta_vl, 0.25);
        assert_eq!(cfg.data.quotas["cross"], 70);
        assert_eq!(cfg.serve.static_dir.as_deref(), Some("ui/dist"));
        assert!(r.set_pair("train.betavl=1").is_err());
        assert!(r.set_pair("data.quotas.=1").is_err());
        assert!(r.set_pair("no-equals").is_err());
    }

    #[test]
    fn wrong_types_and_ranges_fail_resolution() {
        let mut r = Resolver::new();
        r.set("train.epochs", json!("ten")).unwrap();
        assert!(r.resolve().is_err());
        let mut r = Resolver::new();
        r.set("train.epochs", json!(0)).unwrap();
        assert!(r.resolve().is_err());
        let mut r = Resolver::new();
        r.set("data.size", json!(30)).unwrap();
        assert!(r.resolve().is_err());
    }

    #[test]
    fn echo_is_flat() {
        let text = echo(&RunConfig::default());
        let v: BTreeMap<String, Value> = serde_json::from_str(&text).unwrap();
        assert!(v.values().all(|x| !x.is_object()));
        assert_eq!(v["train.r"], json!(0.3));
    }
}
