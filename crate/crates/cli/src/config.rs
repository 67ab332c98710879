//! Run configuration: flat `key=value` lines with dotted keys.
//!
//! Sections: `encoder.*`, `train.*`, `stage_a.*` (transfer stage A),
//! `vocab.*`, `hpo.*`, `allreduce.*` and `search.<train field>.<type|lo|hi|values>`.

use std::collections::BTreeMap;

use mrc_core::allreduce::CommCostModel;
use mrc_core::encoder::EncoderConfig;
use mrc_core::hpo::{Dimension, SearchSpace};
use mrc_core::trainer::{TrainConfig, Variant};
use mrc_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

const SEARCH_FIELDS: [&str; 4] = ["type", "lo", "hi", "values"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

fn flatten_into(values: &mut BTreeMap<String, Value>, section: &str, v: impl Serialize) {
    let Value::Object(map) = serde_json::to_value(v).expect("config serialises") else {
        unreachable!("configs are structs")
    };
    for (k, v) in map {
        values.insert(format!("{section}.{k}"), v);
    }
}

/// A JSON literal when `raw` parses as one, otherwise a string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw == "none" {
        return Value::Null;
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "none".into(),
        other => other.to_string(),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        flatten_into(&mut values, "encoder", EncoderConfig::default());
        flatten_into(&mut values, "train", TrainConfig::default());
        flatten_into(&mut values, "stage_a", TrainConfig::default());
        values.insert("vocab.min_freq".into(), json!(1));
        values.insert("vocab.max_size".into(), json!(30000));
        values.insert("hpo.method".into(), json!("hyperband"));
        values.insert("hpo.max_budget".into(), json!(27.0));
        values.insert("hpo.eta".into(), json!(3));
        values.insert("hpo.random_trials".into(), json!(8));
        values.insert("hpo.slots".into(), json!(1));
        values.insert("hpo.seed".into(), json!(0));
        values.insert("allreduce.workers".into(), json!([1, 2, 4]));
        values.insert("allreduce.bytes_per_param".into(), json!(4.0));
        values.insert("allreduce.bandwidth".into(), json!(1.25e9));
        values.insert("allreduce.latency_per_hop".into(), json!(5e-5));
        values.insert("allreduce.compute_time_per_step".into(), Value::Null);
        for (name, dim) in SearchSpace::default_training().dims {
            insert_dimension(&mut values, &name, &dim);
        }
        RunConfig { values }
    }
}

fn insert_dimension(values: &mut BTreeMap<String, Value>, name: &str, dim: &Dimension) {
    let Value::Object(map) = serde_json::to_value(dim).expect("dimension serialises") else {
        unreachable!("dimensions are objects")
    };
    for (k, v) in map {
        values.insert(format!("search.{name}.{k}"), v);
    }
}

impl RunConfig {
    fn is_known(&self, key: &str) -> bool {
        if self.values.contains_key(key) {
            return true;
        }
        match key.split('.').collect::<Vec<_>>()[..] {
            ["search", dim, field] => self.values.contains_key(&format!("train.{dim}")) && SEARCH_FIELDS.contains(&field),
            _ => false,
        }
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.trim();
        if !self.is_known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), parse_value(raw));
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Applies every line of a config file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_assignment(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Sorted `key=value` lines; feeding them back through
    /// [`RunConfig::apply_text`] reproduces this configuration.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={}\n", render_value(v))).collect()
    }

    fn section<T: DeserializeOwned>(&self, section: &str) -> Result<T> {
        let prefix = format!("{section}.");
        let map: Map<String, Value> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|f| (f.to_string(), v.clone())))
            .collect();
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{section}: {e}")))
    }

    fn number<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.values[key].clone()).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let c: EncoderConfig = self.section("encoder")?;
        c.validate()?;
        Ok(c)
    }

    /// Train settings; `max_len` always follows the encoder.
    pub fn train(&self) -> Result<TrainConfig> {
        self.train_section("train")
    }

    pub fn stage_a(&self) -> Result<TrainConfig> {
        let c = self.train_section("stage_a")?;
        if c.variant != Variant::Binary {
            return Err(Error::Usage("stage_a.variant must be binary".into()));
        }
        Ok(c)
    }

    fn train_section(&self, section: &str) -> Result<TrainConfig> {
        let mut c: TrainConfig = self.section(section)?;
        c.max_len = self.number("encoder.max_len")?;
        c.validate()?;
        Ok(c)
    }

    pub fn vocab_limits(&self) -> Result<(usize, usize)> {
        Ok((self.number("vocab.min_freq")?, self.number("vocab.max_size")?))
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let mut dims: BTreeMap<String, Map<String, Value>> = BTreeMap::new();
        for (k, v) in &self.values {
            if let Some(rest) = k.strip_prefix("search.") {
                let (dim, field) = rest.rsplit_once('.').expect("search keys have three parts");
                dims.entry(dim.to_string()).or_default().insert(field.to_string(), v.clone());
            }
        }
        let mut space = SearchSpace::default();
        for (name, mut fields) in dims {
            if fields.get("type") == Some(&Value::String("off".into())) {
                continue;
            }
            // fields belonging to other dimension types are ignored
            match fields.get("type").and_then(Value::as_str) {
                Some("choice") => fields.retain(|k, _| k == "type" || k == "values"),
                _ => fields.retain(|k, _| k != "values"),
            }
            let dim: Dimension = serde_json::from_value(Value::Object(fields)).map_err(|e| Error::Config(format!("search.{name}: {e}")))?;
            space.dims.insert(name, dim);
        }
        space.validate()?;
        Ok(space)
    }

    pub fn hpo_method(&self) -> Result<String> {
        self.number("hpo.method")
    }

    pub fn hpo_numbers(&self) -> Result<(f64, u32, usize, usize, u64)> {
        Ok((
            self.number("hpo.max_budget")?,
            self.number("hpo.eta")?,
            self.number("hpo.random_trials")?,
            self.number("hpo.slots")?,
            self.number("hpo.seed")?,
        ))
    }

    pub fn workers(&self) -> Result<Vec<usize>> {
        let w: Vec<usize> = self.number("allreduce.workers")?;
        if w.is_empty() || w.contains(&0) {
            return Err(Error::Config("allreduce.workers must list positive worker counts".into()));
        }
        Ok(w)
    }

    /// The cost model; a missing compute time is filled with `measured`.
    pub fn cost_model(&self, measured: f64) -> Result<CommCostModel> {
        let compute: Option<f64> = self.number("allreduce.compute_time_per_step")?;
        let m = CommCostModel {
            bytes_per_param: self.number("allreduce.bytes_per_param")?,
            bandwidth: self.number("allreduce.bandwidth")?,
            latency_per_hop: self.number("allreduce.latency_per_hop")?,
            compute_time_per_step: compute.unwrap_or(measured),
        };
        m.validate()?;
        Ok(m)
    }

    /// This configuration with `train.<name>` overridden by each search
    /// value.
    pub fn with_trial(&self, trial: &mrc_core::hpo::Config) -> Result<RunConfig> {
        let mut out = self.clone();
        for (name, v) in trial {
            let key = format!("train.{name}");
            if !self.values.contains_key(&key) {
                return Err(Error::Config(format!("search dimension `{name}` is not a train setting")));
            }
            out.values.insert(key, v.clone());
        }
        Ok(out)
    }
}
