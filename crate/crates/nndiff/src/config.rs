//! Flat `key = value` config files with `#` comments.
//!
//! Training keys: `architecture`, `epochs`, `batch_size`, `learning_rate`,
//! `rng_seed`, optional `sample_limit`, optional `model_id`.
//!
//! Generation keys: `lambda1`, `lambda2`, `step`, `threshold`,
//! `coverage_target`, `max_iters`, `max_cycles`, `constraint`, `rng_seed`,
//! `scale_outputs`, optional `include_dense_coverage`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::generator::GenerationConfig;
use crate::trainer::{ArchLayer, TrainConfig};

/// Parses the `key = value` lines; duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if out.insert(key.clone(), value).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate key '{key}'")));
        }
    }
    Ok(out)
}

fn required<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::InvalidConfig(format!("missing key '{key}'")))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("key '{key}': bad value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "key '{key}': bad boolean '{other}'"
        ))),
    }
}

pub fn train_config_from_str(text: &str, default_model_id: &str) -> Result<TrainConfig> {
    let kv = parse_kv(text)?;
    Ok(TrainConfig {
        model_id: kv
            .get("model_id")
            .cloned()
            .unwrap_or_else(|| default_model_id.to_string()),
        architecture: ArchLayer::parse_list(required(&kv, "architecture")?)?,
        epochs: parse_num("epochs", required(&kv, "epochs")?)?,
        batch_size: parse_num("batch_size", required(&kv, "batch_size")?)?,
        learning_rate: parse_num("learning_rate", required(&kv, "learning_rate")?)?,
        rng_seed: parse_num("rng_seed", required(&kv, "rng_seed")?)?,
        sample_limit: match kv.get("sample_limit") {
            None => None,
            Some(v) => Some(parse_num("sample_limit", v)?),
        },
    })
}

pub fn load_train_config(path: &Path, default_model_id: &str) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    train_config_from_str(&text, default_model_id)
}

/// `input_shape` is needed to materialize the `additive` constraint mask.
pub fn generation_config_from_str(text: &str, input_shape: &[usize]) -> Result<GenerationConfig> {
    let kv = parse_kv(text)?;
    let cfg = GenerationConfig {
        lambda1: parse_num("lambda1", required(&kv, "lambda1")?)?,
        lambda2: parse_num("lambda2", required(&kv, "lambda2")?)?,
        step_size: parse_num("step", required(&kv, "step")?)?,
        threshold: parse_num("threshold", required(&kv, "threshold")?)?,
        desired_coverage: parse_num("coverage_target", required(&kv, "coverage_target")?)?,
        max_iters_per_seed: parse_num("max_iters", required(&kv, "max_iters")?)?,
        max_cycles: parse_num("max_cycles", required(&kv, "max_cycles")?)?,
        constraint: ConstraintSpec::parse(required(&kv, "constraint")?, input_shape)?,
        rng_seed: parse_num("rng_seed", required(&kv, "rng_seed")?)?,
        scale_outputs: parse_bool("scale_outputs", required(&kv, "scale_outputs")?)?,
        include_dense_coverage: match kv.get("include_dense_coverage") {
            None => true,
            Some(v) => parse_bool("include_dense_coverage", v)?,
        },
        threads: 1,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_generation_config(path: &Path, input_shape: &[usize]) -> Result<GenerationConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    generation_config_from_str(&text, input_shape)
}
