//! Run configuration: defaults derived from the seed, then a JSON file of
//! flat dotted keys, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tit_core::data::Vocab;
use tit_core::model::ModelConfig;
use tit_core::pipeline::{DeskSpec, StageConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DeskSpec,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub stage4: StageConfig,
    pub beam: usize,
    pub top_n: usize,
}

impl RunConfig {
    pub fn defaults(seed: u64) -> Result<Self, CliError> {
        let data = DeskSpec::new(seed);
        let [stage1, stage2, stage3, stage4] = data.stages()?;
        Ok(Self {
            seed,
            data,
            model: ModelConfig::desk(Vocab::latin().len()),
            stage1,
            stage2,
            stage3,
            stage4,
            beam: 5,
            top_n: 5,
        })
    }

    pub fn stage(&self, n: u8) -> &StageConfig {
        match n {
            1 => &self.stage1,
            2 => &self.stage2,
            3 => &self.stage3,
            _ => &self.stage4,
        }
    }

    pub fn stages(&self) -> [StageConfig; 4] {
        [
            self.stage1.clone(),
            self.stage2.clone(),
            self.stage3.clone(),
            self.stage4.clone(),
        ]
    }

    /// Resolve the configuration. The seed comes first because every
    /// default depends on it; the remaining keys apply in order.
    pub fn load(file: Option<&Path>, seed: Option<u64>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let file_keys = match file {
            Some(p) => read_flat(p)?,
            None => Vec::new(),
        };
        let mut keys: Vec<(String, Value)> = file_keys.into_iter().chain(overrides.iter().cloned()).collect();
        if let Some(s) = seed {
            keys.push(("seed".into(), Value::from(s)));
        }
        let seed = match keys.iter().rev().find(|(k, _)| k == "seed") {
            Some((_, v)) => v
                .as_u64()
                .ok_or_else(|| CliError::Usage(format!("seed must be a non-negative integer, got {v}")))?,
            None => 1,
        };
        let mut tree = serde_json::to_value(Self::defaults(seed)?)
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for (k, v) in keys.into_iter().filter(|(k, _)| k != "seed") {
            set_dotted(&mut tree, &k, v)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

fn read_flat(path: &Path) -> Result<Vec<(String, Value)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(CliError::Usage(format!(
            "config file {} must hold one object of dotted keys",
            path.display()
        ))),
    }
}

/// Replace the value at `a.b.c`; the key must already exist.
pub fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown config key `{key}`"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = node.as_object_mut().ok_or_else(unknown)?;
        let child = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}

/// `key=value`, where the value is JSON when it parses and a string
/// otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
