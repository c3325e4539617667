//! Layered run configuration. Built-in defaults are overlaid by a TOML file,
//! then by `FTM_<SECTION>__<KEY>` environment variables, then by
//! `--set section.key=value` flags.

use std::path::Path;

use ftm_core::synth::CorpusSpec;
use ftm_core::{FtmError, Invocation, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "FTM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        check_model_fits_corpus(&self.model, &self.corpus)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FtmError::Config(e.to_string()))
    }
}

/// The model must read the corpus' stacked features and predict its phones.
pub fn check_model_fits_corpus(model: &ModelConfig, corpus: &CorpusSpec) -> Result<()> {
    let stacked = corpus.raw_dim * (2 * corpus.context + 1);
    if model.input_dim != stacked {
        return Err(FtmError::Config(format!(
            "model.input_dim={} but the corpus yields {stacked}-d stacked features",
            model.input_dim
        )));
    }
    if model.phone_alphabet != corpus.phone_alphabet {
        return Err(FtmError::Config(format!(
            "model.phone_alphabet={} but corpus.phone_alphabet={}",
            model.phone_alphabet, corpus.phone_alphabet
        )));
    }
    Ok(())
}

/// Parses `vt`, `tb` or `vt+tb`.
pub fn parse_train_sets(s: &str) -> Result<Vec<Invocation>> {
    let mut sets = Vec::new();
    for part in s.split('+') {
        let inv: Invocation = part.trim().parse()?;
        if !sets.contains(&inv) {
            sets.push(inv);
        }
    }
    sets.sort();
    Ok(sets)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(s: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

fn set_path(table: &mut Table, path: &[&str], value: Value, origin: &str) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| FtmError::Config(format!("{origin}: empty key")))?;
    let mut t = table;
    for p in parents {
        t = match t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(FtmError::Config(format!("{origin}: {p} is not a section"))),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Resolves defaults < `file` < `env` < `sets`. `env` is usually
/// `std::env::vars()`; only `FTM_<SECTION>__<KEY>` names are read.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
) -> Result<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).map_err(|e| FtmError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FtmError::Config(format!("{}: {e}", path.display())))?;
        let over: Table =
            toml::from_str(&text).map_err(|e| FtmError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
        .collect();
    env.sort();
    for (k, v) in env {
        let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = key.split("__").collect();
        set_path(&mut table, &path, parse_value(&v), &k)?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| FtmError::Config(format!("--set expects key=value, got {s:?}")))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        set_path(&mut table, &path, parse_value(v.trim()), s)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| FtmError::Config(e.to_string()))
}
