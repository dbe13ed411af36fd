//! Flat `key=value` configuration files. Every key maps to one field of
//! [`TrainConfig`] or [`SynthTaskConfig`]; unknown and repeated keys are
//! rejected. Layering is default, then file, then command-line overrides.

use std::path::Path;
use std::str::FromStr;

use crate::data::{SynthTask, SynthTaskConfig};
use crate::error::{Error, Result};
use crate::hook::HookInitStrategy;
use crate::model::ModelKind;
use crate::train::TrainConfig;

/// Recognised keys, in the order they are written back out.
pub const KEYS: &[&str] = &[
    "model",
    "k",
    "heads",
    "rounds",
    "lambda",
    "d_a",
    "lr",
    "weight_decay",
    "epochs",
    "seed",
    "hook_init",
    "num_classes",
    "div_eps",
    "task",
    "dim",
    "n_min",
    "n_max",
    "n_clusters",
    "separation",
    "train_bags",
    "val_bags",
    "test_bags",
    "data_seed",
];

/// Keys stored with a checkpoint.
pub const MODEL_KEYS: &[&str] = &[
    "model",
    "k",
    "heads",
    "rounds",
    "lambda",
    "d_a",
    "lr",
    "weight_decay",
    "epochs",
    "seed",
    "hook_init",
    "num_classes",
    "div_eps",
    "dim",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: SynthTaskConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for `{key}`: {e}")))
}

impl Settings {
    /// Assigns one key. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let v = value.trim();
        match key {
            "model" => t.model = parse_value::<ModelKind>(key, v)?,
            "k" => t.hooks = parse_value(key, v)?,
            "heads" => t.heads = parse_value(key, v)?,
            "rounds" => t.rounds = parse_value(key, v)?,
            "lambda" => t.lambda = parse_value(key, v)?,
            "d_a" => t.attn_dim = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "weight_decay" => t.weight_decay = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "hook_init" => t.hook_init = parse_value::<HookInitStrategy>(key, v)?,
            "num_classes" => t.classes = parse_value(key, v)?,
            "div_eps" => t.div_eps = parse_value(key, v)?,
            "task" => s.task = parse_value::<SynthTask>(key, v)?,
            "dim" => s.dim = parse_value(key, v)?,
            "n_min" => s.n_min = parse_value(key, v)?,
            "n_max" => s.n_max = parse_value(key, v)?,
            "n_clusters" => s.n_clusters = parse_value(key, v)?,
            "separation" => s.separation = parse_value(key, v)?,
            "train_bags" => s.train_bags = parse_value(key, v)?,
            "val_bags" => s.val_bags = parse_value(key, v)?,
            "test_bags" => s.test_bags = parse_value(key, v)?,
            "data_seed" => s.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let s = &self.synth;
        Ok(match key {
            "model" => t.model.to_string(),
            "k" => t.hooks.to_string(),
            "heads" => t.heads.to_string(),
            "rounds" => t.rounds.to_string(),
            "lambda" => t.lambda.to_string(),
            "d_a" => t.attn_dim.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "hook_init" => t.hook_init.to_string(),
            "num_classes" => t.classes.to_string(),
            "div_eps" => t.div_eps.to_string(),
            "task" => s.task.to_string(),
            "dim" => s.dim.to_string(),
            "n_min" => s.n_min.to_string(),
            "n_max" => s.n_max.to_string(),
            "n_clusters" => s.n_clusters.to_string(),
            "separation" => s.separation.to_string(),
            "train_bags" => s.train_bags.to_string(),
            "val_bags" => s.val_bags.to_string(),
            "test_bags" => s.test_bags.to_string(),
            "data_seed" => s.seed.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    /// Applies a `key=value` text. `#` starts a comment line; blank lines are
    /// skipped; a key may appear at most once.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{}: expected key=value, got {line:?}", idx + 1))
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("{source}:{}: duplicate key `{key}`", idx + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", idx + 1)))?;
            seen.push(key.to_string());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn layered(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = file {
            s.apply_file(p)?;
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn to_text(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }
}
