//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::data::{parse_ratios, Task};
use crate::objectives::SamplingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    MolOnly,
    InterOnly,
    NoPool,
    NoAttn,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::MolOnly,
        Ablation::InterOnly,
        Ablation::NoPool,
        Ablation::NoAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::MolOnly => "mol_only",
            Ablation::InterOnly => "inter_only",
            Ablation::NoPool => "no_pool",
            Ablation::NoAttn => "no_attn",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub task: Task,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub pooling_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_edges: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub gcn_layers: usize,
    pub gat_heads: usize,
    pub interaction_layers: usize,
    /// Train/valid/test fractions (or train/test).
    pub split: Vec<f64>,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub negative_sampling: SamplingMode,
    pub filtered_negatives: bool,
    pub side_effect_dim: usize,
    /// Number of DDI relations; fixed from the dataset at training time.
    pub relations: usize,
}

pub const KEYS: [&str; 18] = [
    "task",
    "hidden_dim",
    "repr_dim",
    "pooling_ratio",
    "learning_rate",
    "epochs",
    "batch_edges",
    "seed",
    "ablation",
    "gcn_layers",
    "gat_heads",
    "interaction_layers",
    "split",
    "patience",
    "negative_sampling",
    "filtered_negatives",
    "side_effect_dim",
    "relations",
];

impl TrainConfig {
    pub fn defaults(task: Task) -> Self {
        Self {
            task,
            hidden_dim: 384,
            repr_dim: 256,
            pooling_ratio: 0.5,
            learning_rate: match task {
                Task::Cci => 0.01,
                Task::Ddi => 0.001,
            },
            epochs: 100,
            batch_edges: 1024,
            seed: 0,
            ablation: Ablation::Full,
            gcn_layers: 3,
            gat_heads: 4,
            interaction_layers: 2,
            split: match task {
                Task::Cci => vec![0.8, 0.1, 0.1],
                Task::Ddi => vec![0.6, 0.2, 0.2],
            },
            patience: 20,
            negative_sampling: SamplingMode::Uniform,
            filtered_negatives: true,
            side_effect_dim: 128,
            relations: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.pooling_ratio > 0.0 && self.pooling_ratio <= 1.0) {
            return bad("pooling_ratio must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("repr_dim", self.repr_dim),
            ("epochs", self.epochs),
            ("batch_edges", self.batch_edges),
            ("gcn_layers", self.gcn_layers),
            ("gat_heads", self.gat_heads),
            ("interaction_layers", self.interaction_layers),
            ("patience", self.patience),
            ("side_effect_dim", self.side_effect_dim),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{k} must be at least 1")));
        }
        if self.task == Task::Cci
            && self.ablation != Ablation::NoAttn
            && !self.repr_dim.is_multiple_of(self.gat_heads)
        {
            return bad("repr_dim must be divisible by gat_heads");
        }
        if self.task == Task::Cci && self.relations != 0 {
            return bad("cci configurations have no relations");
        }
        if !(2..=3).contains(&self.split.len())
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split must be 2 or 3 fractions summing to 1");
        }
        Ok(())
    }

    fn split_text(&self) -> String {
        self.split
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(":")
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.value_text(k)));
        }
        out
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "task" => self.task.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "repr_dim" => self.repr_dim.to_string(),
            "pooling_ratio" => self.pooling_ratio.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_edges" => self.batch_edges.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "gat_heads" => self.gat_heads.to_string(),
            "interaction_layers" => self.interaction_layers.to_string(),
            "split" => self.split_text(),
            "patience" => self.patience.to_string(),
            "negative_sampling" => match self.negative_sampling {
                SamplingMode::Uniform => "uniform".into(),
                SamplingMode::Degree => "degree".into(),
            },
            "filtered_negatives" => self.filtered_negatives.to_string(),
            "side_effect_dim" => self.side_effect_dim.to_string(),
            "relations" => self.relations.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::Value {
                key: key.into(),
                reason: format!("cannot parse `{v}`"),
            })
        }
        let err = |reason: String| ConfigError::Value {
            key: key.into(),
            reason,
        };
        match key {
            "task" => self.task = value.parse().map_err(err)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "repr_dim" => self.repr_dim = num(key, value)?,
            "pooling_ratio" => self.pooling_ratio = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_edges" => self.batch_edges = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => self.ablation = value.parse().map_err(err)?,
            "gcn_layers" => self.gcn_layers = num(key, value)?,
            "gat_heads" => self.gat_heads = num(key, value)?,
            "interaction_layers" => self.interaction_layers = num(key, value)?,
            "split" => self.split = parse_ratios(value).map_err(err)?,
            "patience" => self.patience = num(key, value)?,
            "negative_sampling" => {
                self.negative_sampling = match value {
                    "uniform" => SamplingMode::Uniform,
                    "degree" => SamplingMode::Degree,
                    other => return Err(err(format!("unknown sampling mode `{other}`"))),
                }
            }
            "filtered_negatives" => self.filtered_negatives = num(key, value)?,
            "side_effect_dim" => self.side_effect_dim = num(key, value)?,
            "relations" => self.relations = num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Builds a configuration from key/value pairs. Task-dependent defaults
    /// follow the `task` entry, whatever its position.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let task = match pairs.get("task") {
            Some(t) => t.parse().map_err(|reason| ConfigError::Value {
                key: "task".into(),
                reason,
            })?,
            None => Task::Cci,
        };
        let mut cfg = Self::defaults(task);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_pairs(&parse_pairs(text)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: k + 1,
            reason: "expected `key = value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line: k + 1,
                reason: "empty key or value".into(),
            });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: k + 1,
                reason: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_task() {
        let c = TrainConfig::defaults(Task::Cci);
        assert_eq!(
            (c.hidden_dim, c.repr_dim, c.pooling_ratio, c.learning_rate),
            (384, 256, 0.5, 0.01)
        );
        assert_eq!((c.gcn_layers, c.gat_heads, c.interaction_layers), (3, 4, 2));
        let d = TrainConfig::parse("# ddi run\nlearning_rate = 0.005\ntask = ddi\n").unwrap();
        assert_eq!(d.learning_rate, 0.005);
        assert_eq!(d.split, vec![0.6, 0.2, 0.2]);
        let d = TrainConfig::parse("task = ddi").unwrap();
        assert_eq!(d.learning_rate, 0.001);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::defaults(Task::Ddi);
        c.seed = 99;
        c.pooling_ratio = 0.3;
        c.ablation = Ablation::NoPool;
        c.negative_sampling = SamplingMode::Degree;
        c.relations = 7;
        c.split = vec![0.7, 0.3];
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            TrainConfig::parse("pooling_ratio = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            TrainConfig::parse("pooling_ratio = 1.5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(TrainConfig::parse("pooling_ratio = 1").is_ok());
        assert!(TrainConfig::parse("learning_rate = -1").is_err());
        assert!(TrainConfig::parse("hidden_dim = 0").is_err());
        assert!(matches!(
            TrainConfig::parse("colour = red"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            TrainConfig::parse("seed 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("repr_dim = 10").is_err());
        assert!(TrainConfig::parse("ablation = nope").is_err());
    }
}
