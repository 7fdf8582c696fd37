//! `key = value` config files and flag overrides for training.
//!
//! Precedence is built-in defaults, then the config file, then flags. Keys
//! are the `TrainConfig` field names; anything else is rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use hogrn::evaluation::Directions;
use hogrn::model::Variant;
use hogrn::scoring::ScoreHead;
use hogrn::training::TrainConfig;
use serde_json::{Map, Value};

/// Every key a config file may set.
pub const CONFIG_KEYS: [&str; 16] = [
    "learning_rate",
    "batch_size",
    "layers",
    "dim",
    "mask_ratio",
    "temperature",
    "aux_weight",
    "max_epochs",
    "patience",
    "seed",
    "head",
    "variant",
    "mixer_f1",
    "mixer_f2",
    "eval_directions",
    "init_gain",
];

fn scalar(raw: &str) -> Value {
    if let Ok(u) = raw.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}

/// Parses config text. Blank lines and `#` comments are skipped; values may
/// be quoted.
pub fn parse_config(text: &str, origin: &str) -> Result<TrainConfig> {
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{origin}:{}: expected `key = value`, found `{line}`", i + 1);
        };
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        if !CONFIG_KEYS.contains(&key) {
            bail!(
                "{origin}:{}: unknown key `{key}` (accepted: {})",
                i + 1,
                CONFIG_KEYS.join(", ")
            );
        }
        if map.insert(key.to_string(), scalar(value)).is_some() {
            bail!("{origin}:{}: key `{key}` set twice", i + 1);
        }
    }
    let config: TrainConfig = serde_json::from_value(Value::Object(map))
        .with_context(|| format!("{origin}: invalid value"))?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    parse_config(&text, &path.display().to_string())
}

/// Training flags. Each one, when given, overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Fraction of relations masked per layer and step.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight of the relation-contrastive loss.
    #[arg(long)]
    pub aux_weight: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub head: Option<ScoreHead>,
    /// `hogrn-r` drops the relation-reasoning block.
    #[arg(long, value_name = "VARIANT")]
    pub ablation: Option<Variant>,
    #[arg(long)]
    pub mixer_f1: Option<usize>,
    #[arg(long)]
    pub mixer_f2: Option<usize>,
    /// `both` or `tail-only`.
    #[arg(long)]
    pub eval_directions: Option<Directions>,
    /// Scale on the embedding initialization bound.
    #[arg(long)]
    pub init_gain: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, config: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { config.$field = v; })*
            };
        }
        set!(
            learning_rate,
            batch_size,
            layers,
            dim,
            mask_ratio,
            temperature,
            aux_weight,
            max_epochs,
            patience,
            head,
            eval_directions,
            init_gain
        );
        if let Some(v) = self.ablation {
            config.variant = v;
        }
        if self.mixer_f1.is_some() {
            config.mixer_f1 = self.mixer_f1;
        }
        if self.mixer_f2.is_some() {
            config.mixer_f2 = self.mixer_f2;
        }
    }
}
