//! Layered training configuration: defaults, then a JSON file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::{Map, Value};
use spt_core::{LossKind, TrainConfig};

use crate::UsageError;

pub const DESK_HIDDEN: usize = 64;
pub const DESK_LAYERS: usize = 2;

/// Reduced model that trains in minutes on one core.
pub fn desk_defaults() -> TrainConfig {
    TrainConfig {
        hidden_size: DESK_HIDDEN,
        num_layers: DESK_LAYERS,
        ..TrainConfig::default()
    }
}

/// Every field of [`TrainConfig`] as an optional flag.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub teacher_forcing_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paper_exact: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gaf_enabled: Option<bool>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    /// Global gradient norm bound; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "mse" => Ok(LossKind::Mse),
        "mae" => Ok(LossKind::Mae),
        _ => Err(format!("unknown loss `{s}` (expected mse or mae)")),
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(
            epochs,
            batch_size,
            lr,
            beta1,
            beta2,
            eps,
            teacher_forcing_ratio,
            seed,
            hidden_size,
            num_layers,
            num_heads,
            dropout,
            paper_exact,
            gaf_enabled,
            loss,
            clip_norm
        );
    }
}

/// Reads a partial config file. Keys must be [`TrainConfig`] fields.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(UsageError(format!("config {}: expected a JSON object", path.display())).into());
    };
    serde_json::from_value::<TrainConfig>(Value::Object(map.clone()))
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    Ok(map)
}

/// `base`, overlaid by `file` keys, overlaid by set flags.
pub fn resolve(base: TrainConfig, file: Option<&Map<String, Value>>, flags: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(map) => {
            let Value::Object(mut merged) = serde_json::to_value(&base)? else {
                unreachable!("config serializes to an object")
            };
            merged.extend(map.clone());
            serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("config: {e}")))?
        }
        None => base,
    };
    flags.apply(&mut cfg);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(json: &str) -> Map<String, Value> {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = map(r#"{"epochs": 7, "lr": 0.01}"#);
        let flags = TrainOverrides {
            lr: Some(0.5),
            ..Default::default()
        };
        let cfg = resolve(desk_defaults(), Some(&file), &flags).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.hidden_size, DESK_HIDDEN);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let flags = TrainOverrides {
            num_heads: Some(3),
            ..Default::default()
        };
        let err = resolve(desk_defaults(), None, &flags).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
