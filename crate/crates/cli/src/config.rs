//! Run configuration: a JSON document with `data`, `hierarchy`, `mask`,
//! `model`, `train`, and `eval` sections. Precedence is CLI `--set`
//! overrides, then the config file, then built-in defaults. Unknown keys
//! are rejected.

use crate::CliError;
use hgmae_core::model::ReadoutMode;
use hgmae_core::scalar::Precision;
use hgmae_core::training::{MaskMode, RecoveryConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub hierarchy: HierarchyConfig,
    pub mask: MaskConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// "tu" or "jsonl".
    pub format: Option<String>,
    pub path: Option<PathBuf>,
    /// Dataset name (TU file prefix).
    pub name: Option<String>,
    /// Degree one-hot clamp for attribute-free graphs.
    pub max_degree: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    #[serde(rename = "S")]
    pub s: usize,
    pub r_p: f64,
    pub seed: u64,
    pub binarize_coarse: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub r_m: f64,
    pub mode: MaskMode,
    pub recovery: RecoveryConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub l_gt: usize,
    pub gin_layers: usize,
    pub gt_layers: usize,
    pub rwpe_k: usize,
    pub gamma_sce: f64,
    pub remask_decoder: bool,
    pub gt_decoder_at_top: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    pub repeats: usize,
    pub readout_mode: ReadoutMode,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig { s: 2, r_p: 0.2, seed: 0, binarize_coarse: false }
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { r_m: 0.5, mode: MaskMode::Cofi, recovery: RecoveryConfig::default() }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            l_gt: 2,
            gin_layers: 2,
            gt_layers: 1,
            rwpe_k: 8,
            gamma_sce: 2.0,
            remask_decoder: false,
            gt_decoder_at_top: false,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::F32,
            parallel: false,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { folds: 10, repeats: 1, readout_mode: ReadoutMode::Aggregate }
    }
}

impl RunConfig {
    /// Loads the file (when given), applies `--set key=value` overrides,
    /// and validates.
    pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
        let mut value: Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.to_train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(fmt) = &self.data.format {
            if fmt != "tu" && fmt != "jsonl" {
                return Err(CliError::Config(format!(
                    "data.format={fmt} must be \"tu\" or \"jsonl\""
                )));
            }
        }
        if self.eval.folds < 2 {
            return Err(CliError::Config("eval.folds must be >= 2".into()));
        }
        if self.eval.repeats < 1 {
            return Err(CliError::Config("eval.repeats must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.lr,
            weight_decay: self.train.weight_decay,
            r_m: self.mask.r_m,
            r_p: self.hierarchy.r_p,
            scales: self.hierarchy.s,
            recovery: self.mask.recovery,
            d: self.model.d,
            l_gt: self.model.l_gt,
            gin_layers: self.model.gin_layers,
            gt_layers: self.model.gt_layers,
            rwpe_k: self.model.rwpe_k,
            gamma_sce: self.model.gamma_sce,
            remask_decoder: self.model.remask_decoder,
            gt_decoder_at_top: self.model.gt_decoder_at_top,
            binarize_coarse: self.hierarchy.binarize_coarse,
            seed: self.train.seed,
            hierarchy_seed: self.hierarchy.seed,
            mask_mode: self.mask.mode,
            readout_mode: self.eval.readout_mode,
            precision: self.train.precision,
            parallel: self.train.parallel,
        }
    }
}

/// Applies one `section.key=value` override; the value parses as JSON when
/// possible and falls back to a string.
fn apply_set(root: &mut Value, set: &str) -> Result<(), CliError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {set} is not of the form key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("--set path {path} has an empty segment")));
    }
    for (i, segment) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set path {path} crosses a non-object")))?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg.hierarchy.s, 2);
        assert_eq!(cfg.mask.r_m, 0.5);
        assert_eq!(cfg.train.epochs, 100);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let cfg = RunConfig::resolve(
            None,
            &["train.epochs=3".into(), "mask.recovery.gamma=2.0".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.mask.recovery.gamma, 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &["train.nonsense=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn out_of_range_ratio_names_the_field() {
        let err = RunConfig::resolve(None, &["hierarchy.r_p=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("r_p"), "{err}");
    }

    #[test]
    fn string_values_fall_back() {
        let cfg = RunConfig::resolve(None, &["data.format=jsonl".into()]).unwrap();
        assert_eq!(cfg.data.format.as_deref(), Some("jsonl"));
    }
}
