//! Run configuration: one JSON document with nested sections, strict about
//! unknown keys, with dotted-path overrides for quick experiments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, Variant};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, RegRange};
use crate::postprocess::NmsConfig;
use crate::synth::GeneratorConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_in: usize,
    pub d_model: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub stem_blocks: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub window: usize,
    pub keep_ratio: f64,
    pub variant: Variant,
    pub qkv_conv_width: usize,
    pub num_classes: usize,
    pub head_conv_layers: usize,
    /// Defaults to the doubling ladder [0,4),[4,8),...,[2^k,inf) when unset.
    pub regression_ranges: Option<Vec<RegRange>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_in: 32,
            d_model: 64,
            levels: 6,
            blocks_per_level: 1,
            stem_blocks: 2,
            ffn_expansion: 4,
            heads: 4,
            window: 9,
            keep_ratio: 0.5,
            variant: Variant::PerHeadTopK,
            qkv_conv_width: 3,
            num_classes: 14,
            head_conv_layers: 2,
            regression_ranges: None,
        }
    }
}

impl ModelSection {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_in: self.d_in,
            d_model: self.d_model,
            levels: self.levels,
            blocks_per_level: self.blocks_per_level,
            stem_blocks: self.stem_blocks,
            ffn_expansion: self.ffn_expansion,
            attention: AttentionConfig {
                d_model: self.d_model,
                heads: self.heads,
                window: self.window,
                keep_ratio: self.keep_ratio,
                variant: self.variant,
                qkv_conv_width: self.qkv_conv_width,
            },
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            head_conv_layers: self.head_conv_layers,
            regression_ranges: self
                .regression_ranges
                .clone()
                .unwrap_or_else(|| HeadConfig::default_ranges(self.levels)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: crate::eval::DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub nms: NmsConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Loads the config file (or starts from defaults), applies `--set`
    /// overrides, and validates the result.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<serde_json::Value>(&text)
                    .map_err(|e| Error::json(p, e))?
            }
            None => serde_json::to_value(RunConfig::default())
                .expect("default config serializes"),
        };
        // a partial file still gets every default: overlay it onto defaults
        if path.is_some() {
            let mut base = serde_json::to_value(RunConfig::default()).expect("default");
            merge_into(&mut base, &value)?;
            value = base;
        }
        for set in sets {
            let (path, raw) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects path=value, got '{set}'"))
            })?;
            apply_set(&mut value, path.trim(), raw.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder_config().validate()?;
        self.model.head_config().validate(self.model.levels)?;
        self.nms.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::Config("eval.thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical JSON with every default materialized.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> [u8; 32] {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.into()
    }

    pub fn config_hash_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.config_hash() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Overlays `patch` on `base`, requiring every patch key to already exist
/// (typo safety at every nesting level).
fn merge_into(base: &mut serde_json::Value, patch: &serde_json::Value) -> Result<()> {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Error::Config(format!("unknown config key '{k}'")))?;
                if slot.is_object() && v.is_object() {
                    merge_into(slot, v)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Sets one leaf by dotted path, e.g. `nms.sigma=0.3`. The path must name
/// an existing key chain; the value parses as JSON with a string fallback.
pub fn apply_set(value: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = value;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("'{path}': '{part}' is not a nested section"))
        })?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!(
                "unknown config key '{part}' in '{path}'"
            )));
        }
        if i + 1 == parts.len() {
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::Config(format!("empty --set path '{path}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.window, 9);
        assert_eq!(cfg.model.keep_ratio, 0.5);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.model.levels, 6);
        assert_eq!(cfg.nms.iou_threshold, 0.1);
        assert_eq!(cfg.nms.sigma, 0.5);
        assert_eq!(cfg.nms.max_segments, 200);
        assert_eq!(cfg.nms.score_floor, 0.001);
        assert_eq!(cfg.eval.thresholds, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
        // M = ceil(0.5 * 9) = 5
        assert_eq!(cfg.model.encoder_config().attention.top_m(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"model": {"wndow": 9}}"#).unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("wndow"), "{err}");
    }

    #[test]
    fn partial_files_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"model": {"window": 7}, "nms": {"sigma": 0.3}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.model.window, 7);
        assert_eq!(cfg.nms.sigma, 0.3);
        assert_eq!(cfg.model.heads, 4, "untouched default");
    }

    #[test]
    fn set_overrides_nested_leaves() {
        let cfg = RunConfig::load(
            None,
            &[
                "nms.sigma=0.3".to_string(),
                "model.variant=static-key-norm".to_string(),
                "train.epochs=7".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.nms.sigma, 0.3);
        assert_eq!(cfg.model.variant, Variant::StaticKeyNorm);
        assert_eq!(cfg.train.epochs, 7);

        assert!(RunConfig::load(None, &["nms.sigmaa=0.3".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig::load(None, &["train.epochs=3".into()]).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash_hex().len(), 64);
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.resolved_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.config_hash(), back.config_hash());
    }
}
