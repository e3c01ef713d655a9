use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::combination::combination_registry;
use super::TrainError;
use crate::grid::Shape3;
use crate::losses::{default_head_losses, head_losses};
use crate::model::BackboneConfig;
use crate::uncertainty::reliability_registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size backbone on 112x112x80 patches.
    Paper,
    /// Small backbone on 32^3 patches for CPU runs.
    Tiny,
}

/// Flat training configuration; every key can be set from TOML or a
/// `key=value` override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub combination_mode: String,
    pub reliability_mode: String,
    pub preset: Preset,
    pub num_classes: usize,
    /// Decoder stage feeding the prototype head; preset default when unset.
    pub prototype_tap: Option<usize>,
    pub patch_size: Option<Shape3>,
    pub infer_stride: Option<Shape3>,
    pub checkpoint_every: usize,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub head_losses: Vec<String>,
    pub flip_rotate: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 14000,
            lr: 0.001,
            labeled_batch: 2,
            unlabeled_batch: 2,
            lambda1: 1.0,
            lambda2: 1.0,
            ema_decay: 0.99,
            seed: 1337,
            combination_mode: "separate_multi_proto".into(),
            reliability_mode: "verbatim".into(),
            preset: Preset::Paper,
            num_classes: 2,
            prototype_tap: None,
            patch_size: None,
            infer_stride: None,
            checkpoint_every: 1000,
            temperature: 1.0,
            focal_gamma: 2.0,
            head_losses: default_head_losses(),
            flip_rotate: false,
            data_dir: None,
            out_dir: PathBuf::from("runs/epcl"),
        }
    }
}

const KEYS: &[&str] = &[
    "total_iters",
    "lr",
    "labeled_batch",
    "unlabeled_batch",
    "lambda1",
    "lambda2",
    "ema_decay",
    "seed",
    "combination_mode",
    "reliability_mode",
    "preset",
    "num_classes",
    "prototype_tap",
    "patch_size",
    "infer_stride",
    "checkpoint_every",
    "temperature",
    "focal_gamma",
    "head_losses",
    "flip_rotate",
    "data_dir",
    "out_dir",
];

impl TrainConfig {
    pub fn tiny() -> Self {
        Self { preset: Preset::Tiny, ..Self::default() }
    }

    pub fn valid_keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        check_keys(table.keys())?;
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order. Values are parsed as TOML and
    /// fall back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, TrainError> {
        let mut table = match toml::Value::try_from(self).map_err(|e| TrainError::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            check_keys(std::iter::once(&key.to_string()))?;
            let value = parse_value(raw.trim());
            table.insert(key.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut b = match self.preset {
            Preset::Paper => BackboneConfig::default(),
            Preset::Tiny => BackboneConfig::tiny(self.num_classes),
        };
        b.num_classes = self.num_classes;
        if let Some(tap) = self.prototype_tap {
            b.prototype_tap = tap;
        }
        b
    }

    pub fn patch(&self) -> Shape3 {
        self.patch_size.unwrap_or(match self.preset {
            Preset::Paper => [112, 112, 80],
            Preset::Tiny => [32, 32, 32],
        })
    }

    pub fn stride(&self) -> Shape3 {
        self.infer_stride.unwrap_or(match self.preset {
            Preset::Paper => [18, 18, 4],
            Preset::Tiny => [16, 16, 16],
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("labeled_batch", self.labeled_batch), ("unlabeled_batch", self.unlabeled_batch)] {
            if b < 2 || b % 2 != 0 {
                return bad(format!("{name} must be even and >= 2, got {b}"));
            }
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("lambda1 and lambda2 must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.num_classes > u8::MAX as usize {
            return bad(format!("num_classes {} does not fit a label byte", self.num_classes));
        }
        combination_registry().get(&self.combination_mode)?;
        reliability_registry().get(&self.reliability_mode)?;
        head_losses(&self.head_losses, self.focal_gamma)?;
        let backbone = self.backbone();
        backbone.validate()?;
        backbone.check_spatial(self.patch())?;
        if self.stride().iter().any(|&s| s == 0) {
            return bad("infer_stride entries must be positive".into());
        }
        Ok(())
    }
}

fn check_keys<'a>(mut keys: impl Iterator<Item = &'a String>) -> Result<(), TrainError> {
    match keys.find(|k| !KEYS.contains(&k.as_str())) {
        Some(k) => Err(TrainError::UnknownKey { key: k.clone(), valid: KEYS.join(", ") }),
        None => Ok(()),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.total_iters, c.lr, c.labeled_batch, c.unlabeled_batch), (14000, 0.001, 2, 2));
        assert_eq!((c.lambda1, c.lambda2, c.ema_decay), (1.0, 1.0, 0.99));
        assert_eq!(c.combination_mode, "separate_multi_proto");
        c.validate().unwrap();
        TrainConfig::tiny().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig { seed: 9, patch_size: Some([16, 16, 16]), ..TrainConfig::tiny() };
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = TrainConfig::tiny()
            .with_overrides(&["combination_mode=concat", "seed=5", "patch_size=[16,16,16]", "seed=6"])
            .unwrap();
        assert_eq!(c.combination_mode, "concat");
        assert_eq!(c.seed, 6);
        assert_eq!(c.patch(), [16, 16, 16]);
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let err = TrainConfig::tiny().with_overrides(&["learning_rate=0.1"]).unwrap_err();
        match err {
            TrainError::UnknownKey { key, valid } => {
                assert_eq!(key, "learning_rate");
                assert!(valid.contains("total_iters"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(TrainConfig::from_toml_str("bogus = 1"), Err(TrainError::UnknownKey { .. })));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::tiny().with_overrides(&["combination_mode=nope"]).is_err());
        assert!(TrainConfig::tiny().with_overrides(&["reliability_mode=no_such_mode"]).is_err());
        assert!(TrainConfig::tiny().with_overrides(&["labeled_batch=3"]).is_err());
        assert!(TrainConfig::tiny().with_overrides(&["patch_size=[30,32,32]"]).is_err());
        assert!(TrainConfig::tiny().with_overrides(&["noequals"]).is_err());
    }
}
