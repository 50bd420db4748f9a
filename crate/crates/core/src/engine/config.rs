use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::io::read_to_string;
use crate::losses::{ObjectiveConfig, TermFlags};
use crate::models::NetConfig;
use crate::similarity::PoolSize;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TEMPSEG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub student_widths: Vec<usize>,
    pub teacher_widths: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_kernel: usize,
    /// Uniform init range of the ConvLSTM; 0 starts at the collapse point.
    pub lstm_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            student_widths: NetConfig::student(2).widths,
            teacher_widths: NetConfig::teacher(2).widths,
            lstm_hidden: 8,
            lstm_kernel: 3,
            lstm_init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    /// Student iterations.
    pub max_iterations: usize,
    pub teacher_iterations: usize,
    /// Triplets per iteration.
    pub batch_size: usize,
    pub lambda: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub pool_height: usize,
    pub pool_width: usize,
    pub window: usize,
    #[serde(with = "terms_string")]
    pub terms: TermFlags,
    /// Train the teacher with the temporal loss.
    pub teacher_tl: bool,
    pub anti_collapse: bool,
    pub collapse_margin: f64,
    /// Reserved; random scale and flip are not implemented.
    pub augment: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            max_iterations: 300,
            teacher_iterations: 1000,
            batch_size: 4,
            lambda: 0.1,
            clip_min: -1.0,
            clip_max: 1.0,
            pool_height: 8,
            pool_width: 8,
            window: 5,
            terms: TermFlags::ALL,
            teacher_tl: true,
            anti_collapse: true,
            collapse_margin: 0.1,
            augment: false,
        }
    }
}

mod terms_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::losses::TermFlags;

    pub fn serialize<S: Serializer>(t: &TermFlags, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.label())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TermFlags, D::Error> {
        let s = String::deserialize(d)?;
        TermFlags::parse(&s).map_err(D::Error::custom)
    }
}

impl TrainingConfig {
    pub fn pool(&self) -> PoolSize {
        PoolSize {
            height: self.pool_height,
            width: self.pool_width,
        }
    }

    /// Objective of the student run.
    pub fn student_objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            terms: self.terms,
            pool: self.pool(),
            collapse_margin: self.anti_collapse.then_some(self.collapse_margin),
        }
    }

    /// Objective of teacher pre-training: cross-entropy plus optional TL.
    pub fn teacher_objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            terms: TermFlags {
                tl: self.teacher_tl,
                ..TermFlags::NONE
            },
            pool: self.pool(),
            collapse_margin: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainingConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)
            .map_err(|e| Error::validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `TEMPSEG_SEED` then overrides the seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = read_to_string(p)?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Validation(m) => Error::Validation(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("{SEED_ENV}={v} is not a u64")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn student_net(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            widths: self.model.student_widths.clone(),
            classes: self.data.classes,
        }
    }

    pub fn teacher_net(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            widths: self.model.teacher_widths.clone(),
            classes: self.data.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let bad = |field: &str, why: &str| Err(Error::validation(format!("{field}: {why}")));
        let t = &self.train;
        if !(t.base_lr > 0.0) {
            return bad("train.base_lr", "must be positive");
        }
        if !(t.poly_power >= 0.0) {
            return bad("train.poly_power", "must be non-negative");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("train.momentum", "must lie in [0, 1)");
        }
        if !(t.lambda >= 0.0) {
            return bad("train.lambda", "must be non-negative");
        }
        if !(t.clip_min < t.clip_max) {
            return bad("train.clip_min", "must be below train.clip_max");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if t.window == 0 {
            return bad("train.window", "must be positive");
        }
        if t.pool_height == 0 || t.pool_width == 0 {
            return bad("train.pool_height", "pooled grid must be non-empty");
        }
        if t.pool_height > self.data.height || t.pool_width > self.data.width {
            return bad("train.pool_height", "pooled grid larger than the frames");
        }
        if !(t.collapse_margin >= 0.0) {
            return bad("train.collapse_margin", "must be non-negative");
        }
        if t.augment {
            return bad(
                "train.augment",
                "augmentation is reserved and not implemented",
            );
        }
        if self.model.lstm_hidden == 0 {
            return bad("model.lstm_hidden", "must be positive");
        }
        if self.model.lstm_kernel % 2 == 0 {
            return bad("model.lstm_kernel", "must be odd");
        }
        if !(self.model.lstm_init_scale >= 0.0) {
            return bad("model.lstm_init_scale", "must be non-negative");
        }
        self.student_net().validate()?;
        self.teacher_net().validate()?;
        if self.model.student_widths.len() >= 3
            && (self.data.height % 2 != 0 || self.data.width % 2 != 0)
        {
            return bad("data.height", "frame size must be even");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_are_accepted() {
        let cfg =
            Config::from_toml("seed = 3\ntrain.lambda = 0.5\ntrain.terms = \"pf,tl\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(
            cfg.train.terms,
            TermFlags {
                pf: true,
                tl: true,
                ..TermFlags::NONE
            }
        );
    }

    #[test]
    fn unknown_and_invalid_fields_name_the_field() {
        let err = Config::from_toml("train.lamda = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = Config::from_toml("train.base_lr = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("train.base_lr"), "{err}");
        let err = Config::from_toml("train.terms = \"xx\"\n").unwrap_err();
        assert!(err.to_string().contains("xx"), "{err}");
    }
}
