//! Run configuration and its flat `section.key = value` text form.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::buffer::DEFAULT_CAPACITY;
use crate::error::{Error, Result};
use crate::losses::{LogitKdTarget, LossSchedule};
use crate::nn::ModelConfig;
use crate::optim::AdamConfig;
use crate::pool::{EmaCadence, EnsembleConfig, EnsembleMode};
use crate::stream::StreamConfig;

/// Switches for every auxiliary part of the method. Any subset is valid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Supervised softmax restricted to the classes in the batch. Off means
    /// naive fine-tuning with a softmax over every class.
    pub use_ace: bool,
    pub use_ssl: bool,
    pub use_feature_kd: bool,
    pub use_logit_kd: bool,
    pub use_lc: bool,
    /// Replay memory: exemplars join the supervised term and the DER term.
    pub use_der: bool,
    pub use_ema: bool,
    pub use_multi_model: bool,
}

impl AblationFlags {
    pub fn all() -> Self {
        Self {
            use_ace: true,
            use_ssl: true,
            use_feature_kd: true,
            use_logit_kd: true,
            use_lc: true,
            use_der: true,
            use_ema: true,
            use_multi_model: true,
        }
    }

    /// Every auxiliary term off; the supervised term stays masked.
    pub fn none() -> Self {
        Self {
            use_ace: true,
            use_ssl: false,
            use_feature_kd: false,
            use_logit_kd: false,
            use_lc: false,
            use_der: false,
            use_ema: false,
            use_multi_model: false,
        }
    }

    pub fn uses_pool_targets(&self) -> bool {
        self.use_feature_kd || self.use_logit_kd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamConfig,
    pub schedule: LossSchedule,
    pub hidden: Vec<usize>,
    pub conv_channels: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub replay_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub pool_size: usize,
    pub ema_momentum: f64,
    pub ema_cadence: EmaCadence,
    pub buffer_capacity: usize,
    pub buffer_class_balanced: bool,
    pub ensemble: EnsembleConfig,
    pub test_per_class: usize,
    pub checkpoints: bool,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            schedule: LossSchedule::desk(),
            hidden: vec![64, 64],
            conv_channels: 0,
            labeled_batch: 32,
            unlabeled_batch: 50,
            replay_batch: 32,
            epochs: 20,
            lr: 4e-4,
            pool_size: 3,
            ema_momentum: 0.999,
            ema_cadence: EmaCadence::PerStep,
            buffer_capacity: DEFAULT_CAPACITY,
            buffer_class_balanced: false,
            ensemble: EnsembleConfig::default(),
            test_per_class: 20,
            checkpoints: false,
            seed: 0,
            flags: AblationFlags::all(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse::<usize>(key, v)).collect()
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),* $(,)?) => {
        /// Every addressable key, in dump order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Assigns one `section.key` from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$($field).+ = config_keys!(@parse $kind, key, value)?; })*
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown key `{key}`; valid keys: {}",
                            KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            /// `(key, value)` pairs covering every field.
            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, config_keys!(@show $kind, self.$($field).+))),*]
            }
        }
    };
    (@parse list, $key:expr, $value:expr) => { parse_list($key, $value) };
    (@parse scalar, $key:expr, $value:expr) => { parse($key, $value) };
    (@show list, $v:expr) => {
        $v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    };
    (@show scalar, $v:expr) => { $v.to_string() };
}

config_keys! {
    "stream.total_classes" => stream.total_classes: scalar,
    "stream.labeled_classes" => stream.labeled_classes: scalar,
    "stream.num_experiences" => stream.num_experiences: scalar,
    "stream.labeled_per_exp" => stream.labeled_per_exp: scalar,
    "stream.unlabeled_per_exp" => stream.unlabeled_per_exp: scalar,
    "stream.classes_per_exp" => stream.classes_per_exp: scalar,
    "stream.repetition_probability" => stream.repetition_probability: scalar,
    "stream.unlabeled_scenario" => stream.unlabeled_scenario: scalar,
    "stream.image_side" => stream.image_side: scalar,
    "stream.noise" => stream.noise: scalar,
    "stream.seed" => stream.seed: scalar,
    "schedule.c" => schedule.c: scalar,
    "schedule.omega" => schedule.omega: scalar,
    "schedule.gamma" => schedule.gamma: scalar,
    "schedule.eta" => schedule.eta: scalar,
    "schedule.beta_slope" => schedule.beta_slope: scalar,
    "schedule.delta" => schedule.delta: scalar,
    "schedule.lc_margin" => schedule.lc_margin: scalar,
    "schedule.dynamic_ssl" => schedule.dynamic_ssl: scalar,
    "schedule.gram_row_normalize" => schedule.gram_row_normalize: scalar,
    "schedule.logit_kd_target" => schedule.logit_kd_target: scalar,
    "schedule.kd_known_classes" => schedule.kd_known_classes: scalar,
    "model.hidden" => hidden: list,
    "model.conv_channels" => conv_channels: scalar,
    "train.labeled_batch" => labeled_batch: scalar,
    "train.unlabeled_batch" => unlabeled_batch: scalar,
    "train.replay_batch" => replay_batch: scalar,
    "train.epochs" => epochs: scalar,
    "train.lr" => lr: scalar,
    "train.test_per_class" => test_per_class: scalar,
    "train.checkpoints" => checkpoints: scalar,
    "train.seed" => seed: scalar,
    "pool.size" => pool_size: scalar,
    "pool.ema_momentum" => ema_momentum: scalar,
    "pool.ema_cadence" => ema_cadence: scalar,
    "buffer.capacity" => buffer_capacity: scalar,
    "buffer.class_balanced" => buffer_class_balanced: scalar,
    "ensemble.enabled" => ensemble.enabled: scalar,
    "ensemble.snapshot_from_newest" => ensemble.snapshot_from_newest: scalar,
    "ensemble.mode" => ensemble.mode: scalar,
    "flags.use_ace" => flags.use_ace: scalar,
    "flags.use_ssl" => flags.use_ssl: scalar,
    "flags.use_feature_kd" => flags.use_feature_kd: scalar,
    "flags.use_logit_kd" => flags.use_logit_kd: scalar,
    "flags.use_lc" => flags.use_lc: scalar,
    "flags.use_der" => flags.use_der: scalar,
    "flags.use_ema" => flags.use_ema: scalar,
    "flags.use_multi_model" => flags.use_multi_model: scalar,
}

impl RunConfig {
    /// Sizes of the original challenge (batch sizes 64 / 100, 50 experiences).
    pub fn challenge() -> Self {
        Self {
            stream: StreamConfig::challenge(),
            schedule: LossSchedule::default(),
            epochs: 1,
            labeled_batch: 64,
            unlabeled_batch: 100,
            replay_batch: 64,
            ..Self::default()
        }
    }

    /// Sets the run seed and the stream seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stream.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_side: self.stream.image_side,
            hidden: self.hidden.clone(),
            num_classes: self.stream.labeled_classes,
            conv_channels: self.conv_channels,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Number of snapshots the pool keeps under the current flags.
    pub fn effective_pool_size(&self) -> usize {
        if self.flags.use_multi_model {
            self.pool_size
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.schedule.validate()?;
        self.model_config().validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.replay_batch == 0 {
            return fail("batch sizes must be at least 1");
        }
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be positive");
        }
        if self.pool_size == 0 {
            return fail("pool.size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail("pool.ema_momentum must lie in [0, 1]");
        }
        if self.test_per_class == 0 {
            return fail("train.test_per_class must be at least 1");
        }
        let cost = self.model_config().feature_dim() + self.stream.labeled_classes + 1;
        if cost > crate::buffer::MAX_EXEMPLAR_FLOATS {
            return Err(Error::Config(format!(
                "exemplars would need {cost} floats, over the {} budget",
                crate::buffer::MAX_EXEMPLAR_FLOATS
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for item in overrides {
            let item = item.as_ref();
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses the text form on top of `self`. Blank lines and `#` comments
    /// are ignored; a `[section]` line prefixes the keys that follow.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The resolved text form; `apply_text` on it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Self) -> Vec<(&'static str, String, String)> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k, a, b))
            .collect()
    }
}

impl FromStr for LogitKdTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-model-sum" => Ok(Self::PerModelSum),
            "confidence-composite" => Ok(Self::ConfidenceComposite),
            _ => Err(Error::Config(format!(
                "unknown logit_kd_target `{s}` (per-model-sum, confidence-composite)"
            ))),
        }
    }
}

impl std::fmt::Display for LogitKdTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerModelSum => "per-model-sum",
            Self::ConfidenceComposite => "confidence-composite",
        })
    }
}

impl FromStr for EmaCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(Self::PerStep),
            "per-experience" => Ok(Self::PerExperience),
            _ => Err(Error::Config(format!(
                "unknown ema_cadence `{s}` (per-step, per-experience)"
            ))),
        }
    }
}

impl std::fmt::Display for EmaCadence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerStep => "per-step",
            Self::PerExperience => "per-experience",
        })
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilities" => Ok(Self::Probabilities),
            "logits" => Ok(Self::Logits),
            _ => Err(Error::Config(format!(
                "unknown ensemble mode `{s}` (probabilities, logits)"
            ))),
        }
    }
}

impl std::fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Probabilities => "probabilities",
            Self::Logits => "logits",
        })
    }
}
