//! Run configuration and its text format.
//!
//! The format is flat `key = value` lines grouped under `[env]`, `[nn]`,
//! `[replay]` and `[trainer]` sections. `#` starts a comment. Unknown keys
//! and malformed values are rejected with the offending key in the message.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::env::{GridSpec, RewardTable, APPLE_KEY_DOOR_TREASURE_MAP, DEFAULT_TIME_LIMIT, KEY_DOOR_TREASURE_MAP};
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::replay::PrioritizedConfig;

pub const BUILTIN_KEY_DOOR_TREASURE: &str = "builtin:key_door_treasure";
pub const BUILTIN_APPLE_KEY_DOOR_TREASURE: &str = "builtin:apple_key_door_treasure";

/// Agent variants compared in the gridworld study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    A2c,
    Sil,
    Exp,
    SilExp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A2c, Variant::Sil, Variant::Exp, Variant::SilExp];

    pub fn uses_sil(self) -> bool {
        matches!(self, Variant::Sil | Variant::SilExp)
    }

    pub fn uses_exploration(self) -> bool {
        matches!(self, Variant::Exp | Variant::SilExp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A2c => "a2c",
            Variant::Sil => "sil",
            Variant::Exp => "exp",
            Variant::SilExp => "sil+exp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a2c" => Ok(Variant::A2c),
            "sil" | "a2c+sil" => Ok(Variant::Sil),
            "exp" | "a2c+exp" => Ok(Variant::Exp),
            "sil+exp" | "a2c+sil+exp" => Ok(Variant::SilExp),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected a2c, sil, exp or sil+exp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// Map file path or one of the `builtin:` names.
    pub map: String,
    pub time_limit: usize,
    pub rewards: RewardTable,
    /// Reward delay period in steps; 0 disables the wrapper.
    pub delay_period: usize,
    /// Count-based bonus coefficient; 0 disables the bonus.
    pub exploration_beta: f64,
    /// Whether exploration bonuses enter the returns stored for replay.
    pub bonus_in_replay: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            map: BUILTIN_KEY_DOOR_TREASURE.into(),
            time_limit: DEFAULT_TIME_LIMIT,
            rewards: RewardTable::default(),
            delay_period: 0,
            exploration_beta: 0.0,
            bonus_in_replay: true,
        }
    }
}

impl EnvConfig {
    pub fn load_spec(&self) -> Result<Arc<GridSpec>> {
        let spec = match self.map.as_str() {
            BUILTIN_KEY_DOOR_TREASURE => GridSpec::parse(KEY_DOOR_TREASURE_MAP, self.rewards, self.time_limit)?,
            BUILTIN_APPLE_KEY_DOOR_TREASURE => {
                GridSpec::parse(APPLE_KEY_DOOR_TREASURE_MAP, self.rewards, self.time_limit)?
            }
            path => GridSpec::from_file(path, self.rewards, self.time_limit)?,
        };
        Ok(Arc::new(spec))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    pub buffer: PrioritizedConfig,
    pub batch_size: usize,
    /// SIL updates are skipped until the buffer holds this many full batches.
    pub min_fill_batches: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            buffer: PrioritizedConfig::default(),
            batch_size: 512,
            min_fill_batches: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub replay: ReplayConfig,
    pub n_envs: usize,
    pub n_steps: usize,
    /// SIL updates per iteration (M); 0 is plain A2C.
    pub sil_updates: usize,
    pub sil_loss_weight: f64,
    pub gamma: f64,
    /// Entropy regularization weight.
    pub alpha: f64,
    pub beta_sil: f64,
    pub beta_a2c: f64,
    pub total_steps: u64,
    pub seed: u64,
    /// Iterations between emitted metric rows.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            net: NetConfig::default(),
            replay: ReplayConfig::default(),
            n_envs: 16,
            n_steps: 5,
            sil_updates: 4,
            sil_loss_weight: 1.0,
            gamma: 0.99,
            alpha: 0.01,
            beta_sil: 0.01,
            beta_a2c: 0.5,
            total_steps: 200_000,
            seed: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    /// Enables or disables SIL and the exploration bonus. Components switched
    /// on keep their configured strength, or fall back to M = 4 and beta = 0.1
    /// when currently zero.
    pub fn apply_variant(&mut self, variant: Variant) {
        self.sil_updates = match (variant.uses_sil(), self.sil_updates) {
            (false, _) => 0,
            (true, 0) => 4,
            (true, m) => m,
        };
        self.env.exploration_beta = match (variant.uses_exploration(), self.env.exploration_beta) {
            (false, _) => 0.0,
            (true, 0.0) => 0.1,
            (true, b) => b,
        };
    }

    pub fn variant(&self) -> Variant {
        match (self.sil_updates > 0, self.env.exploration_beta > 0.0) {
            (false, false) => Variant::A2c,
            (true, false) => Variant::Sil,
            (false, true) => Variant::Exp,
            (true, true) => Variant::SilExp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::ConfigKey {
                    key: key.into(),
                    reason: "must be positive".into(),
                })
            }
        };
        positive("trainer.n_envs", self.n_envs > 0)?;
        positive("trainer.n_steps", self.n_steps > 0)?;
        positive("trainer.total_steps", self.total_steps > 0)?;
        positive("trainer.log_interval", self.log_interval > 0)?;
        positive("env.time_limit", self.env.time_limit > 0)?;
        positive("replay.capacity", self.replay.buffer.capacity > 0)?;
        positive("replay.batch_size", self.replay.batch_size > 0)?;
        positive("nn.lr", self.net.optimizer.lr > 0.0)?;
        positive("replay.min_fill_batches", self.replay.min_fill_batches > 0)?;
        let in_range = |key: &str, v: f64, lo: f64, hi: f64| {
            if v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::ConfigKey {
                    key: key.into(),
                    reason: format!("{v} is outside [{lo}, {hi}]"),
                })
            }
        };
        in_range("trainer.gamma", self.gamma, 0.0, 1.0)?;
        in_range("nn.rmsprop_decay", self.net.optimizer.rho, 0.0, 1.0)?;
        for (key, v) in [
            ("trainer.alpha", self.alpha),
            ("trainer.beta_sil", self.beta_sil),
            ("trainer.beta_a2c", self.beta_a2c),
            ("trainer.sil_loss_weight", self.sil_loss_weight),
            ("env.exploration_beta", self.env.exploration_beta),
            ("replay.exponent", self.replay.buffer.exponent),
            ("replay.bias_correction", self.replay.buffer.bias_correction),
            ("replay.epsilon", self.replay.buffer.epsilon),
        ] {
            in_range(key, v, 0.0, f64::MAX)?;
        }
        if self.net.hidden.contains(&0) {
            return Err(Error::ConfigKey {
                key: "nn.hidden".into(),
                reason: "layer widths must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "env" | "nn" | "replay" | "trainer") {
                    return Err(Error::Config(format!("line {}: unknown section [{section}]", lineno + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.set(&key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative map path is resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if !cfg.env.map.starts_with("builtin:") {
            let map = PathBuf::from(&cfg.env.map);
            if map.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.env.map = dir.join(map).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::ConfigKey {
            key: key.to_string(),
            reason,
        };
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::ConfigKey {
                key: key.to_string(),
                reason: format!("cannot parse `{v}` as a number"),
            })
        }
        let flag = |v: &str| match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(format!("expected true or false, got `{v}`"))),
        };
        match key {
            "env.map" => self.env.map = value.to_string(),
            "env.time_limit" => self.env.time_limit = num(key, value)?,
            "env.reward_apple" => self.env.rewards.apple = num(key, value)?,
            "env.reward_key" => self.env.rewards.key = num(key, value)?,
            "env.reward_door" => self.env.rewards.door = num(key, value)?,
            "env.reward_treasure" => self.env.rewards.treasure = num(key, value)?,
            "env.delay_period" => self.env.delay_period = num(key, value)?,
            "env.exploration_beta" => self.env.exploration_beta = num(key, value)?,
            "env.bonus_in_replay" => self.env.bonus_in_replay = flag(value)?,
            "nn.hidden" => {
                self.net.hidden = if value.is_empty() {
                    vec![]
                } else {
                    value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "nn.optimizer" => {
                self.net.optimizer.kind = match value.to_ascii_lowercase().as_str() {
                    "rmsprop" => OptimizerKind::RmsProp,
                    "adam" => OptimizerKind::Adam,
                    other => return Err(bad(format!("unknown optimizer `{other}` (rmsprop or adam)"))),
                }
            }
            "nn.lr" => self.net.optimizer.lr = num(key, value)?,
            "nn.rmsprop_decay" => self.net.optimizer.rho = num(key, value)?,
            "nn.eps" => self.net.optimizer.eps = num(key, value)?,
            "nn.max_grad_norm" => {
                let v: f64 = num(key, value)?;
                self.net.optimizer.max_grad_norm = (v > 0.0).then_some(v);
            }
            "replay.capacity" => self.replay.buffer.capacity = num(key, value)?,
            "replay.exponent" => self.replay.buffer.exponent = num(key, value)?,
            "replay.bias_correction" => self.replay.buffer.bias_correction = num(key, value)?,
            "replay.epsilon" => self.replay.buffer.epsilon = num(key, value)?,
            "replay.batch_size" => self.replay.batch_size = num(key, value)?,
            "replay.min_fill_batches" => self.replay.min_fill_batches = num(key, value)?,
            "trainer.n_envs" => self.n_envs = num(key, value)?,
            "trainer.n_steps" => self.n_steps = num(key, value)?,
            "trainer.sil_updates" => self.sil_updates = num(key, value)?,
            "trainer.sil_loss_weight" => self.sil_loss_weight = num(key, value)?,
            "trainer.gamma" => self.gamma = num(key, value)?,
            "trainer.alpha" => self.alpha = num(key, value)?,
            "trainer.beta_sil" => self.beta_sil = num(key, value)?,
            "trainer.beta_a2c" => self.beta_a2c = num(key, value)?,
            "trainer.total_steps" => self.total_steps = num(key, value)?,
            "trainer.seed" => self.seed = num(key, value)?,
            "trainer.log_interval" => self.log_interval = num(key, value)?,
            "trainer.variant" => self.apply_variant(value.parse().map_err(|e: Error| bad(e.to_string()))?),
            _ => return Err(bad("unknown key".into())),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.net.optimizer;
        let hidden: Vec<String> = self.net.hidden.iter().map(|h| h.to_string()).collect();
        let optimizer = match o.kind {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        };
        let r = &self.env.rewards;
        let b = &self.replay.buffer;
        // writeln! into a String cannot fail
        let _ = writeln!(s, "[env]");
        let _ = writeln!(s, "map = {}", self.env.map);
        let _ = writeln!(s, "time_limit = {}", self.env.time_limit);
        let _ = writeln!(s, "reward_apple = {:?}", r.apple);
        let _ = writeln!(s, "reward_key = {:?}", r.key);
        let _ = writeln!(s, "reward_door = {:?}", r.door);
        let _ = writeln!(s, "reward_treasure = {:?}", r.treasure);
        let _ = writeln!(s, "delay_period = {}", self.env.delay_period);
        let _ = writeln!(s, "exploration_beta = {:?}", self.env.exploration_beta);
        let _ = writeln!(s, "bonus_in_replay = {}", self.env.bonus_in_replay);
        let _ = writeln!(s, "\n[nn]");
        let _ = writeln!(s, "hidden = {}", hidden.join(","));
        let _ = writeln!(s, "optimizer = {optimizer}");
        let _ = writeln!(s, "lr = {:?}", o.lr);
        let _ = writeln!(s, "rmsprop_decay = {:?}", o.rho);
        let _ = writeln!(s, "eps = {:?}", o.eps);
        let _ = writeln!(s, "max_grad_norm = {:?}", o.max_grad_norm.unwrap_or(0.0));
        let _ = writeln!(s, "\n[replay]");
        let _ = writeln!(s, "capacity = {}", b.capacity);
        let _ = writeln!(s, "exponent = {:?}", b.exponent);
        let _ = writeln!(s, "bias_correction = {:?}", b.bias_correction);
        let _ = writeln!(s, "epsilon = {:?}", b.epsilon);
        let _ = writeln!(s, "batch_size = {}", self.replay.batch_size);
        let _ = writeln!(s, "min_fill_batches = {}", self.replay.min_fill_batches);
        let _ = writeln!(s, "\n[trainer]");
        let _ = writeln!(s, "n_envs = {}", self.n_envs);
        let _ = writeln!(s, "n_steps = {}", self.n_steps);
        let _ = writeln!(s, "sil_updates = {}", self.sil_updates);
        let _ = writeln!(s, "sil_loss_weight = {:?}", self.sil_loss_weight);
        let _ = writeln!(s, "gamma = {:?}", self.gamma);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "beta_sil = {:?}", self.beta_sil);
        let _ = writeln!(s, "beta_a2c = {:?}", self.beta_a2c);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "log_interval = {}", self.log_interval);
        s
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!(c.n_envs, 16);
        assert_eq!(c.n_steps, 5);
        assert_eq!(c.sil_updates, 4);
        assert_eq!(c.replay.batch_size, 512);
        assert_eq!(c.replay.buffer.capacity, 100_000);
        assert_eq!(c.replay.buffer.exponent, 0.6);
        assert_eq!(c.replay.buffer.bias_correction, 0.1);
        assert_eq!(c.net.optimizer.lr, 0.0007);
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.beta_sil, 0.01);
        assert_eq!(c.sil_loss_weight, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn parse_sections_and_comments() {
        let c = TrainConfig::parse(
            "# demo\n[env]\nmap = builtin:apple_key_door_treasure\ndelay_period = 20 # delayed\n\n[trainer]\nseed = 7\nvariant = sil+exp\n",
        )
        .unwrap();
        assert_eq!(c.env.map, BUILTIN_APPLE_KEY_DOOR_TREASURE);
        assert_eq!(c.env.delay_period, 20);
        assert_eq!(c.seed, 7);
        assert_eq!(c.variant(), Variant::SilExp);
        assert_eq!(c.env.exploration_beta, 0.1);
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::parse("[trainer]\ngamma = lots\n").unwrap_err();
        assert!(e.to_string().contains("trainer.gamma"), "{e}");
        let e = TrainConfig::parse("[trainer]\nwhatever = 1\n").unwrap_err();
        assert!(e.to_string().contains("trainer.whatever"), "{e}");
        let e = TrainConfig::parse("[trainer]\ngamma = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("trainer.gamma"), "{e}");
        assert!(TrainConfig::parse("[bogus]\n").is_err());
        assert!(TrainConfig::parse("[env]\nno equals sign\n").is_err());
    }

    #[test]
    fn variants_toggle_components() {
        let mut c = TrainConfig::default();
        c.apply_variant(Variant::A2c);
        assert_eq!((c.sil_updates, c.env.exploration_beta), (0, 0.0));
        c.apply_variant(Variant::SilExp);
        assert_eq!((c.sil_updates, c.env.exploration_beta), (4, 0.1));
        c.apply_variant(Variant::Exp);
        assert_eq!(c.variant(), Variant::Exp);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn builtin_maps_load() {
        let mut c = EnvConfig::default();
        assert_eq!(c.load_spec().unwrap().full_collection_return(), 7.0);
        c.map = BUILTIN_APPLE_KEY_DOOR_TREASURE.into();
        assert_eq!(c.load_spec().unwrap().apples().len(), 2);
        c.map = "/nonexistent/map.txt".into();
        assert!(matches!(c.load_spec(), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn text_round_trip(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            gamma in 0.0f64..1.0,
            beta in 0.0f64..10.0,
            hidden in proptest::collection::vec(1usize..256, 0..4),
            delay in 0usize..100,
            bonus_in_replay in any::<bool>(),
            clip in prop_oneof![Just(None), (0.01f64..10.0).prop_map(Some)],
        ) {
            let mut c = TrainConfig::default();
            c.seed = seed;
            c.net.optimizer.lr = lr;
            c.net.optimizer.max_grad_norm = clip;
            c.gamma = gamma;
            c.env.exploration_beta = beta;
            c.env.delay_period = delay;
            c.env.bonus_in_replay = bonus_in_replay;
            c.net.hidden = hidden;
            let text = c.to_text();
            let back = TrainConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
