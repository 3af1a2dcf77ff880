//! Training configuration and its flat text format.
//!
//! One setting per line, `key: type = value`, with `#` starting a comment.
//! Types are `str`, `int`, `float` and `bool`; a declared type that does not
//! match the field is an error, as is any unknown key. Settings are layered
//! file < `PGG_<KEY>` environment variables < explicit overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::ENV_NAMES;
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "PGG_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Str,
    Int,
    Float,
    Bool,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Str => "str",
            Kind::Int => "int",
            Kind::Float => "float",
            Kind::Bool => "bool",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "str" => Kind::Str,
            "int" => Kind::Int,
            "float" => Kind::Float,
            "bool" => Kind::Bool,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: String,
    pub seed: u64,
    pub total_timesteps: u64,
    /// Guidance strength used for rollouts and inside the update.
    pub gamma_train: f64,
    /// Probability of replacing the actor input by the null embedding.
    pub p_drop: f64,
    /// Draw one dropout decision per minibatch instead of per transition.
    pub dropout_per_minibatch: bool,
    pub learning_rate: f64,
    pub anneal_lr: bool,
    pub num_envs: usize,
    pub num_steps: usize,
    pub update_epochs: usize,
    pub num_minibatches: usize,
    pub clip_coef: f64,
    pub clip_vloss: bool,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub norm_adv: bool,
    pub normalize_obs: bool,
    pub normalize_reward: bool,
    pub checkpoint_interval: u64,
    pub hidden: usize,
}

const KEYS: &[(&str, Kind)] = &[
    ("env", Kind::Str),
    ("seed", Kind::Int),
    ("total_timesteps", Kind::Int),
    ("gamma_train", Kind::Float),
    ("p_drop", Kind::Float),
    ("dropout_per_minibatch", Kind::Bool),
    ("learning_rate", Kind::Float),
    ("anneal_lr", Kind::Bool),
    ("num_envs", Kind::Int),
    ("num_steps", Kind::Int),
    ("update_epochs", Kind::Int),
    ("num_minibatches", Kind::Int),
    ("clip_coef", Kind::Float),
    ("clip_vloss", Kind::Bool),
    ("ent_coef", Kind::Float),
    ("vf_coef", Kind::Float),
    ("max_grad_norm", Kind::Float),
    ("adam_eps", Kind::Float),
    ("discount", Kind::Float),
    ("gae_lambda", Kind::Float),
    ("norm_adv", Kind::Bool),
    ("normalize_obs", Kind::Bool),
    ("normalize_reward", Kind::Bool),
    ("checkpoint_interval", Kind::Int),
    ("hidden", Kind::Int),
];

pub fn key_kind(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _)| *k == key).map(|&(_, kind)| kind)
}

pub fn is_discrete_env(env: &str) -> bool {
    matches!(env, "cartpole" | "acrobot")
}

fn parse_value<T: std::str::FromStr>(key: &str, kind: Kind, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {:?} as {}", raw.trim(), kind.name())))
}

impl TrainConfig {
    /// Reference PPO settings for `env`: the discrete profile for CartPole
    /// and Acrobot, the continuous profile otherwise.
    pub fn defaults_for(env: &str) -> Result<Self> {
        if !ENV_NAMES.contains(&env) {
            return Err(Error::config("env", format!("unknown environment {env:?}; expected one of {ENV_NAMES:?}")));
        }
        let base = Self {
            env: env.to_string(),
            seed: 1,
            total_timesteps: 500_000,
            gamma_train: 1.0,
            p_drop: 0.0,
            dropout_per_minibatch: false,
            learning_rate: 2.5e-4,
            anneal_lr: true,
            num_envs: 4,
            num_steps: 128,
            update_epochs: 4,
            num_minibatches: 4,
            clip_coef: 0.2,
            clip_vloss: true,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            discount: 0.99,
            gae_lambda: 0.95,
            norm_adv: true,
            normalize_obs: false,
            normalize_reward: false,
            checkpoint_interval: 100_000,
            hidden: crate::nets::HIDDEN,
        };
        if is_discrete_env(env) {
            return Ok(base);
        }
        Ok(Self {
            total_timesteps: 1_000_000,
            learning_rate: 3e-4,
            num_envs: 1,
            num_steps: 2048,
            update_epochs: 10,
            num_minibatches: 32,
            ent_coef: 0.0,
            normalize_obs: true,
            normalize_reward: true,
            checkpoint_interval: 200_000,
            ..base
        })
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.num_steps
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.num_minibatches
    }

    /// Number of collect/update iterations; partial rollouts are not run.
    pub fn num_iterations(&self) -> u64 {
        self.total_timesteps / self.batch_size() as u64
    }

    /// Checkpoint labels `interval, 2·interval, … ≤ total_timesteps`.
    pub fn checkpoint_labels(&self) -> Vec<u64> {
        (1..=self.total_timesteps / self.checkpoint_interval)
            .map(|k| k * self.checkpoint_interval)
            .collect()
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let kind = key_kind(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        match key {
            "env" => {
                let env = raw.trim();
                if !ENV_NAMES.contains(&env) {
                    return Err(Error::config("env", format!("unknown environment {env:?}; expected one of {ENV_NAMES:?}")));
                }
                self.env = env.to_string();
            }
            "seed" => self.seed = parse_value(key, kind, raw)?,
            "total_timesteps" => self.total_timesteps = parse_value(key, kind, raw)?,
            "gamma_train" => self.gamma_train = parse_value(key, kind, raw)?,
            "p_drop" => self.p_drop = parse_value(key, kind, raw)?,
            "dropout_per_minibatch" => self.dropout_per_minibatch = parse_value(key, kind, raw)?,
            "learning_rate" => self.learning_rate = parse_value(key, kind, raw)?,
            "anneal_lr" => self.anneal_lr = parse_value(key, kind, raw)?,
            "num_envs" => self.num_envs = parse_value(key, kind, raw)?,
            "num_steps" => self.num_steps = parse_value(key, kind, raw)?,
            "update_epochs" => self.update_epochs = parse_value(key, kind, raw)?,
            "num_minibatches" => self.num_minibatches = parse_value(key, kind, raw)?,
            "clip_coef" => self.clip_coef = parse_value(key, kind, raw)?,
            "clip_vloss" => self.clip_vloss = parse_value(key, kind, raw)?,
            "ent_coef" => self.ent_coef = parse_value(key, kind, raw)?,
            "vf_coef" => self.vf_coef = parse_value(key, kind, raw)?,
            "max_grad_norm" => self.max_grad_norm = parse_value(key, kind, raw)?,
            "adam_eps" => self.adam_eps = parse_value(key, kind, raw)?,
            "discount" => self.discount = parse_value(key, kind, raw)?,
            "gae_lambda" => self.gae_lambda = parse_value(key, kind, raw)?,
            "norm_adv" => self.norm_adv = parse_value(key, kind, raw)?,
            "normalize_obs" => self.normalize_obs = parse_value(key, kind, raw)?,
            "normalize_reward" => self.normalize_reward = parse_value(key, kind, raw)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, kind, raw)?,
            "hidden" => self.hidden = parse_value(key, kind, raw)?,
            _ => unreachable!("every key in KEYS is handled"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_timesteps", self.total_timesteps as f64),
            ("num_envs", self.num_envs as f64),
            ("num_steps", self.num_steps as f64),
            ("update_epochs", self.update_epochs as f64),
            ("num_minibatches", self.num_minibatches as f64),
            ("learning_rate", self.learning_rate),
            ("clip_coef", self.clip_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("adam_eps", self.adam_eps),
            ("checkpoint_interval", self.checkpoint_interval as f64),
            ("hidden", self.hidden as f64),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("ent_coef", self.ent_coef), ("vf_coef", self.vf_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be non-negative, got {v}")));
            }
        }
        for (field, v) in [("p_drop", self.p_drop), ("discount", self.discount), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !self.gamma_train.is_finite() {
            return Err(Error::config("gamma_train", "must be finite"));
        }
        if !self.batch_size().is_multiple_of(self.num_minibatches) {
            return Err(Error::config(
                "num_minibatches",
                format!("must divide the batch size {}", self.batch_size()),
            ));
        }
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return Err(Error::config("env", format!("unknown environment {:?}", self.env)));
        }
        Ok(())
    }

    /// Canonical text form; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        for &(key, kind) in KEYS {
            let v = &json[key];
            let shown = match (kind, v) {
                (Kind::Str, serde_json::Value::String(s)) => s.clone(),
                (Kind::Float, serde_json::Value::Number(n)) => format!("{:?}", n.as_f64().expect("float field")),
                _ => v.to_string(),
            };
            writeln!(out, "{key}: {} = {shown}", kind.name()).expect("writing to a String");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Parses config text on its own (no environment, no overrides).
    pub fn parse(text: &str) -> Result<Self> {
        Self::resolve(&parse_entries(text)?, &[], &[])
    }

    /// Layers file entries, `PGG_*` variables from `env_vars` and explicit
    /// overrides (highest precedence), then validates.
    pub fn resolve(
        file: &[(String, String)],
        env_vars: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut layered: Vec<(String, String)> = file.to_vec();
        for (name, value) in env_vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if key_kind(&key).is_none() {
                    return Err(Error::config(name.clone(), "unknown key"));
                }
                layered.push((key, value.clone()));
            }
        }
        for (key, value) in overrides {
            if key_kind(key).is_none() {
                return Err(Error::config(key.clone(), "unknown key"));
            }
            layered.push((key.clone(), value.clone()));
        }
        let env = layered
            .iter()
            .rev()
            .find(|(k, _)| k == "env")
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| Error::config("env", "required"))?;
        let mut cfg = Self::defaults_for(&env)?;
        for (key, value) in &layered {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `PGG_*` variables of the process and `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => parse_entries(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        let env_vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::resolve(&file, &env_vars, overrides)
    }
}

/// Splits config text into `(key, raw value)` pairs, checking declared types.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::config(format!("line {}", lineno + 1), format!("expected `key: type = value`, got {line:?}"));
        let (key, rest) = line.split_once(':').ok_or_else(bad)?;
        let (ty, value) = rest.split_once('=').ok_or_else(bad)?;
        let key = key.trim();
        let declared = Kind::parse(ty.trim())
            .ok_or_else(|| Error::config(key, format!("unknown type {:?}", ty.trim())))?;
        let expected = key_kind(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        if declared != expected {
            return Err(Error::config(
                key,
                format!("declared as {} but the field is {}", declared.name(), expected.name()),
            ));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn missing_env_is_required() {
        let err = TrainConfig::parse("seed: int = 3\n").unwrap_err();
        assert_eq!(err.to_string(), "env: required");
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = TrainConfig::defaults_for("pendulum").unwrap();
        cfg.gamma_train = 1.1;
        cfg.learning_rate = 3.0000000000000004e-4;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = TrainConfig::parse("# dropout run\nenv: str = cartpole   # discrete\np_drop: float = 0.1\n").unwrap();
        assert_eq!(cfg.p_drop, 0.1);
        assert_eq!(cfg.num_envs, 4);
        assert_eq!(cfg.batch_size(), 512);
        assert_eq!(cfg.minibatch_size(), 128);
        let cont = TrainConfig::parse("env: str = mountaincar-cont").unwrap();
        assert_eq!((cont.num_steps, cont.update_epochs, cont.ent_coef), (2048, 10, 0.0));
    }

    #[test]
    fn unknown_key_and_wrong_type_name_the_field() {
        let err = TrainConfig::parse("env: str = cartpole\nlearning_rat: float = 0.1\n").unwrap_err();
        assert!(err.to_string().starts_with("learning_rat:"), "{err}");
        let err = TrainConfig::parse("env: str = cartpole\nseed: float = 1\n").unwrap_err();
        assert!(err.to_string().starts_with("seed:"), "{err}");
        let err = TrainConfig::parse("env: str = cartpole\np_drop: float = 1.5\n").unwrap_err();
        assert!(err.to_string().starts_with("p_drop:"), "{err}");
        let err = TrainConfig::parse("env: str = cartpole\nnum_envs: int = many\n").unwrap_err();
        assert!(err.to_string().starts_with("num_envs:"), "{err}");
        let err = TrainConfig::parse("env: str = lunar\n").unwrap_err();
        assert!(err.to_string().starts_with("env:"), "{err}");
    }

    #[test]
    fn precedence_file_env_override() {
        let file = kv(&[("env", "cartpole"), ("gamma_train", "1.1"), ("seed", "4")]);
        let env = kv(&[("PGG_GAMMA_TRAIN", "1.2"), ("PGG_SEED", "5"), ("OTHER", "x")]);
        let cli = kv(&[("seed", "6")]);
        let cfg = TrainConfig::resolve(&file, &env, &cli).unwrap();
        assert_eq!((cfg.gamma_train, cfg.seed), (1.2, 6));
        assert!(TrainConfig::resolve(&file, &kv(&[("PGG_BOGUS", "1")]), &[]).is_err());
    }

    #[test]
    fn env_from_environment_selects_profile() {
        let cfg = TrainConfig::resolve(&[], &kv(&[("PGG_ENV", "pendulum")]), &[]).unwrap();
        assert_eq!(cfg.num_steps, 2048);
    }

    #[test]
    fn minibatches_must_divide_batch() {
        let err = TrainConfig::parse("env: str = cartpole\nnum_minibatches: int = 7\n").unwrap_err();
        assert!(err.to_string().starts_with("num_minibatches:"));
    }

    #[test]
    fn iterations_and_labels() {
        let mut cfg = TrainConfig::defaults_for("cartpole").unwrap();
        cfg.total_timesteps = 200_000;
        assert_eq!(cfg.num_iterations(), 390);
        assert_eq!(cfg.checkpoint_labels(), vec![100_000, 200_000]);
        cfg.total_timesteps = 100;
        assert_eq!(cfg.num_iterations(), 0);
        assert!(cfg.checkpoint_labels().is_empty());
    }
}
