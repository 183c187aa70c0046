use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which KL term the optimizer sees. The logged loss always uses the true
/// `KL(q || p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlPhase {
    /// Posterior against `N(0, I)` plus the prior fitted to a detached
    /// posterior.
    StandardPrior,
    TrueKl,
}

impl FromStr for KlPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_prior_phase" => Ok(KlPhase::StandardPrior),
            "true_kl_phase" => Ok(KlPhase::TrueKl),
            _ => Err(Error::Config(format!("unknown kl_phase {s:?}"))),
        }
    }
}

impl fmt::Display for KlPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlPhase::StandardPrior => "standard_prior_phase",
            KlPhase::TrueKl => "true_kl_phase",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Updates whose global gradient norm exceeds this are skipped.
    pub skip_threshold: f64,
    pub ema_rate: f64,
    pub kl_phase: KlPhase,
    pub total_steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic ones.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 32,
            weight_decay: 0.01,
            skip_threshold: 400.0,
            ema_rate: 0.999,
            kl_phase: KlPhase::StandardPrior,
            total_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.skip_threshold.is_nan() || self.skip_threshold <= 0.0 {
            return bad(format!("skip_threshold must be positive, got {}", self.skip_threshold));
        }
        if !(self.ema_rate >= 0.0 && self.ema_rate < 1.0) {
            return bad(format!("ema_rate must lie in [0, 1), got {}", self.ema_rate));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("lr must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.learning_rate.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("skip_threshold".into(), self.skip_threshold.to_string()),
            ("ema_rate".into(), self.ema_rate.to_string()),
            ("kl_phase".into(), self.kl_phase.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ]
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key; returns an error naming the key on a bad value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "lr" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "skip_threshold" => self.skip_threshold = parse_threshold(value)?,
            "ema_rate" => self.ema_rate = num(key, value)?,
            "kl_phase" => self.kl_phase = value.parse()?,
            "total_steps" => self.total_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_threshold(v: &str) -> Result<f64> {
    match v {
        "inf" | "infinity" | "none" => Ok(f64::INFINITY),
        _ => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value {v:?} for skip_threshold"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.skip_threshold = f64::INFINITY;
        c.kl_phase = KlPhase::TrueKl;
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.ema_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.skip_threshold = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().set("kl_phase", "warmup").is_err());
        assert!(!TrainConfig::default().set("nope", "1").unwrap());
    }
}
