//! Run configuration and the ablation switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtlError};

/// Fusion coefficient used for CIFAR-100-scale label sets.
pub const BETA_CIFAR100: f64 = 0.006;
/// Fusion coefficient used for ImageNet-1k-scale label sets.
pub const BETA_IMAGENET: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseScorer {
    Mcm,
    MaxLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Minority-balanced binary log-loss, weights `1/pi` per class.
    Omb,
    /// Unweighted variant, both weights `1/|batch|`.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankStrategy {
    Priority,
    Fifo,
    Rand,
    Sa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// `S_base + beta * S_cal`.
    Fusion,
    MaxSim,
    ExpSum,
    Idr,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = TtlError;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(TtlError::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

parse_enum!(BaseScorer, "base scorer", { "mcm" => BaseScorer::Mcm, "maxlogit" => BaseScorer::MaxLogit });
parse_enum!(LossKind, "loss", { "omb" => LossKind::Omb, "ce" => LossKind::Ce });
parse_enum!(BankStrategy, "bank strategy", {
    "priority" => BankStrategy::Priority,
    "fifo" => BankStrategy::Fifo,
    "rand" => BankStrategy::Rand,
    "sa" => BankStrategy::Sa,
});
parse_enum!(Calibration, "calibration", {
    "fusion" => Calibration::Fusion,
    "maxsim" => Calibration::MaxSim,
    "expsum" => Calibration::ExpSum,
    "idr" => Calibration::Idr,
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub bank_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWParams,
    /// Number of uniform segments the threshold search range is split into.
    pub threshold_grid: usize,
    /// Freeze learning and bank insertion once this many samples were seen.
    pub early_stop_after: Option<usize>,
    /// Sliding window over base scores for the pseudo-label threshold;
    /// `None` keeps every score seen so far.
    pub threshold_window: Option<usize>,
    pub base: BaseScorer,
    pub loss: LossKind,
    pub calibration: Calibration,
    pub bank_strategy: BankStrategy,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            alpha: 0.5,
            beta: BETA_CIFAR100,
            bank_capacity: 2048,
            batch_size: 64,
            learning_rate: 0.005,
            optimizer: AdamWParams::default(),
            threshold_grid: 100,
            early_stop_after: None,
            threshold_window: None,
            base: BaseScorer::Mcm,
            loss: LossKind::Omb,
            calibration: Calibration::Fusion,
            bank_strategy: BankStrategy::Priority,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TtlError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TtlError::Config(format!("{name} must be non-negative, got {v}")))
            }
        };
        positive(self.tau, "tau")?;
        nonneg(self.alpha, "alpha")?;
        nonneg(self.beta, "beta")?;
        positive(self.learning_rate, "learning_rate")?;
        positive(self.optimizer.eps, "eps")?;
        nonneg(self.optimizer.weight_decay, "weight_decay")?;
        for (v, name) in [(self.optimizer.beta1, "beta1"), (self.optimizer.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(TtlError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.bank_capacity == 0 {
            return Err(TtlError::Config("bank_capacity must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TtlError::Config("batch_size must be positive".into()));
        }
        if self.threshold_grid < 2 {
            return Err(TtlError::Config("threshold_grid must be at least 2".into()));
        }
        if self.early_stop_after == Some(0) {
            return Err(TtlError::Config("early_stop_after must be positive".into()));
        }
        if matches!(self.threshold_window, Some(w) if w < 2) {
            return Err(TtlError::Config("threshold_window must be at least 2".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides found in free text (manifest notes).
    /// Unknown keys and non-pair tokens are ignored; malformed values for
    /// known keys are errors.
    pub fn apply_notes(&mut self, notes: &str) -> Result<()> {
        for token in notes.split(|c: char| c.is_whitespace() || c == ',' || c == ';') {
            let Some((key, value)) = token.split_once('=') else {
                continue;
            };
            self.set(key.trim(), value.trim(), false)?;
        }
        Ok(())
    }

    /// Sets one named field from its string form. With `strict`, unknown
    /// keys are rejected.
    pub fn set(&mut self, key: &str, value: &str, strict: bool) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| TtlError::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "tau" => self.tau = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "bank_capacity" | "bank-k" => self.bank_capacity = num(key, value)?,
            "batch_size" | "batch" => self.batch_size = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "threshold_grid" | "grid" => self.threshold_grid = num(key, value)?,
            "early_stop_after" | "early-stop" => self.early_stop_after = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "base" => self.base = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "calibration" => self.calibration = value.parse()?,
            "bank_strategy" | "bank-strategy" => self.bank_strategy = value.parse()?,
            _ if strict => return Err(TtlError::Config(format!("unknown config key '{key}'"))),
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.bank_capacity, 2048);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.learning_rate, 0.005);
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.threshold_grid, 100);
        assert!(c.beta == BETA_CIFAR100 || c.beta == BETA_IMAGENET);
        c.validate().unwrap();
    }

    #[test]
    fn notes_override() {
        let mut c = RunConfig::default();
        c.apply_notes("synthetic stream; beta=0.05 loss=ce, unrelated=1").unwrap();
        assert_eq!(c.beta, 0.05);
        assert_eq!(c.loss, LossKind::Ce);
        assert!(c.apply_notes("beta=abc").is_err());
        assert!(c.set("nonsense", "1", true).is_err());
    }

    #[test]
    fn enum_names_round_trip() {
        for s in ["priority", "fifo", "rand", "sa"] {
            assert_eq!(s.parse::<BankStrategy>().unwrap().to_string(), s);
        }
        assert!("bogus".parse::<Calibration>().is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = RunConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
