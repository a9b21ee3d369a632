use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::DataType;
use crate::error::{Error, Result};

/// A (language, data type) pair: the granularity of the adaptive gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LossKey {
    pub language: usize,
    pub data_type: DataType,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReweightConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Loss threshold; the gate opens only at or below it.
    pub loss_threshold: f64,
    /// First step at which the gate may open.
    pub start_step: u64,
    pub ema_decay: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            loss_threshold: 1.6,
            start_step: 2_000_000,
            ema_decay: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateEntry {
    pub ema_ce: f64,
    pub gamma_l: f64,
    pub observations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    PlainCe,
    NaiveFl,
    AdaptiveFl,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::PlainCe => "ce",
            Self::NaiveFl => "fl",
            Self::AdaptiveFl => "adapt-fl",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "plain_ce" => Ok(Self::PlainCe),
            "fl" | "naive_fl" => Ok(Self::NaiveFl),
            "adapt-fl" | "adaptive_fl" => Ok(Self::AdaptiveFl),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// Per-key EMA of the batch-mean CE and the resulting hard gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweightState {
    pub cfg: ReweightConfig,
    pub entries: BTreeMap<LossKey, GateEntry>,
}

impl ReweightState {
    pub fn new(cfg: ReweightConfig) -> Self {
        Self {
            cfg,
            entries: BTreeMap::new(),
        }
    }

    /// γ if the EMA loss is at or under the threshold and `step ≥ S`, else 0.
    pub fn gate(&self, ema_ce: f64, step: u64) -> f64 {
        if ema_ce <= self.cfg.loss_threshold && step >= self.cfg.start_step {
            self.cfg.gamma
        } else {
            0.0
        }
    }

    /// Current exponent for `key`; unseen keys are closed.
    pub fn gamma_for(&self, key: LossKey) -> f64 {
        self.entries.get(&key).map_or(0.0, |e| e.gamma_l)
    }

    /// Folds one batch-mean CE into the EMA of `key` and re-evaluates its
    /// gate. The first observation initializes the EMA.
    pub fn observe(&mut self, key: LossKey, mean_ce: f64, step: u64) {
        let decay = self.cfg.ema_decay;
        let entry = self.entries.entry(key).or_insert(GateEntry {
            ema_ce: mean_ce,
            gamma_l: 0.0,
            observations: 0,
        });
        if entry.observations > 0 {
            entry.ema_ce = decay * entry.ema_ce + (1.0 - decay) * mean_ce;
        }
        entry.observations += 1;
        let ema = entry.ema_ce;
        let g = self.gate(ema, step);
        self.entries.get_mut(&key).expect("just inserted").gamma_l = g;
    }

    /// Sets the EMA of `key` directly and re-evaluates its gate.
    pub fn set_ema(&mut self, key: LossKey, ema_ce: f64, step: u64) {
        let gamma_l = self.gate(ema_ce, step);
        let e = self.entries.entry(key).or_insert(GateEntry {
            ema_ce,
            gamma_l,
            observations: 0,
        });
        e.ema_ce = ema_ce;
        e.gamma_l = gamma_l;
    }

    /// Updates every key present in `per_key` (mean CE values).
    pub fn update<'a>(&mut self, per_key: impl IntoIterator<Item = (&'a LossKey, f64)>, step: u64) {
        for (k, ce) in per_key {
            self.observe(*k, ce, step);
        }
    }

    /// Whether any gate is open before the start step (never expected).
    pub fn open_before_start(&self, step: u64) -> bool {
        step < self.cfg.start_step && self.entries.values().any(|e| e.gamma_l != 0.0)
    }
}
