use super::{EpochRecord, Result, TrainError};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// A per-epoch quantity that callbacks watch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Monitor {
    ValLoss,
    ValAuc,
    ValF1,
    ValAccuracy,
    TrainLoss,
}

impl Monitor {
    pub const ALL: [Monitor; 5] = [Self::ValLoss, Self::ValAuc, Self::ValF1, Self::ValAccuracy, Self::TrainLoss];

    pub fn key(self) -> &'static str {
        match self {
            Self::ValLoss => "val_loss",
            Self::ValAuc => "val_auc",
            Self::ValF1 => "val_f1",
            Self::ValAccuracy => "val_accuracy",
            Self::TrainLoss => "train_loss",
        }
    }

    /// Losses improve downwards, scores upwards.
    pub fn lower_is_better(self) -> bool {
        matches!(self, Self::ValLoss | Self::TrainLoss)
    }

    pub fn value(self, r: &EpochRecord) -> f64 {
        match self {
            Self::ValLoss => r.val_loss,
            Self::ValAuc => r.val_auc,
            Self::ValF1 => r.val_f1,
            Self::ValAccuracy => r.val_accuracy,
            Self::TrainLoss => r.train_loss,
        }
    }

    /// Whether `current` beats `best` by more than `min_delta`.
    pub fn improves(self, current: f64, best: f64, min_delta: f64) -> bool {
        if self.lower_is_better() {
            current < best - min_delta
        } else {
            current > best + min_delta
        }
    }

    /// Starting value that any finite metric improves on.
    pub fn worst(self) -> f64 {
        if self.lower_is_better() {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl FromStr for Monitor {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.key() == s).ok_or_else(|| TrainError::UnknownMonitor(s.to_string()))
    }
}

impl fmt::Display for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl Serialize for Monitor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for Monitor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub monitor: Monitor,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { enabled: true, monitor: Monitor::ValLoss, patience: 10, min_delta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub enabled: bool,
    pub monitor: Monitor,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { enabled: true, monitor: Monitor::ValLoss, factor: 0.1, patience: 5, min_delta: 0.0, min_lr: 1e-6 }
    }
}

/// Stops when the monitor has gone `patience` consecutive epochs without
/// improving on its best value by more than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub monitor: Monitor,
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(monitor: Monitor, patience: usize, min_delta: f64) -> Self {
        Self { monitor, patience, min_delta, best: monitor.worst(), wait: 0 }
    }

    /// Feeds one epoch's value; returns true when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.monitor.improves(value, self.best, self.min_delta) {
            self.best = value;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without improvement, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauLr {
    pub monitor: Monitor,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    pub best: f64,
    pub wait: usize,
}

impl PlateauLr {
    pub fn new(cfg: &PlateauConfig) -> Self {
        Self {
            monitor: cfg.monitor,
            factor: cfg.factor,
            patience: cfg.patience,
            min_delta: cfg.min_delta,
            min_lr: cfg.min_lr,
            best: cfg.monitor.worst(),
            wait: 0,
        }
    }

    /// Feeds one epoch's value and returns the learning rate to use next.
    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if self.monitor.improves(value, self.best, self.min_delta) {
            self.best = value;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Epoch (1-based position in `values`) at which early stopping fires.
pub fn early_stop_epoch(values: &[f64], monitor: Monitor, patience: usize, min_delta: f64) -> Option<usize> {
    let mut s = EarlyStopping::new(monitor, patience, min_delta);
    values.iter().position(|&v| s.observe(v)).map(|i| i + 1)
}

/// Learning rate in force after each epoch.
pub fn plateau_schedule(values: &[f64], lr0: f64, cfg: &PlateauConfig) -> Vec<f64> {
    let mut s = PlateauLr::new(cfg);
    let mut lr = lr0;
    values
        .iter()
        .map(|&v| {
            lr = s.observe(v, lr);
            lr
        })
        .collect()
}
