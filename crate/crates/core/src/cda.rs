//! Mixing-probability control.
//!
//! In consensus mode the controller collects the per-step student agreement
//! `a_n`, turns it into a signed signal (`a - 1` after a mixed step, `a`
//! otherwise) and every `step_size` observations rescales `q_m` by
//! `1 + Σ g(a_n)`.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

pub const Q_FLOOR: f64 = 0.01;
pub const Q_CEIL: f64 = 1.0;

/// Scheduler for the mixing probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CdaConfig {
    Constant { q: f64 },
    Curriculum { q_min: f64, q_max: f64 },
    Consensus { q_init: f64, step_size: usize },
}

impl Default for CdaConfig {
    fn default() -> Self {
        CdaConfig::Consensus {
            q_init: 0.25,
            step_size: 50,
        }
    }
}

impl CdaConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |q: f64| (0.0..=1.0).contains(&q);
        match *self {
            CdaConfig::Constant { q } if unit(q) => Ok(()),
            CdaConfig::Curriculum { q_min, q_max } if unit(q_min) && unit(q_max) && q_min <= q_max => Ok(()),
            CdaConfig::Consensus { q_init, step_size } if unit(q_init) && step_size >= 1 => Ok(()),
            other => Err(Error::Config(format!("invalid mixing schedule {other:?}"))),
        }
    }

    pub fn initial_q(&self) -> f64 {
        match *self {
            CdaConfig::Constant { q } => q,
            CdaConfig::Curriculum { q_min, .. } => q_min,
            CdaConfig::Consensus { q_init, .. } => q_init,
        }
    }
}

/// Fraction of pairwise-agreeing predictions over all unordered student pairs
/// and points.
pub fn consensus_fraction(predictions: &[&[Label]]) -> Result<f64> {
    if predictions.len() < 2 {
        return Err(Error::InvalidArgument("consensus needs at least two students".into()));
    }
    let m = predictions[0].len();
    for p in predictions {
        Error::check_len("student predictions", m, p.len())?;
    }
    if m == 0 {
        return Err(Error::InvalidArgument("consensus needs at least one point".into()));
    }
    let s = predictions.len();
    let mut agree = 0u64;
    for i in 0..s {
        for j in i + 1..s {
            agree += predictions[i]
                .iter()
                .zip(predictions[j])
                .filter(|(a, b)| a == b)
                .count() as u64;
        }
    }
    let pairs = (s * (s - 1) / 2) as u64;
    Ok(agree as f64 / (pairs * m as u64) as f64)
}

pub fn transform(a: f64, was_mixed: bool) -> f64 {
    if was_mixed {
        a - 1.0
    } else {
        a
    }
}

pub fn curriculum_q(epoch: usize, max_epochs: usize, q_min: f64, q_max: f64) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::InvalidArgument("curriculum needs a positive epoch budget".into()));
    }
    let t = epoch.min(max_epochs) as f64 / max_epochs as f64;
    Ok(q_min + t * (q_max - q_min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdaController {
    config: CdaConfig,
    q_m: f64,
    buffer: Vec<(f64, bool)>,
}

impl CdaController {
    pub fn new(config: CdaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            q_m: config.initial_q(),
            buffer: Vec::new(),
        })
    }

    pub fn q_m(&self) -> f64 {
        self.q_m
    }

    pub fn config(&self) -> CdaConfig {
        self.config
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Records one step's consensus. Returns the new `q_m` when this
    /// observation completed a window.
    pub fn observe(&mut self, a: f64, was_mixed: bool) -> Option<f64> {
        let CdaConfig::Consensus { step_size, .. } = self.config else {
            return None;
        };
        self.buffer.push((a, was_mixed));
        if self.buffer.len() < step_size {
            return None;
        }
        let signal: f64 = self.buffer.iter().map(|&(a, m)| transform(a, m)).sum();
        self.buffer.clear();
        self.q_m = (self.q_m * (1.0 + signal)).clamp(Q_FLOOR, Q_CEIL);
        Some(self.q_m)
    }

    /// Epoch hook; only the curriculum schedule reacts.
    pub fn start_epoch(&mut self, epoch: usize, max_epochs: usize) -> Result<()> {
        if let CdaConfig::Curriculum { q_min, q_max } = self.config {
            self.q_m = curriculum_q(epoch, max_epochs, q_min, q_max)?;
        }
        Ok(())
    }
}
