//! Threshold gradient compression with residual accumulation, and
//! communication accounting.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::runtime::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clipped {
    pub transmit: Vec<f64>,
    pub keep: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Splits `accumulated` into the components with `|g| > thr` (sent) and the
/// rest (kept locally). `transmit + keep == accumulated` exactly.
pub fn clip_and_mask(accumulated: &[f64], thr: f64) -> Clipped {
    assert!(thr >= 0.0, "threshold must be non-negative");
    let mask: Vec<bool> = accumulated.iter().map(|g| g.abs() > thr).collect();
    let transmit = accumulated
        .iter()
        .zip(&mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    let keep = accumulated
        .iter()
        .zip(&mask)
        .map(|(&g, &m)| if m { 0.0 } else { g })
        .collect();
    Clipped { transmit, keep, mask }
}

/// Untransmitted gradient mass for one parameter group. The slot travels
/// with the group, so under alternate training the next node to own the
/// group picks up where the previous one stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSlot {
    pub group: usize,
    pub indices: Vec<usize>,
    pub residual: Vec<f64>,
    /// Running sum of every raw gradient folded into this slot.
    pub raw_total: Vec<f64>,
}

impl ResidualSlot {
    pub fn new(group: usize, indices: Vec<usize>) -> Self {
        let n = indices.len();
        Self {
            group,
            indices,
            residual: vec![0.0; n],
            raw_total: vec![0.0; n],
        }
    }

    /// Adds a raw gradient (indexed like `indices`), clips, and returns the
    /// transmitted `(index, value)` pairs.
    pub fn absorb(&mut self, raw: &[f64], thr: f64) -> Vec<(usize, f64)> {
        assert_eq!(raw.len(), self.indices.len());
        for ((r, t), g) in self.residual.iter_mut().zip(&mut self.raw_total).zip(raw) {
            *r += g;
            *t += g;
        }
        let clipped = clip_and_mask(&self.residual, thr);
        self.residual = clipped.keep;
        self.indices
            .iter()
            .zip(clipped.transmit)
            .zip(clipped.mask)
            .filter(|(_, m)| *m)
            .map(|((&i, v), _)| (i, v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub iteration: u64,
    pub transmitted: u64,
    pub circuits: u64,
}

/// Running communication volume and circuit count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    /// Gradient components sent to the server (communication volume).
    pub transmitted: u64,
    /// Circuits executed for gradient estimation.
    pub circuits: u64,
    /// Circuits executed by convergence tests (not part of the speed-up).
    pub test_circuits: u64,
    pub per_iteration: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn record(&mut self, iteration: u64, transmitted: u64, circuits: u64) {
        self.transmitted += transmitted;
        self.circuits += circuits;
        self.per_iteration.push(LedgerEntry {
            iteration,
            transmitted,
            circuits,
        });
    }
}

/// `1 - cv_with / cv_without`.
pub fn compression_ratio_counts(cv_with: u64, cv_without: u64) -> Result<f64> {
    if cv_without == 0 {
        return Err(Error::Ledger("uncompressed volume is zero".into()));
    }
    Ok(1.0 - cv_with as f64 / cv_without as f64)
}

pub fn compression_ratio(with: &CommLedger, without: &CommLedger) -> Result<f64> {
    compression_ratio_counts(with.transmitted, without.transmitted)
}

/// Trains with threshold compression at `thr`.
pub fn train_compressed(config: &TrainConfig, dataset: &Dataset, thr: f64) -> Result<TrainOutcome> {
    if !(thr >= 0.0) {
        return Err(Error::Spec(format!("threshold {thr} must be >= 0")));
    }
    let config = TrainConfig {
        threshold: Some(thr),
        ..config.clone()
    };
    train(&config, dataset)
}
