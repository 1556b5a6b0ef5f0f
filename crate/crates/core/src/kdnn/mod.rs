//! Koopman deep network: an LSTM/FC encoder lifts a voltage history to `N`
//! coordinates, two bias-free linear layers advance it (`A z + B u`), and a
//! FC/LSTM decoder maps lifted states back to histories.

mod lifted;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lifted::{LiftedModel, LIFTED_KIND};
pub use model::{Batch, Kdnn, KdnnOutput, LossParts, Tape};
pub use train::{train, EpochStats, TrainConfig, TrainingHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdnnConfig {
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub m: usize,
    /// Lifted dimension.
    #[serde(rename = "N")]
    pub lifted_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl KdnnConfig {
    /// Defaults sized for the six-bus surrogate (`N = 32`, hidden 32).
    pub fn new(n: usize, h: usize, m: usize) -> Self {
        Self { n, h, m, lifted_dim: 32, hidden: 32, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [("n", self.n), ("H", self.h), ("m", self.m), ("hidden", self.hidden)] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.lifted_dim <= self.n {
            bad.push(format!("N = {} must exceed n = {}", self.lifted_dim, self.n));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }

    /// The rule of thumb `N > 5n`.
    pub fn lifts_generously(&self) -> bool {
        self.lifted_dim > 5 * self.n
    }
}
