//! Minimal neural stack: dense tensors, fully connected and LSTM layers with
//! hand-written reverse-mode gradients, ADAM, and regression metrics.
//!
//! Batched tensors are row-major `batch x features` slices. Gradient containers are
//! zeroed copies of the layer they belong to, so an optimizer can walk parameters and
//! gradients in the same order.

mod adam;
mod checkpoint;
mod fc;
mod lstm;
mod metrics;
pub mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use fc::{FcCache, FcLayer};
pub use lstm::{LstmCache, LstmLayer, LstmOutput};
pub use metrics::{mae, mse, r2};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}
