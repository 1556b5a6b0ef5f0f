//! Koopman-embedding model predictive control for post-fault voltage recovery.
//!
//! The pipeline: simulate a nonlinear controlled plant ([`plant`]), window the
//! trajectories into training triples ([`dataset`]), learn an encoder / linear /
//! decoder network ([`kdnn`], built on the small neural stack in [`nn`]) or a
//! dictionary baseline ([`edmd`]), then run shrinking-horizon MPC in the lifted
//! linear space ([`mpc`]) and score it against baselines ([`eval`]).

pub mod dataset;
pub mod edmd;
pub mod error;
pub mod eval;
pub mod kdnn;
pub mod linalg;
pub mod mpc;
pub mod nn;
pub mod pipeline;
pub mod plant;

pub use error::{Error, Result};

/// Reference voltage (p.u.).
pub const V_REF: f64 = 1.0;

/// 64-bit mix of a master seed with two stream indices (splitmix64 finalizer applied
/// to each folded word). Order independent of any scheduling, so parallel workers
/// derive the same per-task seeds.
pub fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let h = splitmix(master);
    let h = splitmix(h ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix(h ^ b.wrapping_mul(0xA076_1D64_78BD_642F))
}
