#![allow(dead_code)]

use koopman_mpc::kdnn::{Batch, Kdnn, KdnnConfig, Tape};
use koopman_mpc::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;

/// Coordinate-wise relative error with an absolute floor for vanishing gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over every coordinate of every tensor, comparing `grads`
/// to central differences of `loss` in the tensors reachable through `params`.
pub fn worst_fd_error<M: Clone>(
    model: &M,
    grads: &[Vec<f64>],
    tensors_mut: impl Fn(&mut M) -> Vec<&mut Tensor>,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = tensors_mut(&mut probe)[ti].data()[j];
            tensors_mut(&mut probe)[ti].data_mut()[j] = orig + FD_STEP;
            let up = loss(&probe);
            tensors_mut(&mut probe)[ti].data_mut()[j] = orig - FD_STEP;
            let down = loss(&probe);
            tensors_mut(&mut probe)[ti].data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Random miniature KDNN configuration and batch for draw `seed`.
pub fn mini_kdnn(seed: u64) -> (Kdnn, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let h = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=2);
    let cfg = KdnnConfig { n, h, m, lifted_dim: n + rng.gen_range(1..=4), hidden: rng.gen_range(1..=4), seed };
    let size = rng.gen_range(1..=3);
    let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let batch = Batch { size, v_k: draw(size * n * h), u: draw(size * m), v_next: draw(size * n * h) };
    (Kdnn::new(cfg).unwrap(), batch)
}

/// Worst finite-difference error of the full KDNN loss gradient.
pub fn kdnn_fd_error(model: &Kdnn, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    model.forward_batch(batch, &mut tape).unwrap();
    let (_, g) = model.backward(&tape, batch).unwrap();
    let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.data().to_vec()).collect();
    worst_fd_error(model, &grads, |m| m.tensors_mut(), |m| m.loss(batch).unwrap().total())
}
