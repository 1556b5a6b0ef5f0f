use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, Kdnn};
use super::KdnnConfig;
use crate::dataset::{Dataset, Scaler};
use crate::error::{Error, Result};
use crate::nn::{adam_step, mae, mse, AdamConfig, AdamState};

/// Rows per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-MAE improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Seeds the mini-batch shuffler.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, max_epochs: 500, patience: 20, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse_next: f64,
    pub train_mse_k: f64,
    pub train_mae_next: f64,
    pub train_mae_k: f64,
    pub val_mse_next: f64,
    pub val_mse_k: f64,
    pub val_mae_next: f64,
    pub val_mae_k: f64,
}

impl EpochStats {
    /// Early-stopping score: mean of the two validation MAEs.
    pub fn val_mae(&self) -> f64 {
        0.5 * (self.val_mae_next + self.val_mae_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Errors of one dataset pass, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassMetrics {
    pub mse_next: f64,
    pub mse_k: f64,
    pub mae_next: f64,
    pub mae_k: f64,
}

pub(crate) fn normalized_batch(ds: &Dataset, scaler: &Scaler) -> Batch {
    Batch::from_samples(ds.samples.iter().map(|s| scaler.normalize(s)).collect::<Vec<_>>().iter())
}

impl Kdnn {
    /// Predictions `(v_next_hat, v_k_hat)` for every row of `batch`, evaluated in chunks.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut yn, mut yk) = (Vec::new(), Vec::new());
        let idx: Vec<usize> = (0..batch.size).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let part = batch.gather(chunk);
            let mut tape = super::Tape::new();
            self.forward_batch(&part, &mut tape)?;
            let (a, b) = tape.predictions().expect("just recorded");
            yn.extend_from_slice(a);
            yk.extend_from_slice(b);
        }
        Ok((yn, yk))
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<PassMetrics> {
        let (yn, yk) = self.predict(batch)?;
        Ok(PassMetrics {
            mse_next: mse(&batch.v_next, &yn)?,
            mse_k: mse(&batch.v_k, &yk)?,
            mae_next: mae(&batch.v_next, &yn)?,
            mae_k: mae(&batch.v_k, &yk)?,
        })
    }
}

/// Mini-batch ADAM on `mean_b [MSE(v_next) + MSE(v_k)]` with early stopping on
/// validation MAE; returns the best-scoring parameters. Both datasets are raw and
/// normalized with `train.scaler`.
pub fn train(
    config: KdnnConfig,
    train: &Dataset,
    val: &Dataset,
    hyper: &TrainConfig,
) -> Result<(Kdnn, TrainingHistory)> {
    let scaler = train
        .scaler
        .ok_or_else(|| Error::Usage("training dataset carries no fitted scaler".into()))?;
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} set is empty")));
        }
        if (ds.n, ds.h, ds.m) != (config.n, config.h, config.m) {
            return Err(Error::Shape(format!(
                "{name} set has n={}, H={}, m={}; model expects n={}, H={}, m={}",
                ds.n, ds.h, ds.m, config.n, config.h, config.m
            )));
        }
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let tr = normalized_batch(train, &scaler);
    let va = normalized_batch(val, &scaler);

    let mut model = Kdnn::new(config)?;
    let mut adam = AdamState::new(hyper.adam, &model.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..tr.size).collect();
    let mut history = TrainingHistory { epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut best = (f64::INFINITY, model.clone());

    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = tr.gather(chunk);
            let mut tape = super::Tape::new();
            model.forward_batch(&batch, &mut tape)?;
            let (parts, grads) = model.backward(&tape, &batch)?;
            if !parts.total().is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss became {}", parts.total()) });
            }
            adam_step(&mut model.tensors_mut(), &grads.tensors(), &mut adam)
                .map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
        }
        let t = model.evaluate(&tr)?;
        let v = model.evaluate(&va)?;
        let stats = EpochStats {
            epoch,
            train_mse_next: t.mse_next,
            train_mse_k: t.mse_k,
            train_mae_next: t.mae_next,
            train_mae_k: t.mae_k,
            val_mse_next: v.mse_next,
            val_mse_k: v.mse_k,
            val_mae_next: v.mae_next,
            val_mae_k: v.mae_k,
        };
        if !stats.val_mae().is_finite() {
            return Err(Error::Training { epoch, reason: "validation error is not finite".into() });
        }
        history.epochs.push(stats);
        if stats.val_mae() < best.0 {
            best = (stats.val_mae(), model.clone());
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= hyper.patience {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best.1, history))
}
