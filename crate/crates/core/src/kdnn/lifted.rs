use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::Kdnn;
use super::KdnnConfig;
use crate::dataset::{HistoryMatrix, Scaler};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::NamedTensor;

/// `kind` tag in `lifted_model.json`.
pub const LIFTED_KIND: &str = "kdnn";

/// Frozen network plus the scaler it was trained with. `A` and `B` are the Koopman
/// layer weights verbatim; lifting applies the scaler, then the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedModel {
    pub network: Kdnn,
    pub scaler: Scaler,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LiftedFile {
    kind: String,
    config: KdnnConfig,
    scaler: Scaler,
    #[serde(rename = "A")]
    a: DenseMatrix,
    #[serde(rename = "B")]
    b: DenseMatrix,
    tensors: Vec<NamedTensor>,
}

impl LiftedModel {
    /// Errors with a usage error when no scaler is supplied.
    pub fn extract(network: &Kdnn, scaler: Option<Scaler>) -> Result<Self> {
        let scaler = scaler.ok_or_else(|| Error::Usage("extracting a lifted model requires a fitted scaler".into()))?;
        let big_n = network.config.lifted_dim;
        let a = DMatrix::from_row_slice(big_n, big_n, network.a.weight.data());
        let b = DMatrix::from_row_slice(big_n, network.config.m, network.b.weight.data());
        Ok(Self { network: network.clone(), scaler, a, b })
    }

    pub fn config(&self) -> &KdnnConfig {
        &self.network.config
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `Z = G(normalize(v))` for a raw p.u. history.
    pub fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
        let cfg = self.config();
        if v.n() != cfg.n || v.h() != cfg.h {
            return Err(Error::Shape(format!("history is {}x{}, model expects {}x{}", v.n(), v.h(), cfg.n, cfg.h)));
        }
        let x = self.scaler.norm_vs(v.as_slice());
        Ok(DVector::from_vec(self.network.lift_batch(&x, 1)?))
    }

    /// Decode a lifted state to a raw p.u. history.
    pub fn decode(&self, z: &DVector<f64>) -> Result<HistoryMatrix> {
        let y = self.network.decode_batch(z.as_slice(), 1)?;
        HistoryMatrix::new(self.config().n, self.config().h, self.scaler.denorm_vs(&y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LiftedFile {
            kind: LIFTED_KIND.into(),
            config: self.network.config,
            scaler: self.scaler,
            a: DenseMatrix::from_matrix(&self.a),
            b: DenseMatrix::from_matrix(&self.b),
            tensors: self.network.to_checkpoint().tensors,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LiftedFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.kind != LIFTED_KIND {
            return Err(Error::Parse(format!("lifted model kind {:?} is not {LIFTED_KIND:?}", file.kind)));
        }
        let ck = crate::nn::Checkpoint { tensors: file.tensors };
        let model = Self::extract(&Kdnn::from_checkpoint(file.config, &ck)?, Some(file.scaler))?;
        if file.a.to_matrix()? != model.a || file.b.to_matrix()? != model.b {
            return Err(Error::Parse("A/B arrays disagree with the stored Koopman weights".into()));
        }
        Ok(model)
    }
}
