//! Run configuration and the stage functions shared by the command-line front end
//! and the acceptance suite.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{fit_scaler, generate_with, split, Dataset, PolicyKind, Scaler};
use crate::edmd::{self, Dictionary, EdmdModel};
use crate::error::{Error, Result};
use crate::eval::{one_step_scores, CompareSettings, OneStepScores, VvcParams};
use crate::kdnn::{self, Kdnn, KdnnConfig, LiftedModel, TrainConfig, TrainingHistory};
use crate::mix_seed;
use crate::mpc::{MpcConfig, SolverSettings, StateCost};
use crate::nn::AdamConfig;
use crate::plant::{PlantConfig, PlantModel, Schedule, ScheduleConfig};

/// Stream tag for split seeds.
const SPLIT_STREAM: u64 = 0x5_9117;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_loads: usize,
    pub policies: Vec<PolicyKind>,
    /// Train fraction of the train/test split.
    pub split: f64,
    /// Fraction of the training part held out for early stopping.
    pub val_fraction: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { n_loads: 250, policies: PolicyKind::ALL.to_vec(), split: 0.7, val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdnnParams {
    pub lifted_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for KdnnParams {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            lifted_dim: 32,
            hidden: 16,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

/// Dictionary as written in a config or on the command line; `rbf` centers are
/// sampled from the training histories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DictionarySpec {
    Identity,
    Polynomial { degree: usize },
    Rbf { count: usize, width: f64 },
}

impl FromStr for DictionarySpec {
    type Err = Error;

    /// `identity`, `polynomial:<degree>` or `rbf:<count>:<width>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidArgument(format!("dictionary {s:?}: expected identity, polynomial:<degree> or rbf:<count>:<width>"));
        match parts.as_slice() {
            ["identity"] => Ok(Self::Identity),
            ["polynomial", d] => Ok(Self::Polynomial { degree: d.parse().map_err(|_| bad())? }),
            ["rbf", k, w] => Ok(Self::Rbf { count: k.parse().map_err(|_| bad())?, width: w.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

impl DictionarySpec {
    fn violations(&self) -> Vec<String> {
        match *self {
            Self::Identity => vec![],
            Self::Polynomial { degree: 0 } => vec!["edmd.dictionary.degree: must be >= 1".into()],
            Self::Polynomial { .. } => vec![],
            Self::Rbf { count, width } => {
                let mut v = Vec::new();
                if count == 0 {
                    v.push("edmd.dictionary.count: must be >= 1".into());
                }
                if !(width > 0.0 && width.is_finite()) {
                    v.push("edmd.dictionary.width: must be > 0".into());
                }
                v
            }
        }
    }

    pub fn resolve(&self, train: &Dataset, scaler: &Scaler, seed: u64) -> Result<Dictionary> {
        match *self {
            Self::Identity => Ok(Dictionary::Identity),
            Self::Polynomial { degree } => Ok(Dictionary::Polynomial { degree }),
            Self::Rbf { count, width } => Dictionary::rbf_from_data(train, scaler, count, width, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdParams {
    pub dictionary: DictionarySpec,
    pub ridge: f64,
}

impl Default for EdmdParams {
    fn default() -> Self {
        Self { dictionary: DictionarySpec::Identity, ridge: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcParams {
    pub q_weight: f64,
    pub r_weight: f64,
    pub state_cost: StateCost,
    pub v_ref: f64,
    /// Overrides the plant's per-step control ceiling in closed loop.
    pub u_max: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
}

impl Default for MpcParams {
    fn default() -> Self {
        let c = MpcConfig::default();
        Self {
            q_weight: c.q_weight,
            r_weight: c.r_weight,
            state_cost: c.state_cost,
            v_ref: c.v_ref,
            u_max: None,
            tol: c.solver.tol,
            max_iter: c.solver.max_iter,
            polish: c.solver.polish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub cases: usize,
    /// Fixed load factors for the sweep written by `run-mpc`.
    pub loads: Vec<f64>,
    pub vvc_v_db: f64,
    pub vvc_k_v: f64,
    /// Buses summed in `J`; empty means all.
    pub monitored: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        let v = VvcParams::default();
        Self { cases: 100, loads: vec![0.9, 0.95, 1.0, 1.05, 1.1], vvc_v_db: v.v_db, vvc_k_v: v.k_v, monitored: vec![] }
    }
}

/// `run.json`. `plant` is resolved relative to the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Replaces the plant file's schedule when present.
    pub schedule: Option<ScheduleConfig>,
    pub dataset: DatasetParams,
    pub kdnn: KdnnParams,
    pub edmd: EdmdParams,
    pub mpc: MpcParams,
    pub eval: EvalParams,
    /// Used when no output directory is given on the command line.
    pub output_dir: Option<PathBuf>,
}

fn check(out: &mut Vec<String>, ok: bool, msg: &str) {
    if !ok {
        out.push(msg.to_string());
    }
}

fn unit_open(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl RunConfig {
    /// Every violated field of the run config and of the referenced plant config.
    pub fn violations(&self, base_dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        let plant = match &self.plant {
            None => {
                out.push("plant: missing plant config path".into());
                None
            }
            Some(p) => {
                let path = base_dir.join(p);
                match std::fs::read_to_string(&path).map_err(Error::from).and_then(|s| PlantConfig::from_json_str(&s)) {
                    Ok(cfg) => Some(cfg),
                    Err(e) => {
                        out.push(format!("plant: cannot read {}: {e}", path.display()));
                        None
                    }
                }
            }
        };
        if let Some(cfg) = &plant {
            out.extend(cfg.violations().into_iter().map(|v| format!("plant.{v}")));
        }
        check(&mut out, self.seed.is_some(), "seed: missing (no implicit entropy)");
        if let Some(s) = &self.schedule {
            if let Err(e) = Schedule::from_config(s) {
                out.push(format!("schedule: {e}"));
            }
        }

        let d = &self.dataset;
        check(&mut out, d.n_loads >= 1, "dataset.n_loads: must be >= 1");
        check(&mut out, !d.policies.is_empty(), "dataset.policies: must not be empty");
        check(&mut out, unit_open(d.split), "dataset.split: must lie in (0, 1)");
        check(&mut out, unit_open(d.val_fraction), "dataset.val_fraction: must lie in (0, 1)");

        let k = &self.kdnn;
        if let Some(cfg) = &plant {
            check(&mut out, k.lifted_dim > cfg.n, "kdnn.lifted_dim: must exceed the bus count n");
        }
        check(&mut out, k.hidden >= 1, "kdnn.hidden: must be >= 1");
        check(&mut out, k.batch_size >= 1, "kdnn.batch_size: must be >= 1");
        check(&mut out, k.max_epochs >= 1, "kdnn.max_epochs: must be >= 1");
        check(&mut out, k.lr > 0.0 && k.lr.is_finite(), "kdnn.lr: must be > 0");
        check(&mut out, (0.0..1.0).contains(&k.beta1), "kdnn.beta1: must lie in [0, 1)");
        check(&mut out, (0.0..1.0).contains(&k.beta2), "kdnn.beta2: must lie in [0, 1)");
        check(&mut out, k.eps > 0.0, "kdnn.eps: must be > 0");

        out.extend(self.edmd.dictionary.violations());
        check(&mut out, self.edmd.ridge >= 0.0 && self.edmd.ridge.is_finite(), "edmd.ridge: must be >= 0");

        let m = &self.mpc;
        check(&mut out, m.q_weight >= 0.0 && m.q_weight.is_finite(), "mpc.q_weight: must be >= 0");
        check(&mut out, m.r_weight >= 0.0 && m.r_weight.is_finite(), "mpc.r_weight: must be >= 0");
        check(&mut out, m.v_ref > 0.0 && m.v_ref.is_finite(), "mpc.v_ref: must be > 0");
        if let Some(u) = m.u_max {
            check(&mut out, u >= 0.0 && u.is_finite(), "mpc.u_max: must be >= 0");
            if let Some(cfg) = &plant {
                check(&mut out, u <= cfg.u_max, "mpc.u_max: must not exceed the plant's u_max");
            }
        }
        check(&mut out, m.tol > 0.0, "mpc.tol: must be > 0");
        check(&mut out, m.max_iter >= 1, "mpc.max_iter: must be >= 1");

        let e = &self.eval;
        check(&mut out, e.cases >= 1, "eval.cases: must be >= 1");
        check(&mut out, e.loads.iter().all(|&l| l > 0.0 && l.is_finite()), "eval.loads: entries must be > 0");
        check(&mut out, e.vvc_v_db <= m.v_ref, "eval.vvc_v_db: must not exceed mpc.v_ref");
        check(&mut out, e.vvc_k_v >= 0.0, "eval.vvc_k_v: must be >= 0");
        if let Some(cfg) = &plant {
            check(&mut out, e.monitored.iter().all(|&j| j < cfg.n), "eval.monitored: bus index out of range");
        }
        out
    }
}

/// A validated run: config plus the resolved plant and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub config: RunConfig,
    /// Plant as configured (its `u_max` bounds the training data).
    pub plant: PlantModel,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Run {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_config(config, path.parent().unwrap_or(Path::new(".")))
    }

    /// Validates everything at once, reporting all violations together.
    pub fn from_config(config: RunConfig, base_dir: &Path) -> Result<Self> {
        let problems = config.violations(base_dir);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut plant_cfg = PlantConfig::from_json_str(&std::fs::read_to_string(
            base_dir.join(config.plant.as_ref().expect("validated")),
        )?)?;
        if let Some(s) = config.schedule {
            plant_cfg.schedule = s;
        }
        let plant = PlantModel::new(plant_cfg)?;
        let schedule = plant.schedule();
        let seed = config.seed.expect("validated");
        Ok(Self { config, plant, schedule, seed })
    }

    /// Plant seen by the controllers (with the MPC ceiling override applied).
    pub fn control_plant(&self) -> Result<PlantModel> {
        match self.config.mpc.u_max {
            Some(u) => self.plant.with_u_max(u),
            None => Ok(self.plant.clone()),
        }
    }

    pub fn mpc(&self) -> MpcConfig {
        let m = &self.config.mpc;
        MpcConfig {
            q_weight: m.q_weight,
            state_cost: m.state_cost,
            r_weight: m.r_weight,
            v_ref: m.v_ref,
            solver: SolverSettings { tol: m.tol, max_iter: m.max_iter, polish: m.polish },
        }
    }

    pub fn compare_settings(&self) -> CompareSettings {
        let e = &self.config.eval;
        CompareSettings {
            mpc: self.mpc(),
            vvc: VvcParams { v_db: e.vvc_v_db, k_v: e.vvc_k_v, u_max: self.config.mpc.u_max.unwrap_or(self.plant.u_max()) },
            monitored: e.monitored.clone(),
        }
    }

    pub fn kdnn_config(&self) -> KdnnConfig {
        let k = &self.config.kdnn;
        KdnnConfig {
            lifted_dim: k.lifted_dim,
            hidden: k.hidden,
            seed: mix_seed(self.seed, 1, 0),
            ..KdnnConfig::new(self.plant.n(), self.schedule.h, self.plant.m())
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let k = &self.config.kdnn;
        TrainConfig {
            batch_size: k.batch_size,
            max_epochs: k.max_epochs,
            patience: k.patience,
            adam: AdamConfig { lr: k.lr, beta1: k.beta1, beta2: k.beta2, eps: k.eps },
            seed: mix_seed(self.seed, 1, 1),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let d = &self.config.dataset;
        generate_with(&self.plant, &self.schedule, d.n_loads, seed, &d.policies)
    }
}

/// Train / validation / test partitions; `train = fit + val` carries the scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub fit: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub scaler: Scaler,
}

/// Splits seeded from the dataset's generation seed, so every consumer of the same
/// dataset sees the same partition. The scaler is fitted on the training part.
pub fn make_splits(ds: &Dataset, ratio: f64, val_fraction: f64, v_ref: f64, u_max: f64) -> Result<Splits> {
    let seed = ds
        .meta
        .as_ref()
        .map(|m| m.seed)
        .ok_or_else(|| Error::Usage("dataset has no generation metadata to seed the split".into()))?;
    let (mut train, mut test) = split(ds, ratio, mix_seed(seed, SPLIT_STREAM, 0))?;
    let scaler = fit_scaler(&train, v_ref, u_max)?;
    let (mut fit, mut val) = split(&train, 1.0 - val_fraction, mix_seed(seed, SPLIT_STREAM, 1))?;
    for part in [&mut train, &mut test, &mut fit, &mut val] {
        part.scaler = Some(scaler);
    }
    Ok(Splits { train, fit, val, test, scaler })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedKdnn {
    pub network: Kdnn,
    pub history: TrainingHistory,
    pub lifted: LiftedModel,
    pub test_scores: OneStepScores,
}

pub fn train_kdnn(run: &Run, splits: &Splits) -> Result<TrainedKdnn> {
    let (network, history) = kdnn::train(run.kdnn_config(), &splits.fit, &splits.val, &run.train_config())?;
    let lifted = LiftedModel::extract(&network, Some(splits.scaler))?;
    let test_scores = one_step_scores(&lifted, &splits.test)?;
    Ok(TrainedKdnn { network, history, lifted, test_scores })
}

/// EDMD on the training part; rbf centers are drawn with `seed`.
pub fn fit_edmd(splits: &Splits, spec: DictionarySpec, ridge: f64, seed: u64) -> Result<(EdmdModel, OneStepScores)> {
    let dict = spec.resolve(&splits.train, &splits.scaler, seed)?;
    let model = edmd::fit(&splits.train, dict, ridge)?;
    let scores = one_step_scores(&model, &splits.test)?;
    Ok((model, scores))
}

/// `epoch, train_mse_next, ..., val_mae_k` with one row per epoch.
pub fn write_history_csv(history: &TrainingHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_mse_next",
        "train_mse_k",
        "train_mae_next",
        "train_mae_k",
        "val_mse_next",
        "val_mse_k",
        "val_mae_next",
        "val_mae_k",
    ])?;
    for e in &history.epochs {
        let mut row = vec![e.epoch.to_string()];
        row.extend(
            [
                e.train_mse_next,
                e.train_mse_k,
                e.train_mae_next,
                e.train_mae_k,
                e.val_mse_next,
                e.val_mse_k,
                e.val_mae_next,
                e.val_mae_k,
            ]
            .iter()
            .map(f64::to_string),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
