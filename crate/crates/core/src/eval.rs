//! Rule-based volt-var baseline, the deviation index `J`, and the multi-case
//! comparison harness.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_factor, Dataset};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::nn::{mae, r2};
use crate::mpc::{closed_loop, receding_horizon, LinearEmbedding, MpcConfig};
use crate::plant::{ControlPolicy, PlantModel, Schedule, Trajectory, ZeroPolicy};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Local proportional rule `u = clamp(k_v * max(0, V_db - v_local), 0, u_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VvcParams {
    pub v_db: f64,
    pub k_v: f64,
    pub u_max: f64,
}

impl Default for VvcParams {
    fn default() -> Self {
        Self { v_db: 0.95, k_v: 2.5, u_max: crate::plant::DEFAULT_U_MAX }
    }
}

impl VvcParams {
    pub fn validate(&self, v_ref: f64) -> Result<()> {
        if !(self.v_db <= v_ref && self.k_v >= 0.0 && self.u_max >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "VVC needs V_db <= v_ref ({v_ref}), k_v >= 0, u_max >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn vvc_control(v_local: f64, p: &VvcParams) -> f64 {
    (p.k_v * (p.v_db - v_local).max(0.0)).clamp(0.0, p.u_max)
}

/// Each channel reads the latest voltage at the bus it drives most strongly.
#[derive(Debug, Clone)]
pub struct VvcPolicy {
    buses: Vec<usize>,
    params: VvcParams,
}

impl VvcPolicy {
    /// The per-step cap is the smaller of `params.u_max` and the plant's ceiling.
    pub fn new(plant: &PlantModel, params: VvcParams) -> Self {
        let params = VvcParams { u_max: params.u_max.min(plant.u_max()), ..params };
        Self { buses: (0..plant.m()).map(|l| plant.control_bus(l)).collect(), params }
    }
}

impl ControlPolicy for VvcPolicy {
    fn control(&mut self, _: usize, traj: &Trajectory) -> Result<Vec<f64>> {
        let v = traj.last();
        Ok(self.buses.iter().map(|&b| vvc_control(v[b], &self.params)).collect())
    }
}

/// `J = sum_t sum_{j in monitored} |V_j(t) - v_ref|` over every sample.
pub fn performance_index(traj: &Trajectory, v_ref: f64, monitored: &[usize]) -> Result<f64> {
    if monitored.is_empty() {
        return Err(Error::InvalidArgument("monitored bus set is empty".into()));
    }
    let n = traj.n_buses();
    if let Some(&bad) = monitored.iter().find(|&&j| j >= n) {
        return Err(Error::Index { index: bad, lo: 0, hi: n.saturating_sub(1) });
    }
    Ok(traj.voltages.iter().map(|v| monitored.iter().map(|&j| (v[j] - v_ref).abs()).sum::<f64>()).sum())
}

/// Sum of every applied control entry (p.u.).
pub fn total_control(traj: &Trajectory) -> f64 {
    traj.controls.iter().flatten().sum()
}

pub fn terminal_mean(traj: &Trajectory) -> f64 {
    let v = traj.last();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: usize,
    pub load_factor: f64,
    pub j_no_control: Option<f64>,
    pub j_vvc: Option<f64>,
    pub j_kmpc: Option<f64>,
    pub kmpc_total_control: Option<f64>,
    pub error: Option<String>,
}

impl CaseRecord {
    pub fn kmpc_wins(&self) -> bool {
        matches!((self.j_kmpc, self.j_vvc), (Some(k), Some(v)) if k < v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub n_cases: usize,
    pub cases: Vec<CaseRecord>,
    /// Cases with `J_KMPC < J_VVC` over all cases (failed cases count as losses).
    pub win_fraction: f64,
    pub mean_j_no_control: f64,
    pub mean_j_vvc: f64,
    pub mean_j_kmpc: f64,
    pub failed_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompareSettings {
    pub mpc: MpcConfig,
    pub vvc: VvcParams,
    /// Buses summed in `J`; empty means all.
    pub monitored: Vec<usize>,
}


fn monitored(settings: &CompareSettings, n: usize) -> Vec<usize> {
    if settings.monitored.is_empty() {
        (0..n).collect()
    } else {
        settings.monitored.clone()
    }
}

fn run_case<E: LinearEmbedding + ?Sized>(
    emb: &E,
    plant: &PlantModel,
    sched: &Schedule,
    settings: &CompareSettings,
    case: usize,
    lambda: f64,
) -> CaseRecord {
    let mut rec = CaseRecord {
        case,
        load_factor: lambda,
        j_no_control: None,
        j_vvc: None,
        j_kmpc: None,
        kmpc_total_control: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let p = plant.with_load(lambda)?;
        let mon = monitored(settings, p.n());
        let v_ref = settings.mpc.v_ref;
        let (base, _) = closed_loop(&p, sched, p.fault(), &mut ZeroPolicy { m: p.m() })?;
        rec.j_no_control = Some(performance_index(&base, v_ref, &mon)?);
        let (vvc, _) = closed_loop(&p, sched, p.fault(), &mut VvcPolicy::new(&p, settings.vvc))?;
        rec.j_vvc = Some(performance_index(&vvc, v_ref, &mon)?);
        let res = receding_horizon(emb, &p, sched, p.fault(), &settings.mpc)?;
        if let Some(msg) = res.aborted {
            return Err(Error::Usage(format!("MPC aborted: {msg}")));
        }
        rec.j_kmpc = Some(performance_index(&res.trajectory, v_ref, &mon)?);
        rec.kmpc_total_control = Some(total_control(&res.trajectory));
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    rec
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = xs.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// No-control, VVC and MPC closed loops on `n_cases` load factors drawn uniformly
/// from `[0.9, 1.1]` (case `i` uses the same draw as dataset load index `i` under a
/// mixed seed). Cases run in parallel; a failing case is recorded and skipped.
pub fn compare<E: LinearEmbedding + Sync + ?Sized>(
    emb: &E,
    plant: &PlantModel,
    sched: &Schedule,
    n_cases: usize,
    seed: u64,
    settings: &CompareSettings,
) -> Result<ComparisonReport> {
    if n_cases == 0 {
        return Err(Error::InvalidArgument("n_cases must be at least 1".into()));
    }
    settings.vvc.validate(settings.mpc.v_ref)?;
    let case_seed = mix_seed(seed, 0xC0A5E, 0);
    let cases: Vec<CaseRecord> = (0..n_cases)
        .into_par_iter()
        .map(|i| run_case(emb, plant, sched, settings, i, load_factor(case_seed, i)))
        .collect();
    Ok(ComparisonReport {
        seed,
        n_cases,
        win_fraction: cases.iter().filter(|c| c.kmpc_wins()).count() as f64 / n_cases as f64,
        mean_j_no_control: mean(cases.iter().map(|c| c.j_no_control)),
        mean_j_vvc: mean(cases.iter().map(|c| c.j_vvc)),
        mean_j_kmpc: mean(cases.iter().map(|c| c.j_kmpc)),
        failed_cases: cases.iter().filter(|c| c.error.is_some()).count(),
        cases,
    })
}

/// One-step fit quality of a lifted model on a dataset; MAEs in p.u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepScores {
    pub r2_next: f64,
    pub r2_k: f64,
    pub mae_next: f64,
    pub mae_k: f64,
}

/// Scores `decode(A lift(v_k) + B u_k)` against `v_next` and `decode(lift(v_k))`
/// against `v_k` for every sample.
pub fn one_step_scores<E: LinearEmbedding + ?Sized>(emb: &E, ds: &Dataset) -> Result<OneStepScores> {
    let sc = emb.scaler();
    let (mut y_next, mut p_next, mut y_k, mut p_k) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &ds.samples {
        let z = emb.lift(&s.v_k)?;
        let zn = emb.a() * &z + emb.b() * nalgebra::DVector::from_vec(sc.norm_us(&s.u_k));
        p_next.extend(sc.denorm_vs(emb.reconstruct(&zn)?.as_slice()));
        p_k.extend(sc.denorm_vs(emb.reconstruct(&z)?.as_slice()));
        y_next.extend_from_slice(s.v_next.as_slice());
        y_k.extend_from_slice(s.v_k.as_slice());
    }
    if y_next.len() != p_next.len() || y_k.len() != p_k.len() {
        return Err(Error::Shape("reconstruction size differs from the history size".into()));
    }
    Ok(OneStepScores {
        r2_next: r2(&y_next, &p_next)?,
        r2_k: r2(&y_k, &p_k)?,
        mae_next: mae(&y_next, &p_next)?,
        mae_k: mae(&y_k, &p_k)?,
    })
}

/// One row of a fixed-load sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub load_factor: f64,
    pub j_no_control: f64,
    pub j_kmpc: f64,
    pub terminal_mean: f64,
    pub total_control: f64,
}

/// No-control and MPC closed loops at each of `loads`.
pub fn load_sweep<E: LinearEmbedding + Sync + ?Sized>(
    emb: &E,
    plant: &PlantModel,
    sched: &Schedule,
    loads: &[f64],
    settings: &CompareSettings,
) -> Result<Vec<SweepRecord>> {
    loads
        .par_iter()
        .map(|&lambda| {
            let p = plant.with_load(lambda)?;
            let mon = monitored(settings, p.n());
            let v_ref = settings.mpc.v_ref;
            let (base, _) = closed_loop(&p, sched, p.fault(), &mut ZeroPolicy { m: p.m() })?;
            let res = receding_horizon(emb, &p, sched, p.fault(), &settings.mpc)?;
            if let Some(msg) = res.aborted {
                return Err(Error::Usage(format!("MPC aborted at load {lambda}: {msg}")));
            }
            Ok(SweepRecord {
                load_factor: lambda,
                j_no_control: performance_index(&base, v_ref, &mon)?,
                j_kmpc: performance_index(&res.trajectory, v_ref, &mon)?,
                terminal_mean: terminal_mean(&res.trajectory),
                total_control: total_control(&res.trajectory),
            })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl ComparisonReport {
    /// `report.csv` (one row per case) and `report.json` (summary) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
        w.write_record([
            "case",
            "load_factor",
            "j_no_control",
            "j_vvc",
            "j_kmpc",
            "kmpc_total_control",
            "kmpc_wins",
            "error",
        ])?;
        for c in &self.cases {
            w.write_record([
                c.case.to_string(),
                c.load_factor.to_string(),
                opt(c.j_no_control),
                opt(c.j_vvc),
                opt(c.j_kmpc),
                opt(c.kmpc_total_control),
                c.kmpc_wins().to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        let summary = serde_json::json!({
            "seed": self.seed,
            "n_cases": self.n_cases,
            "win_fraction": self.win_fraction,
            "failed_cases": self.failed_cases,
            "means": {
                "j_no_control": self.mean_j_no_control,
                "j_vvc": self.mean_j_vvc,
                "j_kmpc": self.mean_j_kmpc,
            },
        });
        std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}
