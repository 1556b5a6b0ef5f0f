//! Shrinking-horizon MPC in a learned lifted space.
//!
//! At each control instant the last `H` measured samples are lifted to `Z_k`, the
//! linear model `Z+ = A Z + B U` is used to condense
//!
//! ```text
//! min  sum_{i=0}^{N_k-1} (Z_{k+i+1} - Z_ref)' Q (Z_{k+i+1} - Z_ref) + U_{k+i}' R U_{k+i}
//! s.t. u_min <= U_{k+i} <= u_max
//! ```
//!
//! into a box QP over the stacked controls, and the first control is applied.
//! Everything runs in normalized units; the applied control is denormalized.
//! `Q` and `Z_ref` come from [`StateCost`]: a fixed identity weighting, or a
//! per-instant linearization of the decoder that penalizes voltage error directly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{HistoryMatrix, Scaler};
use crate::edmd::EdmdModel;
use crate::error::{Error, Result};
use crate::kdnn::LiftedModel;
use crate::linalg::power_iteration;
use crate::plant::{
    post_fault_state, ControlPolicy, FaultSpec, PlantModel, Schedule, Simulator, Trajectory, LEAD_IN_INTERVALS,
};

/// Symmetry / PSD tolerance for `Q` and `R`.
const PSD_TOL: f64 = 1e-10;
/// Power-iteration steps for the Lipschitz constant.
const POWER_STEPS: usize = 100;
/// Projected-gradient steps between free-set Newton attempts.
const POLISH_EVERY: usize = 25;

/// A linear model in some lifted coordinates, as consumed by the controller.
pub trait LinearEmbedding {
    fn a(&self) -> &DMatrix<f64>;
    fn b(&self) -> &DMatrix<f64>;
    fn scaler(&self) -> &Scaler;
    /// `(n, H)` of the histories accepted by [`LinearEmbedding::lift`].
    fn history_shape(&self) -> (usize, usize);
    /// Lift a raw p.u. history.
    fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>>;

    fn lifted_dim(&self) -> usize {
        self.a().nrows()
    }

    fn n_controls(&self) -> usize {
        self.b().ncols()
    }

    /// Lift of the constant `v_ref` history.
    fn z_ref(&self, v_ref: f64) -> Result<DVector<f64>> {
        let (n, h) = self.history_shape();
        self.lift(&HistoryMatrix::new(n, h, vec![v_ref; n * h])?)
    }

    /// Normalized history reconstructed from a lifted state (`n*H` entries).
    fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobian (`n*H x N`) of [`LinearEmbedding::reconstruct`] at `z`, by central
    /// differences.
    fn output_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut cols = Vec::with_capacity(z.len());
        for j in 0..z.len() {
            let (mut hi, mut lo) = (z.clone(), z.clone());
            hi[j] += JACOBIAN_STEP;
            lo[j] -= JACOBIAN_STEP;
            cols.push((self.reconstruct(&hi)? - self.reconstruct(&lo)?) / (2.0 * JACOBIAN_STEP));
        }
        Ok(DMatrix::from_columns(&cols))
    }
}

/// Central-difference step for the decoder Jacobian.
const JACOBIAN_STEP: f64 = 1e-6;
/// Singular values below this fraction of the largest are dropped in `J^+`.
const PINV_RTOL: f64 = 1e-10;

impl LinearEmbedding for LiftedModel {
    fn a(&self) -> &DMatrix<f64> {
        LiftedModel::a(self)
    }

    fn b(&self) -> &DMatrix<f64> {
        LiftedModel::b(self)
    }

    fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    fn history_shape(&self) -> (usize, usize) {
        (self.config().n, self.config().h)
    }

    fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
        LiftedModel::lift(self, v)
    }

    fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.network.decode_batch(z.as_slice(), 1)?))
    }

    fn output_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        // All 2N perturbed states decoded in one batch.
        let nz = z.len();
        let mut zs = Vec::with_capacity(2 * nz * nz);
        for j in 0..nz {
            for sign in [1.0, -1.0] {
                let mut p = z.clone();
                p[j] += sign * JACOBIAN_STEP;
                zs.extend_from_slice(p.as_slice());
            }
        }
        let y = self.network.decode_batch(&zs, 2 * nz)?;
        let out = y.len() / (2 * nz);
        Ok(DMatrix::from_fn(out, nz, |i, j| {
            (y[2 * j * out + i] - y[(2 * j + 1) * out + i]) / (2.0 * JACOBIAN_STEP)
        }))
    }
}

/// Either kind of `lifted_model.json`.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Kdnn(LiftedModel),
    Edmd(EdmdModel),
}

impl AnyModel {
    /// Dispatches on the file's `kind` field.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Kind {
            kind: String,
        }
        let k: Kind = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        match k.kind.as_str() {
            crate::kdnn::LIFTED_KIND => Ok(Self::Kdnn(LiftedModel::load(path)?)),
            crate::edmd::EDMD_KIND => Ok(Self::Edmd(EdmdModel::load(path)?)),
            other => Err(Error::Parse(format!("unknown lifted model kind {other:?}"))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Kdnn(_) => crate::kdnn::LIFTED_KIND,
            Self::Edmd(_) => crate::edmd::EDMD_KIND,
        }
    }

    fn inner(&self) -> &dyn LinearEmbedding {
        match self {
            Self::Kdnn(m) => m,
            Self::Edmd(m) => m,
        }
    }
}

impl LinearEmbedding for AnyModel {
    fn a(&self) -> &DMatrix<f64> {
        self.inner().a()
    }

    fn b(&self) -> &DMatrix<f64> {
        self.inner().b()
    }

    fn scaler(&self) -> &Scaler {
        self.inner().scaler()
    }

    fn history_shape(&self) -> (usize, usize) {
        self.inner().history_shape()
    }

    fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
        self.inner().lift(v)
    }

    fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner().reconstruct(z)
    }

    fn output_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.inner().output_jacobian(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub z0: DVector<f64>,
    pub z_ref: DVector<f64>,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{name} is {}x{}, must be square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > PSD_TOL * scale {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
    }
    if m.nrows() > 0 {
        let min_eig = m.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(format!("{name} is not PSD (eigenvalue {min_eig:e})")));
        }
    }
    Ok(())
}

impl MpcProblem {
    pub fn validate(&self) -> Result<()> {
        let (nz, m) = (self.a.nrows(), self.b.ncols());
        let dims_ok = self.a.is_square()
            && self.b.nrows() == nz
            && self.z0.len() == nz
            && self.z_ref.len() == nz
            && self.q.shape() == (nz, nz)
            && self.r.shape() == (m, m)
            && self.u_min.len() == m
            && self.u_max.len() == m;
        if !dims_ok {
            return Err(Error::Shape(format!("inconsistent MPC dimensions (N = {nz}, m = {m})")));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("u_min exceeds u_max".into()));
        }
        check_psd("Q", &self.q)?;
        check_psd("R", &self.r)
    }

    /// Direct evaluation of the MPC cost for stacked controls `u` (`horizon * m`).
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        let m = self.b.ncols();
        let mut z = self.z0.clone();
        let mut j = 0.0;
        for i in 0..self.horizon {
            let ui = u.rows(i * m, m).into_owned();
            z = &self.a * &z + &self.b * &ui;
            let e = &z - &self.z_ref;
            j += e.dot(&(&self.q * &e)) + ui.dot(&(&self.r * &ui));
        }
        j
    }
}

/// `J(U) = U' G U + 2 g' U + c` over the box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl CondensedQp {
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.hessian * u)) + 2.0 * self.linear.dot(u) + self.constant
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }

    /// `|| U - clamp(U - grad f) ||` with `f = J / 2`.
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        let grad = &self.hessian * u + &self.linear;
        (u - self.clamp(&(u - grad))).norm()
    }
}

/// Eliminates the lifted states: `Z_{i+1} = A^{i+1} Z_0 + sum_{j<=i} A^{i-j} B U_j`.
pub fn condense(p: &MpcProblem) -> Result<CondensedQp> {
    p.validate()?;
    let (nz, m, nk) = (p.a.nrows(), p.b.ncols(), p.horizon);
    let mut powers = vec![DMatrix::identity(nz, nz)];
    for i in 1..=nk {
        powers.push(&p.a * &powers[i - 1]);
    }
    let mut s = DMatrix::zeros(nk * nz, nk * m);
    let mut free = DVector::zeros(nk * nz);
    for i in 0..nk {
        for j in 0..=i {
            s.view_mut((i * nz, j * m), (nz, m)).copy_from(&(&powers[i - j] * &p.b));
        }
        free.rows_mut(i * nz, nz).copy_from(&(&powers[i + 1] * &p.z0 - &p.z_ref));
    }
    let mut qs = DMatrix::zeros(nk * nz, nk * m);
    let mut qf = DVector::zeros(nk * nz);
    for i in 0..nk {
        qs.rows_mut(i * nz, nz).copy_from(&(&p.q * s.rows(i * nz, nz)));
        qf.rows_mut(i * nz, nz).copy_from(&(&p.q * free.rows(i * nz, nz)));
    }
    let mut hessian = s.transpose() * &qs;
    for i in 0..nk {
        let mut blk = hessian.view_mut((i * m, i * m), (m, m));
        blk += &p.r;
    }
    // Exact symmetry keeps the eigen-solver and power iteration well behaved.
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let linear = s.transpose() * &qf;
    let constant = free.dot(&qf);
    let lower = DVector::from_fn(nk * m, |i, _| p.u_min[i % m]);
    let upper = DVector::from_fn(nk * m, |i, _| p.u_max[i % m]);
    Ok(CondensedQp { hessian, linear, constant, lower, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Periodic Newton steps on the free set, accepted only if they lower the objective.
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50_000, polish: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub objective: f64,
    pub polish_steps: usize,
}

fn half_objective(qp: &CondensedQp, u: &DVector<f64>) -> f64 {
    0.5 * u.dot(&(&qp.hessian * u)) + qp.linear.dot(u)
}

/// Newton step on the coordinates not pinned by an active bound, with a
/// backtracking projection. Returns an improved point or `None`.
fn polish(qp: &CondensedQp, u: &DVector<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..u.len())
        .filter(|&i| {
            let at_lo = u[i] <= qp.lower[i] && grad[i] > 0.0;
            let at_hi = u[i] >= qp.upper[i] && grad[i] < 0.0;
            !(at_lo || at_hi) && qp.lower[i] < qp.upper[i]
        })
        .collect();
    if free.is_empty() {
        return None;
    }
    let gff = DMatrix::from_fn(free.len(), free.len(), |a, b| qp.hessian[(free[a], free[b])]);
    let rhs = DVector::from_fn(free.len(), |a, _| -grad[free[a]]);
    let step = gff.svd(true, true).solve(&rhs, 1e-12 * qp.hessian.amax().max(1e-300)).ok()?;
    let f0 = half_objective(qp, u);
    let mut alpha = 1.0;
    for _ in 0..20 {
        let mut cand = u.clone();
        for (a, &i) in free.iter().enumerate() {
            cand[i] += alpha * step[a];
        }
        let cand = qp.clamp(&cand);
        if half_objective(qp, &cand) < f0 {
            return Some(cand);
        }
        alpha *= 0.5;
    }
    None
}

/// Projected gradient with step `1/L`, `L` from power iteration on the Hessian,
/// started from `clamp(0)`. Each accepted iterate lowers the objective (the step is
/// halved if an estimate of `L` proves too small). Converged when the projected
/// gradient norm drops below `tol`.
pub fn solve_box_qp(qp: &CondensedQp, settings: &SolverSettings) -> Result<QpSolution> {
    solve_box_qp_observed(qp, settings, |_| {})
}

/// [`solve_box_qp`] calling `observe` on the start point and every accepted iterate.
pub fn solve_box_qp_observed(
    qp: &CondensedQp,
    settings: &SolverSettings,
    mut observe: impl FnMut(&DVector<f64>),
) -> Result<QpSolution> {
    let dim = qp.linear.len();
    let mut u = qp.clamp(&DVector::zeros(dim));
    observe(&u);
    let mut lip = power_iteration(&qp.hessian, POWER_STEPS);
    if lip <= f64::MIN_POSITIVE {
        // Linear (or constant) objective: each coordinate goes to the bound its
        // gradient points at; a zero gradient keeps clamp(0).
        for i in 0..dim {
            if qp.linear[i] > 0.0 {
                u[i] = qp.lower[i];
            } else if qp.linear[i] < 0.0 {
                u[i] = qp.upper[i];
            }
        }
        observe(&u);
        return Ok(QpSolution { residual: qp.residual(&u), objective: qp.objective(&u), u, iterations: 0, polish_steps: 0 });
    }
    let mut f = half_objective(qp, &u);
    let mut polish_steps = 0;
    for it in 0..settings.max_iter {
        let grad = &qp.hessian * &u + &qp.linear;
        let residual = (&u - qp.clamp(&(&u - &grad))).norm();
        if residual < settings.tol {
            return Ok(QpSolution { objective: qp.objective(&u), u, iterations: it, residual, polish_steps });
        }
        if settings.polish && it % POLISH_EVERY == POLISH_EVERY - 1 {
            if let Some(better) = polish(qp, &u, &grad) {
                u = better;
                observe(&u);
                f = half_objective(qp, &u);
                polish_steps += 1;
                continue;
            }
        }
        let cand = qp.clamp(&(&u - &grad / lip));
        let fc = half_objective(qp, &cand);
        if fc > f + 1e-15 * f.abs().max(1.0) {
            lip *= 2.0;
            continue;
        }
        u = cand;
        observe(&u);
        f = fc;
    }
    Err(Error::NonConvergence { iterations: settings.max_iter, residual: qp.residual(&u) })
}

/// How the lifted tracking cost is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCost {
    /// `Q = q_weight * I` around the fixed lift of the reference history.
    #[default]
    Identity,
    /// Gauss-Newton model of the reconstruction error, re-linearized at every
    /// instant around the free response `A Z_k`: with `J` the decoder Jacobian there,
    /// `Q = q_weight * J'J` and the target is `A Z_k + J^+ (v_ref - decode(A Z_k))`,
    /// so `(Z - target)' Q (Z - target)` equals the linearized squared voltage error
    /// up to a constant.
    LocalDecoder,
}

/// Controller weights and solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub q_weight: f64,
    #[serde(default)]
    pub state_cost: StateCost,
    /// `R = r_weight * I`.
    pub r_weight: f64,
    pub v_ref: f64,
    pub solver: SolverSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { q_weight: 1.0, state_cost: StateCost::Identity, r_weight: 0.0, v_ref: crate::V_REF, solver: SolverSettings::default() }
    }
}

/// Per-instant solver record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub instant: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub residual: f64,
    pub objective: f64,
    pub polish_steps: usize,
    /// First planned control, normalized.
    pub u_normalized: Vec<f64>,
    /// First planned control, p.u. (what the plant receives).
    pub u_applied: Vec<f64>,
}

/// Stacked plan in normalized units and its p.u. image (`horizon x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub normalized: DMatrix<f64>,
    pub per_unit: DMatrix<f64>,
}

/// Weight and target of the tracking cost at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub target: DVector<f64>,
}

/// Tracking cost for lifted state `z` under `cfg.state_cost`; `z_ref` is the lift
/// of the constant reference history.
pub fn stage_cost<E: LinearEmbedding + ?Sized>(
    emb: &E,
    z: &DVector<f64>,
    z_ref: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<StageCost> {
    let nz = emb.lifted_dim();
    match cfg.state_cost {
        StateCost::Identity => Ok(StageCost { q: DMatrix::identity(nz, nz) * cfg.q_weight, target: z_ref.clone() }),
        StateCost::LocalDecoder => {
            let free = emb.a() * z;
            let j = emb.output_jacobian(&free)?;
            let recon = emb.reconstruct(&free)?;
            let residual = DVector::from_element(recon.len(), emb.scaler().norm_v(cfg.v_ref)) - recon;
            let svd = j.clone().svd(true, true);
            let eps = PINV_RTOL * svd.singular_values.max();
            let step = svd.solve(&residual, eps).map_err(|e| Error::Singular(e.into()))?;
            let q = j.transpose() * j * cfg.q_weight;
            Ok(StageCost { q: (&q + q.transpose()) * 0.5, target: free + step })
        }
    }
}

/// Solve the full plan for lifted state `z0` over `horizon` instants.
pub fn plan<E: LinearEmbedding + ?Sized>(
    emb: &E,
    z0: &DVector<f64>,
    cost: &StageCost,
    horizon: usize,
    u_max_pu: f64,
    cfg: &MpcConfig,
) -> Result<(ControlSequence, QpSolution)> {
    let m = emb.n_controls();
    let sc = emb.scaler();
    let problem = MpcProblem {
        a: emb.a().clone(),
        b: emb.b().clone(),
        z0: z0.clone(),
        z_ref: cost.target.clone(),
        horizon,
        q: cost.q.clone(),
        r: DMatrix::identity(m, m) * cfg.r_weight,
        u_min: DVector::from_element(m, sc.norm_u(0.0)),
        u_max: DVector::from_element(m, sc.norm_u(u_max_pu)),
    };
    let sol = solve_box_qp(&condense(&problem)?, &cfg.solver)?;
    let normalized = DMatrix::from_row_slice(horizon, m, sol.u.as_slice());
    let per_unit = normalized.map(|x| sc.denorm_u(x).clamp(0.0, u_max_pu));
    Ok((ControlSequence { normalized, per_unit }, sol))
}

/// Shrinking-horizon MPC as a plant policy: at instant `k` (from 0) the horizon is
/// `n_instants - k`.
pub struct MpcPolicy<'a, E: LinearEmbedding + ?Sized> {
    emb: &'a E,
    cfg: MpcConfig,
    z_ref: DVector<f64>,
    n_instants: usize,
    u_max: f64,
    pub diagnostics: Vec<QpDiagnostics>,
}

impl<'a, E: LinearEmbedding + ?Sized> MpcPolicy<'a, E> {
    pub fn new(emb: &'a E, cfg: MpcConfig, n_instants: usize, u_max: f64) -> Result<Self> {
        let z_ref = emb.z_ref(cfg.v_ref)?;
        Ok(Self { emb, cfg, z_ref, n_instants, u_max, diagnostics: Vec::new() })
    }
}

/// The last `h` samples of `traj` as a history.
pub fn latest_history(traj: &Trajectory, h: usize) -> Result<HistoryMatrix> {
    let len = traj.n_samples();
    if len < h + 1 {
        return Err(Error::Usage(format!("need {h} samples after the initial state, trajectory has {}", len - 1)));
    }
    HistoryMatrix::from_columns(&traj.voltages[len - h..])
}

impl<E: LinearEmbedding + ?Sized> ControlPolicy for MpcPolicy<'_, E> {
    fn control(&mut self, instant: usize, traj: &Trajectory) -> Result<Vec<f64>> {
        if instant >= self.n_instants {
            return Err(Error::Index { index: instant, lo: 0, hi: self.n_instants - 1 });
        }
        let horizon = self.n_instants - instant;
        let z = self.emb.lift(&latest_history(traj, self.emb.history_shape().1)?)?;
        let cost = stage_cost(self.emb, &z, &self.z_ref, &self.cfg)?;
        let (seq, sol) = plan(self.emb, &z, &cost, horizon, self.u_max, &self.cfg)?;
        let applied: Vec<f64> = seq.per_unit.row(0).iter().copied().collect();
        self.diagnostics.push(QpDiagnostics {
            instant,
            horizon,
            iterations: sol.iterations,
            residual: sol.residual,
            objective: sol.objective,
            polish_steps: sol.polish_steps,
            u_normalized: seq.normalized.row(0).iter().copied().collect(),
            u_applied: applied.clone(),
        });
        Ok(applied)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopResult {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<QpDiagnostics>,
    /// Set when a solve failed; the trajectory then stops at the failing instant.
    pub aborted: Option<String>,
}

/// Run a control policy on the faulted plant: one uncontrolled lead-in interval,
/// then `sched.n_instants` controlled intervals. A policy error stops the loop and
/// is reported in `aborted` alongside the partial trajectory.
pub fn closed_loop(
    plant: &PlantModel,
    sched: &Schedule,
    fault: &FaultSpec,
    policy: &mut dyn ControlPolicy,
) -> Result<(Trajectory, Option<String>)> {
    let mut sim = Simulator::new(plant, *sched, post_fault_state(plant, fault)?)?;
    let zeros = vec![0.0; plant.m()];
    for _ in 0..LEAD_IN_INTERVALS {
        sim.advance(&zeros)?;
    }
    for k in 0..sched.n_instants {
        match policy.control(k, sim.trajectory()) {
            Ok(u) => sim.advance(&u)?,
            Err(e) => return Ok((sim.into_trajectory(), Some(e.to_string()))),
        }
    }
    Ok((sim.into_trajectory(), None))
}

/// Shrinking-horizon MPC from the post-fault state.
pub fn receding_horizon<E: LinearEmbedding + ?Sized>(
    emb: &E,
    plant: &PlantModel,
    sched: &Schedule,
    fault: &FaultSpec,
    cfg: &MpcConfig,
) -> Result<ClosedLoopResult> {
    let (n, h) = emb.history_shape();
    if n != plant.n() || h != sched.h || emb.n_controls() != plant.m() {
        return Err(Error::Shape(format!(
            "model expects n={n}, H={h}, m={}; plant/schedule give n={}, H={}, m={}",
            emb.n_controls(),
            plant.n(),
            sched.h,
            plant.m()
        )));
    }
    let mut policy = MpcPolicy::new(emb, *cfg, sched.n_instants, plant.u_max())?;
    let (trajectory, aborted) = closed_loop(plant, sched, fault, &mut policy)?;
    Ok(ClosedLoopResult { trajectory, diagnostics: policy.diagnostics, aborted })
}

/// `time, v_0..v_{n-1}, u_0..u_{m-1}` with controls zero-order-held (the final
/// sample repeats the last interval's control).
pub fn write_trajectory_csv(traj: &Trajectory, m: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = traj.n_buses();
    let mut head = vec!["time".to_string()];
    head.extend((0..n).map(|i| format!("v_{i}")));
    head.extend((0..m).map(|l| format!("u_{l}")));
    w.write_record(&head)?;
    let zeros = vec![0.0; m];
    for (s, (t, v)) in traj.times.iter().zip(&traj.voltages).enumerate() {
        let u = traj.held_control(s).unwrap_or(&zeros);
        let mut row = vec![t.to_string()];
        row.extend(v.iter().chain(u).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    aborted: &'a Option<String>,
    instants: &'a [QpDiagnostics],
}

impl ClosedLoopResult {
    /// Writes `<stem>.csv` and `<stem>.json` (QP diagnostics) under `dir`.
    pub fn save(&self, dir: &Path, stem: &str, m: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_trajectory_csv(&self.trajectory, m, &dir.join(format!("{stem}.csv")))?;
        let diag = DiagnosticsFile { aborted: &self.aborted, instants: &self.diagnostics };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&diag)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantConfig, ZeroPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_qp(h: &[f64], g: &[f64], lo: f64, hi: f64) -> CondensedQp {
        let d = g.len();
        CondensedQp {
            hessian: DMatrix::from_row_slice(d, d, h),
            linear: DVector::from_column_slice(g),
            constant: 0.0,
            lower: DVector::from_element(d, lo),
            upper: DVector::from_element(d, hi),
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, nz: usize, m: usize, horizon: usize) -> MpcProblem {
        let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
        let a = mat(nz, nz, 0.6);
        let b = mat(nz, m, 1.0);
        let z0 = mat(nz, 1, 1.0).column(0).into_owned();
        let z_ref = mat(nz, 1, 1.0).column(0).into_owned();
        let lq = mat(nz, nz, 1.0);
        let lr = mat(m, m, 0.3);
        MpcProblem {
            a,
            b,
            z0,
            z_ref,
            horizon,
            q: &lq * lq.transpose(),
            r: &lr * lr.transpose(),
            u_min: DVector::from_element(m, -1.0),
            u_max: DVector::from_element(m, 1.0),
        }
    }

    #[test]
    fn one_step_condensation_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_problem(&mut rng, 4, 2, 1);
        let qp = condense(&p).unwrap();
        let g = p.b.transpose() * &p.q * &p.b + &p.r;
        let lin = p.b.transpose() * &p.q * (&p.a * &p.z0 - &p.z_ref);
        assert!((qp.hessian - g).amax() < 1e-12);
        assert!((qp.linear - lin).amax() < 1e-12);
    }

    #[test]
    fn zero_dynamics_give_block_diagonal_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_problem(&mut rng, 3, 2, 3);
        p.a = DMatrix::zeros(3, 3);
        let qp = condense(&p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i / 2 != j / 2 {
                    assert!(qp.hessian[(i, j)].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn condensed_objective_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (nz, m, nk) = (rng.gen_range(1..=8), rng.gen_range(1..=3), rng.gen_range(1..=4));
            let p = random_problem(&mut rng, nz, m, nk);
            let qp = condense(&p).unwrap();
            for _ in 0..5 {
                let u = DVector::from_fn(nk * m, |_, _| rng.gen_range(-1.0..1.0));
                let (a, b) = (qp.objective(&u), p.objective(&u));
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scalar_box_optimum() {
        // (u - 2)^2 = u^2 - 4u + 4
        let mut qp = box_qp(&[1.0], &[-2.0], 0.0, 1.0);
        qp.constant = 4.0;
        let sol = solve_box_qp(&qp, &SolverSettings::default()).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-12);
        assert!((sol.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interior_optimum_matches_linear_solve() {
        let qp = box_qp(&[2.0, 0.5, 0.5, 1.0], &[0.3, -0.2], -10.0, 10.0);
        let sol = solve_box_qp(&qp, &SolverSettings::default()).unwrap();
        let exact = qp.hessian.clone().lu().solve(&(-&qp.linear)).unwrap();
        assert!((sol.u - exact).amax() < 1e-6);
    }

    #[test]
    fn zero_objective_returns_clamped_origin() {
        let qp = box_qp(&[0.0; 4], &[0.0; 2], 0.2, 1.0);
        let sol = solve_box_qp(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(sol.u.as_slice(), &[0.2, 0.2]);
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let qp = box_qp(&[1.0, 0.999, 0.999, 1.0], &[1.0, -1.0], -1e3, 1e3);
        let settings = SolverSettings { max_iter: 3, polish: false, ..SolverSettings::default() };
        match solve_box_qp(&qp, &settings) {
            Err(Error::NonConvergence { iterations: 3, residual }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ill_conditioned_problem_converges_with_polish() {
        let qp = box_qp(&[1.0, 0.999_999, 0.999_999, 1.0], &[0.5, -0.25], -1e3, 1e3);
        let sol = solve_box_qp(&qp, &SolverSettings::default()).unwrap();
        assert!(sol.residual < 1e-8);
        assert!(sol.polish_steps > 0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_problem(&mut rng, 2, 1, 2);
        p.q[(0, 0)] = -1.0;
        p.q[(1, 1)] = -1.0;
        assert!(condense(&p).is_err());
        let mut p = random_problem(&mut rng, 2, 1, 2);
        p.q[(0, 1)] += 1.0;
        assert!(condense(&p).is_err());
        let mut p = random_problem(&mut rng, 2, 1, 0);
        p.horizon = 0;
        assert!(condense(&p).is_err());
    }

    /// Minimal embedding: identity lift of a 1-bus, 1-sample history.
    struct Toy {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        scaler: Scaler,
    }

    impl LinearEmbedding for Toy {
        fn a(&self) -> &DMatrix<f64> {
            &self.a
        }
        fn b(&self) -> &DMatrix<f64> {
            &self.b
        }
        fn scaler(&self) -> &Scaler {
            &self.scaler
        }
        fn history_shape(&self) -> (usize, usize) {
            (1, 1)
        }
        fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
            let x = self.scaler.norm_v(v.get(0, 0));
            Ok(DVector::from_vec(vec![x, x * x]))
        }
        fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![z[0]]))
        }
    }

    #[test]
    fn perfect_model_closed_loop_follows_initial_plan() {
        let toy = Toy {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 0.7]),
            b: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.2]),
            scaler: Scaler::new(1.0, -0.5, 0.1, 0.0, 0.25).unwrap(),
        };
        let cfg = MpcConfig { r_weight: 1e-3, ..MpcConfig::default() };
        let z_ref = toy.z_ref(1.0).unwrap();
        let z0 = toy.lift(&HistoryMatrix::new(1, 1, vec![0.7]).unwrap()).unwrap();
        let cost = stage_cost(&toy, &z0, &z_ref, &cfg).unwrap();
        let (plan0, _) = plan(&toy, &z0, &cost, 5, 0.25, &cfg).unwrap();
        let mut z = z0;
        for k in 0..5 {
            let (seq, _) = plan(&toy, &z, &cost, 5 - k, 0.25, &cfg).unwrap();
            let u = seq.normalized.row(0).transpose();
            for l in 0..2 {
                assert!((u[l] - plan0.normalized[(k, l)]).abs() < 1e-6, "instant {k}");
            }
            z = &toy.a * &z + &toy.b * &u;
        }
    }

    #[test]
    fn local_decoder_cost_is_reconstruction_error_for_linear_decoder() {
        let toy = Toy {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 0.7]),
            b: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.2]),
            scaler: Scaler::new(1.0, -0.5, 0.1, 0.0, 0.25).unwrap(),
        };
        let cfg = MpcConfig { state_cost: StateCost::LocalDecoder, ..MpcConfig::default() };
        let z0 = DVector::from_vec(vec![0.3, -0.2]);
        let cost = stage_cost(&toy, &z0, &toy.z_ref(1.0).unwrap(), &cfg).unwrap();
        let v_ref = toy.scaler.norm_v(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let d = &z - &cost.target;
            let lifted = d.dot(&(&cost.q * &d));
            assert!((lifted - (z[0] - v_ref).powi(2)).abs() < 1e-8);
        }
    }

    #[test]
    fn batched_jacobian_matches_columnwise_differences() {
        let net = crate::kdnn::Kdnn::new(crate::kdnn::KdnnConfig { lifted_dim: 5, hidden: 3, ..crate::kdnn::KdnnConfig::new(2, 3, 1) })
            .unwrap();
        let model = LiftedModel::extract(&net, Some(Scaler::new(1.0, -0.6, 0.1, 0.0, 0.25).unwrap())).unwrap();
        let z = DVector::from_vec(vec![0.1, -0.4, 0.3, 0.0, 0.7]);
        let jac = model.output_jacobian(&z).unwrap();
        assert_eq!(jac.shape(), (6, 5));
        for j in 0..5 {
            let (mut hi, mut lo) = (z.clone(), z.clone());
            hi[j] += 1e-5;
            lo[j] -= 1e-5;
            let col = (model.reconstruct(&hi).unwrap() - model.reconstruct(&lo).unwrap()) / 2e-5;
            assert!((jac.column(j) - col).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_ceiling_reproduces_no_control() {
        // Any embedding works here: the box collapses to u = 0.
        let plant = PlantModel::new(PlantConfig::default_surrogate()).unwrap().with_u_max(0.0).unwrap();
        let sched = plant.schedule();
        let net = crate::kdnn::Kdnn::new(crate::kdnn::KdnnConfig { lifted_dim: 8, hidden: 4, ..crate::kdnn::KdnnConfig::new(6, 4, 3) })
            .unwrap();
        let model = LiftedModel::extract(&net, Some(Scaler::new(1.0, -0.6, 0.1, 0.0, 0.25).unwrap())).unwrap();
        let res = receding_horizon(&model, &plant, &sched, plant.fault(), &MpcConfig::default()).unwrap();
        assert!(res.aborted.is_none());
        let (base, _) = closed_loop(&plant, &sched, plant.fault(), &mut ZeroPolicy { m: 3 }).unwrap();
        assert_eq!(res.trajectory, base);
        assert_eq!(res.diagnostics.len(), sched.n_instants);
        assert_eq!(res.diagnostics.iter().map(|d| d.horizon).collect::<Vec<_>>(), vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn csv_layout() {
        let plant = PlantModel::new(PlantConfig::default_surrogate()).unwrap();
        let sched = plant.schedule();
        let (traj, _) = closed_loop(&plant, &sched, plant.fault(), &mut ZeroPolicy { m: 3 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = ClosedLoopResult { trajectory: traj.clone(), diagnostics: vec![], aborted: None };
        res.save(dir.path(), "run", 3).unwrap();
        let mut r = csv::Reader::from_path(dir.path().join("run.csv")).unwrap();
        assert_eq!(r.headers().unwrap().len(), 1 + 6 + 3);
        assert_eq!(r.records().count(), traj.n_samples());
        assert!(dir.path().join("run.json").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn solution_is_feasible_and_kkt(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nz, m, nk) = (rng.gen_range(1..=6), rng.gen_range(1..=2), rng.gen_range(1..=3));
            let p = random_problem(&mut rng, nz, m, nk);
            let qp = condense(&p).unwrap();
            let sol = solve_box_qp(&qp, &SolverSettings::default()).unwrap();
            let grad = &qp.hessian * &sol.u + &qp.linear;
            let scale = grad.amax().max(1.0);
            for i in 0..sol.u.len() {
                prop_assert!(sol.u[i] >= qp.lower[i] - 1e-12 && sol.u[i] <= qp.upper[i] + 1e-12);
                if sol.u[i] > qp.lower[i] + 1e-9 && sol.u[i] < qp.upper[i] - 1e-9 {
                    prop_assert!(grad[i].abs() < 1e-6 * scale);
                } else if sol.u[i] <= qp.lower[i] + 1e-9 {
                    prop_assert!(grad[i] > -1e-6 * scale);
                } else {
                    prop_assert!(grad[i] < 1e-6 * scale);
                }
            }
        }

        #[test]
        fn descent_is_monotone(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 5, 2, 3);
            let qp = condense(&p).unwrap();
            let mut values = Vec::new();
            let settings = SolverSettings { polish: seed % 2 == 0, ..SolverSettings::default() };
            solve_box_qp_observed(&qp, &settings, |u| values.push(qp.objective(u))).unwrap();
            for w in values.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }
    }
}
