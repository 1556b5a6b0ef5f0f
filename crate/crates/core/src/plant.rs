//! Nonlinear controlled voltage-recovery surrogate.
//!
//! Each bus voltage obeys
//!
//! ```text
//! e_i   = v*_i - v_i
//! dv_i/dt = a_i e_i + b_i e_i^3 + c sum_j W_ij (e_i - e_j)
//!           + (sum_l gamma_il u_l) (v_max - v_i)
//! ```
//!
//! with load-dependent equilibrium `v*(lambda) = 1 - 0.3 lambda d`. Coupling acts on
//! deviations from equilibrium, so `v*` is an exact fixed point for any `d`. The cubic recovery
//! term and the saturating `(v_max - v)` control term make the response nonlinear in
//! both state and control. Integration is classical RK4 with [`RK4_SUBSTEPS`] substeps
//! per call and the state clamped to `[0, v_max]` after every substep.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Internal RK4 substeps per `step` call.
pub const RK4_SUBSTEPS: usize = 4;

/// Maximum reactive support per control channel and step (p.u.).
pub const DEFAULT_U_MAX: f64 = 0.25;

/// Floor applied to sagged voltages by [`apply_fault`].
pub const FAULT_FLOOR: f64 = 0.05;

/// Uncontrolled intervals simulated after the fault before the first control instant.
pub const LEAD_IN_INTERVALS: usize = 1;

const ROW_SUM_TOL: f64 = 1e-12;

/// Sampling schedule as it appears in the plant JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "Ts")]
    pub ts: f64,
    #[serde(rename = "Tc")]
    pub tc: f64,
    pub n_instants: usize,
}

/// Post-clearing voltage sag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub affected: Vec<usize>,
    pub depth: f64,
}

/// Plant description as read from / written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub v_max: f64,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub lambda: f64,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    pub schedule: ScheduleConfig,
    pub fault: FaultSpec,
}

fn default_u_max() -> f64 {
    DEFAULT_U_MAX
}

/// Ring lattice: each bus coupled to its two neighbours with weight 0.5.
pub fn ring_lattice(n: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; n]; n];
    if n == 1 {
        return w;
    }
    for i in 0..n {
        w[i][(i + n - 1) % n] += 0.5;
        w[i][(i + 1) % n] += 0.5;
    }
    w
}

fn injection(n: usize, buses: &[usize], gain: f64) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; buses.len()]; n];
    for (l, &bus) in buses.iter().enumerate() {
        g[bus][l] = gain;
    }
    g
}

impl PlantConfig {
    /// Six-bus default surrogate with controls at buses 0, 2 and 4.
    pub fn default_surrogate() -> Self {
        let n = 6;
        Self {
            n,
            m: 3,
            a: vec![2.0; n],
            b: vec![5.0; n],
            c: 1.0,
            v_max: 1.3,
            w: ring_lattice(n),
            gamma: injection(n, &[0, 2, 4], 6.0),
            d: vec![0.2, 0.3, 0.4, 0.4, 0.3, 0.2],
            lambda: 1.0,
            u_max: DEFAULT_U_MAX,
            schedule: ScheduleConfig { ts: 0.25, tc: 1.0, n_instants: 5 },
            fault: FaultSpec { affected: vec![1, 2, 3], depth: 0.25 },
        }
    }

    /// Twelve monitored buses, five controls, `Tc = 3 s`, `H = 4`, five instants.
    pub fn twelve_bus() -> Self {
        let n = 12;
        Self {
            n,
            m: 5,
            a: vec![2.0; n],
            b: vec![5.0; n],
            c: 1.0,
            v_max: 1.3,
            w: ring_lattice(n),
            gamma: injection(n, &[0, 1, 3, 4, 11], 6.0),
            d: vec![0.3, 0.3, 0.4, 0.4, 0.3, 0.2, 0.2, 0.3, 0.4, 0.4, 0.4, 0.3],
            lambda: 1.0,
            u_max: DEFAULT_U_MAX,
            schedule: ScheduleConfig { ts: 0.75, tc: 3.0, n_instants: 5 },
            fault: FaultSpec { affected: vec![9, 10, 11], depth: 0.25 },
        }
    }

    /// Every violated constraint, one message per field problem.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.n;
        if n == 0 {
            out.push("n: must be >= 1".to_string());
        }
        if self.a.len() != n {
            out.push(format!("a: expected {n} entries, got {}", self.a.len()));
        }
        if self.a.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            out.push("a: all entries must be finite and > 0".to_string());
        }
        if self.b.len() != n {
            out.push(format!("b: expected {n} entries, got {}", self.b.len()));
        }
        if self.b.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            out.push("b: all entries must be finite and >= 0".to_string());
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            out.push("c: must be finite and >= 0".to_string());
        }
        if !(self.v_max > 1.0 && self.v_max.is_finite()) {
            out.push("v_max: must be finite and > 1".to_string());
        }
        if self.w.len() != n || self.w.iter().any(|r| r.len() != n) {
            out.push(format!("W: expected a {n}x{n} matrix"));
        } else {
            for (i, row) in self.w.iter().enumerate() {
                if row[i] != 0.0 {
                    out.push(format!("W: diagonal entry {i} must be 0"));
                }
                if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    out.push(format!("W: row {i} has negative or non-finite entries"));
                }
                let s: f64 = row.iter().sum();
                // an isolated single bus has an all-zero row
                if n > 1 && (s - 1.0).abs() > ROW_SUM_TOL {
                    out.push(format!("W: row {i} sums to {s}, expected 1"));
                }
            }
        }
        if self.gamma.len() != n || self.gamma.iter().any(|r| r.len() != self.m) {
            out.push(format!("gamma: expected a {n}x{} matrix", self.m));
        } else if self.gamma.iter().flatten().any(|&x| !(x >= 0.0 && x.is_finite())) {
            out.push("gamma: entries must be finite and >= 0".to_string());
        }
        if self.d.len() != n {
            out.push(format!("d: expected {n} entries, got {}", self.d.len()));
        }
        if self.d.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            out.push("d: entries must lie in [0, 1]".to_string());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            out.push("lambda: must be finite and > 0".to_string());
        } else if self.d.iter().any(|&di| 1.0 - 0.3 * self.lambda * di <= 0.0) {
            out.push("lambda: equilibrium 1 - 0.3*lambda*d must stay in (0, 1]".to_string());
        }
        if !(self.u_max >= 0.0 && self.u_max.is_finite()) {
            out.push("u_max: must be finite and >= 0".to_string());
        }
        if let Err(e) = Schedule::from_config(&self.schedule) {
            out.push(format!("schedule: {e}"));
        }
        if self.fault.affected.is_empty() {
            out.push("fault.affected: must be nonempty".to_string());
        }
        if let Some(&bad) = self.fault.affected.iter().find(|&&i| i >= n) {
            out.push(format!("fault.affected: bus {bad} out of range 0..{n}"));
        }
        if !(self.fault.depth > 0.0 && self.fault.depth < 1.0) {
            out.push("fault.depth: must lie in (0, 1)".to_string());
        }
        out
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("plant config serializes");
        let hash = Sha256::digest(&json);
        let mut s = String::with_capacity(64);
        for byte in hash.iter() {
            let _ = write!(s, "{byte:02x}");
        }
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Sampling schedule: `Tc = H * Ts`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub ts: f64,
    pub tc: f64,
    pub n_instants: usize,
    pub h: usize,
}

impl Schedule {
    pub fn new(ts: f64, tc: f64, n_instants: usize) -> Result<Self> {
        if !(ts > 0.0 && ts.is_finite() && tc.is_finite()) {
            return Err(Error::InvalidArgument(format!("Ts must be positive, got {ts}")));
        }
        let h = (tc / ts).round();
        if h < 1.0 || (h * ts - tc).abs() > 1e-9 * tc.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "Tc = {tc} is not a positive integer multiple of Ts = {ts}"
            )));
        }
        if n_instants == 0 {
            return Err(Error::InvalidArgument("n_instants must be >= 1".into()));
        }
        Ok(Self { ts, tc, n_instants, h: h as usize })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.ts, cfg.tc, cfg.n_instants)
    }

    /// Same sampling with a different number of control instants.
    pub fn with_instants(&self, n_instants: usize) -> Self {
        Self { n_instants, ..*self }
    }
}

/// Validated, immutable plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    config: PlantConfig,
    equilibrium: Vec<f64>,
}

impl PlantModel {
    pub fn new(config: PlantConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::InvalidArgument(v.join("; ")));
        }
        let equilibrium = equilibrium_of(&config.d, config.lambda);
        Ok(Self { config, equilibrium })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn u_max(&self) -> f64 {
        self.config.u_max
    }

    pub fn v_max(&self) -> f64 {
        self.config.v_max
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::from_config(&self.config.schedule).expect("validated at construction")
    }

    pub fn fault(&self) -> &FaultSpec {
        &self.config.fault
    }

    pub fn gamma(&self) -> &[Vec<f64>] {
        &self.config.gamma
    }

    /// `v*(lambda) = 1 - 0.3 lambda d`.
    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    /// Copy of this plant at another load factor.
    pub fn with_load(&self, lambda: f64) -> Result<Self> {
        Self::new(PlantConfig { lambda, ..self.config.clone() })
    }

    /// Copy of this plant with a different control ceiling.
    pub fn with_u_max(&self, u_max: f64) -> Result<Self> {
        Self::new(PlantConfig { u_max, ..self.config.clone() })
    }

    /// Bus whose voltage a control channel acts on most strongly.
    pub fn control_bus(&self, channel: usize) -> usize {
        let mut best = 0;
        for i in 0..self.n() {
            if self.config.gamma[i][channel] > self.config.gamma[best][channel] {
                best = i;
            }
        }
        best
    }

    /// Right-hand side of the voltage ODE.
    pub fn derivative(&self, v: &[f64], u: &[f64], out: &mut [f64]) {
        let cfg = &self.config;
        for i in 0..cfg.n {
            let e = self.equilibrium[i] - v[i];
            // Neighbors pull on deviations from their own equilibria, so v* stays a
            // fixed point even when load sensitivities differ between buses.
            let mut coupling = 0.0;
            for (j, &wij) in cfg.w[i].iter().enumerate() {
                coupling += wij * ((v[j] - self.equilibrium[j]) + e);
            }
            let mut inj = 0.0;
            for (l, &ul) in u.iter().enumerate() {
                inj += cfg.gamma[i][l] * ul;
            }
            out[i] = cfg.a[i] * e + cfg.b[i] * e * e * e + cfg.c * coupling + inj * (cfg.v_max - v[i]);
        }
    }
}

fn equilibrium_of(d: &[f64], lambda: f64) -> Vec<f64> {
    d.iter().map(|&di| 1.0 - 0.3 * lambda * di).collect()
}

/// Bus voltages at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub v: Vec<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn new(v: Vec<f64>) -> Self {
        Self { v, t: 0.0 }
    }

    /// Load-dependent equilibrium of `plant` at `t = 0`.
    pub fn equilibrium(plant: &PlantModel) -> Self {
        Self::new(plant.equilibrium().to_vec())
    }
}

/// Advance `state` by `dt` with control `u` held constant.
pub fn step(plant: &PlantModel, state: &PlantState, u: &[f64], dt: f64) -> Result<PlantState> {
    step_with_substeps(plant, state, u, dt, RK4_SUBSTEPS)
}

/// [`step`] with an explicit number of RK4 substeps.
pub fn step_with_substeps(
    plant: &PlantModel,
    state: &PlantState,
    u: &[f64],
    dt: f64,
    substeps: usize,
) -> Result<PlantState> {
    let n = plant.n();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive and finite, got {dt}")));
    }
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be >= 1".into()));
    }
    if u.len() != plant.m() {
        return Err(Error::Shape(format!("control has {} entries, plant has m = {}", u.len(), plant.m())));
    }
    if let Some(bad) = u.iter().find(|&&x| !(x >= 0.0 && x <= plant.u_max())) {
        return Err(Error::InvalidArgument(format!(
            "control {bad} outside [0, {}]",
            plant.u_max()
        )));
    }
    if state.v.len() != n {
        return Err(Error::Shape(format!("state has {} entries, plant has n = {n}", state.v.len())));
    }
    if state.v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Integration { t: state.t, reason: "non-finite state".into() });
    }

    let h = dt / substeps as f64;
    let v_max = plant.v_max();
    let mut v = state.v.clone();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..substeps {
        plant.derivative(&v, u, &mut k1);
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * h * k1[i];
        }
        plant.derivative(&tmp, u, &mut k2);
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * h * k2[i];
        }
        plant.derivative(&tmp, u, &mut k3);
        for i in 0..n {
            tmp[i] = v[i] + h * k3[i];
        }
        plant.derivative(&tmp, u, &mut k4);
        for i in 0..n {
            v[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            v[i] = v[i].clamp(0.0, v_max);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integration { t: state.t, reason: "state became non-finite".into() });
        }
    }
    Ok(PlantState { v, t: state.t + dt })
}

/// Instantaneous sag: `v_i <- max(v_i - depth, 0.05)` on the affected buses.
pub fn apply_fault(state: &PlantState, affected: &[usize], depth: f64) -> Result<PlantState> {
    if affected.is_empty() {
        return Err(Error::InvalidArgument("fault must affect at least one bus".into()));
    }
    if !(depth > 0.0 && depth < 1.0) {
        return Err(Error::InvalidArgument(format!("fault depth {depth} outside (0, 1)")));
    }
    let mut v = state.v.clone();
    for &i in affected {
        if i >= v.len() {
            return Err(Error::Index { index: i, lo: 0, hi: v.len().saturating_sub(1) });
        }
        v[i] = (v[i] - depth).max(FAULT_FLOOR);
    }
    Ok(PlantState { v, t: state.t })
}

/// Voltage samples at spacing `Ts` plus the zero-order-held controls.
///
/// Control `k` is applied over the interval between samples `k*H` and `(k+1)*H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub h: usize,
    pub times: Vec<f64>,
    pub voltages: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(ts: f64, h: usize, init: &[f64]) -> Self {
        Self { ts, h, times: vec![0.0], voltages: vec![init.to_vec()], controls: Vec::new() }
    }

    pub fn n_buses(&self) -> usize {
        self.voltages.first().map_or(0, Vec::len)
    }

    pub fn n_samples(&self) -> usize {
        self.voltages.len()
    }

    /// Number of completed control intervals.
    pub fn n_intervals(&self) -> usize {
        self.controls.len()
    }

    pub fn last(&self) -> &[f64] {
        self.voltages.last().expect("trajectory is never empty")
    }

    /// Control in effect at sample `s` (the last control for the final sample).
    pub fn held_control(&self, s: usize) -> Option<&[f64]> {
        if self.controls.is_empty() {
            return None;
        }
        let k = (s / self.h).min(self.controls.len() - 1);
        Some(&self.controls[k])
    }
}

/// Supplies a control vector at each control instant.
pub trait ControlPolicy {
    /// `instant` counts from 0; `traj` holds everything simulated so far.
    fn control(&mut self, instant: usize, traj: &Trajectory) -> Result<Vec<f64>>;
}

impl<F> ControlPolicy for F
where
    F: FnMut(usize, &Trajectory) -> Result<Vec<f64>>,
{
    fn control(&mut self, instant: usize, traj: &Trajectory) -> Result<Vec<f64>> {
        self(instant, traj)
    }
}

/// All channels at zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub m: usize,
}

impl ControlPolicy for ZeroPolicy {
    fn control(&mut self, _: usize, _: &Trajectory) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.m])
    }
}

/// The same vector at every instant.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl ControlPolicy for ConstantPolicy {
    fn control(&mut self, _: usize, _: &Trajectory) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Each channel i.i.d. uniform on `[0, u_max]` at every instant.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    m: usize,
    u_max: f64,
}

impl RandomPolicy {
    pub fn new(m: usize, u_max: f64, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), m, u_max }
    }
}

impl ControlPolicy for RandomPolicy {
    fn control(&mut self, _: usize, _: &Trajectory) -> Result<Vec<f64>> {
        Ok((0..self.m).map(|_| self.rng.gen::<f64>() * self.u_max).collect())
    }
}

/// Replays a fixed control sequence.
#[derive(Debug, Clone)]
pub struct ReplayPolicy(pub Vec<Vec<f64>>);

impl ControlPolicy for ReplayPolicy {
    fn control(&mut self, instant: usize, _: &Trajectory) -> Result<Vec<f64>> {
        self.0.get(instant).cloned().ok_or(Error::Index {
            index: instant,
            lo: 0,
            hi: self.0.len().saturating_sub(1),
        })
    }
}

/// Incremental simulator that records a [`Trajectory`].
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    plant: &'a PlantModel,
    sched: Schedule,
    state: PlantState,
    traj: Trajectory,
}

impl<'a> Simulator<'a> {
    pub fn new(plant: &'a PlantModel, sched: Schedule, init: PlantState) -> Result<Self> {
        if init.v.len() != plant.n() {
            return Err(Error::Shape(format!(
                "initial state has {} entries, plant has n = {}",
                init.v.len(),
                plant.n()
            )));
        }
        let traj = Trajectory::new(sched.ts, sched.h, &init.v);
        Ok(Self { plant, sched, state: init, traj })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Simulate one control interval (`H` samples) with `u` held.
    pub fn advance(&mut self, u: &[f64]) -> Result<()> {
        for _ in 0..self.sched.h {
            self.state = step(self.plant, &self.state, u, self.sched.ts)?;
            let idx = self.traj.voltages.len();
            self.traj.times.push(idx as f64 * self.sched.ts);
            self.traj.voltages.push(self.state.v.clone());
        }
        self.traj.controls.push(u.to_vec());
        Ok(())
    }
}

/// Simulate `sched.n_instants` control intervals from `init` under `policy`.
pub fn rollout(
    plant: &PlantModel,
    init: PlantState,
    policy: &mut dyn ControlPolicy,
    sched: &Schedule,
) -> Result<Trajectory> {
    let mut sim = Simulator::new(plant, *sched, init)?;
    for k in 0..sched.n_instants {
        let u = policy.control(k, sim.trajectory())?;
        sim.advance(&u)?;
    }
    Ok(sim.into_trajectory())
}

/// Equilibrium at the plant's load factor with the fault sag applied.
pub fn post_fault_state(plant: &PlantModel, fault: &FaultSpec) -> Result<PlantState> {
    apply_fault(&PlantState::equilibrium(plant), &fault.affected, fault.depth)
}

/// Fault at `t = 0`, [`LEAD_IN_INTERVALS`] uncontrolled interval(s), then
/// `sched.n_instants` intervals driven by `policy`.
///
/// The resulting trajectory has `(n_instants + 1) * H + 1` samples; its first control
/// entry is the all-zero lead-in. The policy sees instants `0..n_instants`.
pub fn simulate_episode(
    plant: &PlantModel,
    sched: &Schedule,
    fault: &FaultSpec,
    policy: &mut dyn ControlPolicy,
) -> Result<Trajectory> {
    let mut sim = Simulator::new(plant, *sched, post_fault_state(plant, fault)?)?;
    let zeros = vec![0.0; plant.m()];
    for _ in 0..LEAD_IN_INTERVALS {
        sim.advance(&zeros)?;
    }
    for k in 0..sched.n_instants {
        let u = policy.control(k, sim.trajectory())?;
        sim.advance(&u)?;
    }
    Ok(sim.into_trajectory())
}
