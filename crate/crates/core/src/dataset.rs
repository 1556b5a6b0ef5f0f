//! Training triples `(V_k, U_k, V_{k+1})` cut from simulated episodes.
//!
//! An episode starts from the post-fault sag, runs one uncontrolled interval and then
//! `n_instants` controlled intervals. The history window at instant `k` holds the `H`
//! samples since instant `k - 1`, so instant 1 sees the raw post-fault transient.
//!
//! On disk a dataset is a directory with `dataset.json` (manifest) and `samples.csv`
//! whose columns are `v_k` flattened row-major (`n*H`), then `u_k` (`m`), then
//! `v_next` flattened row-major (`n*H`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::plant::{
    simulate_episode, ConstantPolicy, ControlPolicy, PlantModel, RandomPolicy, Schedule, Trajectory, ZeroPolicy,
};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Load factors are drawn uniformly from this range.
pub const LOAD_RANGE: (f64, f64) = (0.9, 1.1);

/// `n x H` voltage history, stored row-major (bus-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMatrix {
    n: usize,
    h: usize,
    values: Vec<f64>,
}

impl HistoryMatrix {
    pub fn new(n: usize, h: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || h == 0 || values.len() != n * h {
            return Err(Error::Shape(format!("history {n}x{h} needs {} values, got {}", n * h, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("history entries must be finite".into()));
        }
        Ok(Self { n, h, values })
    }

    /// Build from `H` column vectors of length `n`.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let h = cols.len();
        let n = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("history columns differ in length".into()));
        }
        let mut values = vec![0.0; n * h];
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                values[i * h + j] = x;
            }
        }
        Self::new(n, h, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn get(&self, bus: usize, col: usize) -> f64 {
        self.values[bus * self.h + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, col)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.h).map(|j| self.column(j)).collect()
    }

    /// Row-major flattening (`n*H` values).
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { n: self.n, h: self.h, values: self.values.iter().map(|&x| f(x)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub v_k: HistoryMatrix,
    pub u_k: Vec<f64>,
    pub v_next: HistoryMatrix,
}

/// Affine maps for shifted voltages onto `[0, 1]` and controls onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub v_ref: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl Scaler {
    pub fn new(v_ref: f64, v_lo: f64, v_hi: f64, u_lo: f64, u_hi: f64) -> Result<Self> {
        let finite = [v_ref, v_lo, v_hi, u_lo, u_hi].iter().all(|x| x.is_finite());
        if !finite || v_hi <= v_lo {
            return Err(Error::Scaler(format!("degenerate voltage range [{v_lo}, {v_hi}]")));
        }
        if u_hi <= u_lo {
            return Err(Error::Scaler(format!("degenerate control range [{u_lo}, {u_hi}]")));
        }
        Ok(Self { v_ref, v_lo, v_hi, u_lo, u_hi })
    }

    /// Maps both voltages and controls to themselves.
    pub fn identity() -> Self {
        Self { v_ref: 0.0, v_lo: 0.0, v_hi: 1.0, u_lo: -1.0, u_hi: 1.0 }
    }

    pub fn norm_v(&self, v: f64) -> f64 {
        ((v - self.v_ref) - self.v_lo) / (self.v_hi - self.v_lo)
    }

    pub fn denorm_v(&self, x: f64) -> f64 {
        x * (self.v_hi - self.v_lo) + self.v_lo + self.v_ref
    }

    pub fn norm_u(&self, u: f64) -> f64 {
        2.0 * (u - self.u_lo) / (self.u_hi - self.u_lo) - 1.0
    }

    pub fn denorm_u(&self, x: f64) -> f64 {
        (x + 1.0) * 0.5 * (self.u_hi - self.u_lo) + self.u_lo
    }

    pub fn norm_vs(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.norm_v(x)).collect()
    }

    pub fn denorm_vs(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.denorm_v(v)).collect()
    }

    pub fn norm_us(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&x| self.norm_u(x)).collect()
    }

    pub fn denorm_us(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.denorm_u(v)).collect()
    }

    pub fn normalize(&self, s: &Sample) -> Sample {
        Sample {
            v_k: s.v_k.map(|v| self.norm_v(v)),
            u_k: self.norm_us(&s.u_k),
            v_next: s.v_next.map(|v| self.norm_v(v)),
        }
    }

    pub fn denormalize(&self, s: &Sample) -> Sample {
        Sample {
            v_k: s.v_k.map(|v| self.denorm_v(v)),
            u_k: self.denorm_us(&s.u_k),
            v_next: s.v_next.map(|v| self.denorm_v(v)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Zero,
    Full,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Zero, PolicyKind::Full, PolicyKind::Random];

    fn build(self, m: usize, u_max: f64, seed: u64) -> Box<dyn ControlPolicy> {
        match self {
            PolicyKind::Zero => Box::new(ZeroPolicy { m }),
            PolicyKind::Full => Box::new(ConstantPolicy(vec![u_max; m])),
            PolicyKind::Random => Box::new(RandomPolicy::new(m, u_max, seed)),
        }
    }
}

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub seed: u64,
    pub n_loads: usize,
    pub policies: Vec<PolicyKind>,
    pub plant_digest: String,
    pub ts: f64,
    pub n_instants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub h: usize,
    pub samples: Vec<Sample>,
    pub scaler: Option<Scaler>,
    pub meta: Option<GenerationMeta>,
}

impl Dataset {
    pub fn new(n: usize, m: usize, h: usize, samples: Vec<Sample>) -> Result<Self> {
        for (idx, s) in samples.iter().enumerate() {
            let ok = s.v_k.n == n && s.v_k.h == h && s.v_next.n == n && s.v_next.h == h && s.u_k.len() == m;
            if !ok {
                return Err(Error::Shape(format!("sample {idx} does not match n={n}, m={m}, H={h}")));
            }
        }
        Ok(Self { n, m, h, samples, scaler: None, meta: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self { samples: idx.iter().map(|&i| self.samples[i].clone()).collect(), ..self.shallow() }
    }

    fn shallow(&self) -> Self {
        Self { n: self.n, m: self.m, h: self.h, samples: Vec::new(), scaler: self.scaler, meta: self.meta.clone() }
    }
}

/// The `H` samples after instant `k - 1`, ending at instant `k` (`1 <= k <= intervals`).
pub fn window_history(traj: &Trajectory, k: usize) -> Result<HistoryMatrix> {
    let intervals = (traj.n_samples().saturating_sub(1)) / traj.h;
    if k == 0 || k > intervals {
        return Err(Error::Index { index: k, lo: 1, hi: intervals });
    }
    let start = (k - 1) * traj.h + 1;
    HistoryMatrix::from_columns(&traj.voltages[start..start + traj.h])
}

/// Training triples of an episode with one uncontrolled lead-in interval:
/// instant `k` pairs window `k` with the control of interval `k` and window `k + 1`.
pub fn episode_samples(traj: &Trajectory) -> Result<Vec<Sample>> {
    (1..traj.n_intervals())
        .map(|k| {
            Ok(Sample {
                v_k: window_history(traj, k)?,
                u_k: traj.controls[k].clone(),
                v_next: window_history(traj, k + 1)?,
            })
        })
        .collect()
}

/// Load factor for load case `load`, uniform on [`LOAD_RANGE`].
pub fn load_factor(seed: u64, load: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, load as u64, u64::MAX));
    rng.gen_range(LOAD_RANGE.0..=LOAD_RANGE.1)
}

/// All three policies (zero, full, random) per load case.
pub fn generate(plant: &PlantModel, sched: &Schedule, n_loads: usize, seed: u64) -> Result<Dataset> {
    generate_with(plant, sched, n_loads, seed, &PolicyKind::ALL)
}

/// Simulates every `(load, policy)` pair in parallel and merges in index order.
/// Random-policy seeds are `mix_seed(seed, load, policy_index)`.
pub fn generate_with(
    plant: &PlantModel,
    sched: &Schedule,
    n_loads: usize,
    seed: u64,
    policies: &[PolicyKind],
) -> Result<Dataset> {
    if n_loads == 0 {
        return Err(Error::InvalidArgument("n_loads must be at least 1".into()));
    }
    if policies.is_empty() {
        return Err(Error::InvalidArgument("at least one policy is required".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..n_loads).flat_map(|l| (0..policies.len()).map(move |p| (l, p))).collect();
    let chunks: Vec<Vec<Sample>> = jobs
        .par_iter()
        .map(|&(load, p)| {
            let case = plant.with_load(load_factor(seed, load))?;
            let mut policy = policies[p].build(case.m(), case.u_max(), mix_seed(seed, load as u64, p as u64));
            let traj = simulate_episode(&case, sched, case.fault(), policy.as_mut())?;
            episode_samples(&traj)
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset::new(plant.n(), plant.m(), sched.h, chunks.into_iter().flatten().collect())?;
    ds.meta = Some(GenerationMeta {
        seed,
        n_loads,
        policies: policies.to_vec(),
        plant_digest: plant.config().digest(),
        ts: sched.ts,
        n_instants: sched.n_instants,
    });
    Ok(ds)
}

/// Voltage range from every history in `ds`, control range `[0, u_max]`.
pub fn fit_scaler(ds: &Dataset, v_ref: f64, u_max: f64) -> Result<Scaler> {
    if ds.is_empty() {
        return Err(Error::Scaler("cannot fit a scaler on an empty dataset".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &ds.samples {
        for &v in s.v_k.as_slice().iter().chain(s.v_next.as_slice()) {
            lo = lo.min(v - v_ref);
            hi = hi.max(v - v_ref);
        }
    }
    Scaler::new(v_ref, lo, hi, 0.0, u_max)
}

/// Shuffled partition into `floor(ratio * N)` and the remainder.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (ratio * ds.len() as f64).floor() as usize;
    Ok((ds.subset(&idx[..cut]), ds.subset(&idx[cut..])))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    m: usize,
    h: usize,
    count: usize,
    columns: usize,
    scaler: Option<Scaler>,
    meta: Option<GenerationMeta>,
}

fn header(n: usize, m: usize, h: usize) -> Vec<String> {
    let hist = |p: &str| (0..n).flat_map(move |i| (0..h).map(move |j| format!("{p}_{i}_{j}"))).collect::<Vec<_>>();
    let mut cols = hist("vk");
    cols.extend((0..m).map(|l| format!("u_{l}")));
    cols.extend(hist("vn"));
    cols
}

/// Writes `dataset.json` and `samples.csv` into `dir` (created if missing).
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let width = 2 * ds.n * ds.h + ds.m;
    let manifest = Manifest {
        n: ds.n,
        m: ds.m,
        h: ds.h,
        count: ds.len(),
        columns: width,
        scaler: ds.scaler,
        meta: ds.meta.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let mut w = csv::Writer::from_path(dir.join(SAMPLES_FILE))?;
    w.write_record(header(ds.n, ds.m, ds.h))?;
    let mut row = Vec::with_capacity(width);
    for s in &ds.samples {
        row.clear();
        row.extend(s.v_k.as_slice().iter().chain(&s.u_k).chain(s.v_next.as_slice()).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let (n, m, h) = (manifest.n, manifest.m, manifest.h);
    let width = 2 * n * h + m;
    if manifest.columns != width {
        return Err(Error::Parse(format!("manifest declares {} columns, n/m/H imply {width}", manifest.columns)));
    }
    let mut r = csv::Reader::from_path(dir.join(SAMPLES_FILE))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Parse(format!("row {line} has {} fields, expected {width}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("row {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let nh = n * h;
        samples.push(Sample {
            v_k: HistoryMatrix::new(n, h, vals[..nh].to_vec())?,
            u_k: vals[nh..nh + m].to_vec(),
            v_next: HistoryMatrix::new(n, h, vals[nh + m..].to_vec())?,
        });
    }
    if samples.len() != manifest.count {
        return Err(Error::Parse(format!("manifest declares {} samples, file has {}", manifest.count, samples.len())));
    }
    let mut ds = Dataset::new(n, m, h, samples)?;
    ds.scaler = manifest.scaler;
    ds.meta = manifest.meta;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{rollout, PlantConfig, PlantState};
    use proptest::prelude::*;

    fn plant() -> PlantModel {
        PlantModel::new(PlantConfig::default_surrogate()).unwrap()
    }

    #[test]
    fn window_shapes() {
        let p = PlantModel::new(PlantConfig::twelve_bus()).unwrap();
        let sched = p.schedule();
        let traj = rollout(&p, PlantState::equilibrium(&p), &mut ZeroPolicy { m: p.m() }, &sched).unwrap();
        let w = window_history(&traj, 1).unwrap();
        assert_eq!((w.n(), w.h()), (12, 4));
        for col in w.columns() {
            for (a, b) in col.iter().zip(p.equilibrium()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(matches!(window_history(&traj, 0), Err(Error::Index { .. })));
        assert!(matches!(window_history(&traj, 6), Err(Error::Index { .. })));
    }

    #[test]
    fn single_column_window_is_the_instant_sample() {
        let p = plant();
        let sched = Schedule::new(0.5, 0.5, 3).unwrap();
        let traj = rollout(&p, PlantState::new(vec![0.8; 6]), &mut ZeroPolicy { m: 3 }, &sched).unwrap();
        for k in 1..=3 {
            assert_eq!(window_history(&traj, k).unwrap().column(0), traj.voltages[k]);
        }
    }

    #[test]
    fn windows_tile_the_trajectory_without_overlap() {
        let p = plant();
        let sched = p.schedule();
        let traj = simulate_episode(&p, &sched, p.fault(), &mut RandomPolicy::new(3, 0.25, 1)).unwrap();
        let samples = episode_samples(&traj).unwrap();
        assert_eq!(samples.len(), sched.n_instants);
        for (k, s) in samples.iter().enumerate() {
            let last = (k + 1) * sched.h;
            assert_eq!(s.v_k.column(sched.h - 1), traj.voltages[last]);
            assert_eq!(s.v_next.column(0), traj.voltages[last + 1]);
            assert_eq!(s.u_k, traj.controls[k + 1]);
        }
    }

    #[test]
    fn generation_count_and_zero_only_debug_mode() {
        let p = plant();
        let sched = p.schedule();
        let ds = generate(&p, &sched, 3, 5).unwrap();
        assert_eq!(ds.len(), 3 * 3 * sched.n_instants);
        let zero = generate_with(&p, &sched, 1, 5, &[PolicyKind::Zero]).unwrap();
        assert_eq!(zero.len(), 5);
        assert!(zero.samples.iter().all(|s| s.u_k.iter().all(|&u| u == 0.0)));
        assert!(generate(&p, &sched, 0, 5).is_err());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let p = plant();
        let sched = p.schedule();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save(&generate(&p, &sched, 4, 9).unwrap(), a.path()).unwrap();
        save(&generate(&p, &sched, 4, 9).unwrap(), b.path()).unwrap();
        for f in [MANIFEST_FILE, SAMPLES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn scaler_examples() {
        let s = Scaler::new(1.0, -0.1, 0.1, 0.0, 0.25).unwrap();
        assert!((s.norm_v(0.9) - 0.0).abs() < 1e-15);
        assert!((s.norm_v(1.1) - 1.0).abs() < 1e-15);
        assert_eq!(s.norm_u(0.0), -1.0);
        assert_eq!(s.norm_u(0.25), 1.0);
        assert!(matches!(Scaler::new(1.0, 0.1, 0.1, 0.0, 0.25), Err(Error::Scaler(_))));
    }

    #[test]
    fn fitted_scaler_bounds_the_fitting_data() {
        let p = plant();
        let ds = generate(&p, &p.schedule(), 4, 2).unwrap();
        let sc = fit_scaler(&ds, 1.0, 0.25).unwrap();
        for s in &ds.samples {
            let ns = sc.normalize(s);
            assert!(ns.v_k.as_slice().iter().chain(ns.v_next.as_slice()).all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
            assert!(ns.u_k.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let p = plant();
        let ds = generate(&p, &p.schedule(), 2, 0).unwrap();
        let (tr, te) = split(&ds, 0.7, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (21, 9));
        assert_eq!(split(&ds, 0.7, 3).unwrap().0, tr);
        let two = Dataset { samples: ds.samples[..2].to_vec(), ..ds.clone() };
        let (a, b) = split(&two, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&Dataset::new(6, 3, 4, vec![]).unwrap(), 0.5, 0).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let p = plant();
        let ds = generate_with(&p, &p.schedule(), 4, 1, &[PolicyKind::Random]).unwrap();
        let (tr, te) = split(&ds, 0.6, 8).unwrap();
        let mut all: Vec<String> =
            tr.samples.iter().chain(&te.samples).map(|s| format!("{:?}", s.u_k)).collect();
        all.sort();
        let mut orig: Vec<String> = ds.samples.iter().map(|s| format!("{:?}", s.u_k)).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let p = plant();
        let mut ds = generate(&p, &p.schedule(), 2, 4).unwrap();
        ds.scaler = Some(fit_scaler(&ds, 1.0, 0.25).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), ds);

        let empty = Dataset::new(6, 3, 4, vec![]).unwrap();
        save(&empty, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), empty);

        save(&ds, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut man: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        man["n"] = 12.into();
        man["columns"] = (2 * 12 * 4 + 3).into();
        fs::write(&path, man.to_string()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn scaler_round_trip(v in 0.0f64..1.3, u in 0.0f64..0.25, lo in -0.9f64..-0.01, span in 0.01f64..1.0) {
            let s = Scaler::new(1.0, lo, lo + span, 0.0, 0.25).unwrap();
            prop_assert!((s.denorm_v(s.norm_v(v)) - v).abs() < 1e-12);
            prop_assert!((s.denorm_u(s.norm_u(u)) - u).abs() < 1e-12);
        }
    }
}
