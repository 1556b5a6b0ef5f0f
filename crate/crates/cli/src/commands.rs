use std::path::{Path, PathBuf};

use serde::Serialize;

use koopman_mpc::dataset::{self, Dataset};
use koopman_mpc::eval::{self, load_sweep, performance_index, terminal_mean, total_control, OneStepScores};
use koopman_mpc::mpc::{closed_loop, receding_horizon, write_trajectory_csv, AnyModel, LinearEmbedding};
use koopman_mpc::pipeline::{self, make_splits, DictionarySpec, Run};
use koopman_mpc::plant::{PlantModel, ZeroPolicy};
use koopman_mpc::{Error, Result, V_REF};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MODEL_FILE: &str = "lifted_model.json";
pub const HISTORY_FILE: &str = "training_history.csv";
pub const SCORES_FILE: &str = "test_scores.json";

/// `--out`, else the config's `output_dir` (relative to the config file).
fn out_dir(flag: Option<PathBuf>, run: &Run, config: &Path) -> Result<PathBuf> {
    let dir = match (flag, &run.config.output_dir) {
        (Some(d), _) => d,
        (None, Some(d)) => config.parent().unwrap_or(Path::new(".")).join(d),
        (None, None) => return Err(Error::Usage("no --out given and the config has no output_dir".into())),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn check_dataset(ds: &Dataset, plant: &PlantModel, h: usize) -> Result<()> {
    if (ds.n, ds.m, ds.h) != (plant.n(), plant.m(), h) {
        return Err(Error::Shape(format!(
            "dataset has n={}, m={}, H={}; config gives n={}, m={}, H={h}",
            ds.n,
            ds.m,
            ds.h,
            plant.n(),
            plant.m()
        )));
    }
    Ok(())
}

pub fn gen_data(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let run = Run::load(config)?;
    let dir = out_dir(out, &run, config)?;
    let ds = run.generate(seed.unwrap_or(run.seed))?;
    dataset::save(&ds, &dir)
}

pub fn train(data: &Path, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = Run::load(config)?;
    let dir = out_dir(out, &run, config)?;
    let ds = dataset::load(data)?;
    check_dataset(&ds, &run.plant, run.schedule.h)?;
    let d = &run.config.dataset;
    let splits = make_splits(&ds, d.split, d.val_fraction, run.config.mpc.v_ref, run.plant.u_max())?;
    let trained = pipeline::train_kdnn(&run, &splits)?;
    trained.network.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    trained.lifted.save(&dir.join(MODEL_FILE))?;
    pipeline::write_history_csv(&trained.history, &dir.join(HISTORY_FILE))?;
    write_json(&dir.join(SCORES_FILE), &trained.test_scores)
}

#[derive(Serialize)]
struct EdmdScores<'a> {
    dictionary: &'a str,
    ridge: f64,
    #[serde(flatten)]
    scores: OneStepScores,
}

pub fn fit_edmd(data: &Path, dict: &str, ridge: f64, split: f64, seed: u64, out: &Path) -> Result<()> {
    let spec: DictionarySpec = dict.parse()?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("--ridge must be >= 0, got {ridge}")));
    }
    let ds = dataset::load(data)?;
    // The control ceiling is recovered from the data; the full-control policy hits it.
    let u_max = ds.samples.iter().flat_map(|s| s.u_k.iter().copied()).fold(0.0, f64::max);
    if u_max <= 0.0 {
        return Err(Error::Usage("dataset contains no applied control".into()));
    }
    let splits = make_splits(&ds, split, 0.1, V_REF, u_max)?;
    let (model, scores) = pipeline::fit_edmd(&splits, spec, ridge, seed)?;
    std::fs::create_dir_all(out)?;
    model.save(&out.join(MODEL_FILE))?;
    write_json(&out.join(SCORES_FILE), &EdmdScores { dictionary: dict, ridge, scores })
}

#[derive(Serialize)]
struct RunSummary {
    model: &'static str,
    load_factor: f64,
    u_max: f64,
    j_no_control: f64,
    j_kmpc: f64,
    terminal_mean: f64,
    total_control: f64,
    aborted: Option<String>,
}

pub fn run_mpc(model_path: &Path, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = Run::load(config)?;
    let dir = out_dir(out, &run, config)?;
    let model = AnyModel::load(model_path)?;
    let plant = run.control_plant()?;
    let sched = run.schedule;
    let cfg = run.mpc();
    let settings = run.compare_settings();
    let monitored: Vec<usize> =
        if settings.monitored.is_empty() { (0..plant.n()).collect() } else { settings.monitored.clone() };

    let (base, _) = closed_loop(&plant, &sched, plant.fault(), &mut ZeroPolicy { m: plant.m() })?;
    write_trajectory_csv(&base, plant.m(), &dir.join("no_control.csv"))?;
    let res = receding_horizon(&model, &plant, &sched, plant.fault(), &cfg)?;
    res.save(&dir, "closed_loop", model.n_controls())?;

    let summary = RunSummary {
        model: model.kind(),
        load_factor: plant.lambda(),
        u_max: plant.u_max(),
        j_no_control: performance_index(&base, cfg.v_ref, &monitored)?,
        j_kmpc: performance_index(&res.trajectory, cfg.v_ref, &monitored)?,
        terminal_mean: terminal_mean(&res.trajectory),
        total_control: total_control(&res.trajectory),
        aborted: res.aborted.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(msg) = res.aborted {
        return Err(Error::Usage(format!("MPC aborted: {msg}")));
    }

    let loads = &run.config.eval.loads;
    if !loads.is_empty() {
        let rows = load_sweep(&model, &plant, &sched, loads, &settings)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn compare(
    model_path: &Path,
    config: &Path,
    cases: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let run = Run::load(config)?;
    let dir = out_dir(out, &run, config)?;
    let model = AnyModel::load(model_path)?;
    let cases = cases.unwrap_or(run.config.eval.cases);
    if cases == 0 {
        return Err(Error::InvalidArgument("--cases must be >= 1".into()));
    }
    let plant = run.control_plant()?;
    let report = eval::compare(&model, &plant, &run.schedule, cases, seed.unwrap_or(run.seed), &run.compare_settings())?;
    report.save(&dir)
}
