//! Acceptance report: one PASS/FAIL line per criterion, exit status nonzero if any fails.
//! Criteria 5 to 8 train once on the shipped default configuration (a few minutes).

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopman_mpc::dataset::{self, Dataset, HistoryMatrix, Sample};
use koopman_mpc::edmd::{self, Dictionary};
use koopman_mpc::eval::{compare, load_sweep, SweepRecord};
use koopman_mpc::mpc::{condense, receding_horizon, solve_box_qp, MpcProblem, SolverSettings, StateCost};
use koopman_mpc::pipeline::{self, make_splits, DictionarySpec, Run, Splits};

struct Line {
    pass: bool,
    detail: String,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn gradients() -> Line {
    let ((worst, draws), dt) = timed(|| {
        let draws = 24;
        let worst = (0..draws)
            .map(|seed| {
                let (model, batch) = common::mini_kdnn(1000 + seed);
                common::kdnn_fd_error(&model, &batch)
            })
            .fold(0.0, f64::max);
        (worst, draws)
    });
    Line {
        pass: worst < 1e-4 && dt < Duration::from_secs(60),
        detail: format!("worst relative error {worst:.2e} over {draws} miniature KDNNs ({dt:.2?})"),
    }
}

/// Linear system in normalized coordinates: `x+ = A x + B u + c`.
fn edmd_recovery() -> Line {
    let ((err, residual), dt) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, h, m) = (2, 2, 2);
        let d = n * h;
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.4..0.4));
        let b = DMatrix::from_fn(d, m, |_, _| rng.gen_range(-1.0..1.0));
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.2..0.2));
        let samples = (0..60)
            .map(|_| {
                let x = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                let u = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
                let next = &a * &x + &b * &u + &c;
                Sample {
                    v_k: HistoryMatrix::new(n, h, x.iter().copied().collect()).unwrap(),
                    u_k: u.iter().copied().collect(),
                    v_next: HistoryMatrix::new(n, h, next.iter().copied().collect()).unwrap(),
                }
            })
            .collect();
        let model = edmd::fit(&Dataset::new(n, m, h, samples).unwrap(), Dictionary::Identity, 0.0).unwrap();
        let mut a_true = DMatrix::zeros(d + 1, d + 1);
        a_true[(0, 0)] = 1.0;
        a_true.view_mut((1, 0), (d, 1)).copy_from(&c);
        a_true.view_mut((1, 1), (d, d)).copy_from(&a);
        let mut b_true = DMatrix::zeros(d + 1, m);
        b_true.view_mut((1, 0), (d, m)).copy_from(&b);
        let err = (model.a() - a_true).amax().max((model.b() - b_true).amax());
        (err, model.report.dynamics_residual)
    });
    Line {
        pass: err < 1e-8 && residual < 1e-8 && dt < Duration::from_secs(1),
        detail: format!("max |A - A*|, |B - B*| = {err:.1e}, residual {residual:.1e} ({dt:.2?})"),
    }
}

fn random_problem(rng: &mut ChaCha8Rng, nz: usize, m: usize, horizon: usize) -> MpcProblem {
    let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
    let a = mat(nz, nz, 0.6);
    let b = mat(nz, m, 1.0);
    let lq = mat(nz, nz, 1.0);
    let lr = mat(m, m, 0.5);
    let z0 = DVector::from_column_slice(mat(nz, 1, 1.0).as_slice());
    let z_ref = DVector::from_column_slice(mat(nz, 1, 1.0).as_slice());
    MpcProblem {
        q: &lq * lq.transpose(),
        r: &lr * lr.transpose() + DMatrix::identity(m, m) * 0.1,
        a,
        b,
        z0,
        z_ref,
        horizon,
        u_min: DVector::from_element(m, -1.0),
        u_max: DVector::from_element(m, 1.0),
    }
}

fn qp_optimality() -> Line {
    let settings = SolverSettings::default();
    let ((interior, grid_gap, grid_count), dt) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut interior: f64 = 0.0;
        for _ in 0..50 {
            let (nz, m, horizon) = (rng.gen_range(1..=5), rng.gen_range(1..=3), rng.gen_range(1..=4));
            let mut p = random_problem(&mut rng, nz, m, horizon);
            let qp = condense(&p).unwrap();
            let free = -qp.hessian.clone().cholesky().unwrap().solve(&qp.linear);
            // Box centered on the unconstrained optimum so it is strictly interior.
            p.u_min = DVector::from_fn(m, |i, _| free.rows_with_step(i, horizon, m - 1).min() - 1.0);
            p.u_max = DVector::from_fn(m, |i, _| free.rows_with_step(i, horizon, m - 1).max() + 1.0);
            let sol = solve_box_qp(&condense(&p).unwrap(), &settings).unwrap();
            interior = interior.max((sol.u - free).amax());
        }
        let mut gap: f64 = f64::NEG_INFINITY;
        let mut count = 0;
        for m in 1..=3 {
            for horizon in 1..=3 / m {
                for _ in 0..10 {
                    let nz = rng.gen_range(1..=4);
                    let p = random_problem(&mut rng, nz, m, horizon);
                    let qp = condense(&p).unwrap();
                    let sol = solve_box_qp(&qp, &settings).unwrap();
                    gap = gap.max(sol.objective - grid_min(&qp, m * horizon));
                    count += 1;
                }
            }
        }
        (interior, gap, count)
    });
    Line {
        pass: interior < 1e-6 && grid_gap < 1e-6 && dt < Duration::from_secs(60),
        detail: format!(
            "interior error {interior:.1e} on 50 instances; solver minus grid objective {grid_gap:.1e} (max) on {grid_count} instances with m*N <= 3 ({dt:.2?})"
        ),
    }
}

/// Best objective on a 101-point-per-axis grid over the box.
fn grid_min(qp: &koopman_mpc::mpc::CondensedQp, dim: usize) -> f64 {
    const STEPS: usize = 100;
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; dim];
    loop {
        let u = DVector::from_fn(dim, |i, _| {
            qp.lower[i] + (qp.upper[i] - qp.lower[i]) * idx[i] as f64 / STEPS as f64
        });
        best = best.min(qp.objective(&u));
        let mut k = 0;
        while k < dim && idx[k] == STEPS {
            idx[k] = 0;
            k += 1;
        }
        if k == dim {
            return best;
        }
        idx[k] += 1;
    }
}

fn condensation() -> Line {
    let (worst, dt) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..100)
            .map(|_| {
                let (nz, m, horizon) = (rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=6));
                let p = random_problem(&mut rng, nz, m, horizon);
                let qp = condense(&p).unwrap();
                let u = DVector::from_fn(m * horizon, |_, _| rng.gen_range(-1.0..1.0));
                let direct = p.objective(&u);
                (qp.objective(&u) - direct).abs() / direct.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    });
    Line {
        pass: worst < 1e-10 && dt < Duration::from_secs(10),
        detail: format!("worst relative mismatch {worst:.1e} on 100 instances ({dt:.2?})"),
    }
}

fn repo_config(flavor: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(flavor).join("run.json")
}

struct Trained {
    run: Run,
    splits: Splits,
    model: koopman_mpc::kdnn::LiftedModel,
    scores: koopman_mpc::eval::OneStepScores,
    train_time: Duration,
}

fn fit_quality(t: &Trained) -> Line {
    let s = &t.scores;
    let (_, edmd_scores) =
        pipeline::fit_edmd(&t.splits, DictionarySpec::Identity, t.run.config.edmd.ridge, t.run.seed).unwrap();
    Line {
        pass: s.r2_next >= 0.95 && s.r2_k >= 0.95 && t.train_time < Duration::from_secs(1800),
        detail: format!(
            "held-out r2 next {:.4}, reconstruction {:.4} on {} loads ({} test samples, trained in {:.0?}); identity EDMD r2 next {:.4}",
            s.r2_next,
            s.r2_k,
            t.run.config.dataset.n_loads,
            t.splits.test.len(),
            t.train_time,
            edmd_scores.r2_next
        ),
    }
}

fn sweep_line(rows: &[SweepRecord]) -> (bool, String) {
    let ok = rows.iter().all(|r| r.j_kmpc < r.j_no_control && (r.terminal_mean - 1.0).abs() < 0.05);
    let cells: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}: J {:.2}/{:.2} v(T) {:.3}", r.load_factor, r.j_kmpc, r.j_no_control, r.terminal_mean))
        .collect();
    (ok, cells.join(", "))
}

/// Non-decreasing, allowing a single relative drop of at most 5%.
fn monotone_with_slack(xs: &[f64]) -> bool {
    let drops: Vec<f64> = xs.windows(2).filter(|w| w[1] < w[0]).map(|w| (w[0] - w[1]) / w[0].abs().max(1e-12)).collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.05)
}

fn main() {
    let mut lines: Vec<(usize, &str, Line)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "EDMD exact recovery", edmd_recovery()),
        (3, "QP optimality", qp_optimality()),
        (4, "condensation equivalence", condensation()),
    ];
    for (k, name, l) in &lines {
        print_line(*k, name, l);
    }

    let run = Run::load(&repo_config("default")).expect("shipped default config");
    let ds = run.generate(run.seed).unwrap();
    let d = &run.config.dataset;
    let splits = make_splits(&ds, d.split, d.val_fraction, run.config.mpc.v_ref, run.plant.u_max()).unwrap();
    let (trained, train_time) = timed(|| pipeline::train_kdnn(&run, &splits).unwrap());
    let t = Trained { model: trained.lifted, scores: trained.test_scores, run, splits, train_time };
    let l5 = fit_quality(&t);
    print_line(5, "KDNN fit quality", &l5);
    lines.push((5, "KDNN fit quality", l5));

    let plant = t.run.control_plant().unwrap();
    let loads = [0.9, 0.95, 1.0, 1.05, 1.1];
    let mut identity = t.run.compare_settings();
    identity.mpc.state_cost = StateCost::Identity;
    let variants = [("", t.run.compare_settings()), (" [Q = I]", identity)];
    for (tag, settings) in &variants {
        let rows = load_sweep(&t.model, &plant, &t.run.schedule, &loads, settings).unwrap();
        let (ok6, detail6) = sweep_line(&rows);
        let report = compare(&t.model, &plant, &t.run.schedule, 100, t.run.seed, settings).unwrap();
        let controls: Vec<f64> = rows.iter().map(|r| r.total_control).collect();
        let trend: Vec<String> = controls.iter().map(|c| format!("{c:.3}")).collect();
        let l6 = Line { pass: ok6, detail: detail6 };
        let l7 = Line {
            pass: report.win_fraction >= 0.7,
            detail: format!(
                "win fraction {:.2} over {} cases (mean J: none {:.3}, VVC {:.3}, MPC {:.3}; {} failed)",
                report.win_fraction,
                report.n_cases,
                report.mean_j_no_control,
                report.mean_j_vvc,
                report.mean_j_kmpc,
                report.failed_cases
            ),
        };
        let l8 = Line { pass: monotone_with_slack(&controls), detail: format!("total control {}", trend.join(" -> ")) };
        if tag.is_empty() {
            for (k, name, l) in [(6, "closed-loop efficacy", l6), (7, "comparison harness", l7), (8, "monotone control trend", l8)] {
                print_line(k, name, &l);
                lines.push((k, name, l));
            }
        } else {
            // Informational: the same model under the plain lifted-state cost.
            for (k, l) in [(6, l6), (7, l7), (8, l8)] {
                println!("  info {k}{tag}: {} {}", if l.pass { "pass" } else { "fail" }, l.detail);
            }
        }
    }

    let l9 = determinism();
    print_line(9, "determinism", &l9);
    lines.push((9, "determinism", l9));

    let failed: Vec<usize> = lines.iter().filter(|(_, _, l)| !l.pass).map(|(k, _, _)| *k).collect();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(k: usize, name: &str, l: &Line) {
    println!("criterion {k} {}: {name}: {}", if l.pass { "PASS" } else { "FAIL" }, l.detail);
}

/// Every stage run twice on a scaled-down default configuration; outputs compared as bytes.
fn determinism() -> Line {
    let mut run = Run::load(&repo_config("default")).unwrap();
    run.config.dataset.n_loads = 12;
    run.config.kdnn.max_epochs = 5;
    let stage = |dir: &Path| -> Vec<(&'static str, Vec<u8>)> {
        let ds = run.generate(run.seed).unwrap();
        dataset::save(&ds, &dir.join("data")).unwrap();
        let ds = dataset::load(&dir.join("data")).unwrap();
        let splits = make_splits(&ds, 0.7, 0.1, 1.0, run.plant.u_max()).unwrap();
        let trained = pipeline::train_kdnn(&run, &splits).unwrap();
        trained.lifted.save(&dir.join("kdnn.json")).unwrap();
        trained.network.to_checkpoint().save(&dir.join("checkpoint.json")).unwrap();
        pipeline::write_history_csv(&trained.history, &dir.join("history.csv")).unwrap();
        let (edmd, _) = pipeline::fit_edmd(&splits, DictionarySpec::Rbf { count: 8, width: 1.0 }, 1e-6, 3).unwrap();
        edmd.save(&dir.join("edmd.json")).unwrap();
        let plant = run.control_plant().unwrap();
        receding_horizon(&trained.lifted, &plant, &run.schedule, plant.fault(), &run.mpc())
            .unwrap()
            .save(dir, "closed_loop", plant.m())
            .unwrap();
        compare(&trained.lifted, &plant, &run.schedule, 6, run.seed, &run.compare_settings())
            .unwrap()
            .save(dir)
            .unwrap();
        [
            "data/dataset.json",
            "data/samples.csv",
            "kdnn.json",
            "checkpoint.json",
            "history.csv",
            "edmd.json",
            "closed_loop.csv",
            "closed_loop.json",
            "report.csv",
            "report.json",
        ]
        .into_iter()
        .map(|f| (f, std::fs::read(dir.join(f)).unwrap()))
        .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (stage(a.path()), stage(b.path()));
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    Line {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", first.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    }
}
