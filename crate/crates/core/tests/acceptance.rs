//! The ten acceptance criteria. Each prints one PASS or FAIL line with the
//! measured quantities; the binary fails if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use rise_core::estimator::{optimal_update, rise_update};
use rise_core::factor::{write_checkpoint, BlockKey};
use rise_core::metrics::{chi_square_band, cost_profile, mean_nees, median, nees, nees_value, position_rmse, slope, Alignment};
use rise_core::oracle::{dense_batch_ls, CostTerm, LinearSystem};
use rise_core::pipeline::{
    apply_feedback, backend_solve, mode_controller_step, transition_to_exploration, BackendJob, EstimatorKind, Mode,
    PipelineState, SessionConfig, WindowConfig,
};
use rise_core::runner::{absolute_rows, run_log, step_input, RunOptions, SimulationRun};
use rise_core::simulator::{
    emit_measurements, generate_scenario, monte_carlo, GroundTruth, MeasurementLog, MeasurementModel, NoiseModel,
    ScenarioKind, ScenarioParams,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Pinned tolerances and thresholds.
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_TIME: Duration = Duration::from_secs(10);
const NEES_MEDIAN_RATIO: f64 = 2.0;
const NEES_PEAK_RATIO: f64 = 10.0;
const CONSISTENCY_TIME: Duration = Duration::from_secs(300);
const SLOPE_LIMIT: f64 = 0.01;
const NNZ_RATE_GROWTH: f64 = 1.1;
const FEEDBACK_TOL: f64 = 1e-8;
const GRAM_TOL: f64 = 1e-10;
const RMSE_SLACK: f64 = 1.05;

/// Optimal replay of random linear instances against the dense batch solution.
fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let layout = random_layout(&mut rng, 50);
        let mut state = random_state(&mut rng, &layout);
        let mut terms = vec![CostTerm::from_state(&state)];
        for _ in 0..3 {
            let rows = random_rows(&mut rng, &layout, 12);
            state = optimal_update(&state, &relative(&rows, &state)).map_err(|e| e.to_string())?;
            terms.push(cost_term(&rows, &layout));
        }
        let (x, _) = dense_batch_ls(&terms).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(&state.estimate(), x.as_slice()));
    }
    let t = started.elapsed();
    check(worst <= ORACLE_TOL && t < ORACLE_TIME, format!("max |x - x_dense| = {worst:.2e} (tol {ORACLE_TOL:e}), {t:.2?}"))
}

/// The partial update with every state in the updated set is the exact update.
fn rise_degeneration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identical = 0;
    for _ in 0..100 {
        let layout = random_layout(&mut rng, 40);
        let state = random_state(&mut rng, &layout);
        let meas = relative(&random_rows(&mut rng, &layout, 10), &state);
        let keys: Vec<BlockKey> = layout.keys().collect();
        let (rise, _) = rise_update(&state, &meas, &keys).map_err(|e| e.to_string())?;
        let opt = optimal_update(&state, &meas).map_err(|e| e.to_string())?;
        if rise == opt && write_checkpoint(&rise) == write_checkpoint(&opt) {
            identical += 1;
        }
    }
    check(identical == 100, format!("{identical}/100 instances bit-identical"))
}

/// Rows and estimates of the unchanged states survive every partial update.
fn schmidt_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut unchanged = 0;
    for _ in 0..1000 {
        let layout = random_layout(&mut rng, 30);
        let state = random_state(&mut rng, &layout);
        let k = rng.random_range(0..=layout.len());
        let x1: Vec<BlockKey> = layout.keys().take(k).collect();
        let x2: Vec<BlockKey> = layout.keys().skip(k).collect();
        let meas = relative(&random_rows(&mut rng, &layout, 10), &state);
        let (after, _) = rise_update(&state, &meas, &x1).map_err(|e| e.to_string())?;
        if state.block_bytes(&x2).unwrap() == after.block_bytes(&x2).unwrap() {
            unchanged += 1;
        }
    }
    check(unchanged == 1000, format!("{unchanged}/1000 calls left the x2 rows and estimates byte-identical"))
}

fn circle_truth() -> GroundTruth {
    generate_scenario(ScenarioKind::CircleTwice, &ScenarioParams::default(), 1).unwrap()
}

fn nees_profile(runs: &[SimulationRun], gt: &GroundTruth) -> (f64, f64) {
    let series: Vec<_> = runs.iter().map(|r| nees(r, gt).unwrap()).collect();
    let mean = mean_nees(&series).unwrap();
    (median(&mean), mean.iter().copied().fold(0.0, f64::max))
}

/// Treating the old map as exact makes the estimator overconfident.
fn consistency_ordering() -> Outcome {
    let started = Instant::now();
    let gt = circle_truth();
    let opts = RunOptions { covariances: true, check_invariants: false };
    let noise = NoiseModel::default();
    let mc = |estimator| {
        let cfg = SessionConfig { estimator, ..Default::default() };
        monte_carlo(50, &gt, &noise, MeasurementModel::Nonlinear2d, &cfg, opts, 4)
    };
    let rise = mc(EstimatorKind::Rise).map_err(|e| e.to_string())?;
    let base = mc(EstimatorKind::PerfectMap).map_err(|e| e.to_string())?;
    let (rm, rp) = nees_profile(&rise, &gt);
    let (bm, bp) = nees_profile(&base, &gt);
    let t = started.elapsed();
    check(
        bm >= NEES_MEDIAN_RATIO * rm && bp >= NEES_PEAK_RATIO * rp && t < CONSISTENCY_TIME,
        format!("median NEES rise {rm:.2} vs baseline {bm:.2} ({:.1}x); peak {rp:.2} vs {bp:.1} ({:.1}x); {t:.1?}", bm / rm, bp / rp),
    )
}

/// The exact estimator on a linear model is consistent.
fn optimal_calibration() -> Outcome {
    let gt = circle_truth();
    let cfg = SessionConfig { estimator: EstimatorKind::Optimal, ..Default::default() };
    let opts = RunOptions { covariances: true, check_invariants: false };
    let runs = monte_carlo(50, &gt, &NoiseModel::default(), MeasurementModel::Linear, &cfg, opts, 5).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for r in &runs {
        let last = r.current.last().unwrap();
        let g = gt.poses[last.step as usize];
        let p = last.position_cov.unwrap();
        let e = nalgebra::DVector::from_vec(vec![last.estimate[0] - g[0], last.estimate[1] - g[1]]);
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[p[0][0], p[0][1], p[1][0], p[1][1]]);
        total += nees_value(&e, &cov).map_err(|e| e.to_string())?;
    }
    let mean = total / runs.len() as f64;
    let (lo, hi) = chi_square_band(2, runs.len()).unwrap();
    check(lo <= mean && mean <= hi, format!("mean final-position NEES {mean:.3} in 95% band [{lo:.3}, {hi:.3}]"))
}

/// Long out-and-back run with stationary traffic: the outbound leg explores,
/// the return leg relocalizes against it.
fn long_line_run() -> SimulationRun {
    let params = ScenarioParams { steps: 500, regular_features: true, ..Default::default() };
    let gt = generate_scenario(ScenarioKind::LineOutAndBack, &params, 1).unwrap();
    let cfg = SessionConfig::default();
    let log = emit_measurements(&gt, &NoiseModel::default(), MeasurementModel::Nonlinear2d, &cfg.window).unwrap();
    run_log(&log, &cfg, RunOptions::default(), 0).unwrap()
}

/// Per-step factorization work does not grow with the map.
fn constant_cost(run: &SimulationRun) -> Outcome {
    // Steady-state segments: past the first window on the way out, and the
    // first 200 relocalization steps after the backend launch.
    let explore: Vec<_> = run.telemetry.iter().filter(|t| t.mode == Mode::Exploration && (50..=500).contains(&t.step)).cloned().collect();
    let start = run.telemetry.iter().find(|t| t.backend_launched).map(|t| t.step).ok_or("no relocalization")?;
    let reloc: Vec<_> = run
        .telemetry
        .iter()
        .filter(|t| t.mode == Mode::Relocalization && t.step > start + 5 && t.step <= start + 205)
        .cloned()
        .collect();
    let (pe, pr) = (cost_profile(&explore), cost_profile(&reloc));
    let ok = explore.len() >= 400
        && reloc.len() == 200
        && pe.rows_slope.abs() < SLOPE_LIMIT
        && pr.rows_slope.abs() < SLOPE_LIMIT
        && pe.dim_slope > 1.0
        && pr.dim_slope > 1.0;
    check(
        ok,
        format!(
            "exploration {} steps: rows slope {:.2e}, dim slope {:.2}; relocalization {} steps: rows slope {:.2e}, dim slope {:.2}",
            explore.len(),
            pe.rows_slope,
            pe.dim_slope,
            reloc.len(),
            pr.rows_slope,
            pr.dim_slope
        ),
    )
}

/// Factor fill grows linearly with the state, and partial updates never
/// touch the unchanged states' rows.
fn sparsity(run: &SimulationRun) -> Outcome {
    // Marginal fill (nnz added per added state dimension) within each mode
    // must not grow: compare the second half of each segment to the first.
    let start = run.telemetry.iter().find(|t| t.backend_launched).map(|t| t.step).ok_or("no relocalization")?;
    let end = run.telemetry.last().unwrap().step;
    let rate = |lo: u32, hi: u32| {
        let seg: Vec<_> = run.telemetry.iter().filter(|t| (lo..=hi).contains(&t.step)).collect();
        let x: Vec<f64> = seg.iter().map(|t| t.state_dim as f64).collect();
        let y: Vec<f64> = seg.iter().map(|t| t.nnz as f64).collect();
        slope(&x, &y)
    };
    let mid_e = (50 + 495) / 2;
    let (e1, e2) = (rate(50, mid_e), rate(mid_e, 495));
    let (lo_r, hi_r) = (start + 10, end - 5);
    let mid_r = (lo_r + hi_r) / 2;
    let (r1, r2) = (rate(lo_r, mid_r), rate(mid_r, hi_r));
    let jump = run.telemetry.iter().find(|t| t.feedback_applied).map(|t| t.nnz as f64 / t.state_dim as f64).unwrap_or(f64::NAN);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut untouched = 0;
    for _ in 0..200 {
        let layout = random_layout(&mut rng, 40);
        let state = random_state(&mut rng, &layout);
        let k = rng.random_range(0..=layout.len());
        let x1: Vec<BlockKey> = layout.keys().take(k).collect();
        let from = layout.offset(k);
        let (after, _) = rise_update(&state, &relative(&random_rows(&mut rng, &layout, 10), &state), &x1).unwrap();
        if trailing_pattern(&state, from) == trailing_pattern(&after, from) {
            untouched += 1;
        }
    }
    check(
        e2 <= NNZ_RATE_GROWTH * e1 && r2 <= NNZ_RATE_GROWTH * r1 && untouched == 200,
        format!(
            "nnz per added state dim: exploration {e1:.1} then {e2:.1}, relocalization {r1:.1} then {r2:.1} \
             (nnz/dim {jump:.1} after feedback); x2 patterns untouched in {untouched}/200 updates"
        ),
    )
}

fn linear_loop_log() -> MeasurementLog {
    let params = ScenarioParams { steps: 40, ..Default::default() };
    let gt = generate_scenario(ScenarioKind::CircleTwice, &params, 2).unwrap();
    emit_measurements(&gt, &NoiseModel::default(), MeasurementModel::Linear, &WindowConfig::default()).unwrap()
}

/// Drives the pipeline to its first loop closure. Returns the step index,
/// the backend job, and the whole stacked system up to that step.
fn to_first_loop(ps: &mut PipelineState, log: &MeasurementLog) -> (usize, BackendJob, LinearSystem) {
    let mut sys = LinearSystem::default();
    for (i, s) in log.steps.iter().enumerate() {
        let input = step_input(log.model, ps.state(), s).unwrap();
        sys.extend(&absolute_rows(&input, ps.state()));
        if let Some(job) = mode_controller_step(ps, &input).unwrap().job {
            return (i, job, sys);
        }
    }
    panic!("no loop closure in the scenario");
}

/// After feedback, frontend and backend together solve the single stacked problem.
fn single_problem_feedback() -> Outcome {
    let log = linear_loop_log();
    let mut ps = PipelineState::new(EstimatorKind::Rise, WindowConfig::default()).unwrap();
    let (i, job, _) = to_first_loop(&mut ps, &log);
    // A few frontend-only steps while the backend is busy.
    for s in &log.steps[i + 1..i + 4] {
        let input = step_input(log.model, ps.state(), s).unwrap();
        mode_controller_step(&mut ps, &input).unwrap();
    }
    let mut stacked = LinearSystem::default();
    stacked.add_state(ps.state());
    stacked.add_backend_job(&job);
    apply_feedback(&mut ps, &backend_solve(&job).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let layout = ps.state().layout().clone();
    let (x, _) = stacked.solve(&layout).map_err(|e| e.to_string())?;
    let est = ps.state().estimate();
    let f = ps.frozen_column();
    let (ef, eb) = (max_abs(&est[..f], &x.as_slice()[..f]), max_abs(&est[f..], &x.as_slice()[f..]));
    check(
        ef <= FEEDBACK_TOL && eb <= FEEDBACK_TOL,
        format!("frontend max error {ef:.2e}, backend {eb:.2e} (tol {FEEDBACK_TOL:e}, {f} frontend components)"),
    )
}

fn gram_of(a: &CostTerm) -> nalgebra::DMatrix<f64> {
    a.a.transpose() * &a.a
}

/// Switching to relocalization and back loses no information.
fn transition_round_trip() -> Outcome {
    let log = linear_loop_log();
    let mut ps = PipelineState::new(EstimatorKind::Rise, WindowConfig::default()).unwrap();
    let (_, job, sys) = to_first_loop(&mut ps, &log);
    apply_feedback(&mut ps, &backend_solve(&job).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    transition_to_exploration(&mut ps).map_err(|e| e.to_string())?;
    let layout = ps.state().layout().clone();
    let expect = gram_of(&sys.cost_term(&layout).unwrap());
    let got = gram_of(&CostTerm::from_state(ps.state()));
    let err = (&got - &expect).amax() / expect.amax();
    check(
        ps.mode() == Mode::Exploration && err <= GRAM_TOL,
        format!("relative Gram difference {err:.2e} (tol {GRAM_TOL:e}) over {} states", layout.total_dim()),
    )
}

/// A larger updated window never costs accuracy.
fn window_monotonicity() -> Outcome {
    let params = ScenarioParams { steps: 230, regular_features: true, ..Default::default() };
    let gt = generate_scenario(ScenarioKind::LineOutAndBack, &params, 1).unwrap();
    let rmse = |cfg: &SessionConfig| -> f64 {
        let runs = monte_carlo(20, &gt, &NoiseModel::default(), MeasurementModel::Nonlinear2d, cfg, RunOptions::default(), 10).unwrap();
        runs.iter().map(|r| position_rmse(&r.final_poses, &gt.poses, Alignment::None).unwrap()).sum::<f64>() / 20.0
    };
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for w in [2, 5, 10, 20] {
        let window = WindowConfig { window_poses: w, extend_window_to_tracks: false, ..Default::default() };
        values.push(rmse(&SessionConfig { window, ..Default::default() }));
        labels.push(w.to_string());
    }
    values.push(rmse(&SessionConfig { estimator: EstimatorKind::Optimal, ..Default::default() }));
    labels.push("all".into());
    let ok = values.windows(2).all(|p| p[1] <= RMSE_SLACK * p[0]);
    let table: Vec<String> = labels.iter().zip(&values).map(|(l, v)| format!("{l}: {v:.4}")).collect();
    check(ok, format!("final RMSE by window: {} (slack {RMSE_SLACK})", table.join(", ")))
}

fn main() {
    let line = std::sync::OnceLock::new();
    let long_run = || line.get_or_init(long_line_run);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("partial update degenerates to the exact update", Box::new(rise_degeneration)),
        ("unchanged states stay byte-identical", Box::new(schmidt_invariance)),
        ("consistency against the perfect-map baseline", Box::new(consistency_ordering)),
        ("exact estimator calibration", Box::new(optimal_calibration)),
        ("constant per-step cost", Box::new(|| constant_cost(long_run()))),
        ("sparsity", Box::new(|| sparsity(long_run()))),
        ("single-problem feedback", Box::new(single_problem_feedback)),
        ("transition round trip", Box::new(transition_round_trip)),
        ("accuracy grows with the window", Box::new(window_monotonicity)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
