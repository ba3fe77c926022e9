//! Property tests of the factorization, estimator, pipeline and metrics
//! invariants over randomly generated instances.

mod common;

use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use rise_core::estimator::{optimal_update, rise_update};
use rise_core::factor::{
    permute_and_retriangularize, qr_eliminate, BlockKey, Natural, PermutationPlan, StackRow, StateOrdering,
};
use rise_core::metrics::{nees_value, position_rmse, Alignment};
use rise_core::pipeline::{BackendMode, Mode, SessionConfig, WindowConfig};
use rise_core::runner::{run_log, run_log_with, RunOptions};
use rise_core::simulator::{
    emit_measurements, generate_scenario, MeasurementModel, NoiseModel, Pose2, ScenarioKind, ScenarioParams,
};

fn dense_stack(rows: &[StackRow], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(rows.len(), n);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.rhs));
    for (i, r) in rows.iter().enumerate() {
        for &(c, v) in &r.entries {
            a[(i, c as usize)] = v;
        }
    }
    (a, b)
}

fn random_stack(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<StackRow> {
    (0..m)
        .map(|_| {
            let vals: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
            StackRow::from_dense(&vals, rng.random_range(-2.0..2.0))
        })
        .collect()
}

fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * a
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn qr_preserves_energy_and_normal_equations(seed in any::<u64>(), n in 1usize..=50, extra in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_stack(&mut rng, n, n + extra);
        let (a, b) = dense_stack(&rows, n);
        let res = qr_eliminate(rows, 0..n, &Natural).unwrap();
        let kept: Vec<StackRow> = res.factor_rows.iter().map(|(_, r)| r.clone()).collect();
        let (r, _) = dense_stack(&kept, n);
        // Structural triangularity: each row starts at its own pivot.
        for (k, row) in &res.factor_rows {
            prop_assert_eq!(row.entries[0].0 as usize, *k);
        }
        let energy = b.norm_squared();
        let split = res.factor_rhs_norm().powi(2) + res.dropped_norm().powi(2);
        prop_assert!((energy - split).abs() <= 1e-10 * energy.max(1.0));
        if res.is_full_rank() {
            let (g, h) = (gram(&r), gram(&a));
            prop_assert!((&g - &h).amax() <= 1e-9 * h.amax().max(1.0));
        }
    }

    #[test]
    fn reversal_preserves_the_quadratic_form(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng, 40);
        let state = random_state(&mut rng, &layout);
        let plan = PermutationPlan::reverse_blocks(&layout, 0..layout.len(), StateOrdering::ReverseChronological, None).unwrap();
        let out = permute_and_retriangularize(&state, &plan).unwrap();
        prop_assert!(out.is_upper_triangular());
        for _ in 0..100 {
            let x: Vec<f64> = (0..layout.total_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let px: Vec<f64> = plan.target().keys().flat_map(|k| {
                let r = layout.range_of(k).unwrap();
                x[r].to_vec()
            }).collect();
            let (a, b) = (state.quadratic_form(&x), out.quadratic_form(&px));
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }
    }

    #[test]
    fn partial_update_keeps_the_unchanged_states(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng, 30);
        let state = random_state(&mut rng, &layout);
        let k = rng.random_range(0..=layout.len());
        let x1: Vec<BlockKey> = layout.keys().take(k).collect();
        let x2: Vec<BlockKey> = layout.keys().skip(k).collect();
        let rows = random_rows(&mut rng, &layout, 10);
        let meas = relative(&rows, &state);
        let (after, _) = rise_update(&state, &meas, &x1).unwrap();
        prop_assert_eq!(state.block_bytes(&x2).unwrap(), after.block_bytes(&x2).unwrap());
        let from = layout.offset(k);
        prop_assert_eq!(trailing_pattern(&state, from), trailing_pattern(&after, from));

        // The dropped rows only remove information.
        let (h, _) = meas.to_dense(&layout).unwrap();
        let r0 = state.to_dense();
        let full = gram(&r0) + gram(&h);
        let kept = gram(&after.to_dense());
        let scale = full.amax().max(1.0);
        let lowest = (full - kept).symmetric_eigenvalues().min();
        prop_assert!(lowest >= -1e-10 * scale, "lowest eigenvalue {}", lowest);
    }

    #[test]
    fn full_partition_is_the_exact_update(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng, 40);
        let state = random_state(&mut rng, &layout);
        let meas = relative(&random_rows(&mut rng, &layout, 10), &state);
        let keys: Vec<BlockKey> = layout.keys().collect();
        let (rise, _) = rise_update(&state, &meas, &keys).unwrap();
        prop_assert_eq!(rise, optimal_update(&state, &meas).unwrap());
    }

    #[test]
    fn nees_is_invariant_under_rotation(ex in -5.0..5.0f64, ey in -5.0..5.0f64, a in 0.1..3.0f64, b in 0.1..3.0f64, c in -0.9..0.9f64, th in -3.2..3.2f64) {
        let off = c * (a * b).sqrt();
        let p = DMatrix::from_row_slice(2, 2, &[a, off, off, b]);
        let q = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let q = DMatrix::from_row_slice(2, 2, q.as_slice()).transpose();
        let e = DVector::from_vec(vec![ex, ey]);
        let n0 = nees_value(&e, &p).unwrap();
        let n1 = nees_value(&(&q * &e), &(&q * &p * q.transpose())).unwrap();
        prop_assert!((n0 - n1).abs() <= 1e-9 * n0.max(1.0));
    }

    #[test]
    fn alignment_never_increases_rmse(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose2> = (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0]).collect();
        let est: Vec<Pose2> = truth.iter().map(|p| [p[0] + rng.random_range(-1.0..1.0) + 0.5, p[1] + rng.random_range(-1.0..1.0), 0.0]).collect();
        let aligned = position_rmse(&est, &truth, Alignment::Rigid2d).unwrap();
        let raw = position_rmse(&est, &truth, Alignment::None).unwrap();
        prop_assert!(aligned <= raw + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    /// Ordering matches the mode after every step, and the threaded backend
    /// gives the inline result when the feedback step is pinned.
    #[test]
    fn pipeline_runs_keep_their_invariants(seed in any::<u64>(), kind in 0usize..3, delay in 1u32..8) {
        let kind = [ScenarioKind::CircleTwice, ScenarioKind::LineOutAndBack, ScenarioKind::RandomWalk][kind];
        let params = ScenarioParams { steps: 40, ..Default::default() };
        let gt = generate_scenario(kind, &params, seed).unwrap();
        let cfg = SessionConfig { feedback_delay: delay, ..Default::default() };
        let noise = NoiseModel { seed, ..Default::default() };
        let log = emit_measurements(&gt, &noise, MeasurementModel::Nonlinear2d, &cfg.window).unwrap();
        let inline = run_log(&log, &cfg, RunOptions { check_invariants: true, covariances: false }, seed).unwrap();
        let threaded_cfg = SessionConfig { backend: BackendMode::Threaded, ..cfg };
        let threaded = run_log(&log, &threaded_cfg, RunOptions::default(), seed).unwrap();
        prop_assert_eq!(inline.final_poses, threaded.final_poses);
        prop_assert_eq!(inline.jobs_launched, threaded.jobs_launched);
    }
}

#[test]
fn old_map_is_immutable_while_exploring_again() {
    // Out and back once on a short leg, then out again into new territory:
    // the return leg relocalizes and the final leg explores.
    let params = ScenarioParams { steps: 30, ..Default::default() };
    let mut gt = generate_scenario(ScenarioKind::LineOutAndBack, &params, 3).unwrap();
    let window = WindowConfig::default();
    // Append a fresh outbound leg heading the other way, beyond the start.
    let start = gt.poses.len();
    for k in 1..=80 {
        gt.poses.push([-(k as f64) * params.step_length, 0.0, std::f64::consts::PI]);
    }
    gt.visibility.extend((0..80).map(|_| Vec::new()));
    let log = emit_measurements(&gt, &NoiseModel::default(), MeasurementModel::Nonlinear2d, &window).unwrap();
    let mut snapshot: Option<(Vec<BlockKey>, Vec<u8>)> = None;
    let mut checked = 0;
    let run = run_log_with(&log, &SessionConfig::default(), RunOptions::default(), 0, |_, _, session| {
        let ps = session.pipeline();
        if ps.mode() != Mode::Exploration || ps.frozen_blocks().is_empty() {
            snapshot = None;
            return Ok(());
        }
        let frozen = ps.frozen_blocks();
        let bytes = ps.state().block_bytes(&frozen)?;
        match &snapshot {
            Some((keys, old)) => {
                assert_eq!(keys, &frozen);
                assert_eq!(old, &bytes);
                checked += 1;
            }
            None => snapshot = Some((frozen, bytes)),
        }
        Ok(())
    })
    .unwrap();
    assert!(run.mode_changes().iter().any(|&(s, m)| m == Mode::Exploration && (s as usize) < start + 80), "{:?}", run.mode_changes());
    assert!(checked > 20, "only {checked} exploration steps after relocalization");
}

#[test]
fn emitted_residuals_are_white() {
    let gt = generate_scenario(ScenarioKind::CircleTwice, &ScenarioParams::default(), 9).unwrap();
    let noise = NoiseModel { seed: 9, ..Default::default() };
    let log = emit_measurements(&gt, &noise, MeasurementModel::Linear, &WindowConfig::default()).unwrap();
    use rise_core::simulator::RecordKind;
    let mut feature_of = std::collections::HashMap::new();
    let mut samples: Vec<[f64; 2]> = Vec::new();
    for (k, s) in log.steps.iter().enumerate() {
        let obs = s.records.iter().filter_map(|r| match &r.kind {
            RecordKind::Observation { feature, value, sigma, .. } => Some((*feature, *value, *sigma)),
            _ => None,
        });
        for ((feature, value, sigma), &l) in obs.zip(&gt.visibility[k]) {
            feature_of.insert(feature, l);
            let f = gt.features[l];
            let p = gt.poses[k];
            samples.push([(value[0] - (f[0] - p[0])) / sigma[0], (value[1] - (f[1] - p[1])) / sigma[1]]);
        }
    }
    let n = samples.len() as f64;
    let bound = 3.0 / n.sqrt();
    let mean = |i: usize| samples.iter().map(|s| s[i]).sum::<f64>() / n;
    let cov = |i: usize, j: usize| samples.iter().map(|s| (s[i] - mean(i)) * (s[j] - mean(j))).sum::<f64>() / n;
    // Sampling error of a variance estimate is about sqrt(2/n).
    assert!((cov(0, 0) - 1.0).abs() < bound * 2f64.sqrt() && (cov(1, 1) - 1.0).abs() < bound * 2f64.sqrt());
    assert!(cov(0, 1).abs() < bound);
    assert!(mean(0).abs() < bound && mean(1).abs() < bound);
}
