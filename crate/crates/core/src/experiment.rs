//! Experiment runs and log replays with their report files.
//!
//! A run writes three files into the output directory:
//!
//! * `telemetry.csv`: per run and step, mode and factorization work;
//! * `metrics.csv`: per run and step, current-position error, NEES and cost;
//! * `summary.json`: aggregate accuracy and consistency numbers;
//! * `factor.ckpt`: the final factor of the first run, as a checkpoint.
//!
//! Both CSV files depend only on the configuration and seeds.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    mean_nees, metric_rows, nees, position_rmse, write_metrics_csv, write_telemetry_csv, Alignment, MetricRow,
};
use crate::factor::write_checkpoint;
use crate::oracle::LinearSystem;
use crate::pipeline::{EstimatorKind, Mode, SessionConfig};
use crate::runner::{absolute_rows, run_log_with, RunOptions, SimulationRun};
use crate::simulator::{
    emit_measurements, generate_scenario, run_seed, GroundTruth, MeasurementLog, MeasurementModel, NoiseModel,
};

/// Agreement with the dense batch solution over the checked steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub checked_steps: usize,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub estimator: EstimatorKind,
    pub model: MeasurementModel,
    pub n_runs: usize,
    pub steps: usize,
    /// Mean over runs of the final-trajectory position RMSE after rigid alignment.
    pub rmse: Option<f64>,
    /// The same without alignment.
    pub rmse_unaligned: Option<f64>,
    /// Median and peak over steps of the per-step mean current-position NEES.
    pub nees_median: Option<f64>,
    pub nees_peak: Option<f64>,
    pub jobs_launched: usize,
    /// Mode changes of the first run, as `(step, new mode)`.
    pub mode_changes: Vec<(u32, Mode)>,
    pub oracle_check: Option<OracleCheck>,
    pub wall_time_s: f64,
}

/// Runs and their evaluation, before anything is written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<SimulationRun>,
    pub truth: Option<GroundTruth>,
    pub metrics: Vec<MetricRow>,
    pub summary: ExperimentSummary,
    pub checkpoint: Option<String>,
}

impl ExperimentReport {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        write_telemetry_csv(BufWriter::new(File::create(out_dir.join("telemetry.csv"))?), &self.runs)?;
        write_metrics_csv(BufWriter::new(File::create(out_dir.join("metrics.csv"))?), &self.metrics)?;
        let json = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(out_dir.join("summary.json"), json + "\n")?;
        if let Some(c) = &self.checkpoint {
            std::fs::write(out_dir.join("factor.ckpt"), c)?;
        }
        Ok(())
    }
}

/// Largest deviation from the dense solution that the oracle check accepts,
/// relative to the estimate's magnitude.
const ORACLE_TOLERANCE: f64 = 1e-8;
/// The dense solve runs at every step up to this state dimension and at the
/// final step beyond it.
const ORACLE_FULL_DIM: usize = 300;

fn replay(
    log: &MeasurementLog,
    config: &SessionConfig,
    opts: RunOptions,
    seed: u64,
    oracle: bool,
) -> Result<(SimulationRun, Option<OracleCheck>)> {
    let mut sys = LinearSystem::default();
    let mut check = OracleCheck::default();
    let linear = log.model == MeasurementModel::Linear;
    // The dense solution is the reference while the estimator is exact:
    // always for the optimal estimator, otherwise until the first loop closure.
    let mut exact = oracle && linear;
    let last = log.steps.last().map(|s| s.step);
    let run = run_log_with(log, config, opts, seed, |input, before, session| {
        if !exact {
            return Ok(());
        }
        let ps = session.pipeline();
        if config.estimator != EstimatorKind::Optimal && (ps.mode() != Mode::Exploration || session.jobs_launched() > 0) {
            exact = false;
            return Ok(());
        }
        sys.extend(&absolute_rows(input, before));
        let state = ps.state();
        if state.total_dim() > ORACLE_FULL_DIM && Some(input.step) != last {
            return Ok(());
        }
        let (x, _) = sys.solve(state.layout())?;
        let est = state.estimate();
        let scale = 1.0 + est.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = est.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check.checked_steps += 1;
        check.max_abs_error = check.max_abs_error.max(err);
        if err > ORACLE_TOLERANCE * scale {
            return Err(Error::OracleCheck { step: input.step, deviation: err });
        }
        Ok(())
    })?;
    Ok((run, (oracle && linear).then_some(check)))
}

fn merge_checks(checks: impl Iterator<Item = Option<OracleCheck>>) -> Option<OracleCheck> {
    checks.fold(None, |acc, c| match (acc, c) {
        (None, c) => c,
        (a, None) => a,
        (Some(a), Some(c)) => Some(OracleCheck {
            checked_steps: a.checked_steps + c.checked_steps,
            max_abs_error: a.max_abs_error.max(c.max_abs_error),
        }),
    })
}

fn evaluate(
    cfg: &ExperimentConfig,
    runs: Vec<SimulationRun>,
    truth: Option<GroundTruth>,
    oracle_check: Option<OracleCheck>,
    steps: usize,
    model: MeasurementModel,
    started: Instant,
) -> Result<ExperimentReport> {
    let mut summary = ExperimentSummary {
        estimator: cfg.pipeline.estimator,
        model,
        n_runs: runs.len(),
        steps,
        rmse: None,
        rmse_unaligned: None,
        nees_median: None,
        nees_peak: None,
        jobs_launched: runs.iter().map(|r| r.jobs_launched).sum(),
        mode_changes: runs.first().map(SimulationRun::mode_changes).unwrap_or_default(),
        oracle_check,
        wall_time_s: 0.0,
    };
    let mut metrics = Vec::new();
    if let Some(gt) = &truth {
        let n = runs.len() as f64;
        let truth_poses = &gt.poses[..runs[0].final_poses.len().min(gt.poses.len())];
        let mut aligned = 0.0;
        let mut raw = 0.0;
        for r in &runs {
            aligned += position_rmse(&r.final_poses, truth_poses, Alignment::Rigid2d)? / n;
            raw += position_rmse(&r.final_poses, truth_poses, Alignment::None)? / n;
        }
        summary.rmse = Some(aligned);
        summary.rmse_unaligned = Some(raw);
        if cfg.run.covariances {
            let series = runs.iter().map(|r| nees(r, gt)).collect::<Result<Vec<_>>>()?;
            let mean = mean_nees(&series)?;
            if !mean.is_empty() {
                summary.nees_median = Some(crate::metrics::median(&mean));
                summary.nees_peak = Some(mean.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
        for (i, r) in runs.iter().enumerate() {
            metrics.extend(metric_rows(i, r, gt)?);
        }
    }
    summary.wall_time_s = started.elapsed().as_secs_f64();
    let checkpoint = runs.first().and_then(|r| r.final_state.as_ref()).map(write_checkpoint);
    Ok(ExperimentReport { runs, truth, metrics, summary, checkpoint })
}

fn run_options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions { covariances: cfg.run.covariances, check_invariants: cfg.run.oracle_check }
}

/// Generates the configured scenario and runs every Monte Carlo replay.
/// Run `i` uses noise seed `run_seed(noise.seed, i)`.
pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let gt = generate_scenario(cfg.scenario.kind, &cfg.geometry, cfg.scenario.seed)?;
    let opts = run_options(cfg);
    let results = (0..cfg.run.n_runs)
        .into_par_iter()
        .map(|i| {
            let seed = run_seed(cfg.noise.seed, i);
            let noise = NoiseModel { seed, ..cfg.noise.clone() };
            let log = emit_measurements(&gt, &noise, cfg.scenario.model, &cfg.pipeline.window)?;
            replay(&log, &cfg.pipeline, opts, seed, cfg.run.oracle_check)
        })
        .collect::<Result<Vec<_>>>()?;
    let (runs, checks): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let check = merge_checks(checks.into_iter());
    evaluate(cfg, runs, Some(gt.clone()), check, gt.steps(), cfg.scenario.model, started)
}

/// Runs one experiment and writes its reports into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let report = evaluate_experiment(cfg)?;
    report.write(out_dir)?;
    Ok(report.summary)
}

/// Replays a recorded log with the configured pipeline. Accuracy and NEES
/// are only evaluated when the ground truth is supplied.
pub fn evaluate_replay(log: &MeasurementLog, cfg: &ExperimentConfig, truth: Option<GroundTruth>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(gt) = &truth {
        if gt.steps() < log.steps.len() {
            return Err(Error::Precondition("ground truth is shorter than the log".into()));
        }
    }
    let (run, check) = replay(log, &cfg.pipeline, run_options(cfg), cfg.noise.seed, cfg.run.oracle_check)?;
    evaluate(cfg, vec![run], truth, check, log.steps.len(), log.model, started)
}

pub fn replay_log(log: &MeasurementLog, cfg: &ExperimentConfig, truth: Option<GroundTruth>, out_dir: &Path) -> Result<ExperimentSummary> {
    let report = evaluate_replay(log, cfg, truth)?;
    report.write(out_dir)?;
    Ok(report.summary)
}

/// The measurement log of run `run` of an experiment, with its ground truth.
pub fn emit_experiment_log(cfg: &ExperimentConfig, run: usize) -> Result<(MeasurementLog, GroundTruth)> {
    cfg.validate()?;
    let gt = generate_scenario(cfg.scenario.kind, &cfg.geometry, cfg.scenario.seed)?;
    let noise = NoiseModel { seed: run_seed(cfg.noise.seed, run), ..cfg.noise.clone() };
    let log = emit_measurements(&gt, &noise, cfg.scenario.model, &cfg.pipeline.window)?;
    Ok((log, gt))
}
