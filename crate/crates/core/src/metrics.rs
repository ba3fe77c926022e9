//! Accuracy, consistency and cost metrics over simulation runs.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::pipeline::StepTelemetry;
use crate::runner::SimulationRun;
use crate::simulator::{GroundTruth, Pose2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    None,
    /// Least-squares rotation and translation of the estimate onto the truth.
    Rigid2d,
}

/// Position RMSE of `estimated` against `truth`, optionally after rigid
/// alignment.
pub fn position_rmse(estimated: &[Pose2], truth: &[Pose2], align: Alignment) -> Result<f64> {
    if estimated.is_empty() || estimated.len() != truth.len() {
        return Err(Error::Precondition("RMSE needs equal-length, nonempty pose sequences".into()));
    }
    let n = estimated.len() as f64;
    let (rot, t) = match align {
        Alignment::None => (Matrix2::identity(), [0.0, 0.0]),
        Alignment::Rigid2d => rigid_alignment(estimated, truth),
    };
    let sq: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(e, g)| {
            let x = rot[(0, 0)] * e[0] + rot[(0, 1)] * e[1] + t[0];
            let y = rot[(1, 0)] * e[0] + rot[(1, 1)] * e[1] + t[1];
            (x - g[0]).powi(2) + (y - g[1]).powi(2)
        })
        .sum();
    Ok((sq / n).sqrt())
}

/// Rotation and translation minimizing `Σ ‖R e + t − g‖²`.
fn rigid_alignment(estimated: &[Pose2], truth: &[Pose2]) -> (Matrix2<f64>, [f64; 2]) {
    let n = estimated.len() as f64;
    let mean = |p: &[Pose2]| {
        let (sx, sy) = p.iter().fold((0.0, 0.0), |a, q| (a.0 + q[0], a.1 + q[1]));
        [sx / n, sy / n]
    };
    let (me, mg) = (mean(estimated), mean(truth));
    let (mut sc, mut ss) = (0.0, 0.0);
    for (e, g) in estimated.iter().zip(truth) {
        let (ex, ey) = (e[0] - me[0], e[1] - me[1]);
        let (gx, gy) = (g[0] - mg[0], g[1] - mg[1]);
        sc += ex * gx + ey * gy;
        ss += ex * gy - ey * gx;
    }
    let th = ss.atan2(sc);
    let (c, s) = (th.cos(), th.sin());
    let rot = Matrix2::new(c, -s, s, c);
    (rot, [mg[0] - (c * me[0] - s * me[1]), mg[1] - (s * me[0] + c * me[1])])
}

/// `eᵀ P⁻¹ e`.
pub fn nees_value(error: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let ch = nalgebra::Cholesky::new(cov.clone()).ok_or(Error::Singular { column: 0, block: None })?;
    Ok(error.dot(&ch.solve(error)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeesSeries {
    pub steps: Vec<u32>,
    pub values: Vec<f64>,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-step current-position NEES of a run and its median. Steps without a
/// reported covariance are skipped.
pub fn nees(run: &SimulationRun, truth: &GroundTruth) -> Result<NeesSeries> {
    let mut steps = Vec::new();
    let mut values = Vec::new();
    for r in &run.current {
        let Some(p) = r.position_cov else { continue };
        let g = truth.poses.get(r.step as usize).ok_or_else(|| Error::Precondition("step beyond ground truth".into()))?;
        let e = DVector::from_vec(vec![r.estimate[0] - g[0], r.estimate[1] - g[1]]);
        let cov = DMatrix::from_row_slice(2, 2, &[p[0][0], p[0][1], p[1][0], p[1][1]]);
        values.push(nees_value(&e, &cov)?);
        steps.push(r.step);
    }
    let median = median(&values);
    Ok(NeesSeries { steps, values, median })
}

/// Per-step mean NEES over runs of equal length.
pub fn mean_nees(series: &[NeesSeries]) -> Result<Vec<f64>> {
    let n = series.first().map_or(0, |s| s.values.len());
    if series.iter().any(|s| s.values.len() != n) {
        return Err(Error::Precondition("NEES series differ in length".into()));
    }
    Ok((0..n).map(|k| series.iter().map(|s| s.values[k]).sum::<f64>() / series.len() as f64).collect())
}

/// Two-sided 95% band for the mean of `runs` NEES values with `dim` degrees
/// of freedom each.
pub fn chi_square_band(dim: usize, runs: usize) -> Result<(f64, f64)> {
    let dof = (dim * runs) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| Error::Params(e.to_string()))?;
    Ok((chi.inverse_cdf(0.025) / runs as f64, chi.inverse_cdf(0.975) / runs as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub steps: Vec<u32>,
    pub eliminated_rows: Vec<usize>,
    pub nnz: Vec<usize>,
    pub state_dim: Vec<usize>,
    /// Least-squares slope of eliminated rows against step.
    pub rows_slope: f64,
    pub nnz_slope: f64,
    pub dim_slope: f64,
}

/// Least-squares slope of `y` against `x`; zero for fewer than two points.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn cost_profile(telemetry: &[StepTelemetry]) -> CostProfile {
    if telemetry.is_empty() {
        return CostProfile::default();
    }
    let steps: Vec<u32> = telemetry.iter().map(|t| t.step).collect();
    let x: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let f = |v: &[usize]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let eliminated_rows: Vec<usize> = telemetry.iter().map(|t| t.eliminated_rows).collect();
    let nnz: Vec<usize> = telemetry.iter().map(|t| t.nnz).collect();
    let state_dim: Vec<usize> = telemetry.iter().map(|t| t.state_dim).collect();
    CostProfile {
        rows_slope: slope(&x, &f(&eliminated_rows)),
        nnz_slope: slope(&x, &f(&nnz)),
        dim_slope: slope(&x, &f(&state_dim)),
        steps,
        eliminated_rows,
        nnz,
        state_dim,
    }
}

/// Writes the telemetry of every run as CSV, one row per run and step.
/// Wall times are left out so the file is reproducible.
pub fn write_telemetry_csv(w: impl Write, runs: &[SimulationRun]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (i, run) in runs.iter().enumerate() {
        for t in &run.telemetry {
            out.serialize(TelemetryRow::new(i, t)).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TelemetryRow {
    run: usize,
    step: u32,
    mode: &'static str,
    eliminated_rows: usize,
    nnz: usize,
    dropped_norm: f64,
    state_dim: usize,
    backend_launched: bool,
    feedback_applied: bool,
}

impl TelemetryRow {
    fn new(run: usize, t: &StepTelemetry) -> Self {
        TelemetryRow {
            run,
            step: t.step,
            mode: t.mode.as_str(),
            eliminated_rows: t.eliminated_rows,
            nnz: t.nnz,
            dropped_norm: t.dropped_norm,
            state_dim: t.state_dim,
            backend_launched: t.backend_launched,
            feedback_applied: t.feedback_applied,
        }
    }
}

/// One row of the per-step metric series of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: usize,
    pub step: u32,
    pub position_error: f64,
    pub nees: Option<f64>,
    pub eliminated_rows: usize,
    pub nnz: usize,
}

pub fn metric_rows(run_index: usize, run: &SimulationRun, truth: &GroundTruth) -> Result<Vec<MetricRow>> {
    let series = nees(run, truth)?;
    let by_step: std::collections::HashMap<u32, f64> = series.steps.iter().copied().zip(series.values).collect();
    let tel: std::collections::HashMap<u32, &StepTelemetry> = run.telemetry.iter().map(|t| (t.step, t)).collect();
    run.current
        .iter()
        .map(|r| {
            let g = truth.poses.get(r.step as usize).ok_or_else(|| Error::Precondition("step beyond ground truth".into()))?;
            let t = tel.get(&r.step);
            Ok(MetricRow {
                run: run_index,
                step: r.step,
                position_error: ((r.estimate[0] - g[0]).powi(2) + (r.estimate[1] - g[1]).powi(2)).sqrt(),
                nees: by_step.get(&r.step).copied(),
                eliminated_rows: t.map_or(0, |t| t.eliminated_rows),
                nnz: t.map_or(0, |t| t.nnz),
            })
        })
        .collect()
}

pub fn write_metrics_csv(w: impl Write, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
