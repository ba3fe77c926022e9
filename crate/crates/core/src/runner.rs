//! Replays a measurement log through a pipeline session, linearizing each
//! record at the current estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::LinearSystem;
use crate::factor::{Block, BlockKey, MeasurementBlock, MeasurementRow, NewBlock, SquareRootState};
use crate::pipeline::{EstimatorKind, Mode, Session, SessionConfig, StepInput, StepTelemetry};
use crate::simulator::models::{compose, innovation, invert_observation, observation, odometry};
use crate::simulator::{LogRecord, LogStep, MeasurementLog, MeasurementModel, Pose2, RecordKind};

/// Current-pose estimate reported after a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub step: u32,
    pub estimate: Pose2,
    /// Reported covariance of the position components, if evaluated.
    pub position_cov: Option<[[f64; 2]; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub telemetry: Vec<StepTelemetry>,
    pub current: Vec<PoseReport>,
    /// Estimate of pose `k` after the run, backend feedback included.
    pub final_poses: Vec<Pose2>,
    pub jobs_launched: usize,
    /// The factor after the run; kept in memory only.
    #[serde(skip)]
    pub final_state: Option<SquareRootState>,
}

impl SimulationRun {
    pub fn modes(&self) -> Vec<Mode> {
        self.telemetry.iter().map(|t| t.mode).collect()
    }

    /// Mode changes as `(step, new mode)`.
    pub fn mode_changes(&self) -> Vec<(u32, Mode)> {
        let mut out = Vec::new();
        let mut prev = Mode::Exploration;
        for t in &self.telemetry {
            if t.mode != prev {
                out.push((t.step, t.mode));
                prev = t.mode;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Evaluate the reported current-position covariance at every step.
    pub covariances: bool,
    /// Check the pipeline's structural invariants after every step.
    pub check_invariants: bool,
}

fn estimate(state: &SquareRootState, pending: &[(BlockKey, Vec<f64>)], key: BlockKey) -> Result<Vec<f64>> {
    if let Some((_, v)) = pending.iter().find(|(k, _)| *k == key) {
        return Ok(v.clone());
    }
    Ok(state.estimate_of(key)?.to_vec())
}

fn pose_of(v: &[f64]) -> Pose2 {
    [v[0], v[1], v[2]]
}

/// Initial estimates for a step's new blocks, from explicit values or the
/// first record that determines them.
fn initialize(model: MeasurementModel, state: &SquareRootState, step: &LogStep) -> Result<Vec<(BlockKey, Vec<f64>)>> {
    let mut out: Vec<(BlockKey, Vec<f64>)> = Vec::new();
    let mut order: Vec<_> = step.blocks.iter().collect();
    // Poses first: feature initialization may use this step's pose.
    order.sort_by_key(|b| !b.key.is_pose());
    for b in order {
        if state.layout().contains(b.key) || out.iter().any(|(k, _)| *k == b.key) {
            return Err(Error::Params(format!("block {} declared twice", b.key)));
        }
        let init = match &b.init {
            Some(v) => v.clone(),
            None => derive_init(model, state, &out, &step.records, b.key)?,
        };
        out.push((b.key, init));
    }
    // Restore declaration order.
    let pos = |k: BlockKey| step.blocks.iter().position(|b| b.key == k);
    out.sort_by_key(|(k, _)| pos(*k));
    Ok(out)
}

fn derive_init(
    model: MeasurementModel,
    state: &SquareRootState,
    known: &[(BlockKey, Vec<f64>)],
    records: &[LogRecord],
    key: BlockKey,
) -> Result<Vec<f64>> {
    let available = |k: BlockKey| state.layout().contains(k) || known.iter().any(|(j, _)| *j == k);
    for r in records {
        match &r.kind {
            RecordKind::Odometry { from, to, value, .. } if *to == key && available(*from) => {
                let a = pose_of(&estimate(state, known, *from)?);
                return Ok(compose(model, &a, value).to_vec());
            }
            RecordKind::Prior { block, value, .. } if *block == key => return Ok(value.clone()),
            RecordKind::Observation { pose, feature, value, .. } if *feature == key && available(*pose) => {
                let p = pose_of(&estimate(state, known, *pose)?);
                return Ok(invert_observation(model, &p, value).to_vec());
            }
            _ => {}
        }
    }
    Ok(vec![0.0; if key.is_pose() { 3 } else { 2 }])
}

/// Whitened rows of one record linearized at the given estimates.
fn linearize(
    model: MeasurementModel,
    state: &SquareRootState,
    known: &[(BlockKey, Vec<f64>)],
    rec: &LogRecord,
) -> Result<MeasurementBlock> {
    let x = |k: BlockKey| estimate(state, known, k);
    let mut rows = Vec::new();
    match &rec.kind {
        RecordKind::Prior { block, value, sigma } => {
            let xb = x(*block)?;
            if value.len() != xb.len() || sigma.len() != xb.len() {
                return Err(Error::Params(format!("prior on {block} has the wrong dimension")));
            }
            for i in 0..xb.len() {
                let mut d = value[i] - xb[i];
                if model == MeasurementModel::Nonlinear2d && block.is_pose() && i == 2 {
                    d = crate::simulator::models::wrap_angle(d);
                }
                rows.push(MeasurementRow { entries: vec![(*block, i, 1.0 / sigma[i])], residual: d / sigma[i] });
            }
        }
        RecordKind::Odometry { from, to, value, sigma } => {
            let (a, b) = (pose_of(&x(*from)?), pose_of(&x(*to)?));
            let (h, ja, jb) = odometry(model, &a, &b);
            let d = innovation(model, value, &h, Some(2));
            for i in 0..3 {
                let mut entries = Vec::with_capacity(6);
                entries.extend((0..3).map(|c| (*from, c, ja[(i, c)] / sigma[i])));
                entries.extend((0..3).map(|c| (*to, c, jb[(i, c)] / sigma[i])));
                rows.push(MeasurementRow { entries, residual: d[i] / sigma[i] });
            }
        }
        RecordKind::Observation { pose, feature, value, sigma } => {
            let p = pose_of(&x(*pose)?);
            let fv = x(*feature)?;
            let (h, jp, jf) = observation(model, &p, &[fv[0], fv[1]]);
            let d = innovation(model, value, &h, Some(1));
            for i in 0..2 {
                let mut entries = Vec::with_capacity(5);
                entries.extend((0..3).map(|c| (*pose, c, jp[(i, c)] / sigma[i])));
                entries.extend((0..2).map(|c| (*feature, c, jf[(i, c)] / sigma[i])));
                rows.push(MeasurementRow { entries, residual: d[i] / sigma[i] });
            }
        }
        RecordKind::Linear { triplets, rhs } => {
            let mut out: Vec<MeasurementRow> =
                rhs.iter().map(|&b| MeasurementRow { entries: Vec::new(), residual: b }).collect();
            for &(row, key, comp, v) in triplets {
                let xk = x(key)?;
                let xc = *xk.get(comp).ok_or_else(|| Error::Params(format!("component {comp} of {key}")))?;
                out[row].entries.push((key, comp, v));
                out[row].residual -= v * xc;
            }
            rows = out;
        }
    }
    for r in &mut rows {
        r.entries.retain(|e| e.2 != 0.0);
    }
    Ok(MeasurementBlock::new(rec.tag, rows))
}

/// Builds the pipeline input for one logged step at the current estimates.
pub fn step_input(model: MeasurementModel, state: &SquareRootState, step: &LogStep) -> Result<StepInput> {
    let inits = initialize(model, state, step)?;
    let measurements =
        step.records.iter().map(|r| linearize(model, state, &inits, r)).collect::<Result<Vec<_>>>()?;
    let new_blocks = inits
        .into_iter()
        .map(|(key, init)| {
            let block = if key.is_pose() { Block::pose(key_index(key), step.step) } else { Block::feature(key_index(key), step.step) };
            NewBlock::new(block, init)
        })
        .collect();
    Ok(StepInput { step: step.step, new_blocks, measurements })
}

fn key_index(k: BlockKey) -> u32 {
    match k {
        BlockKey::Pose(i) | BlockKey::Feature(i) => i,
    }
}

/// A step's measurements in absolute form, given the state they were
/// linearized against.
pub fn absolute_rows(input: &StepInput, before: &SquareRootState) -> LinearSystem {
    let at = |k: BlockKey, c: usize| match input.new_blocks.iter().find(|b| b.block.key == k) {
        Some(nb) => nb.init[c],
        None => before.estimate_of(k).map_or(0.0, |v| v[c]),
    };
    let mut sys = LinearSystem::default();
    for m in &input.measurements {
        sys.add_linearized(m, at);
    }
    sys
}

/// Replays `log` through a fresh session.
pub fn run_log(log: &MeasurementLog, config: &SessionConfig, opts: RunOptions, seed: u64) -> Result<SimulationRun> {
    run_log_with(log, config, opts, seed, |_, _, _| Ok(()))
}

/// As [`run_log`], calling `hook(input, state before the step, session)`
/// after every step.
pub fn run_log_with(
    log: &MeasurementLog,
    config: &SessionConfig,
    opts: RunOptions,
    seed: u64,
    mut hook: impl FnMut(&StepInput, &SquareRootState, &Session) -> Result<()>,
) -> Result<SimulationRun> {
    let mut session = Session::new(config.clone())?;
    let mut current = Vec::with_capacity(log.steps.len());
    for s in &log.steps {
        let input = step_input(log.model, session.pipeline().state(), s)?;
        let before = session.pipeline().state().clone();
        session.step(&input)?;
        hook(&input, &before, &session)?;
        if opts.check_invariants {
            session.pipeline().check_invariants()?;
        }
        let pose = s.blocks.iter().map(|b| b.key).filter(|k| k.is_pose()).last();
        if let Some(pk) = pose {
            let est = pose_of(session.pipeline().state().estimate_of(pk)?);
            let position_cov = if opts.covariances {
                let c = session.covariance(&[pk])?;
                Some([[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]])
            } else {
                None
            };
            current.push(PoseReport { step: s.step, estimate: est, position_cov });
        }
    }
    session.finish()?;
    let st = session.pipeline().state();
    let mut poses: Vec<(u32, Pose2)> = st
        .layout()
        .keys()
        .filter_map(|k| match k {
            BlockKey::Pose(i) => Some((i, k)),
            _ => None,
        })
        .map(|(i, k)| Ok((i, pose_of(st.estimate_of(k)?))))
        .collect::<Result<_>>()?;
    poses.sort_by_key(|p| p.0);
    Ok(SimulationRun {
        estimator: config.estimator,
        seed,
        telemetry: session.telemetry().to_vec(),
        current,
        final_poses: poses.into_iter().map(|p| p.1).collect(),
        jobs_launched: session.jobs_launched(),
        final_state: Some(st.clone()),
    })
}
