//! Per-step dispatch between the two modes.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::relocalization::{is_loop, TransitionReport};
use super::{
    exploration_step, frontend_relocalization_step, transition_to_exploration, transition_to_relocalization,
    BackendJob, EstimatorKind, Mode, PipelineState, StepTelemetry,
};
use crate::error::Result;
use crate::factor::{BlockKey, MeasurementBlock, NewBlock, SquareRootState};

/// Everything that arrives at one step: the blocks it creates (the new pose
/// and any new feature blocks, in creation order) and its measurements.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInput {
    pub step: u32,
    pub new_blocks: Vec<NewBlock>,
    pub measurements: Vec<MeasurementBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub telemetry: StepTelemetry,
    /// Set on the step that enters relocalization (never for the perfect-map baseline).
    pub job: Option<BackendJob>,
    pub transition: Option<TransitionReport>,
    /// Mode changes during the step, in order.
    pub mode_changes: Vec<(Mode, Mode)>,
}

/// Runs one step.
///
/// In exploration, measurements referencing blocks older than the window
/// horizon (or the frozen old map) are loop closures; the rest update the
/// current map first, and any loop closures then switch to relocalization.
/// In relocalization every measurement goes to the frontend window, and the
/// pipeline returns to exploration once feedback has been applied and no
/// loop closure has arrived for `loop_gap` steps.
///
/// The optimal estimator applies every measurement exactly and never
/// changes mode.
pub fn mode_controller_step(ps: &mut PipelineState, input: &StepInput) -> Result<StepOutcome> {
    let started = Instant::now();
    ps.step = input.step;
    ps.tracked.clear();
    let mut job = None;
    let mut transition = None;
    let mut mode_changes = Vec::new();

    match (ps.kind, ps.mode) {
        (EstimatorKind::Optimal, _) => exploration_step(ps, &input.new_blocks, &input.measurements)?,
        (_, Mode::Exploration) => {
            let (mut loops, local): (Vec<MeasurementBlock>, Vec<MeasurementBlock>) =
                input.measurements.iter().cloned().partition(|m| is_loop(ps, m));
            let lin = linearization_points(&loops, &ps.front, &input.new_blocks)?;
            exploration_step(ps, &input.new_blocks, &local)?;
            if !loops.is_empty() {
                for m in &mut loops {
                    shift_residuals(m, &lin, &ps.front)?;
                }
                let rep = transition_to_relocalization(ps, &loops)?;
                job = rep.job.clone();
                transition = Some(rep);
                mode_changes.push((Mode::Exploration, Mode::Relocalization));
            }
        }
        (_, Mode::Relocalization) => {
            frontend_relocalization_step(ps, &input.new_blocks, &input.measurements)?;
            let quiet = ps.last_loop_step.is_none_or(|l| input.step.saturating_sub(l) >= ps.config.loop_gap as u32);
            if quiet && ps.pending_snapshot().is_none() {
                transition_to_exploration(ps)?;
                mode_changes.push((Mode::Relocalization, Mode::Exploration));
            }
        }
    }

    let work = ps.take_work();
    let telemetry = StepTelemetry {
        step: input.step,
        mode: ps.mode,
        eliminated_rows: work.eliminated_rows,
        nnz: ps.front.nnz(),
        dropped_norm: work.dropped_norm_sq.sqrt(),
        state_dim: ps.front.total_dim(),
        backend_launched: job.is_some(),
        feedback_applied: false,
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok(StepOutcome { telemetry, job, transition, mode_changes })
}

/// Current estimates of the blocks referenced by `meas`, falling back to
/// the initial values of blocks created this step.
fn linearization_points(
    meas: &[MeasurementBlock],
    state: &SquareRootState,
    new_blocks: &[NewBlock],
) -> Result<Vec<(BlockKey, Vec<f64>)>> {
    let keys: BTreeSet<BlockKey> = meas.iter().flat_map(|m| m.blocks()).collect();
    keys.into_iter()
        .map(|k| match new_blocks.iter().find(|b| b.block.key == k) {
            Some(nb) => Ok((k, nb.init.clone())),
            None => Ok((k, state.estimate_of(k)?.to_vec())),
        })
        .collect()
}

/// Moves residuals linearized at `lin` onto the estimates in `after`:
/// `r ← r − H (x̂_after − x̂_lin)`.
fn shift_residuals(m: &mut MeasurementBlock, lin: &[(BlockKey, Vec<f64>)], after: &SquareRootState) -> Result<()> {
    for row in &mut m.rows {
        for &(k, c, v) in &row.entries {
            let old = &lin.iter().find(|e| e.0 == k).expect("linearization point recorded").1;
            row.residual -= v * (after.estimate_of(k)?[c] - old[c]);
        }
    }
    Ok(())
}
