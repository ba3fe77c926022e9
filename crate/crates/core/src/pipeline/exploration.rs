//! Exploration updates and the switch back from relocalization.

use super::{merge, EstimatorKind, Mode, PipelineState};
use crate::error::{Error, Result};
use crate::estimator::rise_update_in_place;
use crate::factor::permute::permute_counted;
use crate::factor::{MeasurementBlock, NewBlock, PermutationPlan, StateOrdering};

/// Appends `new_blocks` to the current map and updates the whole current map
/// with `meas`. Rotated rows left on the old map's columns are dropped.
///
/// Measurements may only reference current-map blocks no older than the
/// window horizon; anything else is a loop closure and must go through
/// [`super::transition_to_relocalization`].
pub fn exploration_step(ps: &mut PipelineState, new_blocks: &[NewBlock], meas: &[MeasurementBlock]) -> Result<()> {
    if ps.mode != Mode::Exploration {
        return Err(Error::Mode("exploration step outside exploration mode".into()));
    }
    let at = ps.front.layout().partition_boundary().unwrap_or(ps.front.layout().len());
    let saved = ps.front.clone();
    for (i, nb) in new_blocks.iter().enumerate() {
        if let Err(e) = ps.front.insert_block(at + i, nb) {
            ps.front = saved;
            return Err(e);
        }
    }
    let merged = merge(meas);
    if ps.kind != EstimatorKind::Optimal {
        let horizon = ps.config.horizon(ps.step);
        for key in merged.blocks() {
            let ok = !ps.is_frozen(key) && ps.front.layout().block(key).is_some_and(|b| b.stamp >= horizon);
            if !ok {
                ps.front = saved;
                return Err(Error::OutsideWindow { block: key });
            }
        }
    }
    let x1 = ps.front.layout().partition_boundary().unwrap_or(ps.front.layout().len());
    match rise_update_in_place(&mut ps.front, &merged, x1) {
        Ok(rep) => {
            ps.work.add(rep.eliminated_rows, rep.dropped_information_norm, rep.flops);
            ps.record_tracks(meas);
            Ok(())
        }
        Err(e) => {
            ps.front = saved;
            Err(e)
        }
    }
}

/// Hands the states created since the last loop closure back to exploration
/// in chronological order. Everything else becomes the frozen old map, whose
/// rows are kept but no longer updated; the new map's rows into it are the
/// initial cross strip.
pub fn transition_to_exploration(ps: &mut PipelineState) -> Result<()> {
    if ps.mode != Mode::Relocalization {
        return Err(Error::Mode("not relocalizing".into()));
    }
    if ps.pending_snapshot().is_some() {
        return Err(Error::Mode("backend feedback has not been applied".into()));
    }
    let last = ps.last_loop_step.unwrap_or(0);
    let layout = ps.front.layout();
    let k = layout.blocks()[..ps.backend_start].iter().take_while(|b| b.stamp > last).count();
    let plan = PermutationPlan::reverse_blocks(layout, 0..k, StateOrdering::Chronological, Some(k))?;
    let (state, rows) = permute_counted(&ps.front, &plan)?;
    ps.front = state;
    ps.work.add(rows, 0.0, 0);
    ps.mode = Mode::Exploration;
    ps.backend_snapshot = None;
    ps.backend_start = 0;
    Ok(())
}
