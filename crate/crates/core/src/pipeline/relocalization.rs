//! Relocalization: the switch from exploration, frontend window updates,
//! the backend solve over past states, and feedback into the frontend.

use serde::{Deserialize, Serialize};

use super::{merge, BackendSnapshot, EstimatorKind, Mode, PipelineState};
use crate::error::{Error, Result};
use crate::estimator::rise_update_in_place;
use crate::factor::qr::{qr_eliminate, ColumnOrder, Natural, StackRow};
use crate::factor::{
    back_substitute, Block, BlockKey, BlockLayout, MeasurementBlock, MeasurementTag, NewBlock, StateOrdering,
    UpperTriangular,
};

/// The past-state cost handed to the backend: rows over the backend blocks
/// (columns numbered from 0 in block order), linearized at `x_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendJob {
    pub snapshot: u64,
    pub blocks: Vec<Block>,
    pub x_hat: Vec<f64>,
    pub rows: Vec<StackRow>,
}

impl BackendJob {
    pub fn dim(&self) -> usize {
        self.x_hat.len()
    }

    fn block_at(&self, col: usize) -> Option<BlockKey> {
        let mut start = 0;
        for b in &self.blocks {
            if col < start + b.dim {
                return Some(b.key);
            }
            start += b.dim;
        }
        None
    }
}

/// The backend's answer: the minimizer of the job's cost and its factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPacket {
    pub snapshot: u64,
    pub x_hat: Vec<f64>,
    pub factor: UpperTriangular,
    pub eliminated_rows: usize,
    pub flops: usize,
}

/// Outcome of the switch into relocalization.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionReport {
    /// `None` for the perfect-map baseline, which has no backend.
    pub job: Option<BackendJob>,
    pub window_blocks: Vec<BlockKey>,
    /// Norm of the right-hand side entering the split.
    pub stack_rhs_norm: f64,
    /// Norm of the rotated right-hand side kept by the frontend.
    pub frontend_rhs_norm: f64,
    /// Norm of the rotated right-hand side handed to the backend.
    pub backend_rhs_norm: f64,
    pub eliminated_rows: usize,
}

fn references_old(ps: &PipelineState, m: &MeasurementBlock) -> bool {
    let horizon = ps.config.horizon(ps.step);
    m.blocks().into_iter().any(|k| match ps.front.layout().block(k) {
        Some(b) => ps.is_frozen(k) || b.stamp < horizon,
        None => false,
    })
}

/// Whether a measurement counts as a loop closure in the current mode.
///
/// In exploration only the blocks decide: a sighting tagged as a loop
/// closure that lands inside the window is an ordinary local update. While
/// relocalizing, the tag also counts, since it holds the phase open.
pub(crate) fn is_loop(ps: &PipelineState, m: &MeasurementBlock) -> bool {
    !m.is_empty()
        && match ps.mode {
            Mode::Exploration => references_old(ps, m),
            Mode::Relocalization => {
                m.tag == MeasurementTag::LoopClosure || m.blocks().into_iter().any(|k| ps.is_frozen(k))
            }
        }
}

/// Reverses the current map, splits it into a recent window kept by the
/// frontend and past states for the backend, and applies `loop_meas`.
///
/// The rows touching window columns, stacked with the loop closures, are
/// QR-eliminated over the window; the window estimate is updated with the
/// past states held at their estimates. The remaining rows of the current
/// map, the rotated leftovers and the old map's rows form the backend job.
pub fn transition_to_relocalization(ps: &mut PipelineState, loop_meas: &[MeasurementBlock]) -> Result<TransitionReport> {
    if ps.mode != Mode::Exploration {
        return Err(Error::Mode("already relocalizing".into()));
    }
    if ps.kind == EstimatorKind::Optimal {
        return Err(Error::Mode("the optimal estimator has no relocalization mode".into()));
    }
    let merged = merge(loop_meas);
    merged.validate(ps.front.layout())?;
    if !loop_meas.iter().any(|m| references_old(ps, m)) {
        return Err(Error::NoLoopClosure);
    }
    let perfect = ps.kind == EstimatorKind::PerfectMap;

    let orig = ps.front.layout().clone();
    let l = orig.partition_boundary().unwrap_or(orig.len());
    let mut blocks = orig.blocks().to_vec();
    blocks[..l].reverse();
    let rev = BlockLayout::new(blocks, StateOrdering::ReverseChronological, Some(l))?;
    let w = ps.window_len(&rev, l);
    let rev = rev.with_partition(Some(w))?;
    let x1_end = rev.offset(w);

    // Rows touching the window, found in the original (chronological) order.
    let (ws, we) = (orig.offset(l - w), orig.offset(l));
    let st = &ps.front;
    let mut involved = Vec::new();
    let mut rest = Vec::new();
    for p in 0..st.total_dim() {
        let id = st.col_at[p];
        let Some(row) = &st.rows[id as usize] else { continue };
        let touches = (ws..we).contains(&p)
            || (p < ws && {
                let i = row.partition_point(|e| (st.rank_of[e.0 as usize] as usize) < ws);
                row.get(i).is_some_and(|e| (st.rank_of[e.0 as usize] as usize) < we)
            });
        if touches {
            involved.push(id);
        } else {
            rest.push(id);
        }
    }

    let mut st = ps.front.clone();
    st.relabel(rev)?;
    let mut stack: Vec<StackRow> = involved
        .iter()
        .map(|&id| StackRow::new(st.rows[id as usize].take().expect("stored row"), 0.0))
        .collect();
    let loop_block = if perfect {
        let keep: Vec<BlockKey> = st.layout().keys().take(w).collect();
        merged.restricted(|k| keep.contains(&k))
    } else {
        merged
    };
    if perfect {
        for r in &mut stack {
            r.entries.retain(|e| (st.rank_of[e.0 as usize] as usize) < x1_end);
        }
    }
    let loop_rows = st.stack_rows(&loop_block)?;
    let stack_rhs_norm = loop_rows.iter().map(|r| r.rhs * r.rhs).sum::<f64>().sqrt();
    stack.extend(loop_rows);
    let order = st.ranks();
    let res = qr_eliminate(stack, 0..x1_end, &order)?;
    if let Some(&k) = res.missing.first() {
        return Err(Error::Singular { column: k, block: Some(st.block_key_at(k)) });
    }

    let mut dx = vec![0.0; x1_end];
    for (k, row) in res.factor_rows.iter().rev() {
        let mut acc = row.rhs;
        for &(c, v) in &row.entries[1..] {
            let j = order.rank(c);
            if j >= x1_end {
                break;
            }
            acc -= v * dx[j];
        }
        dx[*k] = acc / row.entries[0].1;
    }
    let eliminated_rows = res.rows_in;
    let frontend_rhs_norm = res.factor_rhs_norm();
    let backend_rhs_norm = res.dropped_norm();
    let col_at = st.col_at.clone();
    for (k, row) in res.factor_rows {
        st.rows[col_at[k] as usize] = Some(row.entries);
    }
    for (p, d) in dx.into_iter().enumerate() {
        st.x[col_at[p] as usize] += d;
    }

    // Everything right of the window goes to the backend.
    let to_natural = |r: StackRow, rank_of: &[u32]| StackRow {
        entries: r.entries.into_iter().map(|(c, v)| (rank_of[c as usize] - x1_end as u32, v)).collect(),
        rhs: r.rhs,
    };
    let mut job_rows: Vec<StackRow> = Vec::new();
    for r in res.residual.into_iter().filter(|r| !r.entries.is_empty()) {
        job_rows.push(to_natural(r, &st.rank_of));
    }
    for id in rest {
        let row = st.rows[id as usize].take().expect("stored row");
        job_rows.push(to_natural(StackRow::new(row, 0.0), &st.rank_of));
    }
    st.recount_nnz();

    let backend_blocks: Vec<Block> = st.layout().blocks()[w..].to_vec();
    let x_b: Vec<f64> = (x1_end..st.total_dim()).map(|p| st.x[st.col_at[p] as usize]).collect();
    let id = ps.next_snapshot;
    ps.next_snapshot += 1;
    let job = (!perfect).then(|| BackendJob { snapshot: id, blocks: backend_blocks.clone(), x_hat: x_b.clone(), rows: job_rows });

    ps.front = st;
    ps.work.add(eliminated_rows, 0.0, res.flops);
    ps.mode = Mode::Relocalization;
    ps.backend_start = w;
    ps.last_loop_step = Some(ps.step);
    ps.backend_snapshot = Some(BackendSnapshot {
        id,
        blocks: backend_blocks.iter().map(|b| b.key).collect(),
        dim: x_b.len(),
        applied: perfect,
    });
    Ok(TransitionReport {
        job,
        window_blocks: ps.front.layout().keys().take(w).collect(),
        stack_rhs_norm,
        frontend_rhs_norm,
        backend_rhs_norm,
        eliminated_rows,
    })
}

/// One relocalization step: new blocks are prepended, and the window of
/// recent states at the top is updated with every measurement of the step,
/// holding all older states (including the backend's) at their estimates.
pub fn frontend_relocalization_step(
    ps: &mut PipelineState,
    new_blocks: &[NewBlock],
    meas: &[MeasurementBlock],
) -> Result<()> {
    if ps.mode != Mode::Relocalization {
        return Err(Error::Mode("frontend step outside relocalization mode".into()));
    }
    let saved = (ps.front.clone(), ps.backend_start);
    for nb in new_blocks {
        if let Err(e) = ps.front.insert_block(0, nb) {
            (ps.front, ps.backend_start) = saved;
            return Err(e);
        }
        ps.backend_start += 1;
    }
    let result = (|| {
        merge(meas).validate(ps.front.layout())?;
        if meas.iter().any(|m| is_loop(ps, m)) {
            ps.last_loop_step = Some(ps.step);
        }
        ps.record_tracks(meas);
        let w = ps.window_len(ps.front.layout(), ps.backend_start);
        ps.front.set_partition(Some(w))?;
        let mut merged = merge(meas);
        if ps.kind == EstimatorKind::PerfectMap {
            let start = ps.backend_start;
            let layout = ps.front.layout().clone();
            merged = merged.restricted(|k| layout.index_of(k).is_some_and(|i| i < start));
        }
        let rep = rise_update_in_place(&mut ps.front, &merged, w)?;
        ps.work.add(rep.eliminated_rows, rep.dropped_information_norm, rep.flops);
        Ok(())
    })();
    if result.is_err() {
        (ps.front, ps.backend_start) = saved;
    }
    result
}

/// Minimizes the job's cost by a sparse QR over all backend columns.
pub fn backend_solve(job: &BackendJob) -> Result<FeedbackPacket> {
    let dim = job.dim();
    let mut rows: Vec<StackRow> = job.rows.iter().filter(|r| !r.entries.is_empty()).cloned().collect();
    if rows.iter().flat_map(|r| &r.entries).any(|e| e.0 as usize >= dim) {
        return Err(Error::Precondition("backend row references a column outside the job".into()));
    }
    rows.sort_by_key(|r| r.entries[0].0);
    let res = qr_eliminate(rows, 0..dim, &Natural)?;
    if let Some(&k) = res.missing.first() {
        return Err(Error::Singular { column: k, block: job.block_at(k) });
    }
    let mut rhs = vec![0.0; dim];
    for (k, r) in &res.factor_rows {
        rhs[*k] = r.rhs;
    }
    let factor = UpperTriangular::from_stack_rows(dim, &res.factor_rows, 0)?;
    let dx = back_substitute(&factor, &rhs).map_err(|e| match e {
        Error::Singular { column, .. } => Error::Singular { column, block: job.block_at(column) },
        e => e,
    })?;
    let x_hat = job.x_hat.iter().zip(&dx).map(|(a, b)| a + b).collect();
    Ok(FeedbackPacket { snapshot: job.snapshot, x_hat, factor, eliminated_rows: res.rows_in, flops: res.flops })
}

/// Corrects the frontend states with the backend's answer,
/// `x̂_F += R_F⁻¹ R_FB (x̂_B − x̂_B⊕)`, then re-anchors the backend columns at
/// `x̂_B⊕` and installs the backend factor. No QR is performed.
pub fn apply_feedback(ps: &mut PipelineState, fb: &FeedbackPacket) -> Result<()> {
    let snap = ps
        .backend_snapshot
        .as_ref()
        .filter(|s| !s.applied)
        .ok_or_else(|| Error::SnapshotMismatch("no backend snapshot is pending".into()))?;
    if snap.id != fb.snapshot {
        return Err(Error::SnapshotMismatch(format!("pending {}, feedback answers {}", snap.id, fb.snapshot)));
    }
    let layout = ps.front.layout();
    let current: Vec<BlockKey> = layout.keys().skip(ps.backend_start).collect();
    if current != snap.blocks || fb.x_hat.len() != snap.dim || fb.factor.dim() != snap.dim {
        return Err(Error::SnapshotMismatch("feedback dimensions do not match the snapshot".into()));
    }
    let st = &mut ps.front;
    let bc = st.layout().offset(ps.backend_start);
    let n = st.total_dim();
    let delta: Vec<f64> = (bc..n).map(|p| st.x[st.col_at[p] as usize] - fb.x_hat[p - bc]).collect();

    // v = R_FB δ, then R_F y = v by back substitution over the frontend rows.
    let mut y = vec![0.0; bc];
    for p in (0..bc).rev() {
        let id = st.col_at[p];
        let row = st.rows[id as usize]
            .as_ref()
            .ok_or(Error::Singular { column: p, block: Some(st.block_key_at(p)) })?;
        let mut acc = 0.0;
        for &(c, v) in &row[1..] {
            let j = st.rank_of[c as usize] as usize;
            acc += if j >= bc { v * delta[j - bc] } else { -v * y[j] };
        }
        y[p] = acc / row[0].1;
    }
    for (p, d) in y.into_iter().enumerate() {
        let id = st.col_at[p] as usize;
        st.x[id] += d;
    }
    for p in bc..n {
        let id = st.col_at[p] as usize;
        st.x[id] = fb.x_hat[p - bc];
        let row: Vec<(u32, f64)> = fb.factor.rows()[p - bc].iter().map(|&(j, v)| (st.col_at[bc + j as usize], v)).collect();
        st.rows[id] = (!row.is_empty()).then_some(row);
    }
    st.recount_nnz();
    if let Some(s) = ps.backend_snapshot.as_mut() {
        s.applied = true;
    }
    Ok(())
}
