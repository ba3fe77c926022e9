//! Update rules over a square-root information state: the optimal update,
//! the Schmidt-type partial update, and marginal covariance recovery.
//!
//! Both updates run through [`update_prefix`]: the stack of factor rows whose
//! pivots fall in the updated prefix, followed by the measurement rows, is
//! QR-eliminated over the prefix columns, starting at the leftmost measured
//! column. Rows left over the trailing columns are discarded, so the trailing
//! rows and estimates are never written. With the prefix covering the whole
//! state the leftover rows carry no columns and the update is exact.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::qr::{qr_eliminate, ColumnOrder, StackRow};
use crate::factor::state::Row;
use crate::factor::{BlockKey, MeasurementBlock, SquareRootState};

/// What a partial update changed and what it discarded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiseUpdateReport {
    pub updated_blocks: Vec<BlockKey>,
    /// Norm of the rotated residual on the discarded rows.
    pub dropped_information_norm: f64,
    pub dropped_rows: usize,
    /// Change in stored nonzeros in the updated rows' trailing columns.
    pub fill_in_delta: i64,
    /// Rows fed to the QR (factor rows plus measurement rows).
    pub eliminated_rows: usize,
    pub rotations: usize,
    pub flops: usize,
}

/// Counters of one prefix update.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct PrefixOutcome {
    pub eliminated_rows: usize,
    pub dropped_norm: f64,
    pub dropped_rows: usize,
    pub fill_in_delta: i64,
    pub rotations: usize,
    pub flops: usize,
}

/// Updates the rows and estimates of positions `..x1_end` with `meas_rows`.
/// The state is only written once the update has succeeded.
pub(crate) fn update_prefix(
    state: &mut SquareRootState,
    meas_rows: Vec<StackRow>,
    x1_end: usize,
) -> Result<PrefixOutcome> {
    let order = state.ranks();
    let Some(lo) = meas_rows.iter().filter_map(|r| r.entries.first()).map(|e| state.rank_of[e.0 as usize] as usize).min()
    else {
        return Ok(PrefixOutcome::default());
    };
    if lo >= x1_end {
        let dropped_norm = meas_rows.iter().map(|r| r.rhs * r.rhs).sum::<f64>().sqrt();
        return Ok(PrefixOutcome { dropped_norm, dropped_rows: meas_rows.len(), ..Default::default() });
    }

    let mut stack: Vec<StackRow> = (lo..x1_end).filter_map(|p| state.factor_stack_row(order.col_at[p])).collect();
    stack.extend(meas_rows);
    let res = qr_eliminate(stack, lo..x1_end, &order)?;

    for &k in &res.missing {
        let id = order.col_at[k];
        let referenced = res.factor_rows.iter().any(|(_, r)| r.entries.iter().any(|e| e.0 == id));
        if state.rows[id as usize].is_some() || referenced {
            return Err(Error::Singular { column: k, block: Some(state.block_key_at(k)) });
        }
    }

    // Back substitution over the whole prefix: trailing estimates stay fixed.
    // Rows above `lo` keep a zero right-hand side but still couple to the
    // corrected columns.
    let mut dx = vec![0.0; x1_end];
    let solve_row = |entries: &[(u32, f64)], rhs: f64, dx: &[f64]| {
        let mut acc = rhs;
        for &(c, v) in &entries[1..] {
            let j = order.rank(c);
            if j >= x1_end {
                break;
            }
            acc -= v * dx[j];
        }
        acc / entries[0].1
    };
    for (k, row) in res.factor_rows.iter().rev() {
        dx[*k] = solve_row(&row.entries, row.rhs, &dx);
    }
    for k in (0..lo).rev() {
        if let Some(r) = &state.rows[order.col_at[k] as usize] {
            dx[k] = solve_row(r, 0.0, &dx);
        }
    }

    let trailing = |r: &Row| r.iter().filter(|e| state.rank_of[e.0 as usize] as usize >= x1_end).count() as i64;
    let (mut strip_before, mut strip_after, mut nnz_before, mut nnz_after) = (0i64, 0i64, 0usize, 0usize);
    for p in lo..x1_end {
        if let Some(r) = &state.rows[order.col_at[p] as usize] {
            strip_before += trailing(r);
            nnz_before += r.len();
        }
    }
    for (_, r) in &res.factor_rows {
        strip_after += trailing(&r.entries);
        nnz_after += r.entries.len();
    }

    let outcome = PrefixOutcome {
        eliminated_rows: res.rows_in,
        dropped_norm: res.dropped_norm(),
        dropped_rows: res.residual.len(),
        fill_in_delta: strip_after - strip_before,
        rotations: res.rotations,
        flops: res.flops,
    };

    let col_at = state.col_at.clone();
    for (k, row) in res.factor_rows {
        state.rows[col_at[k] as usize] = Some(row.entries);
    }
    for (i, d) in dx.into_iter().enumerate() {
        state.x[col_at[i] as usize] += d;
    }
    state.nnz = state.nnz + nnz_after - nnz_before;
    Ok(outcome)
}

/// Number of leading blocks of `state`'s layout that make up `x1`, or an
/// error when `x1` is not a layout prefix.
fn prefix_len(state: &SquareRootState, x1: &[BlockKey]) -> Result<usize> {
    let k = x1.len();
    let layout = state.layout();
    if k > layout.len() {
        return Err(Error::Precondition("partition has more blocks than the layout".into()));
    }
    let mut head: Vec<BlockKey> = layout.keys().take(k).collect();
    let mut want = x1.to_vec();
    head.sort();
    want.sort();
    if head != want {
        return Err(Error::Precondition("partition is not a prefix of the layout's block order".into()));
    }
    Ok(k)
}

/// In-place partial update of the first `x1_blocks` blocks.
pub fn rise_update_in_place(
    state: &mut SquareRootState,
    meas: &MeasurementBlock,
    x1_blocks: usize,
) -> Result<RiseUpdateReport> {
    meas.validate(state.layout())?;
    if x1_blocks > state.layout().len() {
        return Err(Error::Precondition("partition has more blocks than the layout".into()));
    }
    let x1_end = state.layout().offset(x1_blocks);
    let rows = state.stack_rows(meas)?;
    let out = update_prefix(state, rows, x1_end)?;
    Ok(RiseUpdateReport {
        updated_blocks: state.layout().keys().take(x1_blocks).collect(),
        dropped_information_norm: out.dropped_norm,
        dropped_rows: out.dropped_rows,
        fill_in_delta: out.fill_in_delta,
        eliminated_rows: out.eliminated_rows,
        rotations: out.rotations,
        flops: out.flops,
    })
}

/// Schmidt-type update of the prefix `x1`: `x1` rows and estimates are
/// replaced by the QR solution with the trailing states held fixed, the
/// trailing rows and estimates are untouched, and the rotated measurement
/// rows left on the trailing columns are dropped.
pub fn rise_update(
    state: &SquareRootState,
    meas: &MeasurementBlock,
    x1: &[BlockKey],
) -> Result<(SquareRootState, RiseUpdateReport)> {
    let k = prefix_len(state, x1)?;
    let mut out = state.clone();
    let report = rise_update_in_place(&mut out, meas, k)?;
    Ok((out, report))
}

pub fn optimal_update_in_place(state: &mut SquareRootState, meas: &MeasurementBlock) -> Result<RiseUpdateReport> {
    let n = state.layout().len();
    rise_update_in_place(state, meas, n)
}

/// Exact minimizer of `‖R(x − x̂)‖² + ‖H(x − x̂) − r‖²`.
pub fn optimal_update(state: &SquareRootState, meas: &MeasurementBlock) -> Result<SquareRootState> {
    let mut out = state.clone();
    optimal_update_in_place(&mut out, meas)?;
    Ok(out)
}

/// Covariance of `positions` under the rows of positions `..end`, ignoring
/// entries at or beyond `end` (which conditions on those columns).
///
/// `row_of` supplies the row for each column identifier.
pub(crate) fn covariance_with<'a>(
    state: &SquareRootState,
    positions: &[usize],
    end: usize,
    row_of: &dyn Fn(u32) -> Option<&'a Row>,
) -> Result<DMatrix<f64>> {
    let m = positions.len();
    if m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if positions.iter().any(|&p| p >= end) {
        return Err(Error::Precondition("requested column outside the conditioning range".into()));
    }
    let start = *positions.iter().min().expect("nonempty");
    // Y[k, a] = (R⁻ᵀ e_{p_a})_k, by forward substitution sweeping rows downward.
    let width = end - start;
    let mut y = vec![0.0; width * m];
    for (a, &p) in positions.iter().enumerate() {
        y[(p - start) * m + a] = 1.0;
    }
    for k in start..end {
        let id = state.col_at[k];
        let row = row_of(id).ok_or(Error::Singular { column: k, block: Some(state.block_key_at(k)) })?;
        let d = row[0].1;
        let base = (k - start) * m;
        for a in 0..m {
            y[base + a] /= d;
        }
        for &(c, v) in &row[1..] {
            let j = state.rank_of[c as usize] as usize;
            if j >= end {
                break;
            }
            let jb = (j - start) * m;
            for a in 0..m {
                y[jb + a] -= v * y[base + a];
            }
        }
    }
    let mut cov = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let s: f64 = (0..width).map(|k| y[k * m + a] * y[k * m + b]).sum();
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok(cov)
}

pub(crate) fn block_positions(state: &SquareRootState, blocks: &[BlockKey]) -> Result<Vec<usize>> {
    let mut pos = Vec::new();
    for &b in blocks {
        pos.extend(state.layout().range_of(b)?);
    }
    Ok(pos)
}

/// Rows and columns of `(RᵀR)⁻¹` for `blocks`, in the order given.
pub fn recover_marginal_covariance(state: &SquareRootState, blocks: &[BlockKey]) -> Result<DMatrix<f64>> {
    let pos = block_positions(state, blocks)?;
    covariance_with(state, &pos, state.total_dim(), &|id| state.row_by_id(id))
}

/// Covariance of selected components (given per block) in the order given.
pub fn recover_component_covariance(state: &SquareRootState, comps: &[(BlockKey, usize)]) -> Result<DMatrix<f64>> {
    let pos = comps.iter().map(|&(b, c)| state.position_of(b, c)).collect::<Result<Vec<_>>>()?;
    covariance_with(state, &pos, state.total_dim(), &|id| state.row_by_id(id))
}
