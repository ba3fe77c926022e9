//! Row-wise Givens QR over sparse rows.
//!
//! Rows are processed one at a time against a table of pivot rows. A row
//! whose leading column already has a pivot is rotated against it; otherwise
//! it becomes that column's pivot. Feeding an upper-triangular factor (top
//! down) followed by measurement rows therefore reproduces an incremental
//! square-root update, and the orthogonal factor is never formed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// |pivot| below this fraction of the column's largest input entry is treated as zero.
pub const ZERO_PIVOT_TOL: f64 = 1e-12;

/// Maps column identifiers to positions in the elimination order.
pub trait ColumnOrder {
    fn rank(&self, col: u32) -> usize;
    fn col_at(&self, rank: usize) -> u32;
}

/// Column identifiers are positions.
#[derive(Clone, Copy, Debug, Default)]
pub struct Natural;

impl ColumnOrder for Natural {
    #[inline]
    fn rank(&self, col: u32) -> usize {
        col as usize
    }
    #[inline]
    fn col_at(&self, rank: usize) -> u32 {
        rank as u32
    }
}

/// One row of a stacked least-squares system: sparse coefficients (sorted by
/// rank) and the right-hand side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StackRow {
    pub entries: Vec<(u32, f64)>,
    pub rhs: f64,
}

impl StackRow {
    pub fn new(entries: Vec<(u32, f64)>, rhs: f64) -> Self {
        StackRow { entries, rhs }
    }

    /// Builds a row from unsorted entries, summing duplicates and dropping zeros.
    pub fn from_unsorted<O: ColumnOrder>(mut entries: Vec<(u32, f64)>, rhs: f64, order: &O) -> Self {
        entries.sort_by_key(|&(c, _)| order.rank(c));
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (c, v) in entries {
            match out.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => out.push((c, v)),
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        StackRow { entries: out, rhs }
    }

    pub fn from_dense(values: &[f64], rhs: f64) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .collect();
        StackRow { entries, rhs }
    }

    pub fn value_at(&self, col: u32) -> f64 {
        self.entries.iter().find(|e| e.0 == col).map_or(0.0, |e| e.1)
    }

    fn negate(&mut self) {
        for e in &mut self.entries {
            e.1 = -e.1;
        }
        self.rhs = -self.rhs;
    }
}

/// Products of a partial QR over a contiguous rank range.
#[derive(Clone, Debug, Default)]
pub struct EliminationResult {
    /// Upper-triangular rows, one per informed rank in the range, in rank order.
    /// Each row starts at its own pivot column and carries the rotated
    /// trailing columns.
    pub factor_rows: Vec<(usize, StackRow)>,
    /// Rows left with no entries inside the range: the rotated trailing part
    /// of the measurements and their right-hand sides `e`.
    pub residual: Vec<StackRow>,
    /// Ranks in the range that received no pivot.
    pub missing: Vec<usize>,
    pub rows_in: usize,
    pub rotations: usize,
    /// Multiply-add count of the rotations (6 per merged entry pair).
    pub flops: usize,
}

impl EliminationResult {
    pub fn is_full_rank(&self) -> bool {
        self.missing.is_empty()
    }

    /// Rotated right-hand sides of the factor rows (`r⊕`).
    pub fn factor_rhs(&self) -> Vec<f64> {
        self.factor_rows.iter().map(|(_, r)| r.rhs).collect()
    }

    pub fn dropped_norm(&self) -> f64 {
        self.residual.iter().map(|r| r.rhs * r.rhs).sum::<f64>().sqrt()
    }

    pub fn factor_rhs_norm(&self) -> f64 {
        self.factor_rows.iter().map(|(_, r)| r.rhs * r.rhs).sum::<f64>().sqrt()
    }
}

#[inline]
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Rotates `row` against `pivot` so that the shared leading entry of `row`
/// vanishes. Both rows must start at the same column.
fn rotate<O: ColumnOrder>(pivot: &mut StackRow, row: &mut StackRow, order: &O) -> usize {
    let (col, a) = pivot.entries[0];
    let b = row.entries[0].1;
    debug_assert_eq!(row.entries[0].0, col);
    let (c, s, r) = givens(a, b);

    let (p, q) = (&pivot.entries, &row.entries);
    let mut np = Vec::with_capacity(p.len() + q.len());
    let mut nq = Vec::with_capacity(p.len() + q.len());
    np.push((col, r));
    let (mut i, mut j) = (1, 1);
    while i < p.len() || j < q.len() {
        let (cp, cq) = (p.get(i).map(|e| order.rank(e.0)), q.get(j).map(|e| order.rank(e.0)));
        let (id, pv, qv) = match (cp, cq) {
            (Some(x), Some(y)) if x == y => {
                let t = (p[i].0, p[i].1, q[j].1);
                i += 1;
                j += 1;
                t
            }
            (Some(x), Some(y)) if x < y => {
                i += 1;
                (p[i - 1].0, p[i - 1].1, 0.0)
            }
            (Some(_), None) => {
                i += 1;
                (p[i - 1].0, p[i - 1].1, 0.0)
            }
            _ => {
                j += 1;
                (q[j - 1].0, 0.0, q[j - 1].1)
            }
        };
        let u = c * pv + s * qv;
        let w = c * qv - s * pv;
        if u != 0.0 {
            np.push((id, u));
        }
        if w != 0.0 {
            nq.push((id, w));
        }
    }
    let work = 6 * (p.len() + q.len());
    let (pr, qr) = (pivot.rhs, row.rhs);
    pivot.entries = np;
    pivot.rhs = c * pr + s * qr;
    row.entries = nq;
    row.rhs = c * qr - s * pr;
    work
}

/// QR-eliminates the ranks `eliminate` from `rows`.
///
/// Rows are processed in the given order and no pivoting is done; a column
/// whose only candidate pivot falls below [`ZERO_PIVOT_TOL`] stays without a
/// pivot and is reported in `missing`. Every entry must have rank at least
/// `eliminate.start`.
pub fn qr_eliminate<O: ColumnOrder>(
    rows: Vec<StackRow>,
    eliminate: Range<usize>,
    order: &O,
) -> Result<EliminationResult> {
    let (lo, hi) = (eliminate.start, eliminate.end.max(eliminate.start));
    let width = hi - lo;
    let mut scale = vec![0.0f64; width];
    for row in &rows {
        let mut prev = None;
        for &(c, v) in &row.entries {
            let k = order.rank(c);
            if k < lo {
                return Err(Error::Precondition(format!(
                    "row has an entry at rank {k}, left of the eliminated range {lo}..{hi}"
                )));
            }
            if prev.is_some_and(|p| p >= k) {
                return Err(Error::Precondition("row entries are not sorted by rank".into()));
            }
            prev = Some(k);
            if k < hi {
                scale[k - lo] = scale[k - lo].max(v.abs());
            }
        }
    }

    let rows_in = rows.len();
    let mut pivots: Vec<Option<StackRow>> = vec![None; width];
    let mut residual = Vec::new();
    let (mut rotations, mut flops) = (0, 0);
    for mut row in rows {
        loop {
            let Some(&(c, v)) = row.entries.first() else {
                residual.push(row);
                break;
            };
            let k = order.rank(c);
            if k >= hi {
                residual.push(row);
                break;
            }
            match &mut pivots[k - lo] {
                Some(p) => {
                    flops += rotate(p, &mut row, order);
                    rotations += 1;
                }
                slot @ None => {
                    if v.abs() <= ZERO_PIVOT_TOL * scale[k - lo] {
                        row.entries.remove(0);
                        continue;
                    }
                    if v < 0.0 {
                        row.negate();
                    }
                    *slot = Some(row);
                    break;
                }
            }
        }
    }

    let mut factor_rows = Vec::new();
    let mut missing = Vec::new();
    for (i, p) in pivots.into_iter().enumerate() {
        match p {
            Some(r) => factor_rows.push((lo + i, r)),
            None => missing.push(lo + i),
        }
    }
    Ok(EliminationResult { factor_rows, residual, missing, rows_in, rotations, flops })
}
