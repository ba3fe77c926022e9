//! Block permutations of a factor and local re-triangularization.

use std::ops::Range;

use super::layout::{BlockLayout, StateOrdering};
use super::qr::qr_eliminate;
use super::state::SquareRootState;
use crate::error::{Error, Result};

/// A reordering of the blocks of `source` into `target`.
///
/// Blocks outside one contiguous block segment keep their positions, so only
/// the factor rows whose pivots lie in that segment need re-triangularizing.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationPlan {
    source: BlockLayout,
    target: BlockLayout,
    /// Target column `i` holds source column `column_perm[i]`.
    column_perm: Vec<usize>,
    /// Block indices that move.
    segment: Range<usize>,
}

impl PermutationPlan {
    pub fn new(source: BlockLayout, target: BlockLayout) -> Result<Self> {
        if source.len() != target.len() || target.blocks().iter().any(|b| source.block(b.key) != Some(b)) {
            return Err(Error::Precondition("permutation target has different blocks".into()));
        }
        let mut column_perm = Vec::with_capacity(target.total_dim());
        for b in target.blocks() {
            column_perm.extend(source.range_of(b.key)?);
        }
        let same = |i: usize| source.blocks()[i].key == target.blocks()[i].key;
        let first = (0..source.len()).find(|&i| !same(i));
        let segment = match first {
            None => 0..0,
            Some(f) => {
                let last = (0..source.len()).rev().find(|&i| !same(i)).unwrap_or(f);
                f..last + 1
            }
        };
        Ok(PermutationPlan { source, target, column_perm, segment })
    }

    /// Reverses the block order within `blocks`, retagging the layout.
    pub fn reverse_blocks(
        source: &BlockLayout,
        blocks: Range<usize>,
        ordering: StateOrdering,
        partition: Option<usize>,
    ) -> Result<Self> {
        if blocks.end > source.len() || blocks.start > blocks.end {
            return Err(Error::Precondition(format!("block range {blocks:?} out of bounds")));
        }
        let mut b = source.blocks().to_vec();
        b[blocks].reverse();
        Self::new(source.clone(), BlockLayout::new(b, ordering, partition)?)
    }

    pub fn source(&self) -> &BlockLayout {
        &self.source
    }

    pub fn target(&self) -> &BlockLayout {
        &self.target
    }

    pub fn column_perm(&self) -> &[usize] {
        &self.column_perm
    }

    pub fn is_identity(&self) -> bool {
        self.segment.is_empty()
    }

    /// Columns of the moving segment (the same range in source and target).
    pub fn segment_columns(&self) -> Range<usize> {
        if self.segment.is_empty() {
            return 0..0;
        }
        self.source.offset(self.segment.start)..self.source.offset(self.segment.end)
    }

    /// Rows that are re-triangularized: those with pivots in the segment.
    pub fn rows_requiring_retriangularization(&self) -> Range<usize> {
        self.segment_columns()
    }
}

/// Applies `plan` and restores upper-triangular form by a QR of the rows in
/// the moving segment. The cost `‖R(x − x̂)‖²` is unchanged.
pub fn permute_and_retriangularize(state: &SquareRootState, plan: &PermutationPlan) -> Result<SquareRootState> {
    permute_counted(state, plan).map(|(s, _)| s)
}

/// As [`permute_and_retriangularize`], also returning the number of rows fed to the QR.
pub(crate) fn permute_counted(state: &SquareRootState, plan: &PermutationPlan) -> Result<(SquareRootState, usize)> {
    if state.layout() != plan.source() {
        return Err(Error::Precondition("permutation plan does not start from the state's layout".into()));
    }
    let mut out = state.clone();
    if plan.is_identity() {
        out.layout = plan.target.clone();
        return Ok((out, 0));
    }
    let cols = plan.segment_columns();
    let ids: Vec<u32> = cols.clone().map(|p| state.col_at[p]).collect();
    out.relabel(plan.target.clone())?;
    let stack: Vec<_> = ids.iter().filter_map(|&id| out.rows[id as usize].take().map(|r| super::qr::StackRow::new(r, 0.0))).collect();
    let rows_in = stack.len();
    let res = qr_eliminate(stack, cols.clone(), &out.ranks())?;
    if res.residual.iter().any(|r| !r.entries.is_empty()) {
        return Err(Error::Precondition("segment rows lost rank during re-triangularization".into()));
    }
    for (k, row) in res.factor_rows {
        let id = out.col_at[k];
        out.rows[id as usize] = Some(row.entries);
    }
    out.recount_nnz();
    Ok((out, rows_in))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::layout::{Block, BlockKey};
    use nalgebra::{DMatrix, DVector};

    fn scalar_layout(n: u32) -> BlockLayout {
        let blocks = (0..n).map(|i| Block { key: BlockKey::Pose(i), dim: 1, stamp: i }).collect();
        BlockLayout::new(blocks, StateOrdering::Chronological, None).unwrap()
    }

    fn perm_matrix(perm: &[usize]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(perm.len(), perm.len());
        for (i, &j) in perm.iter().enumerate() {
            p[(i, j)] = 1.0;
        }
        p
    }

    #[test]
    fn identity_is_bit_exact() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.0, 3.0]);
        let s = SquareRootState::from_dense(scalar_layout(2), &r, &DVector::from_vec(vec![0.1, 0.2])).unwrap();
        let plan = PermutationPlan::new(s.layout().clone(), s.layout().clone()).unwrap();
        assert!(plan.is_identity());
        assert_eq!(permute_and_retriangularize(&s, &plan).unwrap(), s);
    }

    #[test]
    fn diagonal_swap() {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let s = SquareRootState::from_dense(scalar_layout(2), &r, &DVector::zeros(2)).unwrap();
        let plan =
            PermutationPlan::reverse_blocks(s.layout(), 0..2, StateOrdering::ReverseChronological, None).unwrap();
        let out = permute_and_retriangularize(&s, &plan).unwrap();
        let g = out.to_dense().transpose() * out.to_dense();
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 4.0])));
    }

    #[test]
    fn reversal_preserves_gram() {
        let r = DMatrix::from_fn(6, 6, |i, j| if j >= i { 1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.37 } else { 0.0 });
        let x = DVector::from_fn(6, |i, _| i as f64 * 0.1);
        let s = SquareRootState::from_dense(scalar_layout(6), &r, &x).unwrap();
        let plan =
            PermutationPlan::reverse_blocks(s.layout(), 0..6, StateOrdering::ReverseChronological, None).unwrap();
        let out = permute_and_retriangularize(&s, &plan).unwrap();
        assert!(out.is_upper_triangular());
        let p = perm_matrix(plan.column_perm());
        let expect = &p * (r.transpose() * &r) * p.transpose();
        let got = out.to_dense().transpose() * out.to_dense();
        assert!((got - expect).abs().max() < 1e-12);
        let xp: Vec<f64> = plan.column_perm().iter().map(|&j| x[j]).collect();
        assert_eq!(out.estimate(), xp);
    }

    #[test]
    fn rejects_mismatched_plan() {
        let s = SquareRootState::new(scalar_layout(2));
        let plan = PermutationPlan::new(scalar_layout(3), scalar_layout(3)).unwrap();
        assert!(permute_and_retriangularize(&s, &plan).is_err());
    }
}
