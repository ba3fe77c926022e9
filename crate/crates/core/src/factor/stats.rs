//! Nonzero census of a factor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::state::SquareRootState;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub nnz: usize,
    /// Number of columns holding each nonzero count.
    pub column_histogram: BTreeMap<usize, usize>,
    /// Columns with more than `max(8, n / 10)` nonzeros.
    pub dense_columns: usize,
}

pub fn dense_column_threshold(n: usize) -> usize {
    (n / 10).max(8)
}

pub fn sparsity_stats(state: &SquareRootState) -> SparsityStats {
    let n = state.total_dim();
    let mut per_col = vec![0usize; n];
    let mut nnz = 0;
    for row in state.rows.iter().flatten() {
        for &(c, _) in row {
            per_col[state.rank_of[c as usize] as usize] += 1;
        }
        nnz += row.len();
    }
    let mut column_histogram = BTreeMap::new();
    for &k in &per_col {
        *column_histogram.entry(k).or_insert(0) += 1;
    }
    let t = dense_column_threshold(n);
    SparsityStats { nnz, column_histogram, dense_columns: per_col.iter().filter(|&&k| k > t).count() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::layout::{Block, BlockLayout, StateOrdering};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn identity_and_empty() {
        let layout = BlockLayout::new(vec![Block::pose(0, 0)], StateOrdering::Chronological, None).unwrap();
        let s = SquareRootState::from_dense(layout, &DMatrix::identity(3, 3), &DVector::zeros(3)).unwrap();
        let st = sparsity_stats(&s);
        assert_eq!((st.nnz, st.dense_columns), (3, 0));
        assert_eq!(st.column_histogram.get(&1), Some(&3));
        let empty = SquareRootState::new(BlockLayout::empty(StateOrdering::Chronological));
        assert_eq!(sparsity_stats(&empty).nnz, 0);
    }
}
