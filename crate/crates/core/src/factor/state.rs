//! Sparse square-root information state: an upper-triangular factor `R` and
//! the estimate `x̂`, representing the cost `‖R(x − x̂)‖²`.
//!
//! Every scalar column gets a permanent identifier when its block is created.
//! Rows, row entries and the estimate are keyed by identifier, so growing the
//! layout (appending, prepending, inserting at the partition) only rebuilds
//! the identifier/position tables and never rewrites stored rows. Row entries
//! are kept sorted by current position.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::layout::{Block, BlockKey, BlockLayout};
use super::measurement::MeasurementBlock;
use super::qr::{ColumnOrder, StackRow};
use crate::error::{Error, Result};

pub(crate) type Row = Vec<(u32, f64)>;

/// Position lookup for column identifiers.
#[derive(Clone, Copy)]
pub(crate) struct Ranks<'a> {
    pub rank_of: &'a [u32],
    pub col_at: &'a [u32],
}

impl ColumnOrder for Ranks<'_> {
    #[inline]
    fn rank(&self, col: u32) -> usize {
        self.rank_of[col as usize] as usize
    }
    #[inline]
    fn col_at(&self, rank: usize) -> u32 {
        self.col_at[rank]
    }
}

/// A block to be added to a state, with its initial estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewBlock {
    pub block: Block,
    pub init: Vec<f64>,
}

impl NewBlock {
    pub fn new(block: Block, init: Vec<f64>) -> Self {
        NewBlock { block, init }
    }
}

#[derive(Clone, Debug)]
pub struct SquareRootState {
    pub(crate) layout: BlockLayout,
    pub(crate) first_col: HashMap<BlockKey, u32>,
    pub(crate) rank_of: Vec<u32>,
    pub(crate) col_at: Vec<u32>,
    /// Factor rows by column identifier; `None` marks an uninformed column.
    pub(crate) rows: Vec<Option<Row>>,
    /// Estimate by column identifier.
    pub(crate) x: Vec<f64>,
    pub(crate) nnz: usize,
}

impl SquareRootState {
    /// A state with no information and a zero estimate.
    pub fn new(layout: BlockLayout) -> Self {
        let n = layout.total_dim();
        Self::with_estimate(layout, &vec![0.0; n]).expect("dimensions match")
    }

    /// A state with no information and the given estimate (layout order).
    pub fn with_estimate(layout: BlockLayout, x: &[f64]) -> Result<Self> {
        let n = layout.total_dim();
        if x.len() != n {
            return Err(Error::Precondition(format!("estimate has {} entries, layout {}", x.len(), n)));
        }
        let mut first_col = HashMap::new();
        for (i, b) in layout.blocks().iter().enumerate() {
            first_col.insert(b.key, layout.offset(i) as u32);
        }
        let mut s = SquareRootState {
            layout,
            first_col,
            rank_of: Vec::new(),
            col_at: Vec::new(),
            rows: vec![None; n],
            x: x.to_vec(),
            nnz: 0,
        };
        s.rebuild_ranks();
        Ok(s)
    }

    /// Builds a state from a dense upper-triangular factor (layout order).
    /// All-zero rows become uninformed columns.
    pub fn from_dense(layout: BlockLayout, r: &DMatrix<f64>, x: &DVector<f64>) -> Result<Self> {
        let n = layout.total_dim();
        if r.nrows() != n || r.ncols() != n {
            return Err(Error::Precondition(format!("factor is {}x{}, layout {n}", r.nrows(), r.ncols())));
        }
        let mut s = Self::with_estimate(layout, x.as_slice())?;
        for i in 0..n {
            if (0..i).any(|j| r[(i, j)] != 0.0) {
                return Err(Error::Precondition(format!("factor has entries below the diagonal in row {i}")));
            }
            let row: Row = (i..n).filter(|&j| r[(i, j)] != 0.0).map(|j| (j as u32, r[(i, j)])).collect();
            if row.is_empty() {
                continue;
            }
            if row[0].0 as usize != i {
                return Err(Error::Singular { column: i, block: Some(s.block_key_at(i)) });
            }
            s.nnz += row.len();
            s.rows[i] = Some(row);
        }
        Ok(s)
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn total_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub(crate) fn ranks(&self) -> Ranks<'_> {
        Ranks { rank_of: &self.rank_of, col_at: &self.col_at }
    }

    pub(crate) fn rebuild_ranks(&mut self) {
        let n = self.layout.total_dim();
        self.rank_of.resize(n, 0);
        self.col_at.resize(n, 0);
        for (i, b) in self.layout.blocks().iter().enumerate() {
            let base = self.first_col[&b.key];
            let off = self.layout.offset(i);
            for c in 0..b.dim {
                self.rank_of[base as usize + c] = (off + c) as u32;
                self.col_at[off + c] = base + c as u32;
            }
        }
    }

    /// Column identifier of component `comp` of block `key`.
    pub(crate) fn col_id(&self, key: BlockKey, comp: usize) -> Result<u32> {
        let base = *self.first_col.get(&key).ok_or(Error::UnknownBlock(key))?;
        let dim = self.layout.block(key).map_or(0, |b| b.dim);
        if comp >= dim {
            return Err(Error::Precondition(format!("component {comp} out of range for block {key}")));
        }
        Ok(base + comp as u32)
    }

    pub fn position_of(&self, key: BlockKey, comp: usize) -> Result<usize> {
        Ok(self.rank_of[self.col_id(key, comp)? as usize] as usize)
    }

    pub(crate) fn block_key_at(&self, pos: usize) -> BlockKey {
        self.layout.blocks()[self.layout.block_at_column(pos)].key
    }

    pub fn estimate_of(&self, key: BlockKey) -> Result<&[f64]> {
        let base = *self.first_col.get(&key).ok_or(Error::UnknownBlock(key))? as usize;
        let dim = self.layout.block(key).map_or(0, |b| b.dim);
        Ok(&self.x[base..base + dim])
    }

    pub fn set_estimate(&mut self, key: BlockKey, value: &[f64]) -> Result<()> {
        let base = *self.first_col.get(&key).ok_or(Error::UnknownBlock(key))? as usize;
        let dim = self.layout.block(key).map_or(0, |b| b.dim);
        if value.len() != dim {
            return Err(Error::Precondition(format!("block {key} has dimension {dim}")));
        }
        self.x[base..base + dim].copy_from_slice(value);
        Ok(())
    }

    /// Estimate in layout order.
    pub fn estimate(&self) -> Vec<f64> {
        self.col_at.iter().map(|&c| self.x[c as usize]).collect()
    }

    pub fn is_informed(&self, pos: usize) -> bool {
        self.rows[self.col_at[pos] as usize].is_some()
    }

    pub fn uninformed_positions(&self) -> Vec<usize> {
        (0..self.total_dim()).filter(|&p| !self.is_informed(p)).collect()
    }

    /// Row at layout position `pos` as (position, value) pairs.
    pub fn row(&self, pos: usize) -> Option<Vec<(usize, f64)>> {
        self.rows[self.col_at[pos] as usize]
            .as_ref()
            .map(|r| r.iter().map(|&(c, v)| (self.rank_of[c as usize] as usize, v)).collect())
    }

    pub(crate) fn row_by_id(&self, id: u32) -> Option<&Row> {
        self.rows[id as usize].as_ref()
    }

    /// Dense factor in layout order; uninformed rows are zero.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.total_dim();
        let mut m = DMatrix::zeros(n, n);
        for (p, &c) in self.col_at.iter().enumerate() {
            if let Some(row) = &self.rows[c as usize] {
                for &(j, v) in row {
                    m[(p, self.rank_of[j as usize] as usize)] = v;
                }
            }
        }
        m
    }

    /// Nonzero entries as (row, column, value) in layout positions, row-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz);
        for p in 0..self.total_dim() {
            if let Some(row) = self.row(p) {
                out.extend(row.into_iter().map(|(j, v)| (p, j, v)));
            }
        }
        out
    }

    /// Explicit scan: every stored row starts at its own column with a
    /// nonzero diagonal and has strictly increasing positions.
    pub fn is_upper_triangular(&self) -> bool {
        self.col_at.iter().enumerate().all(|(p, &c)| match &self.rows[c as usize] {
            None => true,
            Some(row) => {
                row.first().is_some_and(|&(j, v)| j == c && v != 0.0)
                    && row.windows(2).all(|w| self.rank_of[w[0].0 as usize] < self.rank_of[w[1].0 as usize])
                    && self.rank_of[c as usize] as usize == p
            }
        })
    }

    /// Evaluates `‖R(x − x̂)‖²` at `x` (layout order).
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for row in self.rows.iter().flatten() {
            let v: f64 = row
                .iter()
                .map(|&(c, r)| r * (x[self.rank_of[c as usize] as usize] - self.x[c as usize]))
                .sum();
            total += v * v;
        }
        total
    }

    /// Serializes the rows and estimates of `keys` in block-relative terms.
    /// The bytes do not depend on where the blocks sit in the layout.
    pub fn block_bytes(&self, keys: &[BlockKey]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &key in keys {
            let dim = self.layout.block(key).ok_or(Error::UnknownBlock(key))?.dim;
            out.extend(key.to_string().as_bytes());
            for comp in 0..dim {
                let id = self.col_id(key, comp)?;
                out.extend(self.x[id as usize].to_bits().to_le_bytes());
                match &self.rows[id as usize] {
                    None => out.push(0),
                    Some(row) => {
                        out.push(1);
                        for &(c, v) in row {
                            let pos = self.rank_of[c as usize] as usize;
                            let bi = self.layout.block_at_column(pos);
                            out.extend(self.layout.blocks()[bi].key.to_string().as_bytes());
                            out.extend(((pos - self.layout.offset(bi)) as u32).to_le_bytes());
                            out.extend(v.to_bits().to_le_bytes());
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inserts an uninformed block at block index `at`.
    pub(crate) fn insert_block(&mut self, at: usize, nb: &NewBlock) -> Result<()> {
        if nb.init.len() != nb.block.dim {
            return Err(Error::Precondition(format!(
                "initial value of {} has {} entries, block dimension {}",
                nb.block.key,
                nb.init.len(),
                nb.block.dim
            )));
        }
        self.layout.insert(at, nb.block)?;
        let base = self.rows.len() as u32;
        self.first_col.insert(nb.block.key, base);
        self.rows.extend(std::iter::repeat_n(None, nb.block.dim));
        self.x.extend_from_slice(&nb.init);
        self.rebuild_ranks();
        Ok(())
    }

    /// Moves the partition boundary; the column order is unchanged.
    pub(crate) fn set_partition(&mut self, boundary: Option<usize>) -> Result<()> {
        self.layout = self.layout.with_partition(boundary)?;
        Ok(())
    }

    /// Reorders columns to `layout` (same blocks) and re-sorts stored rows.
    /// The result need not be upper triangular; callers restore that.
    pub(crate) fn relabel(&mut self, layout: BlockLayout) -> Result<()> {
        if layout.len() != self.layout.len()
            || layout.blocks().iter().any(|b| self.layout.block(b.key) != Some(b))
        {
            return Err(Error::Precondition("relabel target has different blocks".into()));
        }
        self.layout = layout;
        self.rebuild_ranks();
        let rank_of = &self.rank_of;
        for row in self.rows.iter_mut().flatten() {
            row.sort_by_key(|&(c, _)| rank_of[c as usize]);
        }
        Ok(())
    }

    pub(crate) fn recount_nnz(&mut self) {
        self.nnz = self.rows.iter().flatten().map(Vec::len).sum();
    }

    /// Maps a measurement onto stack rows sorted by position.
    pub(crate) fn stack_rows(&self, meas: &MeasurementBlock) -> Result<Vec<StackRow>> {
        let order = self.ranks();
        meas.rows
            .iter()
            .map(|row| {
                let entries = row
                    .entries
                    .iter()
                    .map(|&(key, comp, v)| Ok((self.col_id(key, comp)?, v)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(StackRow::from_unsorted(entries, row.residual, &order))
            })
            .collect()
    }

    /// Factor row as a stack row with zero right-hand side.
    pub(crate) fn factor_stack_row(&self, id: u32) -> Option<StackRow> {
        self.rows[id as usize].as_ref().map(|r| StackRow::new(r.clone(), 0.0))
    }
}

impl PartialEq for SquareRootState {
    /// Equal layouts, estimates and factor entries, compared by position.
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.estimate() == other.estimate()
            && (0..self.total_dim()).all(|p| self.row(p) == other.row(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::layout::StateOrdering;

    fn scalar_layout(n: u32) -> BlockLayout {
        let blocks = (0..n).map(|i| Block { key: BlockKey::Pose(i), dim: 1, stamp: i }).collect();
        BlockLayout::new(blocks, StateOrdering::Chronological, None).unwrap()
    }

    #[test]
    fn dense_round_trip() {
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = SquareRootState::from_dense(scalar_layout(3), &r, &x).unwrap();
        assert_eq!(s.to_dense(), r);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.uninformed_positions(), vec![1]);
        assert!(s.is_upper_triangular());
        assert_eq!(s.estimate(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_lower_entries() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let x = DVector::zeros(2);
        assert!(SquareRootState::from_dense(scalar_layout(2), &r, &x).is_err());
    }

    #[test]
    fn prepend_keeps_rows_and_shifts_positions() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let blocks = vec![Block { key: BlockKey::Pose(1), dim: 1, stamp: 1 }, Block {
            key: BlockKey::Pose(0),
            dim: 1,
            stamp: 0,
        }];
        let layout = BlockLayout::new(blocks, StateOrdering::ReverseChronological, None).unwrap();
        let mut s = SquareRootState::from_dense(layout, &r, &x).unwrap();
        let before = s.block_bytes(&[BlockKey::Pose(0), BlockKey::Pose(1)]).unwrap();
        let nb = NewBlock::new(Block { key: BlockKey::Pose(2), dim: 1, stamp: 2 }, vec![7.0]);
        s.insert_block(0, &nb).unwrap();
        assert_eq!(s.estimate(), vec![7.0, 1.0, 2.0]);
        assert_eq!(s.row(1), Some(vec![(1, 2.0), (2, 1.0)]));
        assert!(!s.is_informed(0));
        assert!(s.is_upper_triangular());
        assert_eq!(s.block_bytes(&[BlockKey::Pose(0), BlockKey::Pose(1)]).unwrap(), before);
    }

    #[test]
    fn quadratic_form_matches_dense() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let s = SquareRootState::from_dense(scalar_layout(2), &r, &x).unwrap();
        let y = DVector::from_vec(vec![0.5, 2.0]);
        let d = &r * (&y - &x);
        assert!((s.quadratic_form(y.as_slice()) - d.norm_squared()).abs() < 1e-14);
    }
}
