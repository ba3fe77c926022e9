//! Whitened linearized measurements addressed by block and component.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::layout::{BlockKey, BlockLayout};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementTag {
    /// Absolute anchor on a state (the first pose).
    Prior,
    Odometry,
    LocalTrack,
    LoopClosure,
}

impl MeasurementTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasurementTag::Prior => "prior",
            MeasurementTag::Odometry => "odometry",
            MeasurementTag::LocalTrack => "local-track",
            MeasurementTag::LoopClosure => "loop-closure",
        }
    }
}

/// One whitened row: sparse Jacobian entries `(block, component, value)` and
/// the residual `z − h(x̂)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub entries: Vec<(BlockKey, usize, f64)>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementBlock {
    pub tag: MeasurementTag,
    pub rows: Vec<MeasurementRow>,
}

impl MeasurementBlock {
    pub fn new(tag: MeasurementTag, rows: Vec<MeasurementRow>) -> Self {
        MeasurementBlock { tag, rows }
    }

    pub fn empty(tag: MeasurementTag) -> Self {
        MeasurementBlock { tag, rows: Vec::new() }
    }

    /// Builds a block from a dense Jacobian over `layout` columns.
    pub fn from_dense(tag: MeasurementTag, layout: &BlockLayout, h: &DMatrix<f64>, r: &DVector<f64>) -> Result<Self> {
        if h.ncols() != layout.total_dim() || h.nrows() != r.len() {
            return Err(Error::Precondition(format!(
                "jacobian is {}x{}, residual {}, layout {}",
                h.nrows(),
                h.ncols(),
                r.len(),
                layout.total_dim()
            )));
        }
        let rows = (0..h.nrows())
            .map(|i| {
                let entries = (0..h.ncols())
                    .filter(|&j| h[(i, j)] != 0.0)
                    .map(|j| {
                        let b = layout.block_at_column(j);
                        (layout.blocks()[b].key, j - layout.offset(b), h[(i, j)])
                    })
                    .collect();
                MeasurementRow { entries, residual: r[i] }
            })
            .collect();
        Ok(MeasurementBlock { tag, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Blocks with at least one entry.
    pub fn blocks(&self) -> BTreeSet<BlockKey> {
        self.rows.iter().flat_map(|r| r.entries.iter().map(|e| e.0)).collect()
    }

    /// Checks that every entry addresses an existing block component.
    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        for row in &self.rows {
            for &(key, comp, v) in &row.entries {
                let b = layout.block(key).ok_or(Error::UnknownBlock(key))?;
                if comp >= b.dim {
                    return Err(Error::Precondition(format!("component {comp} out of range for {key}")));
                }
                if !v.is_finite() {
                    return Err(Error::Precondition(format!("non-finite jacobian entry on {key}")));
                }
            }
            if !row.residual.is_finite() {
                return Err(Error::Precondition("non-finite residual".into()));
            }
        }
        Ok(())
    }

    /// Dense `(H, r)` over `layout` columns.
    pub fn to_dense(&self, layout: &BlockLayout) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut h = DMatrix::zeros(self.rows.len(), layout.total_dim());
        let mut r = DVector::zeros(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &(key, comp, v) in &row.entries {
                h[(i, layout.range_of(key)?.start + comp)] += v;
            }
            r[i] = row.residual;
        }
        Ok((h, r))
    }

    /// Copy without the entries on blocks rejected by `keep`; residuals are
    /// left as they are, i.e. those blocks are held at their estimates.
    pub fn restricted(&self, keep: impl Fn(BlockKey) -> bool) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| MeasurementRow {
                entries: r.entries.iter().copied().filter(|e| keep(e.0)).collect(),
                residual: r.residual,
            })
            .collect();
        MeasurementBlock { tag: self.tag, rows }
    }

    pub fn residual_norm(&self) -> f64 {
        self.rows.iter().map(|r| r.residual * r.residual).sum::<f64>().sqrt()
    }
}
