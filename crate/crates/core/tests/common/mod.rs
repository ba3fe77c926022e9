//! Random linear instances shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rise_core::factor::{Block, BlockKey, BlockLayout, MeasurementBlock, MeasurementRow, MeasurementTag, SquareRootState, StateOrdering};
use rise_core::oracle::CostTerm;

/// Rows `a·x ≈ z` keyed by block component.
pub type AbsoluteRows = Vec<(Vec<(BlockKey, usize, f64)>, f64)>;

/// Chronological layout of blocks with dimensions 1 to 3 and total
/// dimension at most `max_dim`.
pub fn random_layout(rng: &mut ChaCha8Rng, max_dim: usize) -> BlockLayout {
    let mut blocks = Vec::new();
    let mut dim = 0;
    loop {
        let d = rng.random_range(1..=3);
        if dim + d > max_dim {
            break;
        }
        blocks.push(Block { key: BlockKey::Pose(blocks.len() as u32), dim: d, stamp: blocks.len() as u32 });
        dim += d;
        if blocks.len() > 1 && rng.random_bool(0.1) {
            break;
        }
    }
    BlockLayout::new(blocks, StateOrdering::Chronological, None).unwrap()
}

/// Sparse, well-conditioned upper-triangular prior with a random estimate.
pub fn random_state(rng: &mut ChaCha8Rng, layout: &BlockLayout) -> SquareRootState {
    let n = layout.total_dim();
    let r = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            rng.random_range(0.5..2.0)
        } else if j > i && rng.random_bool(0.2) {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    SquareRootState::from_dense(layout.clone(), &r, &x).unwrap()
}

/// Up to `max_rows` rows, each touching one to four random blocks.
pub fn random_rows(rng: &mut ChaCha8Rng, layout: &BlockLayout, max_rows: usize) -> AbsoluteRows {
    let m = rng.random_range(1..=max_rows);
    (0..m)
        .map(|_| {
            let mut entries = Vec::new();
            for _ in 0..rng.random_range(1..=4) {
                let b = &layout.blocks()[rng.random_range(0..layout.len())];
                let c = rng.random_range(0..b.dim);
                if !entries.iter().any(|&(k, j, _)| k == b.key && j == c) {
                    entries.push((b.key, c, rng.random_range(-2.0..2.0)));
                }
            }
            (entries, rng.random_range(-3.0..3.0))
        })
        .collect()
}

/// The rows linearized at the state's current estimate.
pub fn relative(rows: &AbsoluteRows, state: &SquareRootState) -> MeasurementBlock {
    let rows = rows
        .iter()
        .map(|(entries, z)| {
            let hx: f64 = entries.iter().map(|&(k, c, v)| v * state.estimate_of(k).unwrap()[c]).sum();
            MeasurementRow { entries: entries.clone(), residual: z - hx }
        })
        .collect();
    MeasurementBlock::new(MeasurementTag::LocalTrack, rows)
}

pub fn cost_term(rows: &AbsoluteRows, layout: &BlockLayout) -> CostTerm {
    let mut a = DMatrix::zeros(rows.len(), layout.total_dim());
    let mut b = DVector::zeros(rows.len());
    for (i, (entries, z)) in rows.iter().enumerate() {
        for &(k, c, v) in entries {
            a[(i, layout.range_of(k).unwrap().start + c)] += v;
        }
        b[i] = *z;
    }
    CostTerm::new(a, b).unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Column pattern of every row at or after position `from`, relative to `from`.
pub fn trailing_pattern(state: &SquareRootState, from: usize) -> Vec<Option<Vec<usize>>> {
    (from..state.total_dim()).map(|p| state.row(p).map(|r| r.iter().map(|e| e.0 - from).collect())).collect()
}
