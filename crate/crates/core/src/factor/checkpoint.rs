//! Versioned text checkpoint of a factor state.
//!
//! ```text
//! rise-factor-checkpoint 1
//! ordering chronological
//! partition 2            (or `partition none`)
//! block p0 3 0           (key, dimension, stamp; one line per block)
//! x 0 1.25               (position, value; every position)
//! r 0 0 2                (row, column, value; stored nonzeros)
//! end 17                 (number of `r` lines)
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! bits, so a save/load round trip is exact.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::layout::{Block, BlockLayout, StateOrdering};
use super::state::SquareRootState;
use crate::error::{Error, Result};

const MAGIC: &str = "rise-factor-checkpoint";
const VERSION: u32 = 1;

pub fn write_checkpoint(state: &SquareRootState) -> String {
    let l = state.layout();
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "ordering {}", match l.ordering() {
        StateOrdering::Chronological => "chronological",
        StateOrdering::ReverseChronological => "reverse-chronological",
    });
    match l.partition_boundary() {
        Some(p) => writeln!(s, "partition {p}"),
        None => writeln!(s, "partition none"),
    }
    .ok();
    for b in l.blocks() {
        let _ = writeln!(s, "block {} {} {}", b.key, b.dim, b.stamp);
    }
    for (i, v) in state.estimate().iter().enumerate() {
        let _ = writeln!(s, "x {i} {v}");
    }
    let t = state.triplets();
    for (i, j, v) in &t {
        let _ = writeln!(s, "r {i} {j} {v}");
    }
    let _ = writeln!(s, "end {}", t.len());
    s
}

pub fn read_checkpoint(text: &str) -> Result<SquareRootState> {
    let perr = |line: usize, m: &str| Error::Parse { line, message: m.to_string() };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::Truncated(format!("checkpoint ends before {what}")));

    let (n, head) = next("header")?;
    match head.split_once(' ') {
        Some((MAGIC, v)) if v.parse() == Ok(VERSION) => {}
        _ => return Err(perr(n, "not a version 1 factor checkpoint")),
    }
    let (n, ord) = next("ordering")?;
    let ordering = match ord.strip_prefix("ordering ") {
        Some("chronological") => StateOrdering::Chronological,
        Some("reverse-chronological") => StateOrdering::ReverseChronological,
        _ => return Err(perr(n, "expected `ordering <chronological|reverse-chronological>`")),
    };
    let (n, part) = next("partition")?;
    let partition = match part.strip_prefix("partition ") {
        Some("none") => None,
        Some(p) => Some(p.parse().map_err(|_| perr(n, "bad partition"))?),
        None => return Err(perr(n, "expected `partition`")),
    };

    let mut blocks = Vec::new();
    let mut xs = Vec::new();
    let mut trip = Vec::new();
    loop {
        let (n, line) = next("`end`")?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<usize> { f.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| perr(n, "bad integer")) };
        let val = |k: usize| -> Result<f64> { f.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| perr(n, "bad number")) };
        match f.first().copied() {
            Some("block") if f.len() == 4 => blocks.push(Block {
                key: f[1].parse().map_err(|_| perr(n, "bad block key"))?,
                dim: num(2)?,
                stamp: num(3)? as u32,
            }),
            Some("x") if f.len() == 3 => {
                if num(1)? != xs.len() {
                    return Err(perr(n, "estimate entries out of order"));
                }
                xs.push(val(2)?);
            }
            Some("r") if f.len() == 4 => trip.push((num(1)?, num(2)?, val(3)?)),
            Some("end") if f.len() == 2 => {
                if num(1)? != trip.len() {
                    return Err(Error::Truncated(format!("checkpoint declares {} factor entries, found {}", f[1], trip.len())));
                }
                break;
            }
            _ => return Err(perr(n, "unrecognized record")),
        }
    }
    let layout = BlockLayout::new(blocks, ordering, partition)?;
    let dim = layout.total_dim();
    if xs.len() != dim {
        return Err(Error::Truncated(format!("checkpoint has {} estimate entries, layout {dim}", xs.len())));
    }
    let mut r = DMatrix::zeros(dim, dim);
    for (i, j, v) in trip {
        if i >= dim || j >= dim {
            return Err(Error::Precondition(format!("factor entry ({i}, {j}) outside {dim}x{dim}")));
        }
        r[(i, j)] = v;
    }
    SquareRootState::from_dense(layout, &r, &DVector::from_vec(xs))
}
