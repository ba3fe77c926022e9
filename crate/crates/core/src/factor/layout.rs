//! Block layouts: the ordered map from state blocks to column ranges.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of a state block. Poses and features are numbered independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKey {
    Pose(u32),
    Feature(u32),
}

impl BlockKey {
    pub fn kind(self) -> BlockKind {
        match self {
            BlockKey::Pose(_) => BlockKind::Pose,
            BlockKey::Feature(_) => BlockKind::Feature,
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, BlockKey::Pose(_))
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKey::Pose(i) => write!(f, "p{i}"),
            BlockKey::Feature(i) => write!(f, "f{i}"),
        }
    }
}

impl FromStr for BlockKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Params(format!("bad block key `{s}` (expected p<N> or f<N>)"));
        let (head, tail) = s.split_at_checked(1).ok_or_else(bad)?;
        let n: u32 = tail.parse().map_err(|_| bad())?;
        match head {
            "p" => Ok(BlockKey::Pose(n)),
            "f" => Ok(BlockKey::Feature(n)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for BlockKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Pose,
    Feature,
}

/// One state block. `stamp` is the step at which the block was created.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub key: BlockKey,
    pub dim: usize,
    pub stamp: u32,
}

impl Block {
    pub fn pose(index: u32, stamp: u32) -> Self {
        Block { key: BlockKey::Pose(index), dim: 3, stamp }
    }

    pub fn feature(index: u32, stamp: u32) -> Self {
        Block { key: BlockKey::Feature(index), dim: 2, stamp }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateOrdering {
    Chronological,
    ReverseChronological,
}

/// Ordered blocks with contiguous column ranges.
///
/// The ordering tag constrains the pose stamps of the blocks before the
/// partition boundary (all blocks when no boundary is set). Blocks after the
/// boundary form the `x2` part and keep the order they were frozen in.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct BlockLayout {
    blocks: Vec<Block>,
    ordering: StateOrdering,
    partition_boundary: Option<usize>,
    offsets: Vec<usize>,
    index: HashMap<BlockKey, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawLayout {
    blocks: Vec<Block>,
    ordering: StateOrdering,
    partition_boundary: Option<usize>,
}

impl TryFrom<RawLayout> for BlockLayout {
    type Error = Error;
    fn try_from(raw: RawLayout) -> Result<Self> {
        BlockLayout::new(raw.blocks, raw.ordering, raw.partition_boundary)
    }
}

impl From<BlockLayout> for RawLayout {
    fn from(l: BlockLayout) -> Self {
        RawLayout { blocks: l.blocks, ordering: l.ordering, partition_boundary: l.partition_boundary }
    }
}

impl PartialEq for BlockLayout {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks
            && self.ordering == other.ordering
            && self.partition_boundary == other.partition_boundary
    }
}

impl BlockLayout {
    pub fn new(
        blocks: Vec<Block>,
        ordering: StateOrdering,
        partition_boundary: Option<usize>,
    ) -> Result<Self> {
        let mut layout = BlockLayout {
            blocks,
            ordering,
            partition_boundary,
            offsets: Vec::new(),
            index: HashMap::new(),
        };
        layout.rebuild()?;
        Ok(layout)
    }

    pub fn empty(ordering: StateOrdering) -> Self {
        BlockLayout::new(Vec::new(), ordering, None).expect("empty layout is valid")
    }

    fn rebuild(&mut self) -> Result<()> {
        self.offsets.clear();
        self.index.clear();
        let mut acc = 0;
        self.offsets.push(0);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.dim == 0 {
                return Err(Error::Layout(format!("block {} has zero dimension", b.key)));
            }
            if self.index.insert(b.key, i).is_some() {
                return Err(Error::Layout(format!("duplicate block {}", b.key)));
            }
            acc += b.dim;
            self.offsets.push(acc);
        }
        if let Some(p) = self.partition_boundary {
            if p > self.blocks.len() {
                return Err(Error::Layout(format!(
                    "partition boundary {p} beyond {} blocks",
                    self.blocks.len()
                )));
            }
        }
        self.check_ordering()
    }

    fn check_ordering(&self) -> Result<()> {
        let end = self.partition_boundary.unwrap_or(self.blocks.len());
        let mut last: Option<u32> = None;
        for b in self.blocks[..end].iter().filter(|b| b.key.is_pose()) {
            if let Some(prev) = last {
                let ok = match self.ordering {
                    StateOrdering::Chronological => b.stamp > prev,
                    StateOrdering::ReverseChronological => b.stamp < prev,
                };
                if !ok {
                    return Err(Error::Layout(format!(
                        "pose {} (stamp {}) breaks {:?} order",
                        b.key, b.stamp, self.ordering
                    )));
                }
            }
            last = Some(b.stamp);
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn ordering(&self) -> StateOrdering {
        self.ordering
    }

    pub fn partition_boundary(&self) -> Option<usize> {
        self.partition_boundary
    }

    pub fn index_of(&self, key: BlockKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.index.contains_key(&key)
    }

    pub fn block(&self, key: BlockKey) -> Option<&Block> {
        self.index_of(key).map(|i| &self.blocks[i])
    }

    /// Column range of block `i` (by position in the layout).
    pub fn range_at(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn range_of(&self, key: BlockKey) -> Result<Range<usize>> {
        let i = self.index_of(key).ok_or(Error::UnknownBlock(key))?;
        Ok(self.range_at(i))
    }

    /// First column of block index `i`; `offset(len())` is the total dimension.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Block index owning column `col`.
    pub fn block_at_column(&self, col: usize) -> usize {
        debug_assert!(col < self.total_dim());
        self.offsets.partition_point(|&o| o <= col) - 1
    }

    /// Column where the `x2` part starts (total dimension when unpartitioned).
    pub fn partition_column(&self) -> usize {
        self.offset(self.partition_boundary.unwrap_or(self.blocks.len()))
    }

    pub fn with_partition(&self, boundary: Option<usize>) -> Result<Self> {
        BlockLayout::new(self.blocks.clone(), self.ordering, boundary)
    }

    pub fn with_ordering(&self, ordering: StateOrdering) -> Result<Self> {
        BlockLayout::new(self.blocks.clone(), ordering, self.partition_boundary)
    }

    pub(crate) fn insert(&mut self, at: usize, block: Block) -> Result<()> {
        if at > self.blocks.len() {
            return Err(Error::Layout(format!("insert position {at} out of range")));
        }
        let saved = (self.blocks.clone(), self.partition_boundary);
        self.blocks.insert(at, block);
        // A block inserted at the boundary joins x1.
        if let Some(p) = self.partition_boundary.as_mut() {
            if at <= *p {
                *p += 1;
            }
        }
        if let Err(e) = self.rebuild() {
            self.blocks = saved.0;
            self.partition_boundary = saved.1;
            self.rebuild().expect("restored layout is valid");
            return Err(e);
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = BlockKey> + '_ {
        self.blocks.iter().map(|b| b.key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chrono(n: u32) -> BlockLayout {
        let blocks = (0..n).map(|i| Block::pose(i, i)).collect();
        BlockLayout::new(blocks, StateOrdering::Chronological, None).unwrap()
    }

    #[test]
    fn ranges_are_contiguous() {
        let mut blocks: Vec<Block> = (0..3).map(|i| Block::pose(i, i)).collect();
        blocks.insert(1, Block::feature(0, 0));
        let l = BlockLayout::new(blocks, StateOrdering::Chronological, Some(2)).unwrap();
        assert_eq!(l.total_dim(), 11);
        assert_eq!(l.range_at(0), 0..3);
        assert_eq!(l.range_of(BlockKey::Feature(0)).unwrap(), 3..5);
        assert_eq!(l.block_at_column(4), 1);
        assert_eq!(l.block_at_column(5), 2);
        assert_eq!(l.partition_column(), 5);
    }

    #[test]
    fn ordering_is_enforced() {
        let blocks = vec![Block::pose(1, 1), Block::pose(0, 0)];
        assert!(BlockLayout::new(blocks.clone(), StateOrdering::Chronological, None).is_err());
        assert!(BlockLayout::new(blocks.clone(), StateOrdering::ReverseChronological, None).is_ok());
        // only the x1 part is constrained
        let mut tail = blocks;
        tail.insert(0, Block::pose(5, 5));
        assert!(BlockLayout::new(tail, StateOrdering::Chronological, Some(1)).is_ok());
    }

    #[test]
    fn rejects_duplicates_and_bad_partition() {
        let blocks = vec![Block::pose(0, 0), Block::pose(0, 1)];
        assert!(BlockLayout::new(blocks, StateOrdering::Chronological, None).is_err());
        assert!(chrono(2).with_partition(Some(3)).is_err());
    }

    #[test]
    fn insert_keeps_invariants() {
        let mut l = chrono(2);
        assert!(l.insert(0, Block::pose(9, 9)).is_err());
        assert_eq!(l, chrono(2));
        l.insert(2, Block::pose(2, 2)).unwrap();
        assert_eq!(l.total_dim(), 9);
    }

    #[test]
    fn key_round_trip() {
        for k in [BlockKey::Pose(3), BlockKey::Feature(17)] {
            assert_eq!(k.to_string().parse::<BlockKey>().unwrap(), k);
        }
        assert!("x1".parse::<BlockKey>().is_err());
    }
}
