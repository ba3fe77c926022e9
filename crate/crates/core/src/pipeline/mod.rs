//! Two-mode SLAM pipeline over a square-root information state.
//!
//! Exploration keeps the current map in chronological order and updates all
//! of it (the frozen old map, if any, sits after the partition and is never
//! written). A loop closure switches to relocalization: the current map is
//! reversed, a recent window stays in the frontend and the rest, together
//! with the old map, is handed to a one-shot backend solve. The frontend then
//! updates only a window of recent states at the top of a reverse
//! chronological order until the backend answers and loop closures stop.

mod controller;
mod exploration;
mod relocalization;
mod session;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{BlockKey, BlockLayout, MeasurementBlock, MeasurementTag, SquareRootState, StateOrdering};

pub use controller::{mode_controller_step, StepInput, StepOutcome};
pub use exploration::{exploration_step, transition_to_exploration};
pub use relocalization::{
    apply_feedback, backend_solve, frontend_relocalization_step, transition_to_relocalization, BackendJob,
    FeedbackPacket, TransitionReport,
};
pub use session::{BackendMode, Session, SessionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Exploration,
    Relocalization,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Exploration => "exploration",
            Mode::Relocalization => "relocalization",
        }
    }
}

/// Which estimator the pipeline runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// The two-mode pipeline with partial updates and a backend.
    Rise,
    /// Every measurement is applied with the exact update, chronological order throughout.
    Optimal,
    /// As `Rise`, but previously mapped states are treated as exactly known
    /// while relocalizing.
    #[serde(alias = "perfect-map-baseline")]
    PerfectMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Recent poses kept in the updated window.
    pub window_poses: usize,
    pub max_tracks_per_step: usize,
    /// A track's feature block is replaced once it is this many steps old.
    pub max_track_length: usize,
    /// Steps without reobservation after which a sighting is a loop closure,
    /// and steps without loop closures before leaving relocalization.
    pub loop_gap: usize,
    /// Extend the window to cover features tracked at the current step.
    pub extend_window_to_tracks: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_poses: 10,
            max_tracks_per_step: 40,
            max_track_length: 20,
            loop_gap: 30,
            extend_window_to_tracks: true,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Params(m.to_string()));
        if self.window_poses == 0 || self.max_tracks_per_step == 0 || self.max_track_length == 0 || self.loop_gap == 0
        {
            return bad("window sizes must be positive");
        }
        if self.loop_gap <= self.max_track_length {
            return bad("loop_gap must exceed max_track_length");
        }
        Ok(())
    }

    /// Oldest stamp a local measurement may reference at `step` during exploration.
    pub fn horizon(&self, step: u32) -> u32 {
        step.saturating_sub(self.window_poses.max(self.max_track_length) as u32)
    }
}

/// Per-step record of work done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: u32,
    pub mode: Mode,
    pub eliminated_rows: usize,
    pub nnz: usize,
    pub dropped_norm: f64,
    pub state_dim: usize,
    pub backend_launched: bool,
    pub feedback_applied: bool,
    /// Seconds spent in the step; not reproducible, excluded from comparisons.
    pub wall_time: f64,
}

impl StepTelemetry {
    /// Equality on everything but wall time.
    pub fn same_work(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        &a == other
    }
}

/// Counters accumulated over the updates of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkCounters {
    pub eliminated_rows: usize,
    pub dropped_norm_sq: f64,
    pub flops: usize,
}

impl WorkCounters {
    pub(crate) fn add(&mut self, rows: usize, dropped: f64, flops: usize) {
        self.eliminated_rows += rows;
        self.dropped_norm_sq += dropped * dropped;
        self.flops += flops;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BackendSnapshot {
    pub id: u64,
    pub blocks: Vec<BlockKey>,
    pub dim: usize,
    pub applied: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineState {
    pub(crate) kind: EstimatorKind,
    pub(crate) mode: Mode,
    pub(crate) front: SquareRootState,
    pub(crate) config: WindowConfig,
    pub(crate) step: u32,
    /// Relocalization: block index where the backend segment starts.
    pub(crate) backend_start: usize,
    pub(crate) backend_snapshot: Option<BackendSnapshot>,
    pub(crate) last_loop_step: Option<u32>,
    pub(crate) next_snapshot: u64,
    /// Feature blocks referenced by local tracks at the current step.
    pub(crate) tracked: BTreeSet<BlockKey>,
    pub(crate) work: WorkCounters,
}

impl PipelineState {
    pub fn new(kind: EstimatorKind, config: WindowConfig) -> Result<Self> {
        config.validate()?;
        Ok(PipelineState {
            kind,
            mode: Mode::Exploration,
            front: SquareRootState::new(BlockLayout::empty(StateOrdering::Chronological)),
            config,
            step: 0,
            backend_start: 0,
            backend_snapshot: None,
            last_loop_step: None,
            next_snapshot: 1,
            tracked: BTreeSet::new(),
            work: WorkCounters::default(),
        })
    }

    /// Starts from an existing chronological state; blocks after the
    /// state's partition boundary are the frozen old map.
    pub fn from_state(kind: EstimatorKind, config: WindowConfig, state: SquareRootState, step: u32) -> Result<Self> {
        let mut ps = Self::new(kind, config)?;
        if state.layout().ordering() != StateOrdering::Chronological {
            return Err(Error::Mode("exploration starts from a chronological state".into()));
        }
        ps.front = state;
        ps.step = step;
        Ok(ps)
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> &SquareRootState {
        &self.front
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn last_loop_step(&self) -> Option<u32> {
        self.last_loop_step
    }

    /// Identifier of the backend snapshot awaiting feedback, if any.
    pub fn pending_snapshot(&self) -> Option<u64> {
        self.backend_snapshot.as_ref().filter(|s| !s.applied).map(|s| s.id)
    }

    pub fn has_backend_snapshot(&self) -> bool {
        self.backend_snapshot.is_some()
    }

    /// Blocks of the frozen part: the old map in exploration, the backend
    /// segment in relocalization.
    pub fn frozen_blocks(&self) -> Vec<BlockKey> {
        let from = self.frozen_start();
        self.front.layout().keys().skip(from).collect()
    }

    pub(crate) fn frozen_start(&self) -> usize {
        match self.mode {
            Mode::Exploration => self.front.layout().partition_boundary().unwrap_or(self.front.layout().len()),
            Mode::Relocalization => self.backend_start,
        }
    }

    /// Column where the frozen part starts.
    pub fn frozen_column(&self) -> usize {
        self.front.layout().offset(self.frozen_start())
    }

    /// Nonzeros linking active rows to frozen columns, as (row, column, value)
    /// in layout positions.
    pub fn cross_strip(&self) -> Vec<(usize, usize, f64)> {
        let fc = self.frozen_column();
        (0..fc)
            .filter_map(|p| self.front.row(p).map(|r| (p, r)))
            .flat_map(|(p, r)| r.into_iter().filter(|e| e.0 >= fc).map(move |(j, v)| (p, j, v)))
            .collect()
    }

    /// Whether a frozen block may enter a measurement as a constant.
    pub(crate) fn is_frozen(&self, key: BlockKey) -> bool {
        self.front.layout().index_of(key).is_some_and(|i| i >= self.frozen_start())
    }

    /// Number of leading blocks forming the update window, at most `limit`.
    pub(crate) fn window_len(&self, layout: &BlockLayout, limit: usize) -> usize {
        let mut poses = 0;
        let mut end = 0;
        for (i, b) in layout.blocks()[..limit].iter().enumerate() {
            if b.key.is_pose() {
                poses += 1;
                if poses == self.config.window_poses {
                    end = i + 1;
                    break;
                }
            }
            end = i + 1;
        }
        if self.config.extend_window_to_tracks {
            for &k in &self.tracked {
                if let Some(i) = layout.index_of(k).filter(|&i| i < limit) {
                    end = end.max(i + 1);
                }
            }
        }
        end
    }

    pub(crate) fn record_tracks(&mut self, meas: &[MeasurementBlock]) {
        for m in meas.iter().filter(|m| m.tag == MeasurementTag::LocalTrack) {
            self.tracked.extend(m.blocks().into_iter().filter(|k| !k.is_pose()));
        }
    }

    /// Eliminated rows and dropped norm accumulated since the last call.
    pub fn take_work(&mut self) -> WorkCounters {
        std::mem::take(&mut self.work)
    }

    /// Checks the mode/ordering coupling.
    pub fn check_invariants(&self) -> Result<()> {
        let want = match (self.kind, self.mode) {
            (_, Mode::Exploration) => StateOrdering::Chronological,
            (_, Mode::Relocalization) => StateOrdering::ReverseChronological,
        };
        if self.front.layout().ordering() != want {
            return Err(Error::Mode(format!("{} mode with {:?} layout", self.mode.as_str(), self.front.layout().ordering())));
        }
        if self.mode == Mode::Exploration && self.backend_snapshot.is_some() {
            return Err(Error::Mode("backend snapshot held during exploration".into()));
        }
        if !self.front.is_upper_triangular() {
            return Err(Error::Mode("factor lost upper-triangular form".into()));
        }
        Ok(())
    }
}

/// Stacks several measurement blocks into one.
pub(crate) fn merge(meas: &[MeasurementBlock]) -> MeasurementBlock {
    let tag = meas.first().map_or(MeasurementTag::LocalTrack, |m| m.tag);
    MeasurementBlock::new(tag, meas.iter().flat_map(|m| m.rows.iter().cloned()).collect())
}
