//! Measurement log: the replayable record of a simulated run.
//!
//! JSON lines. The first line is a header, the last a trailer counting the
//! lines between them. Every other line is a block declaration or a
//! measurement, each carrying its step; steps are non-decreasing and a
//! step's blocks precede its measurements.
//!
//! ```text
//! {"type":"header","format":"rise-measurement-log","version":1,"model":"nonlinear-2d"}
//! {"type":"block","step":0,"key":"p0"}
//! {"type":"measurement","step":0,"tag":"prior","kind":"prior","block":"p0","value":[0,0,0],"sigma":[0.001,0.001,0.001]}
//! {"type":"block","step":1,"key":"p1"}
//! {"type":"measurement","step":1,"tag":"odometry","kind":"odometry","from":"p0","to":"p1","value":[0.3,0,0],"sigma":[0.02,0.02,0.01]}
//! {"type":"block","step":1,"key":"f0"}
//! {"type":"measurement","step":1,"tag":"local-track","kind":"observation","pose":"p1","feature":"f0","value":[1.2,0.4],"sigma":[0.05,0.05]}
//! {"type":"end","records":5}
//! ```
//!
//! `odometry` and `observation` values are raw measurements interpreted by
//! the header's model. A `linear` record gives whitened rows `A x ≈ b`
//! directly as `(row, block, component, value)` triplets. A block may carry
//! an explicit initial estimate in `init`; otherwise it is initialized from
//! the first measurement that can determine it.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::MeasurementModel;
use crate::error::{Error, Result};
use crate::factor::{BlockKey, MeasurementTag};

pub const LOG_FORMAT: &str = "rise-measurement-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogBlock {
    pub key: BlockKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RecordKind {
    Prior { block: BlockKey, value: Vec<f64>, sigma: Vec<f64> },
    Odometry { from: BlockKey, to: BlockKey, value: [f64; 3], sigma: [f64; 3] },
    Observation { pose: BlockKey, feature: BlockKey, value: [f64; 2], sigma: [f64; 2] },
    Linear { triplets: Vec<(usize, BlockKey, usize, f64)>, rhs: Vec<f64> },
}

impl RecordKind {
    pub fn blocks(&self) -> Vec<BlockKey> {
        match self {
            RecordKind::Prior { block, .. } => vec![*block],
            RecordKind::Odometry { from, to, .. } => vec![*from, *to],
            RecordKind::Observation { pose, feature, .. } => vec![*pose, *feature],
            RecordKind::Linear { triplets, .. } => {
                let mut v: Vec<BlockKey> = triplets.iter().map(|t| t.1).collect();
                v.sort();
                v.dedup();
                v
            }
        }
    }

    fn sigmas(&self) -> &[f64] {
        match self {
            RecordKind::Prior { sigma, .. } => sigma,
            RecordKind::Odometry { sigma, .. } => sigma,
            RecordKind::Observation { sigma, .. } => sigma,
            RecordKind::Linear { .. } => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tag: MeasurementTag,
    #[serde(flatten)]
    pub kind: RecordKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogStep {
    pub step: u32,
    pub blocks: Vec<LogBlock>,
    pub records: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementLog {
    pub model: MeasurementModel,
    pub steps: Vec<LogStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line {
    Header { format: String, version: u32, model: MeasurementModel },
    Block { step: u32, #[serde(flatten)] block: LogBlock },
    Measurement { step: u32, #[serde(flatten)] record: LogRecord },
    End { records: usize },
}

impl MeasurementLog {
    pub fn record_count(&self) -> usize {
        self.steps.iter().map(|s| s.blocks.len() + s.records.len()).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &Line| {
            out.push_str(&serde_json::to_string(l).expect("log lines serialize"));
            out.push('\n');
        };
        push(&Line::Header { format: LOG_FORMAT.into(), version: LOG_VERSION, model: self.model });
        for s in &self.steps {
            for b in &s.blocks {
                push(&Line::Block { step: s.step, block: b.clone() });
            }
            for r in &s.records {
                push(&Line::Measurement { step: s.step, record: r.clone() });
            }
        }
        push(&Line::End { records: self.record_count() });
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }

    /// Parses a log, reporting the 1-based line of the first problem.
    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut model = None;
        let mut steps: Vec<LogStep> = Vec::new();
        let mut records = 0usize;
        let mut last_line = 0;
        let mut done = None;
        for (i, line) in reader.lines().enumerate() {
            let n = i + 1;
            last_line = n;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: n, message };
            if done.is_some() {
                return Err(err("content after the trailer".into()));
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            match (parsed, model) {
                (Line::Header { format, version, model: m }, None) => {
                    if format != LOG_FORMAT || version != LOG_VERSION {
                        return Err(err(format!("unsupported log `{format}` version {version}")));
                    }
                    model = Some(m);
                }
                (_, None) => return Err(err("missing header".into())),
                (Line::Header { .. }, Some(_)) => return Err(err("duplicate header".into())),
                (Line::End { records: count }, Some(m)) => {
                    if count != records {
                        return Err(err(format!("trailer counts {count} records, found {records}")));
                    }
                    done = Some(MeasurementLog { model: m, steps: std::mem::take(&mut steps) });
                }
                (Line::Block { step, block }, Some(_)) => {
                    let s = step_entry(&mut steps, step).map_err(err)?;
                    if !s.records.is_empty() {
                        return Err(err(format!("block {} declared after step {step}'s measurements", block.key)));
                    }
                    if let Some(init) = &block.init {
                        let dim = if block.key.is_pose() { 3 } else { 2 };
                        if init.len() != dim {
                            return Err(err(format!("block {} needs {dim} initial values", block.key)));
                        }
                    }
                    s.blocks.push(block);
                    records += 1;
                }
                (Line::Measurement { step, record }, Some(_)) => {
                    if record.kind.sigmas().iter().any(|s| !(*s > 0.0)) {
                        return Err(err("sigmas must be positive".into()));
                    }
                    if let RecordKind::Linear { triplets, rhs } = &record.kind {
                        if triplets.iter().any(|t| t.0 >= rhs.len()) {
                            return Err(err("triplet row beyond the right-hand side".into()));
                        }
                    }
                    step_entry(&mut steps, step).map_err(err)?.records.push(record);
                    records += 1;
                }
            }
        }
        done.ok_or_else(|| Error::Truncated(format!("log ends at line {last_line} without its trailer")))
    }
}

fn step_entry(steps: &mut Vec<LogStep>, step: u32) -> std::result::Result<&mut LogStep, String> {
    match steps.last().map(|s| s.step) {
        Some(last) if step < last => return Err(format!("step {step} after step {last}")),
        Some(last) if step == last => {}
        _ => steps.push(LogStep { step, ..Default::default() }),
    }
    Ok(steps.last_mut().expect("step entry"))
}
