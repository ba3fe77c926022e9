//! A pipeline run with its backend, either solved inline or on a worker
//! thread. Feedback is applied at a pinned step, so both modes produce the
//! same results.

use std::collections::HashMap;
use std::thread::JoinHandle;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    apply_feedback, backend_solve, mode_controller_step, BackendJob, EstimatorKind, FeedbackPacket, PipelineState,
    StepInput, StepOutcome, StepTelemetry, WindowConfig,
};
use crate::error::{Error, Result};
use crate::estimator::{block_positions, covariance_with};
use crate::factor::qr::{qr_eliminate, Natural};
use crate::factor::state::Row;
use crate::factor::{BlockKey, SquareRootState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    /// Solve the backend job on the calling thread when it is launched.
    #[default]
    #[serde(alias = "single-context")]
    Inline,
    /// Solve it on a worker thread while the frontend keeps stepping.
    #[serde(alias = "concurrent")]
    Threaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub estimator: EstimatorKind,
    pub window: WindowConfig,
    pub backend: BackendMode,
    /// Feedback from a job launched at step `s` is applied at the start of
    /// step `s + feedback_delay`.
    pub feedback_delay: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            estimator: EstimatorKind::Rise,
            window: WindowConfig::default(),
            backend: BackendMode::Inline,
            feedback_delay: 5,
        }
    }
}

enum Solver {
    Done(Result<FeedbackPacket>),
    Running(JoinHandle<Result<FeedbackPacket>>),
}

struct Pending {
    apply_at: u32,
    solver: Solver,
    /// Backend factor rows keyed by column id, used to report covariances
    /// until the feedback lands.
    eval_rows: HashMap<u32, Row>,
}

pub struct Session {
    ps: PipelineState,
    config: SessionConfig,
    pending: Option<Pending>,
    telemetry: Vec<StepTelemetry>,
    jobs_launched: usize,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        if config.feedback_delay == 0 {
            return Err(Error::Params("feedback_delay must be at least 1".into()));
        }
        let ps = PipelineState::new(config.estimator, config.window.clone())?;
        Ok(Session { ps, config, pending: None, telemetry: Vec::new(), jobs_launched: 0 })
    }

    pub fn pipeline(&self) -> &PipelineState {
        &self.ps
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn telemetry(&self) -> &[StepTelemetry] {
        &self.telemetry
    }

    pub fn jobs_launched(&self) -> usize {
        self.jobs_launched
    }

    pub fn feedback_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Applies due feedback, then runs the step.
    pub fn step(&mut self, input: &StepInput) -> Result<StepOutcome> {
        let applied = match &self.pending {
            Some(p) if input.step >= p.apply_at => {
                self.land_feedback()?;
                true
            }
            _ => false,
        };
        let mut out = mode_controller_step(&mut self.ps, input)?;
        out.telemetry.feedback_applied = applied;
        if let Some(job) = &out.job {
            self.launch(job.clone(), input.step)?;
        }
        out.telemetry.nnz = self.ps.front.nnz();
        self.telemetry.push(out.telemetry.clone());
        Ok(out)
    }

    /// Applies any feedback still outstanding.
    pub fn finish(&mut self) -> Result<bool> {
        if self.pending.is_some() {
            self.land_feedback()?;
            return Ok(true);
        }
        Ok(false)
    }

    fn launch(&mut self, job: BackendJob, step: u32) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::Mode("a backend job is already running".into()));
        }
        let eval_rows = self.backend_rows_by_id(&job)?;
        let solver = match self.config.backend {
            BackendMode::Inline => Solver::Done(backend_solve(&job)),
            BackendMode::Threaded => Solver::Running(std::thread::spawn(move || backend_solve(&job))),
        };
        self.jobs_launched += 1;
        self.pending = Some(Pending { apply_at: step + self.config.feedback_delay, solver, eval_rows });
        Ok(())
    }

    fn backend_rows_by_id(&self, job: &BackendJob) -> Result<HashMap<u32, Row>> {
        let dim = job.dim();
        let mut rows: Vec<_> = job.rows.iter().filter(|r| !r.entries.is_empty()).cloned().collect();
        rows.sort_by_key(|r| r.entries[0].0);
        let res = qr_eliminate(rows, 0..dim, &Natural)?;
        let st = &self.ps.front;
        let bc = st.layout().offset(self.ps.backend_start);
        Ok(res
            .factor_rows
            .into_iter()
            .map(|(k, r)| {
                let row = r.entries.into_iter().map(|(j, v)| (st.col_at[bc + j as usize], v)).collect();
                (st.col_at[bc + k], row)
            })
            .collect())
    }

    fn land_feedback(&mut self) -> Result<()> {
        let p = self.pending.take().expect("pending feedback");
        let packet = match p.solver {
            Solver::Done(r) => r?,
            Solver::Running(h) => h.join().map_err(|_| Error::Mode("backend worker panicked".into()))??,
        };
        apply_feedback(&mut self.ps, &packet)
    }

    /// Covariance the estimator reports for `blocks`. The perfect-map
    /// baseline conditions on the frozen part; while backend feedback is
    /// outstanding the backend's factor stands in for the removed rows.
    pub fn covariance(&self, blocks: &[BlockKey]) -> Result<DMatrix<f64>> {
        let st: &SquareRootState = &self.ps.front;
        let pos = block_positions(st, blocks)?;
        let end = match self.ps.kind {
            EstimatorKind::PerfectMap => self.ps.frozen_column(),
            _ => st.total_dim(),
        };
        match &self.pending {
            Some(p) if self.ps.kind != EstimatorKind::PerfectMap => {
                covariance_with(st, &pos, end, &|id| st.row_by_id(id).or_else(|| p.eval_rows.get(&id)))
            }
            _ => covariance_with(st, &pos, end, &|id| st.row_by_id(id)),
        }
    }
}
