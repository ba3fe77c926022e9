//! Dense reference solvers used for verification: batch least squares via
//! the normal equations, least squares with some variables held fixed, a
//! covariance-form Schmidt-Kalman update, and the perfect-map baseline that
//! the consistency comparison runs against.
//!
//! These deliberately take a different algebraic path from the square-root
//! information estimator so that agreement between the two is meaningful.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::factor::{BlockKey, BlockLayout, MeasurementBlock, SquareRootState};
use crate::pipeline::{BackendJob, EstimatorKind, SessionConfig};
use crate::runner::{run_log, RunOptions, SimulationRun};
use crate::simulator::MeasurementLog;

/// One cost term `‖A x − b‖²` over the full state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTerm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl CostTerm {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Precondition("cost term rows and rhs differ in length".into()));
        }
        Ok(CostTerm { a, b })
    }

    /// The prior `‖R (x − x̂)‖²` held by a state, in layout order.
    pub fn from_state(state: &SquareRootState) -> Self {
        let r = state.to_dense();
        let x = DVector::from_vec(state.estimate());
        let b = &r * x;
        CostTerm { a: r, b }
    }

    /// `‖H (x − x̂) − r‖²` for a measurement linearized at `x_hat`.
    pub fn from_measurement(layout: &BlockLayout, meas: &MeasurementBlock, x_hat: &[f64]) -> Result<Self> {
        let (h, r) = meas.to_dense(layout)?;
        let b = r + &h * DVector::from_column_slice(x_hat);
        Ok(CostTerm { a: h, b })
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }
}

fn stack(terms: &[CostTerm]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = terms.first().map_or(0, CostTerm::dim);
    if terms.iter().any(|t| t.dim() != n) {
        return Err(Error::Precondition("cost terms have different state dimensions".into()));
    }
    let mut gram = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for t in terms {
        gram += t.a.transpose() * &t.a;
        g += t.a.transpose() * &t.b;
    }
    Ok((gram, g))
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let ch = Cholesky::new(m).ok_or_else(|| Error::Singular { column: 0, block: None })?;
    let min_d = (0..n).map(|i| ch.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
    if n > 0 && min_d * min_d <= 1e-13 * scale {
        return Err(Error::Precondition(format!("{what} is numerically rank deficient")));
    }
    Ok(ch)
}

/// Minimizer and posterior covariance of the summed cost terms.
pub fn dense_batch_ls(terms: &[CostTerm]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (gram, g) = stack(terms)?;
    let ch = cholesky(gram, "stacked system")?;
    Ok((ch.solve(&g), ch.inverse()))
}

/// Minimizer over the free variables with `fixed` variables
/// (index, value) held constant; fixed entries are returned as given.
pub fn conditional_ls(terms: &[CostTerm], fixed: &[(usize, f64)]) -> Result<DVector<f64>> {
    let (gram, g) = stack(terms)?;
    let n = gram.nrows();
    let mut is_fixed = vec![false; n];
    let mut x = DVector::zeros(n);
    for &(i, v) in fixed {
        is_fixed[i] = true;
        x[i] = v;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();
    let m = free.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (p, &i) in free.iter().enumerate() {
        b[p] = g[i] - (0..n).filter(|&j| is_fixed[j]).map(|j| gram[(i, j)] * x[j]).sum::<f64>();
        for (q, &j) in free.iter().enumerate() {
            a[(p, q)] = gram[(i, j)];
        }
    }
    let sol = cholesky(a, "free block")?.solve(&b);
    for (p, &i) in free.iter().enumerate() {
        x[i] = sol[p];
    }
    Ok(x)
}

/// Schmidt-Kalman update of a Gaussian prior with whitened measurements
/// `z = H x + v`, `v ~ N(0, I)`, correcting only the first `x1_dim` states.
///
/// The covariance is propagated in Joseph form, which stays valid for the
/// suboptimal gain.
pub fn dense_schmidt_kf(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    z: &DVector<f64>,
    x1_dim: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    if cov.shape() != (n, n) || h.ncols() != n || h.nrows() != z.len() || x1_dim > n {
        return Err(Error::Precondition("Schmidt update dimensions do not match".into()));
    }
    cholesky(cov.clone(), "prior covariance").map_err(|_| Error::Precondition("prior covariance is not positive definite".into()))?;
    let m = h.nrows();
    let s = h * cov * h.transpose() + DMatrix::identity(m, m);
    let s_ch = cholesky(s, "innovation covariance")?;
    let mut k = cov * h.transpose() * s_ch.inverse();
    for i in x1_dim..n {
        k.row_mut(i).fill(0.0);
    }
    let innov = z - h * mean;
    let new_mean = mean + &k * innov;
    let ikh = DMatrix::identity(n, n) - &k * h;
    let new_cov = &ikh * cov * ikh.transpose() + &k * k.transpose();
    Ok((new_mean, new_cov))
}

/// Rows `a·x ≈ b` keyed by block component, independent of any layout.
/// Linearized measurements are stored in this absolute form, so the system
/// can be solved in whatever layout the estimator ends up with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearSystem {
    pub rows: Vec<(Vec<(BlockKey, usize, f64)>, f64)>,
}

impl LinearSystem {
    /// Adds `‖H (x − x̂) − r‖²` with `x̂` given per component.
    pub fn add_linearized(&mut self, meas: &MeasurementBlock, at: impl Fn(BlockKey, usize) -> f64) {
        for r in &meas.rows {
            let b = r.residual + r.entries.iter().map(|&(k, c, v)| v * at(k, c)).sum::<f64>();
            self.rows.push((r.entries.clone(), b));
        }
    }

    /// Adds the prior `‖R (x − x̂)‖²` held by a state.
    pub fn add_state(&mut self, state: &SquareRootState) {
        let layout = state.layout();
        let key_at = |p: usize| {
            let i = layout.block_at_column(p);
            (layout.blocks()[i].key, p - layout.offset(i))
        };
        let x = state.estimate();
        for p in 0..state.total_dim() {
            if let Some(row) = state.row(p) {
                let b = row.iter().map(|&(j, v)| v * x[j]).sum();
                let entries = row.iter().map(|&(j, v)| {
                    let (k, c) = key_at(j);
                    (k, c, v)
                });
                self.rows.push((entries.collect(), b));
            }
        }
    }

    /// Adds the rows handed to the backend, which are relative to the job's
    /// linearization point.
    pub fn add_backend_job(&mut self, job: &BackendJob) {
        let mut comps = Vec::with_capacity(job.dim());
        for b in &job.blocks {
            comps.extend((0..b.dim).map(|c| (b.key, c)));
        }
        for r in &job.rows {
            let b = r.rhs + r.entries.iter().map(|&(j, v)| v * job.x_hat[j as usize]).sum::<f64>();
            let entries = r.entries.iter().map(|&(j, v)| (comps[j as usize].0, comps[j as usize].1, v)).collect();
            self.rows.push((entries, b));
        }
    }

    pub fn extend(&mut self, other: &LinearSystem) {
        self.rows.extend(other.rows.iter().cloned());
    }

    /// The system as one dense cost term over `layout`'s columns.
    pub fn cost_term(&self, layout: &BlockLayout) -> Result<CostTerm> {
        let n = layout.total_dim();
        let mut a = DMatrix::zeros(self.rows.len(), n);
        let mut b = DVector::zeros(self.rows.len());
        for (i, (entries, rhs)) in self.rows.iter().enumerate() {
            for &(k, c, v) in entries {
                a[(i, layout.range_of(k)?.start + c)] += v;
            }
            b[i] = *rhs;
        }
        CostTerm::new(a, b)
    }

    pub fn solve(&self, layout: &BlockLayout) -> Result<(DVector<f64>, DMatrix<f64>)> {
        dense_batch_ls(&[self.cost_term(layout)?])
    }
}

/// Replays `log` with the same pipeline settings, except that states mapped
/// before a loop closure are treated as exactly known: loop-closure rows
/// lose their old-map columns and the old map is never corrected.
pub fn perfect_map_baseline(log: &MeasurementLog, config: &SessionConfig, opts: RunOptions, seed: u64) -> Result<SimulationRun> {
    let config = SessionConfig { estimator: EstimatorKind::PerfectMap, ..config.clone() };
    run_log(log, &config, opts, seed)
}
