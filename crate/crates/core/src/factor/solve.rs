//! Triangular solves.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::qr::StackRow;
use crate::error::{Error, Result};

/// Sparse square upper-triangular matrix with natural column indices.
/// Row `i` starts at its diagonal entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpperTriangular {
    rows: Vec<Vec<(u32, f64)>>,
}

impl UpperTriangular {
    /// Rows must be sorted by column, start at or after their own index, and
    /// reference columns below `rows.len()`.
    pub fn new(rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.first().is_some_and(|e| (e.0 as usize) < i)
                || row.windows(2).any(|w| w[0].0 >= w[1].0)
                || row.last().is_some_and(|e| e.0 as usize >= n)
            {
                return Err(Error::Precondition(format!("row {i} is not upper triangular")));
            }
        }
        Ok(UpperTriangular { rows })
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Precondition("matrix is not square".into()));
        }
        let n = m.nrows();
        let rows = (0..n)
            .map(|i| {
                if (0..i).any(|j| m[(i, j)] != 0.0) {
                    return Err(Error::Precondition(format!("entry below the diagonal in row {i}")));
                }
                Ok((i..n).filter(|&j| m[(i, j)] != 0.0).map(|j| (j as u32, m[(i, j)])).collect())
            })
            .collect::<Result<_>>()?;
        Ok(UpperTriangular { rows })
    }

    /// Collects `(row index, row)` pairs from an elimination whose columns
    /// are natural indices offset by `base`.
    pub(crate) fn from_stack_rows(n: usize, rows: &[(usize, StackRow)], base: usize) -> Result<Self> {
        let mut out = vec![Vec::new(); n];
        for (k, r) in rows {
            out[k - base] = r.entries.iter().map(|&(c, v)| (c - base as u32, v)).collect();
        }
        Self::new(out)
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(u32, f64)>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        match self.rows[i].first() {
            Some(&(c, v)) if c as usize == i => v,
            _ => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j as usize)] = v;
            }
        }
        m
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(j, a)| a * v[j as usize]).sum()).collect()
    }
}

/// Solves `R y = rhs`.
pub fn back_substitute(r: &UpperTriangular, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = r.dim();
    if rhs.len() != n {
        return Err(Error::Precondition(format!("rhs has {} entries, factor {n}", rhs.len())));
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let d = r.diagonal(i);
        if d == 0.0 {
            return Err(Error::Singular { column: i, block: None });
        }
        let tail: f64 = r.rows[i][1..].iter().map(|&(j, v)| v * y[j as usize]).sum();
        y[i] = (rhs[i] - tail) / d;
    }
    Ok(y)
}

/// Solves `Rᵀ y = rhs`.
pub fn forward_substitute_transpose(r: &UpperTriangular, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = r.dim();
    if rhs.len() != n {
        return Err(Error::Precondition(format!("rhs has {} entries, factor {n}", rhs.len())));
    }
    let mut acc = rhs.to_vec();
    for i in 0..n {
        let d = r.diagonal(i);
        if d == 0.0 {
            return Err(Error::Singular { column: i, block: None });
        }
        acc[i] /= d;
        let yi = acc[i];
        for &(j, v) in &r.rows[i][1..] {
            acc[j as usize] -= v * yi;
        }
    }
    Ok(acc)
}
