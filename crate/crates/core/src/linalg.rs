//! Dense numerical core: regularized covariance accumulators with a
//! maintained inverse and log-determinant, ridge solves, and symmetric
//! eigendecompositions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of rank-1 updates between drift checks of the maintained inverse.
pub const DEFAULT_REFRESH_INTERVAL: usize = 512;

const INVERSE_DRIFT_TOL: f64 = 1e-7;

/// Regularized covariance `Σ = Σᵢ wᵢ φᵢφᵢᵀ + λI` together with `Σ⁻¹`,
/// `log det Σ` and the weighted target vector `b = Σᵢ wᵢ yᵢ φᵢ`.
///
/// The inverse is kept current with rank-1 updates. Every
/// `refresh_interval` updates the product `Σ·Σ⁻¹` is checked against the
/// identity and the inverse is re-factorized if it has drifted.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    lambda: f64,
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
    target: DVector<f64>,
    count: usize,
    refresh_interval: usize,
    since_check: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be positive and finite, got {lambda}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        Ok(Self {
            lambda,
            matrix: DMatrix::identity(dim, dim) * lambda,
            inverse: DMatrix::identity(dim, dim) / lambda,
            log_det: dim as f64 * lambda.ln(),
            target: DVector::zeros(dim),
            count: 0,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            since_check: 0,
        })
    }

    pub fn with_refresh_interval(mut self, interval: usize) -> Self {
        self.refresh_interval = interval.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn check_dim(&self, phi: &DVector<f64>) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: phi.len(),
            });
        }
        Ok(())
    }

    /// Adds `weight·φφᵀ` to the covariance and `weight·y·φ` to the target.
    pub fn update(&mut self, phi: &DVector<f64>, weight: f64, target_value: f64) -> Result<()> {
        self.check_dim(phi)?;
        if !weight.is_finite() || !target_value.is_finite() || phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("accumulator update"));
        }
        if weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sample weight must be nonnegative, got {weight}"
            )));
        }
        self.count += 1;
        if weight == 0.0 {
            return Ok(());
        }

        let u = &self.inverse * phi;
        let quad = phi.dot(&u);
        let denom = 1.0 + weight * quad;
        self.inverse.ger(-weight / denom, &u, &u, 1.0);
        self.matrix.ger(weight, phi, phi, 1.0);
        self.log_det += denom.ln();
        self.target.axpy(weight * target_value, phi, 1.0);

        self.since_check += 1;
        if self.since_check >= self.refresh_interval {
            self.since_check = 0;
            if self.inverse_drift() > INVERSE_DRIFT_TOL {
                self.refactorize();
            }
        }
        Ok(())
    }

    /// Covariance-only update; the target vector is left untouched.
    pub fn add(&mut self, phi: &DVector<f64>, weight: f64) -> Result<()> {
        self.update(phi, weight, 0.0)
    }

    /// Largest absolute entry of `Σ·Σ⁻¹ − I`.
    pub fn inverse_drift(&self) -> f64 {
        let prod = &self.matrix * &self.inverse;
        let n = prod.nrows();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let e = if i == j {
                    prod[(i, j)] - 1.0
                } else {
                    prod[(i, j)]
                };
                worst = worst.max(e.abs());
            }
        }
        worst
    }

    /// Recomputes the inverse and log-determinant from `Σ` directly.
    pub fn refactorize(&mut self) {
        // Σ ⪰ λI with λ > 0, so Cholesky cannot fail short of NaNs.
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .expect("regularized covariance must be positive definite");
        self.log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|x| x.ln())
                .sum::<f64>();
        self.inverse = chol.inverse();
    }

    /// Elliptic norm `√(φᵀΣ⁻¹φ)`.
    pub fn bonus(&self, phi: &DVector<f64>) -> Result<f64> {
        self.check_dim(phi)?;
        Ok(quad_form(&self.inverse, phi).max(0.0).sqrt())
    }

    /// `Σ⁻¹ b` for the accumulated target.
    pub fn ridge_solve(&self) -> DVector<f64> {
        self.solve(&self.target)
    }

    /// `Σ⁻¹ rhs`, falling back to a fresh factorization when the maintained
    /// inverse leaves a residual above `1e-7·(1 + ‖rhs‖)`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let w = &self.inverse * rhs;
        let residual = (&self.matrix * &w - rhs).norm();
        if residual <= 1e-7 * (1.0 + rhs.norm()) {
            return w;
        }
        self.matrix
            .clone()
            .cholesky()
            .expect("regularized covariance must be positive definite")
            .solve(rhs)
    }

    /// Replaces the target vector, e.g. when regression targets are
    /// re-evaluated against a new value function.
    pub fn set_target(&mut self, target: DVector<f64>) -> Result<()> {
        if target.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: target.len(),
            });
        }
        self.target = target;
        Ok(())
    }

    /// Checkpoint text: a `λ count` line, the `d` rows of `Σ`, then `b`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.lambda, self.count);
        out.push_str(&matrix_to_text(&self.matrix));
        out.push_str(&matrix_to_text(&DMatrix::from_row_slice(
            1,
            self.dim(),
            self.target.as_slice(),
        )));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = parse_rows(text)?;
        if rows.len() < 3 {
            return Err(Error::Parse {
                line: rows.len() + 1,
                message: "accumulator checkpoint needs header, matrix and target rows".into(),
            });
        }
        let header = &rows[0];
        if header.len() != 2 {
            return Err(Error::Parse {
                line: 1,
                message: "expected `lambda count`".into(),
            });
        }
        let lambda = header[0];
        let count = header[1];
        if count < 0.0 || count.fract() != 0.0 {
            return Err(Error::Parse {
                line: 1,
                message: format!("invalid sample count {count}"),
            });
        }
        let dim = rows.len() - 2;
        let mut matrix = DMatrix::zeros(dim, dim);
        for (i, row) in rows[1..=dim].iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("expected {dim} entries, found {}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                matrix[(i, j)] = *v;
            }
        }
        let target_row = &rows[dim + 1];
        if target_row.len() != dim {
            return Err(Error::Parse {
                line: dim + 2,
                message: format!("expected {dim} target entries, found {}", target_row.len()),
            });
        }
        let mut acc = Self::new(dim, lambda)?;
        if matrix.clone().cholesky().is_none() {
            return Err(Error::Parse {
                line: 2,
                message: "covariance is not positive definite".into(),
            });
        }
        acc.matrix = matrix;
        acc.target = DVector::from_vec(target_row.clone());
        acc.count = count as usize;
        acc.refactorize();
        Ok(acc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// `φᵀ M φ`.
pub fn quad_form(m: &DMatrix<f64>, phi: &DVector<f64>) -> f64 {
    let n = phi.len();
    let mut total = 0.0;
    for j in 0..n {
        let pj = phi[j];
        if pj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut acc = 0.0;
        for i in 0..n {
            acc += phi[i] * col[i];
        }
        total += acc * pj;
    }
    total
}

/// `diag(F M Fᵀ)` for a row-feature matrix `F`: the quadratic form of every
/// row at once.
pub fn row_quad_forms(features: &DMatrix<f64>, m: &DMatrix<f64>) -> Vec<f64> {
    let fm = features * m;
    fm.row_iter()
        .zip(features.row_iter())
        .map(|(a, b)| a.dot(&b))
        .collect()
}

/// `min(max(x, lo), hi)`.
pub fn clamp(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "clamp bounds out of order: lo = {lo}, hi = {hi}"
        )));
    }
    Ok(x.max(lo).min(hi))
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues in descending order
/// and eigenvectors as orthonormal columns.
pub fn eig_topk(m: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m.ncols(),
        });
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..={d}, got {k}"
        )));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * m.amax().max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(d, k);
    for (col, &i) in order[..k].iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// All eigenvalues of a symmetric matrix in descending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Number of eigenvalues above `tol·max(1, λ_max)`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let vals = sym_eigenvalues(m);
    let scale = vals.first().copied().unwrap_or(0.0).abs().max(1.0);
    vals.iter().filter(|v| **v > tol * scale).count()
}

/// One row per line, space-separated, shortest round-trip decimal form.
pub fn matrix_to_text(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("invalid number `{tok}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn matrix_from_text(text: &str) -> Result<DMatrix<f64>> {
    let rows = parse_rows(text)?;
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::Parse {
            line: i + 1,
            message: format!("ragged row, expected {ncols} entries"),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn save_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, matrix_to_text(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    matrix_from_text(&text)
}
