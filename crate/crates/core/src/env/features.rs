use nalgebra::{DMatrix, DVector, RowDVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{eig_topk, matrix_from_text, matrix_to_text, numerical_rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    OneHot,
    Projected,
}

/// Time-homogeneous feature map `φ(h, s, a) = φ(s, a)` over a finite
/// state-action grid, stored as one feature row per pair `s·|A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    num_states: usize,
    num_actions: usize,
    table: DMatrix<f64>,
    projection: Option<DMatrix<f64>>,
}

impl FeatureMap {
    /// Indicator features `φ(s, a) = e_{s·|A|+a}`.
    pub fn one_hot(num_states: usize, num_actions: usize) -> Self {
        let n = num_states * num_actions;
        Self {
            kind: FeatureKind::OneHot,
            num_states,
            num_actions,
            table: DMatrix::identity(n, n),
            projection: None,
        }
    }

    /// Arbitrary feature table, one row per pair. Rows must have norm ≤ 1.
    pub fn from_table(num_states: usize, num_actions: usize, table: DMatrix<f64>) -> Result<Self> {
        if table.nrows() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                expected: num_states * num_actions,
                got: table.nrows(),
            });
        }
        if let Some(i) = (0..table.nrows()).find(|&i| table.row(i).norm() > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "feature row {i} has norm {} > 1",
                table.row(i).norm()
            )));
        }
        Ok(Self {
            kind: FeatureKind::Projected,
            num_states,
            num_actions,
            table,
            projection: None,
        })
    }

    /// `φ'(x) = Uᵀφ(x)` where `U` holds the top-`k` eigenvectors of the
    /// empirical feature covariance of `offline`, pooled over all steps.
    pub fn project(base: &FeatureMap, offline: &Dataset, k: usize) -> Result<Self> {
        if k == 0 || k > base.dim() {
            return Err(Error::InvalidArgument(format!(
                "projection dimension must lie in 1..={}, got {k}",
                base.dim()
            )));
        }
        let cov = base.empirical_covariance(offline)?;
        let rank = numerical_rank(&cov, 1e-10);
        if k > rank {
            return Err(Error::RankDeficient { requested: k, rank });
        }
        let (_, u) = eig_topk(&cov, k)?;
        Ok(Self::from_basis(base, &u))
    }

    /// Projection onto the columns of an orthonormal basis `u` (D×k).
    pub fn from_basis(base: &FeatureMap, u: &DMatrix<f64>) -> Self {
        Self {
            kind: FeatureKind::Projected,
            num_states: base.num_states,
            num_actions: base.num_actions,
            table: &base.table * u,
            projection: Some(u.transpose()),
        }
    }

    /// `(1/n) Σ φφᵀ` over every step of every trajectory.
    pub fn empirical_covariance(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut counts = vec![0usize; self.num_pairs()];
        let mut total = 0usize;
        for traj in data.trajectories() {
            for step in &traj.steps {
                counts[self.pair_index(step.state, step.action)] += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (pair, &c) in counts.iter().enumerate() {
            if c > 0 {
                let row = self.table.row(pair);
                cov.ger(
                    c as f64 / total as f64,
                    &row.transpose(),
                    &row.transpose(),
                    1.0,
                );
            }
        }
        Ok(cov)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn pair_index(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    pub fn projection(&self) -> Option<&DMatrix<f64>> {
        self.projection.as_ref()
    }

    /// All feature vectors as rows, indexed by pair.
    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn evaluate(&self, _h: usize, state: usize, action: usize) -> DVector<f64> {
        self.table.row(self.pair_index(state, action)).transpose()
    }

    pub fn row(&self, state: usize, action: usize) -> RowDVector<f64> {
        self.table.row(self.pair_index(state, action)).into_owned()
    }

    /// Short identifier recorded in dataset headers.
    pub fn reference(&self) -> String {
        match self.kind {
            FeatureKind::OneHot => format!("one-hot:{}", self.dim()),
            FeatureKind::Projected => format!("projected:{}", self.dim()),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.table.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// Projection matrix as text: one row per line, space-separated.
    pub fn projection_text(&self) -> Option<String> {
        self.projection.as_ref().map(matrix_to_text)
    }

    /// Inverse of [`projection_text`](Self::projection_text); rows must be
    /// orthonormal.
    pub fn from_projection_text(base: &FeatureMap, text: &str) -> Result<Self> {
        let p = matrix_from_text(text)?;
        if p.nrows() == 0 {
            return Err(Error::Parse {
                line: 1,
                message: "empty projection".into(),
            });
        }
        if p.ncols() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: p.ncols(),
            });
        }
        let gram = &p * p.transpose();
        let err = (gram - DMatrix::identity(p.nrows(), p.nrows())).amax();
        if err > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "projection rows are not orthonormal (error {err:e})"
            )));
        }
        Ok(Self::from_basis(base, &p.transpose()))
    }
}
