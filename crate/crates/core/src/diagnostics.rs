//! Coverage and concentrability diagnostics, and exact / Monte Carlo
//! policy evaluation.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{rollout, Dataset, DeterministicPolicy, Label, Policy};
use crate::env::{Environment, FeatureMap, TabularMdpSpec};
use crate::error::{Error, Result};
use crate::linalg::{eig_topk, numerical_rank, row_quad_forms, sym_eigenvalues};
use crate::qfunc::QTable;
use crate::rng::substream;

/// Residual below which a feature counts as lying in a subspace.
pub const MEMBERSHIP_TOL: f64 = 1e-6;

/// Eigenvalues at or below this are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageMetrics {
    /// `1/λ_min(Λ)`.
    pub inv_lambda_min: f64,
    /// `max_φ φᵀΛ⁻¹φ` over the supplied feature rows.
    pub max_bonus_sq: f64,
}

pub fn coverage_metrics(lambda: &DMatrix<f64>, features: &DMatrix<f64>) -> Result<CoverageMetrics> {
    if features.nrows() == 0 {
        return Err(Error::InvalidArgument("feature set is empty".into()));
    }
    if features.ncols() != lambda.nrows() {
        return Err(Error::DimensionMismatch {
            expected: lambda.nrows(),
            got: features.ncols(),
        });
    }
    let min_eig = *sym_eigenvalues(lambda).last().expect("nonempty matrix");
    let inv = lambda
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("coverage matrix is not positive definite".into()))?
        .inverse();
    let max_bonus_sq = row_quad_forms(features, &inv)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CoverageMetrics {
        inv_lambda_min: 1.0 / min_eig,
        max_bonus_sq,
    })
}

/// A partial coefficient together with its degenerate cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Value(f64),
    /// The relevant eigenvalue vanished.
    Infinite,
    /// The partition side is empty.
    Undefined,
}

impl Coefficient {
    pub fn value(self) -> Option<f64> {
        match self {
            Coefficient::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Coefficient::Value(_) => "",
            Coefficient::Infinite => "infinite",
            Coefficient::Undefined => "undefined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Off,
    On,
}

/// Split of `[H]×S×A` into an offline-covered and an online part, with
/// orthonormal bases of the spans of each part's features.
#[derive(Debug, Clone)]
pub struct Partition {
    horizon: usize,
    num_pairs: usize,
    membership: Vec<Side>,
    basis_off: DMatrix<f64>,
    basis_on: DMatrix<f64>,
}

impl Partition {
    /// Builds a partition from per-`(h, pair)` membership, deriving both
    /// bases from the member features.
    pub fn from_membership(
        fmap: &FeatureMap,
        horizon: usize,
        membership: Vec<Side>,
    ) -> Result<Self> {
        let n = fmap.num_pairs();
        if membership.len() != horizon * n {
            return Err(Error::DimensionMismatch {
                expected: horizon * n,
                got: membership.len(),
            });
        }
        let span = |side: Side| {
            let mut gram = DMatrix::zeros(fmap.dim(), fmap.dim());
            for (i, m) in membership.iter().enumerate() {
                if *m == side {
                    let phi = fmap.table().row(i % n).transpose();
                    gram += &phi * phi.transpose();
                }
            }
            span_basis(&gram)
        };
        Ok(Self {
            horizon,
            num_pairs: n,
            basis_off: span(Side::Off),
            basis_on: span(Side::On),
            membership,
        })
    }

    pub fn side(&self, h: usize, pair: usize) -> Side {
        self.membership[h * self.num_pairs + pair]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn basis_off(&self) -> &DMatrix<f64> {
        &self.basis_off
    }

    pub fn basis_on(&self) -> &DMatrix<f64> {
        &self.basis_on
    }

    pub fn d_off(&self) -> usize {
        self.basis_off.ncols()
    }

    pub fn d_on(&self) -> usize {
        self.basis_on.ncols()
    }

    pub fn count(&self, side: Side) -> usize {
        self.membership.iter().filter(|m| **m == side).count()
    }
}

/// Orthonormal basis of the range of a PSD Gram matrix.
fn span_basis(gram: &DMatrix<f64>) -> DMatrix<f64> {
    let d = gram.nrows();
    let rank = numerical_rank(gram, 1e-10);
    if rank == 0 {
        return DMatrix::zeros(d, 0);
    }
    eig_topk(gram, rank).expect("gram matrix is symmetric").1
}

/// `Φ_off` is spanned by the top-`k` eigenvectors of the pooled offline
/// feature covariance; a pair is offline iff its feature lies in `Φ_off`
/// up to [`MEMBERSHIP_TOL`].
pub fn partition_from_eigencut(data: &Dataset, fmap: &FeatureMap, k: usize) -> Result<Partition> {
    if k == 0 || k > fmap.dim() {
        return Err(Error::InvalidArgument(format!(
            "eigencut size must lie in 1..={}, got {k}",
            fmap.dim()
        )));
    }
    let cov = fmap.empirical_covariance(data)?;
    let rank = numerical_rank(&cov, 1e-10);
    if k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    let (_, u) = eig_topk(&cov, k)?;
    let horizon = data.horizon();
    let table = fmap.table();
    let proj = table * &u * u.transpose();
    let per_pair: Vec<Side> = (0..fmap.num_pairs())
        .map(|i| {
            let resid = (table.row(i) - proj.row(i)).norm();
            if resid <= MEMBERSHIP_TOL {
                Side::Off
            } else {
                Side::On
            }
        })
        .collect();
    let membership = (0..horizon)
        .flat_map(|_| per_pair.iter().copied())
        .collect();
    let mut part = Partition::from_membership(fmap, horizon, membership)?;
    part.basis_off = u;
    Ok(part)
}

/// `Σ_x μ(x) (Uᵀφ(x))(Uᵀφ(x))ᵀ` for an occupancy over pairs.
fn projected_second_moment(
    fmap: &FeatureMap,
    basis: &DMatrix<f64>,
    occupancy: &[f64],
) -> DMatrix<f64> {
    let reduced = fmap.table() * basis;
    let k = basis.ncols();
    let mut m = DMatrix::zeros(k, k);
    for (i, &mass) in occupancy.iter().enumerate() {
        if mass > 0.0 {
            let v = reduced.row(i).transpose();
            m.ger(mass, &v, &v, 1.0);
        }
    }
    m
}

/// `max_h 1 / λ_min(E_{μ_h}[(Uᵀφ)(Uᵀφ)ᵀ])` for an orthonormal basis `U`.
fn worst_inverse_eigen(
    fmap: &FeatureMap,
    basis: &DMatrix<f64>,
    occupancy: &[Vec<f64>],
) -> Coefficient {
    if basis.ncols() == 0 {
        return Coefficient::Undefined;
    }
    let mut worst = 0.0_f64;
    for mu in occupancy {
        let m = projected_second_moment(fmap, basis, mu);
        let lmin = *sym_eigenvalues(&m).last().expect("nonempty");
        if lmin <= EIGEN_FLOOR {
            return Coefficient::Infinite;
        }
        worst = worst.max(1.0 / lmin);
    }
    Coefficient::Value(worst)
}

/// Partial all-policy concentrability of the offline side under the
/// per-step occupancies `occupancy[h][pair]`.
pub fn partial_concentrability_off(
    partition: &Partition,
    fmap: &FeatureMap,
    occupancy: &[Vec<f64>],
) -> Coefficient {
    worst_inverse_eigen(fmap, &partition.basis_off, occupancy)
}

/// Per-step empirical state-action frequencies of a dataset.
pub fn empirical_occupancy(data: &Dataset, fmap: &FeatureMap) -> Vec<Vec<f64>> {
    let mut occ = vec![vec![0.0; fmap.num_pairs()]; data.horizon()];
    let n = data.len().max(1) as f64;
    for t in data.trajectories() {
        for s in &t.steps {
            occ[s.h][fmap.pair_index(s.state, s.action)] += 1.0 / n;
        }
    }
    occ
}

/// Exact per-step state-action occupancy `d^π_h(s, a)`.
pub fn occupancy(spec: &TabularMdpSpec, policy: &dyn Policy) -> Vec<Vec<f64>> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let mut state_dist = spec.initial_distribution().to_vec();
    let mut out = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut occ = vec![0.0; ns * na];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if state_dist[s] == 0.0 {
                continue;
            }
            let pi = policy.distribution(h, s);
            for a in 0..na {
                let mass = state_dist[s] * pi[a];
                if mass == 0.0 {
                    continue;
                }
                occ[s * na + a] = mass;
                for (sp, p) in spec.transition(h, s, a).iter().enumerate() {
                    next[sp] += mass * p;
                }
            }
        }
        out.push(occ);
        state_dist = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverabilityCheck {
    /// Smallest `max_h 1/λ_{d_on}` attained by any searched policy.
    pub c_on_upper: Coefficient,
    /// `c_on_upper ≤ d_on·(1 + 1e-6)`; `false` is inconclusive.
    pub bound_holds: bool,
    pub d_on: usize,
    /// Number of candidate policies evaluated.
    pub evaluated: usize,
}

impl CoverabilityCheck {
    pub fn verdict(&self) -> &'static str {
        if self.d_on == 0 {
            "trivial"
        } else if self.bound_holds {
            "verified"
        } else {
            "inconclusive"
        }
    }
}

/// Searches for a policy with small partial coverability on the online
/// side: uniform, constant-action and pair-reaching policies, then
/// Frank–Wolfe over mixtures of occupancies on the D-optimal design
/// objective `Σ_h log det(U_onᵀ M_h U_on)`, each step's best response
/// computed by exact dynamic programming.
pub fn coverability_check_on(
    env: &dyn Environment,
    fmap: &FeatureMap,
    partition: &Partition,
    search_budget: usize,
) -> Result<CoverabilityCheck> {
    let spec = env.tabular().ok_or(Error::NotTabular)?;
    let d_on = partition.d_on();
    if d_on == 0 {
        return Ok(CoverabilityCheck {
            c_on_upper: Coefficient::Undefined,
            bound_holds: true,
            d_on,
            evaluated: 0,
        });
    }
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let basis = partition.basis_on();
    let mut best: Option<f64> = None;
    let mut evaluated = 0;
    let mut consider = |occ: &[Vec<f64>], best: &mut Option<f64>| {
        evaluated += 1;
        if let Coefficient::Value(v) = worst_inverse_eigen(fmap, basis, occ) {
            if best.is_none_or(|b| v < b) {
                *best = Some(v);
            }
        }
    };

    let mut seeds: Vec<Vec<Vec<f64>>> = vec![occupancy(
        spec,
        &crate::dataset::UniformPolicy { num_actions: na },
    )];
    for a in 0..na {
        seeds.push(occupancy(
            spec,
            &DeterministicPolicy::constant(horizon, ns, na, a),
        ));
    }
    // Policies maximizing the probability of hitting each online pair.
    let reduced = fmap.table() * basis;
    for pair in 0..fmap.num_pairs() {
        if reduced.row(pair).norm() <= MEMBERSHIP_TOL {
            continue;
        }
        let reward: Vec<Vec<f64>> = (0..horizon)
            .map(|_| {
                (0..fmap.num_pairs())
                    .map(|x| f64::from(u8::from(x == pair)))
                    .collect()
            })
            .collect();
        let q = optimal_q_with_reward(spec, &reward);
        seeds.push(occupancy(spec, &q.greedy_policy()));
    }
    for occ in &seeds {
        consider(occ, &mut best);
    }

    // Frank–Wolfe on mixtures, started from the average of the seeds.
    let mut mix: Vec<Vec<f64>> = vec![vec![0.0; fmap.num_pairs()]; horizon];
    for occ in &seeds {
        for (m, o) in mix.iter_mut().zip(occ) {
            for (a, b) in m.iter_mut().zip(o) {
                *a += b / seeds.len() as f64;
            }
        }
    }
    consider(&mix, &mut best);
    let ridge = 1e-9;
    for t in 0..search_budget {
        let reward: Vec<Vec<f64>> = mix
            .iter()
            .map(|mu| {
                let m = projected_second_moment(fmap, basis, mu)
                    + DMatrix::identity(d_on, d_on) * ridge;
                let inv = m
                    .cholesky()
                    .map(|c| c.inverse())
                    .unwrap_or_else(|| DMatrix::identity(d_on, d_on) / ridge);
                row_quad_forms(&reduced, &inv)
            })
            .collect();
        let scale = reward.iter().flatten().fold(0.0_f64, |a, b| a.max(*b));
        let reward: Vec<Vec<f64>> = reward
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|x| x / scale.max(f64::MIN_POSITIVE))
                    .collect()
            })
            .collect();
        let response = occupancy(spec, &optimal_q_with_reward(spec, &reward).greedy_policy());
        consider(&response, &mut best);
        let step = 2.0 / (t as f64 + 3.0);
        for (m, r) in mix.iter_mut().zip(&response) {
            for (a, b) in m.iter_mut().zip(r) {
                *a = (1.0 - step) * *a + step * b;
            }
        }
        consider(&mix, &mut best);
    }

    let c_on_upper = best.map_or(Coefficient::Infinite, Coefficient::Value);
    let bound_holds =
        matches!(c_on_upper, Coefficient::Value(v) if v <= d_on as f64 * (1.0 + 1e-6));
    Ok(CoverabilityCheck {
        c_on_upper,
        bound_holds,
        d_on,
        evaluated,
    })
}

/// `V^π_h(s)` for every step (with `V_H ≡ 0` appended) and the expected
/// initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValues {
    pub values: Vec<Vec<f64>>,
    pub initial_value: f64,
}

impl PolicyValues {
    /// `V_1(s)`.
    pub fn first_stage(&self) -> &[f64] {
        &self.values[0]
    }
}

pub fn eval_policy_exact(env: &dyn Environment, policy: &dyn Policy) -> Result<PolicyValues> {
    let spec = env.tabular().ok_or(Error::NotTabular)?;
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    for h in (0..horizon).rev() {
        for s in 0..ns {
            let pi = policy.distribution(h, s);
            let mut v = 0.0;
            for a in 0..na {
                if pi[a] == 0.0 {
                    continue;
                }
                let cont: f64 = spec
                    .transition(h, s, a)
                    .iter()
                    .zip(&values[h + 1])
                    .map(|(p, vn)| p * vn)
                    .sum();
                v += pi[a] * (spec.reward(h, s, a) + cont);
            }
            values[h][s] = v;
        }
    }
    let initial_value = spec
        .initial_distribution()
        .iter()
        .zip(&values[0])
        .map(|(p, v)| p * v)
        .sum();
    Ok(PolicyValues {
        values,
        initial_value,
    })
}

/// Optimal `Q*` by backward induction on the environment's own rewards.
pub fn optimal_q(spec: &TabularMdpSpec) -> QTable {
    let reward: Vec<Vec<f64>> = (0..spec.horizon())
        .map(|h| {
            (0..spec.num_states() * spec.num_actions())
                .map(|i| spec.reward(h, i / spec.num_actions(), i % spec.num_actions()))
                .collect()
        })
        .collect();
    optimal_q_with_reward(spec, &reward)
}

/// Optimal Q-function for the dynamics of `spec` under `reward[h][pair]`.
pub fn optimal_q_with_reward(spec: &TabularMdpSpec, reward: &[Vec<f64>]) -> QTable {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let mut q = QTable::filled(horizon, ns, na, 0.0);
    let mut next_v = vec![0.0; ns];
    for h in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = spec
                    .transition(h, s, a)
                    .iter()
                    .zip(&next_v)
                    .map(|(p, v)| p * v)
                    .sum();
                q.set(h, s, a, reward[h][s * na + a] + cont);
            }
        }
        next_v = q.stage_values(h);
    }
    q
}

/// Expected optimal value from the initial distribution.
pub fn optimal_value(spec: &TabularMdpSpec) -> f64 {
    let q = optimal_q(spec);
    spec.initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, p)| p * q.state_value(0, s))
        .sum()
}

/// Mean return over `n` seeded rollouts and its standard error.
pub fn eval_policy_mc(
    env: &dyn Environment,
    policy: &dyn Policy,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Monte Carlo evaluation needs at least 2 rollouts, got {n}"
        )));
    }
    let returns = (0..n)
        .map(|i| {
            rollout(env, policy, Label::Online, &mut substream(seed, i as u64))
                .map(|t| t.total_reward())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_stderr(&returns))
}

/// Sample mean and standard error (sample standard deviation over `√n`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One line of the diagnostics CSV (`metric, h, value, flag`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub metric: String,
    /// One-based step, or `None` for run-level metrics.
    pub h: Option<usize>,
    pub value: f64,
    pub flag: String,
}

impl fmt::Display for DiagnosticRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.h.map(|h| h.to_string()).unwrap_or_default();
        write!(f, "{},{},{:?},{}", self.metric, h, self.value, self.flag)
    }
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("metric,h,value,flag\n");
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Per-step coverage rows for a set of covariance matrices.
pub fn coverage_rows(
    lambdas: &[DMatrix<f64>],
    features: &DMatrix<f64>,
) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for (h, l) in lambdas.iter().enumerate() {
        let m = coverage_metrics(l, features)?;
        rows.push(DiagnosticRow {
            metric: "inv_lambda_min".into(),
            h: Some(h + 1),
            value: m.inv_lambda_min,
            flag: String::new(),
        });
        rows.push(DiagnosticRow {
            metric: "max_bonus_sq".into(),
            h: Some(h + 1),
            value: m.max_bonus_sq,
            flag: String::new(),
        });
    }
    Ok(rows)
}

/// `Σ_x μ(x) φ(x)φ(x)ᵀ` in the ambient feature space.
pub fn second_moment(fmap: &FeatureMap, occupancy: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(fmap.dim(), fmap.dim());
    for (i, &mass) in occupancy.iter().enumerate() {
        if mass > 0.0 {
            let v: DVector<f64> = fmap.table().row(i).transpose();
            m.ger(mass, &v, &v, 1.0);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_offline, Step, Trajectory, UniformPolicy};
    use crate::env::random_tabular_mdp;

    #[test]
    fn coverage_metric_cases() {
        let fm = FeatureMap::one_hot(2, 1);
        let m = coverage_metrics(&(DMatrix::identity(2, 2) * 2.0), fm.table()).unwrap();
        assert!((m.inv_lambda_min - 0.5).abs() < 1e-15);

        let lam = 0.5;
        let counts = [3.0, 7.0, 5.0];
        let fm = FeatureMap::one_hot(3, 1);
        let diag =
            DMatrix::from_diagonal(&DVector::from_iterator(3, counts.iter().map(|c| c + lam)));
        let m = coverage_metrics(&diag, fm.table()).unwrap();
        assert!((m.max_bonus_sq - 1.0 / (3.0 + lam)).abs() < 1e-12);

        assert!(coverage_metrics(&diag, &DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn rayleigh_bound_on_random_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(4);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let lam = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let feats = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let feats =
                DMatrix::from_rows(&feats.row_iter().map(|r| r / r.norm()).collect::<Vec<_>>());
            let m = coverage_metrics(&lam, &feats).unwrap();
            assert!(m.inv_lambda_min >= m.max_bonus_sq - 1e-12);
        }
    }

    fn one_hot_dataset(visits: &[(usize, usize)], horizon: usize) -> Dataset {
        let trajs = visits
            .iter()
            .map(|&(s, a)| Trajectory {
                label: Label::Offline,
                steps: (0..horizon)
                    .map(|h| Step {
                        h,
                        state: s,
                        action: a,
                        reward: 0.0,
                    })
                    .collect(),
            })
            .collect();
        Dataset::new("x".into(), "one-hot".into(), horizon, trajs).unwrap()
    }

    #[test]
    fn eigencut_full_rank_and_guards() {
        let fm = FeatureMap::one_hot(2, 2);
        let data = one_hot_dataset(&[(0, 0), (0, 1), (0, 1), (1, 0), (1, 0), (1, 0), (1, 1)], 1);
        let p = partition_from_eigencut(&data, &fm, 4).unwrap();
        assert_eq!(p.d_on(), 0);
        assert_eq!(p.count(Side::Off), 4);
        assert!(partition_from_eigencut(&data, &fm, 0).is_err());
        let sparse = one_hot_dataset(&[(0, 0)], 1);
        assert!(matches!(
            partition_from_eigencut(&sparse, &fm, 2),
            Err(Error::RankDeficient { rank: 1, .. })
        ));
    }

    #[test]
    fn eigencut_one_hot_support() {
        // Behavior visits exactly three distinct pairs with distinct counts.
        let fm = FeatureMap::one_hot(3, 2);
        let visits = [(0, 1), (0, 1), (0, 1), (2, 0), (2, 0), (1, 1)];
        let data = one_hot_dataset(&visits, 2);
        let p = partition_from_eigencut(&data, &fm, 3).unwrap();
        let visited: Vec<usize> = vec![
            fm.pair_index(0, 1),
            fm.pair_index(2, 0),
            fm.pair_index(1, 1),
        ];
        for h in 0..2 {
            for pair in 0..6 {
                let expect = if visited.contains(&pair) {
                    Side::Off
                } else {
                    Side::On
                };
                assert_eq!(p.side(h, pair), expect);
            }
        }
        assert_eq!((p.d_off(), p.d_on()), (3, 3));
        let gram = p.basis_on().transpose() * p.basis_on();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn c_off_uniform_one_hot() {
        let fm = FeatureMap::one_hot(2, 2);
        let data = one_hot_dataset(&[(0, 0), (0, 1), (1, 0), (1, 1)], 1);
        let p = partition_from_eigencut(&data, &fm, 4).unwrap();
        let occ = vec![vec![0.25; 4]];
        match partial_concentrability_off(&p, &fm, &occ) {
            Coefficient::Value(v) => assert!((v - 4.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn c_off_undefined_when_offline_side_empty() {
        let fm = FeatureMap::one_hot(2, 1);
        let p = Partition::from_membership(&fm, 1, vec![Side::On, Side::On]).unwrap();
        assert_eq!(p.d_off(), 0);
        assert_eq!(
            partial_concentrability_off(&p, &fm, &[vec![0.5, 0.5]]),
            Coefficient::Undefined
        );
    }

    #[test]
    fn c_off_matches_direct_assembly() {
        let env = random_tabular_mdp(4, 2, 3, 8).unwrap();
        let fm = FeatureMap::one_hot(4, 2);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 50, 1).unwrap();
        let p = partition_from_eigencut(&data, &fm, 5).unwrap();
        let occ = occupancy(&env, &UniformPolicy { num_actions: 2 });
        let got = partial_concentrability_off(&p, &fm, &occ).value().unwrap();
        // Direct route: full d×d projector, d_off-th largest eigenvalue.
        let proj = p.basis_off() * p.basis_off().transpose();
        let mut worst = 0.0_f64;
        for mu in &occ {
            let mut m = DMatrix::zeros(8, 8);
            for (i, &mass) in mu.iter().enumerate() {
                let v = &proj * fm.table().row(i).transpose();
                m += &v * v.transpose() * mass;
            }
            let vals = sym_eigenvalues(&m);
            worst = worst.max(1.0 / vals[p.d_off() - 1]);
        }
        assert!((got - worst).abs() <= 1e-9 * worst.max(1.0));
    }

    #[test]
    fn coverability_trivial_and_non_tabular() {
        let env = random_tabular_mdp(2, 2, 2, 0).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let p = Partition::from_membership(&fm, 2, vec![Side::Off; 8]).unwrap();
        let check = coverability_check_on(&env, &fm, &p, 5).unwrap();
        assert!(check.bound_holds);
        assert_eq!(check.verdict(), "trivial");

        struct Opaque;
        impl Environment for Opaque {
            fn num_states(&self) -> usize {
                1
            }
            fn num_actions(&self) -> usize {
                1
            }
            fn horizon(&self) -> usize {
                1
            }
            fn reward(&self, _: usize, _: usize, _: usize) -> f64 {
                0.0
            }
            fn sample_initial(&self, _: &mut dyn rand::RngCore) -> usize {
                0
            }
            fn sample_next(
                &self,
                _: usize,
                _: usize,
                _: usize,
                _: &mut dyn rand::RngCore,
            ) -> usize {
                0
            }
            fn fingerprint(&self) -> String {
                "opaque".into()
            }
        }
        let fm1 = FeatureMap::one_hot(1, 1);
        let p1 = Partition::from_membership(&fm1, 1, vec![Side::On]).unwrap();
        assert!(matches!(
            coverability_check_on(&Opaque, &fm1, &p1, 1),
            Err(Error::NotTabular)
        ));
        assert!(matches!(
            eval_policy_exact(&Opaque, &UniformPolicy { num_actions: 1 }),
            Err(Error::NotTabular)
        ));
    }

    #[test]
    fn coverability_single_reachable_pair() {
        // State 1 is absorbing under action 1 and reached from state 0
        // by action 1; the start is state 1, so (1, 1) can be visited with
        // probability one at every step.
        let mut t = Vec::new();
        for _ in 0..3 {
            t.extend([1.0, 0.0, 0.0, 1.0]); // s0: a0 stays, a1 → s1
            t.extend([1.0, 0.0, 0.0, 1.0]); // s1: a0 → s0, a1 stays
        }
        let env = TabularMdpSpec::new(2, 2, 3, t, vec![0.0; 12], vec![0.0, 1.0]).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let on_pair = fm.pair_index(1, 1);
        let membership = (0..3)
            .flat_map(|_| (0..4).map(|p| if p == on_pair { Side::On } else { Side::Off }))
            .collect();
        let p = Partition::from_membership(&fm, 3, membership).unwrap();
        let check = coverability_check_on(&env, &fm, &p, 10).unwrap();
        assert_eq!(check.d_on, 1);
        let v = check.c_on_upper.value().unwrap();
        assert!(v <= 1.0 + 1e-9, "{v}");
        assert!(check.bound_holds);
    }

    #[test]
    fn exact_eval_closed_forms() {
        let zero =
            TabularMdpSpec::new(2, 2, 3, vec![0.5; 24], vec![0.0; 12], vec![0.5, 0.5]).unwrap();
        let vals = eval_policy_exact(&zero, &UniformPolicy { num_actions: 2 }).unwrap();
        assert!(vals.values.iter().flatten().all(|v| *v == 0.0));

        let env = random_tabular_mdp(3, 2, 1, 4).unwrap();
        let pol = UniformPolicy { num_actions: 2 };
        let vals = eval_policy_exact(&env, &pol).unwrap();
        for s in 0..3 {
            let expected = 0.5 * env.reward(0, s, 0) + 0.5 * env.reward(0, s, 1);
            assert!((vals.first_stage()[s] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let env = random_tabular_mdp(4, 3, 4, 21).unwrap();
        let pol = UniformPolicy { num_actions: 3 };
        let exact = eval_policy_exact(&env, &pol).unwrap().initial_value;
        let (mean, se) = eval_policy_mc(&env, &pol, 100_000, 3).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} ± {se}");
    }

    #[test]
    fn monte_carlo_edge_cases() {
        let env = TabularMdpSpec::new(1, 1, 2, vec![1.0; 2], vec![0.4; 2], vec![1.0]).unwrap();
        let pol = UniformPolicy { num_actions: 1 };
        let (mean, se) = eval_policy_mc(&env, &pol, 50, 0).unwrap();
        assert!((mean - 0.8).abs() < 1e-12);
        assert!(se < 1e-12);
        let (_, se) = eval_policy_mc(
            &random_tabular_mdp(3, 2, 2, 0).unwrap(),
            &UniformPolicy { num_actions: 2 },
            2,
            0,
        )
        .unwrap();
        assert!(se.is_finite());
        assert!(eval_policy_mc(&env, &pol, 1, 0).is_err());
    }

    #[test]
    fn adding_rank_one_never_worsens_coverage() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(12);
        let fm = FeatureMap::one_hot(3, 1);
        let mut lam = DMatrix::identity(3, 3) * 0.5;
        for _ in 0..20 {
            let before = coverage_metrics(&lam, fm.table()).unwrap();
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            lam += &v * v.transpose();
            let after = coverage_metrics(&lam, fm.table()).unwrap();
            assert!(after.inv_lambda_min <= before.inv_lambda_min + 1e-12);
            assert!(after.max_bonus_sq <= before.max_bonus_sq + 1e-12);
        }
    }
}
