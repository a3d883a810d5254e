//! Variance-aware pessimistic value iteration over a fixed dataset.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{Dataset, DeterministicPolicy};
use crate::env::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::row_quad_forms;
use crate::qfunc::{argmax_lowest, QTable};

/// `β₂ = c_b·√d·log(dHN/δ)`.
pub fn pessimism_radius(c_b: f64, dim: usize, horizon: usize, n: usize, delta: f64) -> f64 {
    let arg = (dim * horizon * n.max(1)) as f64 / delta;
    c_b * (dim as f64).sqrt() * arg.ln().max(0.0)
}

/// Per-step regressions of `V̂'_{h+1}` and `(V̂'_{h+1})²` defining
/// `σ̂²_h(s,a) = max{1, [φᵀβ̃₂]_{[0,H²]} − [φᵀβ̃₁]²_{[0,H]} − correction}`.
#[derive(Debug, Clone)]
pub struct VarianceModel {
    pub first_moment: Vec<DVector<f64>>,
    pub second_moment: Vec<DVector<f64>>,
    /// Already scaled: `c_var·dH³/√N`.
    pub correction: f64,
    pub horizon: usize,
}

impl VarianceModel {
    /// `σ̂² ≡ 1`.
    pub fn unit(horizon: usize, dim: usize) -> Self {
        Self {
            first_moment: vec![DVector::zeros(dim); horizon],
            second_moment: vec![DVector::zeros(dim); horizon],
            correction: 0.0,
            horizon,
        }
    }

    pub fn sigma_sq(&self, h: usize, phi: &DVector<f64>) -> f64 {
        let hf = self.horizon as f64;
        let m2 = phi.dot(&self.second_moment[h]).clamp(0.0, hf * hf);
        let m1 = phi.dot(&self.first_moment[h]).clamp(0.0, hf);
        (m2 - m1 * m1 - self.correction).max(1.0)
    }

    /// `σ̂²_h` for every pair of `fmap`.
    pub fn stage(&self, h: usize, fmap: &FeatureMap) -> Vec<f64> {
        (0..fmap.num_pairs())
            .map(|i| self.sigma_sq(h, &fmap.table().row(i).transpose()))
            .collect()
    }
}

/// Output of a pessimistic planning pass.
#[derive(Debug, Clone)]
pub struct PessimisticPlan {
    pub policy: DeterministicPolicy,
    pub q: QTable,
    /// `V̂_h(s)` for `h = 0..=H`, with `V̂_H ≡ 0`.
    pub values: Vec<Vec<f64>>,
    /// `max_{s,a} ‖φ‖_{Σ_h⁻¹}` per step.
    pub max_bonus: Vec<f64>,
}

impl PessimisticPlan {
    /// Expected `V̂_1` under an initial distribution.
    pub fn initial_value(&self, initial: &[f64]) -> f64 {
        initial
            .iter()
            .zip(&self.values[0])
            .map(|(p, v)| p * v)
            .sum()
    }
}

fn check_dataset(data: &Dataset, fmap: &FeatureMap) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for t in data.trajectories() {
        for s in &t.steps {
            if s.state >= fmap.num_states() || s.action >= fmap.num_actions() {
                return Err(Error::InvalidArgument(format!(
                    "sample ({}, {}) outside the feature map's {}×{} grid",
                    s.state,
                    s.action,
                    fmap.num_states(),
                    fmap.num_actions()
                )));
            }
        }
    }
    Ok(())
}

/// Weighted ridge system `(λI + Σ w φφᵀ, Σ w φ y)` at step `h`, with
/// `y = r + next_value(s')`.
fn weighted_system(
    data: &Dataset,
    fmap: &FeatureMap,
    h: usize,
    lambda: f64,
    weight: impl Fn(usize) -> f64,
    target: impl Fn(f64, Option<usize>) -> f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = fmap.dim();
    let mut sigma = DMatrix::identity(d, d) * lambda;
    let mut b = DVector::zeros(d);
    for t in data.trajectories() {
        let Some(step) = t.steps.get(h) else { continue };
        let pair = fmap.pair_index(step.state, step.action);
        let phi = fmap.table().row(pair).transpose();
        let w = weight(pair);
        sigma.ger(w, &phi, &phi, 1.0);
        b.axpy(w * target(step.reward, t.next_state(h)), &phi, 1.0);
    }
    (sigma, b)
}

fn ridge(sigma: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let chol = sigma.cholesky().expect("λI + PSD is positive definite");
    (chol.solve(b), chol.inverse())
}

/// Backward pessimistic LSVI with per-sample weights `1/σ̂²`.
fn pessimistic_lsvi(
    data: &Dataset,
    variance: &VarianceModel,
    fmap: &FeatureMap,
    lambda: f64,
    beta: f64,
) -> Result<PessimisticPlan> {
    check_dataset(data, fmap)?;
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "λ must be positive, got {lambda}"
        )));
    }
    let horizon = data.horizon();
    let (ns, na) = (fmap.num_states(), fmap.num_actions());
    let mut q = QTable::filled(horizon, ns, na, 0.0);
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    let mut actions = vec![0; horizon * ns];
    let mut max_bonus = vec![0.0; horizon];
    for h in (0..horizon).rev() {
        let sig = variance.stage(h, fmap);
        let next = &values[h + 1];
        let (sigma, b) = weighted_system(
            data,
            fmap,
            h,
            lambda,
            |pair| 1.0 / sig[pair],
            |r, sp| r + sp.map_or(0.0, |s| next[s]),
        );
        let (w, inv) = ridge(sigma, &b);
        let linear = fmap.table() * &w;
        let bonus: Vec<f64> = row_quad_forms(fmap.table(), &inv)
            .into_iter()
            .map(|x| x.max(0.0).sqrt())
            .collect();
        max_bonus[h] = bonus.iter().copied().fold(0.0, f64::max);
        let hi = (horizon - h) as f64;
        for (i, slot) in q.stage_mut(h).iter_mut().enumerate() {
            *slot = (linear[i] - beta * bonus[i]).clamp(0.0, hi);
        }
        for s in 0..ns {
            let a = argmax_lowest(&q.stage(h)[s * na..(s + 1) * na]);
            actions[h * ns + s] = a;
            values[h][s] = q.get(h, s, a);
        }
    }
    let policy = DeterministicPolicy::new(horizon, ns, na, actions)?;
    Ok(PessimisticPlan {
        policy,
        q,
        values,
        max_bonus,
    })
}

/// Unweighted pessimistic value iteration on `D'`, returning `V̂'_h` for
/// `h = 0..=H`.
pub fn first_pass_values(
    d_prime: &Dataset,
    fmap: &FeatureMap,
    lambda: f64,
    beta: f64,
) -> Result<Vec<Vec<f64>>> {
    let unit = VarianceModel::unit(d_prime.horizon(), fmap.dim());
    Ok(pessimistic_lsvi(d_prime, &unit, fmap, lambda, beta)?.values)
}

/// Ridge regressions of `V̂'_{h+1}(s')` and its square on `φ(s_h, a_h)`.
pub fn estimate_variance(
    d_prime: &Dataset,
    vhat_prime: &[Vec<f64>],
    fmap: &FeatureMap,
    lambda: f64,
    c_var: f64,
) -> Result<VarianceModel> {
    check_dataset(d_prime, fmap)?;
    let horizon = d_prime.horizon();
    if vhat_prime.len() != horizon + 1 {
        return Err(Error::DimensionMismatch {
            expected: horizon + 1,
            got: vhat_prime.len(),
        });
    }
    let mut first_moment = Vec::with_capacity(horizon);
    let mut second_moment = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let next = &vhat_prime[h + 1];
        let v = |_: f64, sp: Option<usize>| sp.map_or(0.0, |s| next[s]);
        let (sigma, b1) = weighted_system(d_prime, fmap, h, lambda, |_| 1.0, v);
        let (_, b2) = weighted_system(d_prime, fmap, h, lambda, |_| 1.0, |r, sp| v(r, sp).powi(2));
        let chol = sigma.cholesky().expect("λI + PSD is positive definite");
        first_moment.push(chol.solve(&b1));
        second_moment.push(chol.solve(&b2));
    }
    let hf = horizon as f64;
    let correction = c_var * fmap.dim() as f64 * hf.powi(3) / (d_prime.len() as f64).sqrt();
    Ok(VarianceModel {
        first_moment,
        second_moment,
        correction,
        horizon,
    })
}

/// Pessimistic planning with `1/σ̂²` weights and penalty `β₂‖φ‖_{Σ_h⁻¹}`.
pub fn linpevi_advplus(
    data: &Dataset,
    variance: &VarianceModel,
    fmap: &FeatureMap,
    lambda: f64,
    beta2: f64,
) -> Result<PessimisticPlan> {
    pessimistic_lsvi(data, variance, fmap, lambda, beta2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_offline, Label, Step, Trajectory, UniformPolicy};
    use crate::diagnostics::{eval_policy_exact, optimal_q};
    use crate::env::{random_tabular_mdp, Environment, TabularMdpSpec};

    #[test]
    fn zero_reward_gives_zero_values() {
        let env =
            TabularMdpSpec::new(2, 2, 3, vec![0.5; 24], vec![0.0; 12], vec![0.5, 0.5]).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 20, 0).unwrap();
        let v = first_pass_values(&data, &fm, 1.0 / 9.0, 0.3).unwrap();
        assert!(v.iter().flatten().all(|x| *x == 0.0));
        let plan = linpevi_advplus(&data, &VarianceModel::unit(3, 4), &fm, 1.0 / 9.0, 0.3).unwrap();
        assert!(plan.values.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn single_stage_closed_form() {
        let env = random_tabular_mdp(2, 2, 1, 3).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 15, 5).unwrap();
        let (lambda, beta) = (1.0, 0.2);
        let v = first_pass_values(&data, &fm, lambda, beta).unwrap();
        // One-hot closed form: ŵ(x) = Σ r / (n_x + λ), bonus = 1/√(n_x + λ).
        let mut n = [0.0; 4];
        let mut sum = [0.0; 4];
        for t in data.trajectories() {
            let s = &t.steps[0];
            n[s.state * 2 + s.action] += 1.0;
            sum[s.state * 2 + s.action] += s.reward;
        }
        for s in 0..2 {
            let q = |a: usize| {
                let x = s * 2 + a;
                (sum[x] / (n[x] + lambda) - beta / (n[x] + lambda).sqrt()).clamp(0.0, 1.0)
            };
            assert!((v[0][s] - q(0).max(q(1))).abs() < 1e-12);
        }
    }

    fn deterministic_chain() -> TabularMdpSpec {
        // s0 -a0-> s0, s0 -a1-> s1, s1 -any-> s1.
        let row = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        TabularMdpSpec::new(
            2,
            2,
            3,
            row.repeat(3),
            vec![0.2, 0.7, 0.5, 0.1].repeat(3),
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_mdp_has_unit_variance() {
        let env = deterministic_chain();
        let fm = FeatureMap::one_hot(2, 2);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 4000, 2).unwrap();
        let v = first_pass_values(&data, &fm, 1.0 / 9.0, 0.0).unwrap();
        let model = estimate_variance(&data, &v, &fm, 1.0 / 9.0, 0.01).unwrap();
        for h in 0..3 {
            assert!(model.stage(h, &fm).iter().all(|s| *s == 1.0));
        }
        let big = estimate_variance(&data, &v, &fm, 1.0 / 9.0, 1e9).unwrap();
        assert!((0..3).all(|h| big.stage(h, &fm).iter().all(|s| *s == 1.0)));
    }

    #[test]
    fn coin_flip_variance_regression_matches_empirical() {
        // One state pair at h=0 leads to s'∈{0,1} with prob 1/2; the
        // regressed conditional variance of V̂'_1 should match the sample
        // variance of the observed next values.
        let env = TabularMdpSpec::new(
            2,
            1,
            2,
            vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let fm = FeatureMap::one_hot(2, 1);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 1 }, 5000, 8).unwrap();
        let v = first_pass_values(&data, &fm, 0.25, 0.0).unwrap();
        let model = estimate_variance(&data, &v, &fm, 0.25, 0.0).unwrap();
        let next: Vec<f64> = data
            .trajectories()
            .iter()
            .map(|t| v[1][t.next_state(0).unwrap()])
            .collect();
        let n = next.len() as f64;
        let mean = next.iter().sum::<f64>() / n;
        let emp_var = next.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((emp_var - 0.25).abs() < 0.02);
        let phi = fm.table().row(0).transpose();
        let m2 = phi.dot(&model.second_moment[0]);
        let m1 = phi.dot(&model.first_moment[0]);
        assert!((m2 - m1 * m1 - emp_var).abs() < 1e-3);
        // With V ∈ {0, 1} the floor of one dominates.
        assert_eq!(model.sigma_sq(0, &phi), 1.0);
    }

    #[test]
    fn sigma_sq_stays_in_range() {
        let model = VarianceModel {
            first_moment: vec![DVector::from_vec(vec![-3.0, 0.5, 9.0])],
            second_moment: vec![DVector::from_vec(vec![100.0, -1.0, 4.0])],
            correction: 0.0,
            horizon: 3,
        };
        let fm = FeatureMap::one_hot(3, 1);
        for s in model.stage(0, &fm) {
            assert!((1.0..=9.0).contains(&s));
        }
    }

    #[test]
    fn consistency_with_many_trajectories() {
        for seed in 0..3 {
            let env = random_tabular_mdp(3, 2, 3, seed).unwrap();
            let fm = FeatureMap::one_hot(3, 2);
            let data =
                gen_offline(&env, &UniformPolicy { num_actions: 2 }, 10_000, seed + 100).unwrap();
            let lambda = 1.0 / 9.0;
            let v = first_pass_values(&data, &fm, lambda, 0.0).unwrap();
            let model = estimate_variance(&data, &v, &fm, lambda, 0.01).unwrap();
            let plan = linpevi_advplus(&data, &model, &fm, lambda, 0.0).unwrap();
            let q = optimal_q(&env);
            for s in 0..3 {
                let vstar = q.state_value(0, s);
                assert!(
                    (plan.values[0][s] - vstar).abs() < 0.05,
                    "seed {seed} s {s}"
                );
                assert!((v[0][s] - vstar).abs() < 0.1);
            }
        }
    }

    #[test]
    fn pessimism_lower_bounds_policy_value() {
        let mut hold = 0;
        for seed in 0..50 {
            let env = random_tabular_mdp(3, 2, 3, 1000 + seed).unwrap();
            let fm = FeatureMap::one_hot(3, 2);
            let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 200, seed).unwrap();
            let lambda = 1.0 / 9.0;
            let beta = pessimism_radius(1.0, 6, 3, data.len(), 0.05);
            let v = first_pass_values(&data, &fm, lambda, beta).unwrap();
            let model = estimate_variance(&data, &v, &fm, lambda, 0.01).unwrap();
            let plan = linpevi_advplus(&data, &model, &fm, lambda, beta).unwrap();
            let exact = eval_policy_exact(&env, &plan.policy).unwrap();
            if (0..3).all(|s| plan.values[0][s] <= exact.values[0][s] + 1e-9) {
                hold += 1;
            }
        }
        assert!(hold >= 48, "pessimism held in {hold}/50");
    }

    #[test]
    fn errors() {
        let env = random_tabular_mdp(2, 2, 2, 0).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let empty = Dataset::empty(&env);
        assert!(matches!(
            first_pass_values(&empty, &fm, 1.0, 0.0),
            Err(Error::EmptyDataset)
        ));
        let bad = Dataset::new(
            env.fingerprint(),
            String::new(),
            2,
            vec![Trajectory {
                label: Label::Offline,
                steps: vec![
                    Step {
                        h: 0,
                        state: 5,
                        action: 0,
                        reward: 0.0,
                    },
                    Step {
                        h: 1,
                        state: 0,
                        action: 0,
                        reward: 0.0,
                    },
                ],
            }],
        )
        .unwrap();
        assert!(first_pass_values(&bad, &fm, 1.0, 0.0).is_err());
    }
}
