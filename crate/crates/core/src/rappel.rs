//! Exploration-initialized pessimistic planning: reward-agnostic
//! exploration against the offline coverage, then variance-aware
//! pessimistic value iteration on the combined data.

use std::fmt::Write as _;

use crate::dataset::{Dataset, DeterministicPolicy};
use crate::env::{Environment, FeatureMap};
use crate::error::{Error, Result};
use crate::offline::{
    estimate_variance, first_pass_values, linpevi_advplus, pessimism_radius, PessimisticPlan,
    VarianceModel,
};
use crate::optcov::{optcov, OptcovConfig, OptcovReport};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RappelConfig {
    /// Defaults to `1/H²`.
    pub lambda: Option<f64>,
    pub delta: f64,
    pub c_b: f64,
    pub c_var: f64,
    pub c_e: f64,
    /// Share of the combined data used for the final regression.
    pub split_fraction: f64,
    /// `false` plans with unit variances on the whole dataset, without
    /// the variance pass.
    pub variance_weighted: bool,
    pub split_seed: u64,
    pub trace_interval: usize,
}

impl RappelConfig {
    pub fn theory() -> Self {
        Self {
            lambda: None,
            delta: 0.05,
            c_b: 1.0,
            c_var: 0.01,
            c_e: 0.1,
            split_fraction: 0.5,
            variance_weighted: true,
            split_seed: 0,
            trace_interval: 0,
        }
    }

    pub fn practical() -> Self {
        Self {
            c_b: 0.02,
            ..Self::theory()
        }
    }

    pub fn lambda_for(&self, horizon: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / (horizon * horizon) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct RappelReport {
    pub exploration: OptcovReport,
    pub lambda: f64,
    pub beta2: f64,
    pub n_off: usize,
    pub n_on: usize,
    /// `V̂_1` averaged over the initial distribution, when known.
    pub value_estimate: Option<f64>,
    pub plan_max_bonus: Vec<f64>,
}

impl RappelReport {
    pub fn coverage_unmet(&self) -> bool {
        self.exploration.coverage_unmet()
    }

    /// Flat `key = value` block; steps are one-based.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_off = {}", self.n_off);
        let _ = writeln!(out, "n_on = {}", self.n_on);
        let _ = writeln!(out, "episodes_used = {}", self.exploration.episodes_used);
        let _ = writeln!(out, "coverage_unmet = {}", self.coverage_unmet());
        let _ = writeln!(out, "lambda = {:?}", self.lambda);
        let _ = writeln!(out, "beta2 = {:?}", self.beta2);
        if let Some(v) = self.value_estimate {
            let _ = writeln!(out, "value_estimate = {v:?}");
        }
        for (h, s) in self.exploration.steps.iter().enumerate() {
            let k = h + 1;
            let _ = writeln!(out, "epochs_h{k} = {}", s.epochs);
            let _ = writeln!(out, "episodes_h{k} = {}", s.episodes);
            let _ = writeln!(out, "coverage_max_bonus_h{k} = {:?}", s.max_bonus);
            let _ = writeln!(out, "coverage_success_h{k} = {}", s.success);
            if let Some(f) = s.final_objective {
                let _ = writeln!(out, "final_objective_h{k} = {f:?}");
            }
        }
        for (h, b) in self.plan_max_bonus.iter().enumerate() {
            let _ = writeln!(out, "plan_max_bonus_h{} = {b:?}", h + 1);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RappelOutput {
    pub policy: DeterministicPolicy,
    pub plan: PessimisticPlan,
    pub data: Dataset,
    pub report: RappelReport,
}

/// Plans from the combined offline and exploration data.
pub fn plan_from(
    env: &dyn Environment,
    data: &Dataset,
    fmap: &FeatureMap,
    config: &RappelConfig,
) -> Result<(PessimisticPlan, f64)> {
    let horizon = env.horizon();
    let lambda = config.lambda_for(horizon);
    let beta2 = pessimism_radius(config.c_b, fmap.dim(), horizon, data.len(), config.delta);
    if !config.variance_weighted {
        let unit = VarianceModel::unit(horizon, fmap.dim());
        return Ok((linpevi_advplus(data, &unit, fmap, lambda, beta2)?, beta2));
    }
    let (main, aux) = data.split(config.split_fraction, config.split_seed)?;
    let vhat = first_pass_values(&aux, fmap, lambda, beta2)?;
    let variance = estimate_variance(&aux, &vhat, fmap, lambda, config.c_var)?;
    Ok((
        linpevi_advplus(&main, &variance, fmap, lambda, beta2)?,
        beta2,
    ))
}

/// Explores until the combined coverage reaches `tau` or `n_on_budget`
/// episodes are spent, then plans pessimistically.
pub fn rappel(
    env: &dyn Environment,
    fmap: &FeatureMap,
    d_off: &Dataset,
    n_on_budget: usize,
    tau: f64,
    config: &RappelConfig,
    rng: &mut Rng,
) -> Result<RappelOutput> {
    if !d_off.is_empty() && d_off.env_fingerprint() != env.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: env.fingerprint(),
            found: d_off.env_fingerprint().to_string(),
        });
    }
    let horizon = env.horizon();
    let mut ocfg = OptcovConfig::new(tau, n_on_budget, horizon);
    ocfg.lambda = config.lambda_for(horizon);
    ocfg.delta = config.delta;
    ocfg.c_e = config.c_e;
    ocfg.trace_interval = config.trace_interval;
    let explored = optcov(env, fmap, d_off, &ocfg, rng)?;
    let data = if d_off.is_empty() {
        explored.data.clone()
    } else {
        d_off.merged(&explored.data)?
    };
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (plan, beta2) = plan_from(env, &data, fmap, config)?;
    let value_estimate = env
        .tabular()
        .map(|spec| plan.initial_value(spec.initial_distribution()));
    let report = RappelReport {
        exploration: explored.report,
        lambda: ocfg.lambda,
        beta2,
        n_off: d_off.len(),
        n_on: explored.data.len(),
        value_estimate,
        plan_max_bonus: plan.max_bonus.clone(),
    };
    Ok(RappelOutput {
        policy: plan.policy.clone(),
        plan,
        data,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_offline, UniformPolicy};
    use crate::diagnostics::eval_policy_exact;
    use crate::env::random_tabular_mdp;
    use crate::rng::seeded;

    #[test]
    fn huge_tolerance_means_offline_only() {
        let env = random_tabular_mdp(3, 2, 3, 0).unwrap();
        let fm = FeatureMap::one_hot(3, 2);
        let off = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 40, 1).unwrap();
        let out = rappel(
            &env,
            &fm,
            &off,
            50,
            1e9,
            &RappelConfig::practical(),
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(out.report.n_on, 0);
        assert_eq!(out.data.len(), 40);
        assert!(!out.report.coverage_unmet());
        let text = out.report.to_text();
        assert!(text.contains("episodes_used = 0"));
        assert!(text.contains("coverage_success_h3 = true"));
    }

    #[test]
    fn unmet_coverage_is_reported_not_raised() {
        let env = random_tabular_mdp(3, 2, 3, 1).unwrap();
        let fm = FeatureMap::one_hot(3, 2);
        let off = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 10, 1).unwrap();
        let out = rappel(
            &env,
            &fm,
            &off,
            20,
            1e-6,
            &RappelConfig::practical(),
            &mut seeded(0),
        )
        .unwrap();
        assert!(out.report.coverage_unmet());
        assert_eq!(out.report.n_on, 20);
        assert_eq!(out.data.len(), 30);
    }

    #[test]
    fn recommended_tolerance_succeeds_and_is_sound() {
        let env = random_tabular_mdp(2, 2, 2, 5).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let off = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 40, 2).unwrap();
        let out = rappel(
            &env,
            &fm,
            &off,
            5000,
            0.05,
            &RappelConfig::practical(),
            &mut seeded(3),
        )
        .unwrap();
        if !out.report.coverage_unmet() {
            for s in &out.report.exploration.steps {
                assert!(s.max_bonus <= 0.05 * (1.0 + 1e-6));
            }
        }
        let v = eval_policy_exact(&env, &out.policy).unwrap().initial_value;
        assert!(v.is_finite());
    }

    #[test]
    fn unweighted_planner_uses_every_trajectory() {
        let env = random_tabular_mdp(3, 2, 3, 2).unwrap();
        let fm = FeatureMap::one_hot(3, 2);
        let data = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 1, 1).unwrap();
        let config = RappelConfig {
            variance_weighted: false,
            ..RappelConfig::practical()
        };
        assert!(plan_from(&env, &data, &fm, &config).is_ok());
        assert!(plan_from(&env, &data, &fm, &RappelConfig::practical()).is_err());
    }

    #[test]
    fn nothing_to_plan_from() {
        let env = random_tabular_mdp(2, 2, 2, 5).unwrap();
        let fm = FeatureMap::one_hot(2, 2);
        let r = rappel(
            &env,
            &fm,
            &Dataset::empty(&env),
            0,
            0.1,
            &RappelConfig::practical(),
            &mut seeded(0),
        );
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
