//! Offline-warm-started LSVI-UCB++: variance-weighted optimistic and
//! pessimistic regressions with monotone Q updates under rare switching.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::dataset::{Dataset, DeterministicPolicy, PolicyMixture, Trajectory};
use crate::diagnostics::optimal_q;
use crate::env::{Environment, FeatureMap};
use crate::error::{Error, Result};
use crate::linalg::{row_quad_forms, CovarianceAccumulator};
use crate::qfunc::{argmax_lowest, QTable};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HyruleConfig {
    pub lambda: f64,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Multiplier on every `d³` factor: variance floor, `D`, `β̄` and `β̃`.
    pub poly_scale: f64,
    /// Episode count entering the radii's logarithms; `None` uses
    /// `N_off + T` as known at warm start.
    pub episodes_hint: Option<usize>,
}

impl HyruleConfig {
    /// Radii constants of one and the literal polynomial factors.
    pub fn theory() -> Self {
        Self {
            lambda: 1.0,
            delta: 0.05,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            poly_scale: 1.0,
            episodes_hint: None,
        }
    }

    /// Small radii constants and a damped `d³` factor.
    pub fn practical() -> Self {
        Self {
            c1: 0.02,
            c2: 0.02,
            c3: 0.02,
            poly_scale: 1e-8,
            ..Self::theory()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "λ must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "δ must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if [self.c1, self.c2, self.c3, self.poly_scale]
            .iter()
            .any(|c| !(*c >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "radius constants must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Confidence radii `β`, `β̄`, `β̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub beta: f64,
    pub beta_bar: f64,
    pub beta_tilde: f64,
}

impl Radii {
    pub fn new(config: &HyruleConfig, dim: usize, horizon: usize, episodes: usize) -> Self {
        let (d, h, n) = (dim as f64, horizon as f64, episodes.max(1) as f64);
        let (lambda, delta) = (config.lambda, config.delta);
        let base = (d * lambda).sqrt();
        let log1 = (1.0 + d * n * h / (delta * lambda)).ln();
        let log2 = (d * h * n / (delta * lambda)).ln().max(0.0);
        let d3 = config.poly_scale * d.powi(3);
        Self {
            beta: config.c1 * (h * base + d.sqrt() * log1),
            beta_bar: config.c2 * (h * base + (d3 * h * h).sqrt() * log2),
            beta_tilde: config.c3 * (h * h * base + (d3 * h.powi(4)).sqrt() * log2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceTerms {
    pub sigma: f64,
    pub sigma_bar: f64,
    pub e: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    pair: usize,
    next: Option<usize>,
    weight: f64,
}

/// Per-episode record of an online run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub t: usize,
    pub ret: f64,
    pub regret: Option<f64>,
    pub switches_so_far: usize,
    pub mean_bonus: f64,
}

#[derive(Debug, Clone)]
pub struct HyruleState {
    config: HyruleConfig,
    radii: Radii,
    fmap: FeatureMap,
    horizon: usize,
    rewards: Vec<Vec<f64>>,
    acc: Vec<CovarianceAccumulator>,
    b_hat: Vec<DVector<f64>>,
    b_check: Vec<DVector<f64>>,
    b_tilde: Vec<DVector<f64>>,
    samples: Vec<Vec<Sample>>,
    q: QTable,
    q_check: QTable,
    v: Vec<Vec<f64>>,
    v_check: Vec<Vec<f64>>,
    logdet_last: Vec<f64>,
    t: usize,
    t_last: usize,
    switches: usize,
    policy: DeterministicPolicy,
    mixture: PolicyMixture,
    weight_max: f64,
}

impl HyruleState {
    /// Cold start: `Σ = λI`, `Q ≡ H`, `Q̌ ≡ 0`.
    pub fn cold(
        env: &dyn Environment,
        fmap: &FeatureMap,
        config: &HyruleConfig,
        episodes: usize,
    ) -> Result<Self> {
        config.validate()?;
        if fmap.num_states() != env.num_states() || fmap.num_actions() != env.num_actions() {
            return Err(Error::InvalidArgument(format!(
                "feature map covers {}×{} pairs but the environment has {}×{}",
                fmap.num_states(),
                fmap.num_actions(),
                env.num_states(),
                env.num_actions()
            )));
        }
        let (ns, na, horizon) = (env.num_states(), env.num_actions(), env.horizon());
        let d = fmap.dim();
        let acc = CovarianceAccumulator::new(d, config.lambda)?;
        let hf = horizon as f64;
        let rewards = (0..horizon)
            .map(|h| {
                (0..ns * na)
                    .map(|i| env.reward(h, i / na, i % na))
                    .collect()
            })
            .collect();
        let mut v = vec![vec![hf; ns]; horizon + 1];
        v[horizon] = vec![0.0; ns];
        let q = QTable::filled(horizon, ns, na, hf);
        let policy = q.greedy_policy();
        Ok(Self {
            radii: Radii::new(config, d, horizon, config.episodes_hint.unwrap_or(episodes)),
            config: config.clone(),
            fmap: fmap.clone(),
            horizon,
            rewards,
            logdet_last: vec![acc.log_det(); horizon],
            acc: vec![acc; horizon],
            b_hat: vec![DVector::zeros(d); horizon],
            b_check: vec![DVector::zeros(d); horizon],
            b_tilde: vec![DVector::zeros(d); horizon],
            samples: vec![Vec::new(); horizon],
            q,
            q_check: QTable::filled(horizon, ns, na, 0.0),
            v,
            v_check: vec![vec![0.0; ns]; horizon + 1],
            t: 0,
            t_last: 0,
            switches: 0,
            policy,
            mixture: PolicyMixture::new(),
            weight_max: 0.0,
        })
    }

    pub fn radii(&self) -> Radii {
        self.radii
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    pub fn q_check(&self) -> &QTable {
        &self.q_check
    }

    pub fn switches(&self) -> usize {
        self.switches
    }

    pub fn episodes(&self) -> usize {
        self.t
    }

    pub fn t_last(&self) -> usize {
        self.t_last
    }

    pub fn covariance(&self, h: usize) -> &CovarianceAccumulator {
        &self.acc[h]
    }

    /// Largest per-sample regression weight accumulated so far.
    pub fn max_weight(&self) -> f64 {
        self.weight_max
    }

    /// `log det Σ_{t,h}` for every step.
    pub fn log_dets(&self) -> Vec<f64> {
        self.acc.iter().map(|a| a.log_det()).collect()
    }

    /// Greedy policy of the current `Q`.
    pub fn greedy_policy(&self) -> &DeterministicPolicy {
        &self.policy
    }

    /// Uniform mixture over the greedy policies played so far.
    pub fn mixture(&self) -> &PolicyMixture {
        &self.mixture
    }

    /// Regression weights `ŵ_h` of the continuation value.
    pub fn value_weights(&self, h: usize) -> DVector<f64> {
        self.weights(h).0
    }

    /// Known mean rewards, indexed `[h][pair]`.
    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    fn d3(&self) -> f64 {
        self.config.poly_scale * (self.fmap.dim() as f64).powi(3)
    }

    fn phi(&self, pair: usize) -> DVector<f64> {
        self.fmap.table().row(pair).transpose()
    }

    fn weights(&self, h: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let acc = &self.acc[h];
        (
            acc.solve(&self.b_hat[h]),
            acc.solve(&self.b_check[h]),
            acc.solve(&self.b_tilde[h]),
        )
    }

    /// Variance terms for `phi` at step `h` against the current state.
    pub fn estimate_sigma(&self, phi: &DVector<f64>, h: usize) -> Result<VarianceTerms> {
        let (w_hat, w_check, w_tilde) = self.weights(h);
        self.sigma_with(phi, h, &w_hat, &w_check, &w_tilde)
    }

    fn sigma_with(
        &self,
        phi: &DVector<f64>,
        h: usize,
        w_hat: &DVector<f64>,
        w_check: &DVector<f64>,
        w_tilde: &DVector<f64>,
    ) -> Result<VarianceTerms> {
        let hf = self.horizon as f64;
        let bonus = self.acc[h].bonus(phi)?;
        let first = phi.dot(w_hat).clamp(0.0, hf);
        let var = (phi.dot(w_tilde).clamp(0.0, hf * hf) - first * first).max(0.0);
        let Radii {
            beta_bar,
            beta_tilde,
            ..
        } = self.radii;
        let e = (beta_tilde * bonus).min(hf * hf) + (2.0 * hf * beta_bar * bonus).min(hf * hf);
        let d3 = self.d3();
        let gap = phi.dot(w_hat) - phi.dot(w_check);
        let d = (4.0 * d3 * hf * hf * (gap + 2.0 * beta_bar * bonus))
            .min(d3 * hf.powi(3))
            .max(0.0);
        let sigma = (var + e + d + hf).sqrt();
        let sigma_bar = sigma.max(hf.sqrt()).max(2.0 * d3 * hf * hf * bonus.sqrt());
        Ok(VarianceTerms {
            sigma,
            sigma_bar,
            e,
            d,
        })
    }

    /// Rebuilds `Q` and `Q̌` backward from all stored samples, applying
    /// the monotone caps.
    fn resolve(&mut self) {
        let hf = self.horizon as f64;
        let na = self.fmap.num_actions();
        let ns = self.fmap.num_states();
        let n = self.fmap.num_pairs();
        for h in (0..self.horizon).rev() {
            let (next_v, next_vc) = (&self.v[h + 1], &self.v_check[h + 1]);
            let (mut c_hat, mut c_check, mut c_tilde) =
                (DVector::zeros(n), DVector::zeros(n), DVector::zeros(n));
            for s in &self.samples[h] {
                if let Some(sp) = s.next {
                    c_hat[s.pair] += s.weight * next_v[sp];
                    c_check[s.pair] += s.weight * next_vc[sp];
                    c_tilde[s.pair] += s.weight * next_v[sp] * next_v[sp];
                }
            }
            let ft = self.fmap.table().transpose();
            self.b_hat[h] = &ft * c_hat;
            self.b_check[h] = &ft * c_check;
            self.b_tilde[h] = &ft * c_tilde;
            let (w_hat, w_check, _) = self.weights(h);
            let table = self.fmap.table();
            let lin_hat = table * w_hat;
            let lin_check = table * w_check;
            let bonus: Vec<f64> = row_quad_forms(table, self.acc[h].inverse())
                .into_iter()
                .map(|x| x.max(0.0).sqrt())
                .collect();
            let rewards = &self.rewards[h];
            for (i, slot) in self.q.stage_mut(h).iter_mut().enumerate() {
                let fresh = rewards[i] + lin_hat[i] + self.radii.beta * bonus[i];
                *slot = fresh.min(*slot).clamp(0.0, hf);
            }
            for (i, slot) in self.q_check.stage_mut(h).iter_mut().enumerate() {
                let fresh = rewards[i] + lin_check[i] - self.radii.beta_bar * bonus[i];
                *slot = fresh.max(*slot).clamp(0.0, hf);
            }
            self.v[h] = (0..ns).map(|s| self.q.state_value(h, s)).collect();
            self.v_check[h] = (0..ns).map(|s| self.q_check.state_value(h, s)).collect();
            debug_assert_eq!(self.q.stage(h).len(), ns * na);
        }
        self.policy = self.q.greedy_policy();
    }

    /// Switches when some `log det Σ_{t,h}` has grown by `ln 2` since the
    /// last switch.
    pub fn maybe_switch(&mut self) -> bool {
        let grown = self
            .acc
            .iter()
            .zip(&self.logdet_last)
            .any(|(a, last)| a.log_det() - last >= std::f64::consts::LN_2);
        if grown {
            self.switch_now();
        }
        grown
    }

    fn switch_now(&mut self) {
        self.resolve();
        self.logdet_last = self.log_dets();
        self.t_last = self.t;
        self.switches += 1;
    }

    /// Adds one transition with weight `σ̄⁻²`; `V` targets use the
    /// current value tables.
    fn absorb(&mut self, h: usize, pair: usize, next: Option<usize>) -> Result<f64> {
        let phi = self.phi(pair);
        let terms = self.estimate_sigma(&phi, h)?;
        let weight = terms.sigma_bar.powi(-2);
        self.weight_max = self.weight_max.max(weight);
        self.acc[h].add(&phi, weight)?;
        if let Some(sp) = next {
            let (v, vc) = (self.v[h + 1][sp], self.v_check[h + 1][sp]);
            self.b_hat[h].axpy(weight * v, &phi, 1.0);
            self.b_check[h].axpy(weight * vc, &phi, 1.0);
            self.b_tilde[h].axpy(weight * v * v, &phi, 1.0);
        }
        self.samples[h].push(Sample { pair, next, weight });
        Ok(weight)
    }

    /// Runs one online episode with greedy actions on `Q`.
    pub fn run_episode(
        &mut self,
        env: &dyn Environment,
        rng: &mut Rng,
        vstar: Option<&[f64]>,
    ) -> Result<EpisodeRecord> {
        self.t += 1;
        self.maybe_switch();
        self.mixture.push(&self.policy);
        let na = env.num_actions();
        let mut at = env.reset(rng);
        let start = at.state;
        let (mut ret, mut bonus_sum) = (0.0, 0.0);
        loop {
            let h = at.h;
            let action = argmax_lowest(&self.q.stage(h)[at.state * na..(at.state + 1) * na]);
            let pair = self.fmap.pair_index(at.state, action);
            bonus_sum += self.acc[h].bonus(&self.phi(pair))?;
            let out = env.step(at, action, rng)?;
            ret += out.reward;
            let next = (!out.terminal).then_some(out.next.state);
            self.absorb(h, pair, next)?;
            if out.terminal {
                break;
            }
            at = out.next;
        }
        Ok(EpisodeRecord {
            t: self.t,
            ret,
            regret: vstar.map(|v| v[start] - ret),
            switches_so_far: self.switches,
            mean_bonus: bonus_sum / self.horizon as f64,
        })
    }

    /// Feeds one logged trajectory through the online update path.
    fn replay(&mut self, traj: &Trajectory) -> Result<()> {
        self.t += 1;
        self.maybe_switch();
        for (h, s) in traj.steps.iter().enumerate() {
            let pair = self.fmap.pair_index(s.state, s.action);
            self.absorb(h, pair, traj.next_state(h))?;
        }
        Ok(())
    }
}

/// Replays the offline episodes in order, then re-solves once and resets
/// the episode counter so online play starts at `t = 1` with
/// `Σ_{1,h} = Σ_off + λI`.
pub fn warm_start(
    env: &dyn Environment,
    d_off: &Dataset,
    fmap: &FeatureMap,
    config: &HyruleConfig,
    online_episodes: usize,
) -> Result<HyruleState> {
    if !d_off.is_empty() && d_off.env_fingerprint() != env.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: env.fingerprint(),
            found: d_off.env_fingerprint().to_string(),
        });
    }
    let mut state = HyruleState::cold(env, fmap, config, d_off.len() + online_episodes)?;
    if d_off.is_empty() {
        return Ok(state);
    }
    for t in d_off.trajectories() {
        state.replay(t)?;
    }
    state.t = 0;
    state.switch_now();
    state.switches = 0;
    state.mixture = PolicyMixture::new();
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct HyruleRun {
    pub episodes: Vec<EpisodeRecord>,
    pub policy: DeterministicPolicy,
    pub mixture: PolicyMixture,
}

impl HyruleRun {
    pub fn cumulative_regret(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.episodes
            .iter()
            .map(|e| {
                acc += e.regret.unwrap_or(f64::NAN);
                acc
            })
            .collect()
    }

    /// `t,return,regret,switches_so_far,mean_bonus`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,return,regret,switches_so_far,mean_bonus\n");
        for e in &self.episodes {
            let regret = e.regret.map(|r| format!("{r:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:?},{},{},{:?}",
                e.t, e.ret, regret, e.switches_so_far, e.mean_bonus
            );
        }
        out
    }
}

/// `V*_1(s)` when the environment exposes its model.
pub fn optimal_initial_values(env: &dyn Environment) -> Option<Vec<f64>> {
    env.tabular().map(|spec| optimal_q(spec).stage_values(0))
}

pub fn hyrule_run(
    env: &dyn Environment,
    state: &mut HyruleState,
    episodes: usize,
    rng: &mut Rng,
) -> Result<HyruleRun> {
    if episodes == 0 {
        return Err(Error::InvalidArgument(
            "HYRULE needs at least one episode".into(),
        ));
    }
    let vstar = optimal_initial_values(env);
    let records = (0..episodes)
        .map(|_| state.run_episode(env, rng, vstar.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(HyruleRun {
        episodes: records,
        policy: state.greedy_policy().clone(),
        mixture: state.mixture().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_offline, UniformPolicy};
    use crate::env::{random_tabular_mdp, TabularMdpSpec};
    use crate::rng::seeded;

    fn setup(seed: u64) -> (TabularMdpSpec, FeatureMap) {
        (
            random_tabular_mdp(3, 2, 3, seed).unwrap(),
            FeatureMap::one_hot(3, 2),
        )
    }

    #[test]
    fn cold_start_initialization() {
        let (env, fm) = setup(0);
        let state = warm_start(
            &env,
            &Dataset::empty(&env),
            &fm,
            &HyruleConfig::practical(),
            10,
        )
        .unwrap();
        assert!(state.q().values().iter().all(|q| *q == 3.0));
        assert!(state.q_check().values().iter().all(|q| *q == 0.0));
        for h in 0..3 {
            assert_eq!(
                state.covariance(h).matrix(),
                &(nalgebra::DMatrix::identity(6, 6) * 1.0)
            );
        }
    }

    #[test]
    fn first_cold_action_is_lowest_id() {
        let (env, fm) = setup(1);
        let mut state = HyruleState::cold(&env, &fm, &HyruleConfig::practical(), 1).unwrap();
        let run = hyrule_run(&env, &mut state, 1, &mut seeded(0)).unwrap();
        assert_eq!(run.episodes.len(), 1);
        assert_eq!(state.switches(), 0);
        assert!(state.samples.iter().all(|s| s[0].pair % 2 == 0));
    }

    #[test]
    fn single_offline_episode_scalar() {
        let env = TabularMdpSpec::new(1, 1, 2, vec![1.0; 2], vec![0.5; 2], vec![1.0]).unwrap();
        let fm = FeatureMap::one_hot(1, 1);
        let off = gen_offline(&env, &UniformPolicy { num_actions: 1 }, 1, 0).unwrap();
        let state = warm_start(&env, &off, &fm, &HyruleConfig::practical(), 1).unwrap();
        for h in 0..2 {
            let w = state.samples[h][0].weight;
            assert!((state.covariance(h).matrix()[(0, 0)] - (1.0 + w)).abs() < 1e-15);
            assert!(w.powf(-0.5) >= 2f64.sqrt() - 1e-12);
        }
        assert_eq!(state.t_last(), 0);
        assert_eq!(state.episodes(), 0);
    }

    #[test]
    fn fingerprint_guard() {
        let (env, fm) = setup(2);
        let (other, _) = setup(3);
        let off = gen_offline(&other, &UniformPolicy { num_actions: 2 }, 3, 0).unwrap();
        assert!(matches!(
            warm_start(&env, &off, &fm, &HyruleConfig::practical(), 1),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn warm_start_bonuses_dominate() {
        let (env, fm) = setup(4);
        let off = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 30, 0).unwrap();
        let warm = warm_start(&env, &off, &fm, &HyruleConfig::practical(), 10).unwrap();
        let cold = warm_start(
            &env,
            &Dataset::empty(&env),
            &fm,
            &HyruleConfig::practical(),
            10,
        )
        .unwrap();
        for h in 0..3 {
            for p in 0..6 {
                let phi = fm.table().row(p).transpose();
                assert!(
                    warm.covariance(h).bonus(&phi).unwrap()
                        <= cold.covariance(h).bonus(&phi).unwrap() + 1e-12
                );
            }
        }
    }

    #[test]
    fn sigma_floors() {
        let env = TabularMdpSpec::new(1, 1, 4, vec![1.0; 4], vec![0.1; 4], vec![1.0]).unwrap();
        let fm = FeatureMap::one_hot(1, 1);
        let mut cfg = HyruleConfig::practical();
        cfg.c1 = 1e-9;
        cfg.c2 = 1e-9;
        cfg.c3 = 1e-9;
        let state = HyruleState::cold(&env, &fm, &cfg, 1).unwrap();
        let phi = DVector::from_vec(vec![1.0]);
        let t = state.estimate_sigma(&phi, 0).unwrap();
        assert!(t.sigma >= 2.0 && t.sigma_bar >= 2.0);

        let mut cfg0 = HyruleConfig::practical();
        cfg0.c2 = 0.0;
        let state = HyruleState::cold(&env, &fm, &cfg0, 1).unwrap();
        assert_eq!(state.estimate_sigma(&phi, 1).unwrap().d, 0.0);
    }

    #[test]
    fn sigma_invariants_on_random_snapshots() {
        for seed in 0..5 {
            let (env, fm) = setup(seed);
            let off = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 20, seed).unwrap();
            let mut state = warm_start(&env, &off, &fm, &HyruleConfig::practical(), 30).unwrap();
            hyrule_run(&env, &mut state, 30, &mut seeded(seed)).unwrap();
            for h in 0..3 {
                for p in 0..6 {
                    let phi = fm.table().row(p).transpose();
                    let t = state.estimate_sigma(&phi, h).unwrap();
                    let bonus = state.covariance(h).bonus(&phi).unwrap();
                    assert!(t.sigma_bar >= 3f64.sqrt() && t.sigma_bar >= t.sigma);
                    assert!(t.sigma_bar >= 2.0 * state.d3() * 9.0 * bonus.sqrt() - 1e-12);
                    assert!(t.sigma_bar.powi(-2) * phi.norm_squared() <= 1.0 / 3.0 + 1e-15);
                }
            }
            assert!(state.max_weight() <= 1.0 / 3.0 + 1e-15);
        }
    }

    #[test]
    fn scalar_switch_and_no_switch() {
        let env = TabularMdpSpec::new(1, 1, 1, vec![1.0], vec![0.5], vec![1.0]).unwrap();
        let fm = FeatureMap::one_hot(1, 1);
        let mut state = HyruleState::cold(&env, &fm, &HyruleConfig::practical(), 1).unwrap();
        assert!(!state.maybe_switch());
        state.acc[0]
            .add(&DVector::from_vec(vec![1.0]), 1.1)
            .unwrap();
        assert!(state.maybe_switch());
        assert!(!state.maybe_switch());
    }

    #[test]
    fn monotone_and_switch_budget() {
        for (seed, config) in
            (0..5).flat_map(|s| [(s, HyruleConfig::practical()), (s, HyruleConfig::theory())])
        {
            let ordered = config == HyruleConfig::theory();
            let (env, fm) = setup(10 + seed);
            let mut state = HyruleState::cold(&env, &fm, &config, 200).unwrap();
            let initial = state.log_dets();
            let mut rng = seeded(seed);
            let mut prev = (state.q().clone(), state.q_check().clone());
            for _ in 0..200 {
                state.run_episode(&env, &mut rng, None).unwrap();
                for (new, old) in state.q().values().iter().zip(prev.0.values()) {
                    assert!(new <= old);
                }
                for (new, old) in state.q_check().values().iter().zip(prev.1.values()) {
                    assert!(new >= old);
                }
                if ordered {
                    for (hi, lo) in state.q().values().iter().zip(state.q_check().values()) {
                        assert!(lo <= hi);
                    }
                }
                prev = (state.q().clone(), state.q_check().clone());
            }
            // Switches require a doubling of some determinant.
            let growth: f64 = state
                .log_dets()
                .iter()
                .zip(&initial)
                .map(|(a, b)| (a - b) / std::f64::consts::LN_2)
                .sum();
            assert!(state.switches() as f64 <= growth + 3.0);
        }
    }

    #[test]
    fn bandit_learns_optimal_arm() {
        let env = TabularMdpSpec::new(1, 2, 1, vec![1.0, 1.0], vec![0.5, 1.0], vec![1.0]).unwrap();
        let fm = FeatureMap::one_hot(1, 2);
        let mut state = HyruleState::cold(&env, &fm, &HyruleConfig::practical(), 300).unwrap();
        let run = hyrule_run(&env, &mut state, 300, &mut seeded(1)).unwrap();
        assert_eq!(run.policy.action(0, 0), 1);
        assert!(run.episodes.iter().all(|e| e.regret.unwrap() >= -1e-12));
        assert!(run.to_csv().lines().count() == 301);
    }
}
