//! Reward-agnostic exploration by Frank–Wolfe minimization of a soft-max
//! coverage objective, with LSVI-UCB as the inner regret minimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::dataset::{Dataset, Label, Step, Trajectory};
use crate::env::{Environment, FeatureMap};
use crate::error::{Error, Result};
use crate::linalg::{row_quad_forms, sym_eigenvalues, CovarianceAccumulator};
use crate::qfunc::argmax_lowest;
use crate::rng::Rng;

/// `β_exp = c_e·√d·log(dHN/δ)`.
pub fn exploration_radius(c_e: f64, dim: usize, horizon: usize, n: usize, delta: f64) -> f64 {
    let arg = (dim * horizon * n.max(1)) as f64 / delta;
    c_e * (dim as f64).sqrt() * arg.ln().max(0.0)
}

/// Per-step offline covariates `Σ_τ φ(s_h, a_h)φ(s_h, a_h)ᵀ`.
pub fn per_step_covariance(data: &Dataset, fmap: &FeatureMap) -> Vec<DMatrix<f64>> {
    let d = fmap.dim();
    let mut out = vec![DMatrix::zeros(d, d); data.horizon()];
    for t in data.trajectories() {
        for s in &t.steps {
            let phi = fmap
                .table()
                .row(fmap.pair_index(s.state, s.action))
                .transpose();
            out[s.h].ger(1.0, &phi, &phi, 1.0);
        }
    }
    out
}

/// One epoch's objective `f_i(Λ) = η⁻¹ log Σ_φ exp(η‖φ‖²_{A_i(Λ)⁻¹})` with
/// `A_i(Λ) = Λ + warm`.
#[derive(Debug, Clone)]
pub struct CoverageObjectiveState {
    pub epoch: u32,
    pub eta: f64,
    pub iterates: usize,
    pub episodes_per_iterate: usize,
    /// `(T_iK_i)⁻¹(Λ_{0,i} + Λ_off)`.
    pub warm_matrix: DMatrix<f64>,
    /// Current normalized covariance average `Λ_t`.
    pub lambda: DMatrix<f64>,
    /// Rows are the feature vectors the soft-max ranges over.
    pub features: DMatrix<f64>,
}

/// Soft-max value together with the hard maximum it approximates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxValue {
    pub value: f64,
    pub hard_max: f64,
}

impl SoftmaxValue {
    /// `max ≤ f ≤ max + η⁻¹ log|Φ|`, up to rounding.
    pub fn sandwich_holds(&self, eta: f64, num_features: usize) -> bool {
        let slack = 1e-9 * self.hard_max.abs().max(1.0);
        self.value >= self.hard_max - slack
            && self.value <= self.hard_max + (num_features as f64).ln() / eta + slack
    }
}

impl CoverageObjectiveState {
    /// Epoch `i ≥ 1` with `T_i = K_i = 2^i`, `η_i = 2^{2i/5}` and
    /// `Λ_{0,i} + Λ_off = base`.
    pub fn new(epoch: u32, base: &DMatrix<f64>, features: DMatrix<f64>) -> Result<Self> {
        if epoch == 0 || epoch > 30 {
            return Err(Error::InvalidArgument(format!(
                "epoch index must lie in 1..=30, got {epoch}"
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("feature set is empty".into()));
        }
        let t = 1usize << epoch;
        let d = features.ncols();
        Ok(Self {
            epoch,
            eta: 2f64.powf(2.0 * f64::from(epoch) / 5.0),
            iterates: t,
            episodes_per_iterate: t,
            warm_matrix: base / (t * t) as f64,
            lambda: DMatrix::zeros(d, d),
            features,
        })
    }

    fn a_inverse(&self, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        (lambda + &self.warm_matrix)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::InvalidArgument("coverage matrix A is singular".into()))
    }

    /// `‖φ‖²_{A⁻¹}` for every feature, and the soft-max weights.
    fn norms_and_weights(&self, a_inv: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, f64) {
        let norms = row_quad_forms(&self.features, a_inv);
        let top = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = norms.iter().map(|n| (self.eta * (n - top)).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        (norms, w, z)
    }

    /// `f_i(Λ)` computed with a max shift.
    pub fn coverage_softmax(&self, lambda: &DMatrix<f64>) -> Result<SoftmaxValue> {
        let a_inv = self.a_inverse(lambda)?;
        let (norms, _, z) = self.norms_and_weights(&a_inv);
        let hard_max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(SoftmaxValue {
            value: hard_max + z.ln() / self.eta,
            hard_max,
        })
    }

    /// Raw scores `tr(−∇f(Λ_t) φφᵀ) = Σ_{φ'} p(φ')(φᵀA⁻¹φ')²` for each
    /// row of `grid`.
    pub fn raw_scores(&self, grid: &DMatrix<f64>) -> Result<Vec<f64>> {
        let a_inv = self.a_inverse(&self.lambda)?;
        let (_, p, _) = self.norms_and_weights(&a_inv);
        let mut weighted = DMatrix::zeros(self.features.ncols(), self.features.ncols());
        for (i, pi) in p.iter().enumerate() {
            if *pi > 0.0 {
                let v = self.features.row(i).transpose();
                weighted.ger(*pi, &v, &v, 1.0);
            }
        }
        let m = &a_inv * weighted * &a_inv;
        Ok(row_quad_forms(grid, &m)
            .into_iter()
            .map(|x| x.max(0.0))
            .collect())
    }

    /// Raw scores normalized by their maximum; `None` when all vanish.
    pub fn synthetic_reward(&self, grid: &DMatrix<f64>) -> Result<Option<Vec<f64>>> {
        let raw = self.raw_scores(grid)?;
        let top = raw.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            return Ok(None);
        }
        Ok(Some(raw.into_iter().map(|x| x / top).collect()))
    }
}

/// `Λ_{t+1} = (1 − 1/(t+1))Λ_t + (1/(t+1))Γ_t/K`.
pub fn frank_wolfe_mix(
    lambda_t: &DMatrix<f64>,
    gamma_t: &DMatrix<f64>,
    k: usize,
    t: usize,
) -> DMatrix<f64> {
    let step = 1.0 / (t as f64 + 1.0);
    lambda_t * (1.0 - step) + gamma_t * (step / k as f64)
}

#[derive(Debug, Clone)]
struct StepData {
    acc: CovarianceAccumulator,
    /// `(pair, next state)`; `None` at the last step.
    samples: Vec<(usize, Option<usize>)>,
}

/// Optimistic least-squares value iteration for a known reward placed at
/// a single target step, regressing only the continuation value.
#[derive(Debug, Clone)]
pub struct LsviUcb {
    beta: f64,
    horizon: usize,
    steps: Vec<StepData>,
}

impl LsviUcb {
    pub fn new(fmap: &FeatureMap, horizon: usize, lambda: f64, beta: f64) -> Result<Self> {
        let acc = CovarianceAccumulator::new(fmap.dim(), lambda)?;
        Ok(Self {
            beta,
            horizon,
            steps: vec![
                StepData {
                    acc,
                    samples: Vec::new(),
                };
                horizon
            ],
        })
    }

    pub fn observe(&mut self, fmap: &FeatureMap, traj: &Trajectory) -> Result<()> {
        for (h, s) in traj.steps.iter().enumerate() {
            let pair = fmap.pair_index(s.state, s.action);
            let phi = fmap.table().row(pair).transpose();
            self.steps[h].acc.add(&phi, 1.0)?;
            self.steps[h].samples.push((pair, traj.next_state(h)));
        }
        Ok(())
    }

    /// `Q_h` for `h = 0..=target`, indexed by pair.
    pub fn plan(&self, fmap: &FeatureMap, target: usize, reward: &[f64]) -> Vec<Vec<f64>> {
        let (ns, na) = (fmap.num_states(), fmap.num_actions());
        let hmax = self.horizon as f64;
        let mut q = vec![Vec::new(); target + 1];
        let mut next_v = vec![0.0; ns];
        for h in (0..=target).rev() {
            let data = &self.steps[h];
            let inv = data.acc.inverse();
            let bonus = row_quad_forms(fmap.table(), inv);
            let linear = if h == target {
                DVector::zeros(fmap.num_pairs())
            } else {
                let mut coeff = DVector::zeros(fmap.num_pairs());
                for &(pair, next) in &data.samples {
                    if let Some(sp) = next {
                        coeff[pair] += next_v[sp];
                    }
                }
                let b = fmap.table().transpose() * coeff;
                fmap.table() * (inv * b)
            };
            let stage: Vec<f64> = (0..fmap.num_pairs())
                .map(|i| {
                    let r = if h == target { reward[i] } else { 0.0 };
                    (r + linear[i] + self.beta * bonus[i].max(0.0).sqrt()).clamp(0.0, hmax)
                })
                .collect();
            next_v = (0..ns)
                .map(|s| {
                    stage[s * na..(s + 1) * na]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            q[h] = stage;
        }
        q
    }
}

/// Plays one episode: greedy on `q` up to its last step, uniform after.
fn play_planned(
    env: &dyn Environment,
    q: &[Vec<f64>],
    label: Label,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let na = env.num_actions();
    let mut at = env.reset(rng);
    let mut steps = Vec::with_capacity(env.horizon());
    loop {
        let action = match q.get(at.h) {
            Some(stage) => argmax_lowest(&stage[at.state * na..(at.state + 1) * na]),
            None => rng.random_range(0..na),
        };
        let out = env.step(at, action, rng)?;
        steps.push(Step {
            h: at.h,
            state: at.state,
            action,
            reward: out.reward,
        });
        if out.terminal {
            break;
        }
        at = out.next;
    }
    Ok(Trajectory { label, steps })
}

/// Result of running the inner learner for `K` episodes.
#[derive(Debug, Clone)]
pub struct InnerRun {
    pub trajectories: Vec<Trajectory>,
    /// `Σ φφᵀ` of the visited features at the target step.
    pub covariates: DMatrix<f64>,
}

/// Runs LSVI-UCB for `episodes` episodes on a reward supported on
/// `target`, replanning after every episode.
pub fn inner_regret_min(
    env: &dyn Environment,
    fmap: &FeatureMap,
    learner: &mut LsviUcb,
    target: usize,
    reward: &[f64],
    episodes: usize,
    rng: &mut Rng,
) -> Result<InnerRun> {
    let mut trajectories = Vec::with_capacity(episodes);
    let mut covariates = DMatrix::zeros(fmap.dim(), fmap.dim());
    for _ in 0..episodes {
        let q = learner.plan(fmap, target, reward);
        let traj = play_planned(env, &q, Label::Exploration, rng)?;
        learner.observe(fmap, &traj)?;
        let s = &traj.steps[target];
        let phi = fmap
            .table()
            .row(fmap.pair_index(s.state, s.action))
            .transpose();
        covariates.ger(1.0, &phi, &phi, 1.0);
        trajectories.push(traj);
    }
    Ok(InnerRun {
        trajectories,
        covariates,
    })
}

#[derive(Debug, Clone)]
pub struct OptcovConfig {
    pub tau: f64,
    /// Hard cap on exploration episodes across all steps and epochs.
    pub budget: usize,
    pub delta: f64,
    /// Regularizer `λ̄` of the coverage target and of `Λ_{0,i}`.
    pub lambda: f64,
    pub c_e: f64,
    /// Record the pooled coverage every this many episodes (0 disables).
    pub trace_interval: usize,
}

impl OptcovConfig {
    pub fn new(tau: f64, budget: usize, horizon: usize) -> Self {
        Self {
            tau,
            budget,
            delta: 0.05,
            lambda: 1.0 / (horizon * horizon) as f64,
            c_e: 0.1,
            trace_interval: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "τ must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) || !(self.c_e >= 0.0) {
            return Err(Error::InvalidArgument(
                "λ must be positive, δ in (0, 1) and c_e nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epochs: u32,
    pub episodes: usize,
    pub final_objective: Option<f64>,
    /// `max_φ φᵀ(Λ̂_h + λI + Λ_off,h)⁻¹φ` at exit.
    pub max_bonus: f64,
    pub success: bool,
    /// The synthetic reward vanished on some iterate.
    pub zero_reward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptcovReport {
    pub steps: Vec<StepReport>,
    pub episodes_used: usize,
    /// `(episodes, 1/λ_min(λI + Σ_h(Λ_off,h + Λ̂_h)))`.
    pub coverage_trace: Vec<(usize, f64)>,
    pub softmax_evaluations: usize,
    pub sandwich_violations: usize,
}

impl OptcovReport {
    pub fn coverage_unmet(&self) -> bool {
        self.steps.iter().any(|s| !s.success)
    }
}

#[derive(Debug, Clone)]
pub struct OptcovOutput {
    pub data: Dataset,
    /// Online covariates `Λ̂_h` per step (unnormalized).
    pub covariates: Vec<DMatrix<f64>>,
    pub report: OptcovReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Halt {
    Covered,
    Budget,
}

struct Explorer<'a> {
    env: &'a dyn Environment,
    fmap: &'a FeatureMap,
    config: &'a OptcovConfig,
    learner: LsviUcb,
    coverage: Vec<CovarianceAccumulator>,
    online: Vec<DMatrix<f64>>,
    pooled: DMatrix<f64>,
    trajectories: Vec<Trajectory>,
    trace: Vec<(usize, f64)>,
    cap: usize,
}

impl Explorer<'_> {
    fn max_bonus(&self, h: usize) -> f64 {
        row_quad_forms(self.fmap.table(), self.coverage[h].inverse())
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn covered(&self, h: usize) -> bool {
        self.max_bonus(h) <= self.config.tau
    }

    fn record(&mut self, traj: Trajectory) -> Result<()> {
        for s in &traj.steps {
            let phi = self
                .fmap
                .table()
                .row(self.fmap.pair_index(s.state, s.action))
                .transpose();
            self.coverage[s.h].add(&phi, 1.0)?;
            self.online[s.h].ger(1.0, &phi, &phi, 1.0);
            self.pooled.ger(1.0, &phi, &phi, 1.0);
        }
        self.trajectories.push(traj);
        let n = self.trajectories.len();
        if self.config.trace_interval > 0 && n % self.config.trace_interval == 0 {
            self.trace.push((n, pooled_coverage(&self.pooled)));
        }
        Ok(())
    }

    /// Plays `episodes` episodes (uniform when `reward` is `None`) and
    /// returns the covariates gathered at `target`.
    fn play(
        &mut self,
        target: usize,
        reward: Option<&[f64]>,
        episodes: usize,
        rng: &mut Rng,
    ) -> Result<(DMatrix<f64>, Option<Halt>)> {
        let mut gamma = DMatrix::zeros(self.fmap.dim(), self.fmap.dim());
        for _ in 0..episodes {
            if self.trajectories.len() >= self.cap {
                return Ok((gamma, Some(Halt::Budget)));
            }
            let q = match reward {
                Some(g) => self.learner.plan(self.fmap, target, g),
                None => Vec::new(),
            };
            let traj = play_planned(self.env, &q, Label::Exploration, rng)?;
            self.learner.observe(self.fmap, &traj)?;
            let s = &traj.steps[target];
            let phi = self
                .fmap
                .table()
                .row(self.fmap.pair_index(s.state, s.action))
                .transpose();
            gamma.ger(1.0, &phi, &phi, 1.0);
            self.record(traj)?;
            if self.covered(target) {
                return Ok((gamma, Some(Halt::Covered)));
            }
        }
        Ok((gamma, None))
    }
}

fn pooled_coverage(pooled: &DMatrix<f64>) -> f64 {
    1.0 / sym_eigenvalues(pooled).last().copied().unwrap_or(f64::NAN)
}

/// Explores each step in turn until `max_φ φᵀ(Λ̂_h + λI + Λ_off,h)⁻¹φ ≤ τ`
/// or the episode budget runs out. Each step may spend at most an even
/// share of the remaining budget; data gathered while targeting one step
/// counts towards every step.
pub fn optcov(
    env: &dyn Environment,
    fmap: &FeatureMap,
    offline: &Dataset,
    config: &OptcovConfig,
    rng: &mut Rng,
) -> Result<OptcovOutput> {
    config.validate()?;
    let horizon = env.horizon();
    if offline.horizon() != horizon {
        return Err(Error::InvalidArgument(format!(
            "offline horizon {} differs from the environment's {horizon}",
            offline.horizon()
        )));
    }
    let d = fmap.dim();
    let n_hint = config.budget + offline.len();
    let beta = exploration_radius(config.c_e, d, horizon, n_hint, config.delta);
    let mut learner = LsviUcb::new(fmap, horizon, 1.0, beta)?;
    let mut coverage = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        coverage.push(CovarianceAccumulator::new(d, config.lambda)?);
    }
    let off_cov = per_step_covariance(offline, fmap);
    let mut pooled = DMatrix::identity(d, d) * config.lambda;
    for t in offline.trajectories() {
        learner.observe(fmap, t)?;
        for s in &t.steps {
            let phi = fmap
                .table()
                .row(fmap.pair_index(s.state, s.action))
                .transpose();
            coverage[s.h].add(&phi, 1.0)?;
            pooled.ger(1.0, &phi, &phi, 1.0);
        }
    }
    let mut ex = Explorer {
        env,
        fmap,
        config,
        learner,
        coverage,
        online: vec![DMatrix::zeros(d, d); horizon],
        trace: Vec::new(),
        pooled,
        trajectories: Vec::new(),
        cap: 0,
    };
    if config.trace_interval > 0 {
        ex.trace.push((0, pooled_coverage(&ex.pooled)));
    }

    let mut steps = Vec::with_capacity(horizon);
    let (mut evaluations, mut violations) = (0, 0);
    for h in 0..horizon {
        let mut report = StepReport {
            epochs: 0,
            episodes: 0,
            final_objective: None,
            max_bonus: ex.max_bonus(h),
            success: ex.covered(h),
            zero_reward: false,
        };
        if report.success {
            steps.push(report);
            continue;
        }
        let start = ex.trajectories.len();
        let remaining = config.budget - start;
        ex.cap = start + remaining.div_ceil(horizon - h);
        let mut halt = None;
        let mut epoch = 0u32;
        while halt.is_none() {
            epoch += 1;
            let base = DMatrix::identity(d, d) * config.lambda + &ex.online[h] + &off_cov[h];
            let mut state = CoverageObjectiveState::new(epoch, &base, fmap.table().clone())?;
            let k = state.episodes_per_iterate;
            let (gamma0, stop) = ex.play(h, None, k, rng)?;
            halt = stop;
            state.lambda = gamma0 / k as f64;
            for t in 1..=state.iterates {
                if halt.is_some() {
                    break;
                }
                let f = state.coverage_softmax(&state.lambda)?;
                evaluations += 1;
                violations += usize::from(!f.sandwich_holds(state.eta, fmap.num_pairs()));
                let reward = match state.synthetic_reward(fmap.table())? {
                    Some(g) => Some(g),
                    None => {
                        report.zero_reward = true;
                        None
                    }
                };
                let (gamma, stop) = ex.play(h, reward.as_deref(), k, rng)?;
                halt = stop;
                state.lambda = frank_wolfe_mix(&state.lambda, &gamma, k, t);
            }
            let f = state.coverage_softmax(&state.lambda)?;
            evaluations += 1;
            violations += usize::from(!f.sandwich_holds(state.eta, fmap.num_pairs()));
            report.final_objective = Some(f.value);
        }
        report.epochs = epoch;
        report.episodes = ex.trajectories.len() - start;
        report.max_bonus = ex.max_bonus(h);
        report.success = halt == Some(Halt::Covered);
        steps.push(report);
    }
    // Later targets' data may have completed earlier steps.
    for (h, r) in steps.iter_mut().enumerate() {
        r.max_bonus = ex.max_bonus(h);
        r.success = r.max_bonus <= config.tau;
    }

    let episodes_used = ex.trajectories.len();
    let data = Dataset::new(
        env.fingerprint(),
        fmap.reference(),
        horizon,
        ex.trajectories,
    )?;
    Ok(OptcovOutput {
        data,
        covariates: ex.online,
        report: OptcovReport {
            steps,
            episodes_used,
            coverage_trace: ex.trace,
            softmax_evaluations: evaluations,
            sandwich_violations: violations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_offline, UniformPolicy};
    use crate::env::{random_tabular_mdp, TabularMdpSpec};
    use crate::linalg::quad_form;
    use crate::rng::seeded;

    #[test]
    fn single_feature_softmax() {
        let features = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut state = CoverageObjectiveState::new(1, &DMatrix::zeros(1, 1), features).unwrap();
        state.eta = 1.0;
        let f = state.coverage_softmax(&DMatrix::identity(1, 1)).unwrap();
        assert!((f.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn schedules_are_exact() {
        let f = DMatrix::identity(2, 2);
        for i in 1..8u32 {
            let s = CoverageObjectiveState::new(i, &DMatrix::identity(2, 2), f.clone()).unwrap();
            assert_eq!(s.iterates, 1 << i);
            assert_eq!(s.episodes_per_iterate, 1 << i);
            assert_eq!(s.eta, 2f64.powf(2.0 * f64::from(i) / 5.0));
            assert_eq!(s.warm_matrix[(0, 0)], 1.0 / (1u64 << (2 * i)) as f64);
        }
        assert!(CoverageObjectiveState::new(0, &DMatrix::identity(2, 2), f).is_err());
    }

    fn random_features(rng: &mut Rng, n: usize, d: usize) -> DMatrix<f64> {
        let f = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        DMatrix::from_rows(
            &f.row_iter()
                .map(|r| r / (r.norm() * 1.2))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn softmax_sandwich_on_random_instances() {
        let mut rng = seeded(9);
        for trial in 0..50 {
            let features = random_features(&mut rng, 7, 4);
            let base = DMatrix::identity(4, 4) * 0.3;
            let state =
                CoverageObjectiveState::new(1 + trial % 6, &base, features.clone()).unwrap();
            let g = random_features(&mut rng, 5, 4);
            let lam = g.transpose() * g;
            let f = state.coverage_softmax(&lam).unwrap();
            let a_inv = (&lam + &state.warm_matrix).try_inverse().unwrap();
            let oracle = features
                .row_iter()
                .map(|r| quad_form(&a_inv, &r.transpose()))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((f.hard_max - oracle).abs() < 1e-9 * oracle.max(1.0));
            assert!(f.sandwich_holds(state.eta, 7));
        }
    }

    #[test]
    fn large_eta_approaches_hard_max() {
        let features = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.6, 0.6]);
        let mut state = CoverageObjectiveState::new(1, &DMatrix::identity(2, 2), features).unwrap();
        state.eta = 1e4;
        let f = state
            .coverage_softmax(&DMatrix::from_diagonal_element(2, 2, 1.0))
            .unwrap();
        assert!(f.value - f.hard_max <= 3f64.ln() / 1e4 + 1e-12);
    }

    #[test]
    fn synthetic_reward_single_direction() {
        let features = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let mut state = CoverageObjectiveState::new(1, &DMatrix::zeros(3, 3), features).unwrap();
        state.lambda = DMatrix::identity(3, 3);
        let grid = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.0, -0.9, 0.1, 0.1, 0.0, 0.3, 0.9]);
        let g = state.synthetic_reward(&grid).unwrap().unwrap();
        assert_eq!(argmax_lowest(&g), 1);
        assert_eq!(g[2], 0.0);
        assert!(g.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn raw_scores_match_finite_difference_gradient() {
        let mut rng = seeded(31);
        for _ in 0..5 {
            let features = random_features(&mut rng, 6, 3);
            let g = random_features(&mut rng, 4, 3);
            let mut state =
                CoverageObjectiveState::new(2, &(DMatrix::identity(3, 3) * 0.5), features.clone())
                    .unwrap();
            state.lambda = g.transpose() * g;
            let grid = random_features(&mut rng, 5, 3);
            let raw = state.raw_scores(&grid).unwrap();
            let eps = 1e-6;
            for (i, r) in raw.iter().enumerate() {
                let phi = grid.row(i).transpose();
                let dir = &phi * phi.transpose();
                let up = state
                    .coverage_softmax(&(&state.lambda + &dir * eps))
                    .unwrap()
                    .value;
                let down = state
                    .coverage_softmax(&(&state.lambda - &dir * eps))
                    .unwrap()
                    .value;
                let fd = -(up - down) / (2.0 * eps);
                assert!((fd - r).abs() < 1e-4, "{fd} vs {r}");
            }
        }
    }

    #[test]
    fn frank_wolfe_average_is_convex_combination() {
        let mut rng = seeded(2);
        let k = 4;
        let gammas: Vec<DMatrix<f64>> = (0..6)
            .map(|_| {
                let g = random_features(&mut rng, k, 3);
                g.transpose() * g
            })
            .collect();
        let mut lam = &gammas[0] / k as f64;
        for (t, g) in gammas.iter().enumerate().skip(1) {
            lam = frank_wolfe_mix(&lam, g, k, t);
        }
        let mean_trace: f64 =
            gammas.iter().map(|g| g.trace() / k as f64).sum::<f64>() / gammas.len() as f64;
        assert!((lam.trace() - mean_trace).abs() < 1e-9);
    }

    #[test]
    fn inner_learner_bookkeeping_and_reaching() {
        // Chain: action 1 moves right, action 0 resets to state 0; the
        // reward sits on (2, 1) at step 2.
        let (ns, na, horizon) = (5, 2, 6);
        let mut t = Vec::new();
        for _ in 0..horizon {
            for s in 0..ns {
                let mut left = vec![0.0; ns];
                left[0] = 1.0;
                let mut right = vec![0.0; ns];
                right[(s + 1).min(ns - 1)] = 1.0;
                t.extend(left);
                t.extend(right);
            }
        }
        let mut init = vec![0.0; ns];
        init[0] = 1.0;
        let env =
            TabularMdpSpec::new(ns, na, horizon, t, vec![0.0; horizon * ns * na], init).unwrap();
        let fm = FeatureMap::one_hot(ns, na);
        let mut reward = vec![0.0; ns * na];
        reward[fm.pair_index(2, 1)] = 1.0;
        let beta = 0.3;
        let mut learner = LsviUcb::new(&fm, horizon, 1.0, beta).unwrap();
        let mut rng = seeded(5);
        let run = inner_regret_min(&env, &fm, &mut learner, 2, &reward, 150, &mut rng).unwrap();
        assert_eq!(run.trajectories.len(), 150);
        let mut direct = DMatrix::zeros(10, 10);
        for tr in &run.trajectories {
            let s = &tr.steps[2];
            direct[(
                fm.pair_index(s.state, s.action),
                fm.pair_index(s.state, s.action),
            )] += 1.0;
        }
        assert_eq!(direct, run.covariates);
        let hits = run.trajectories[50..]
            .iter()
            .filter(|tr| tr.steps[2].state == 2 && tr.steps[2].action == 1)
            .count();
        assert!(hits as f64 >= 0.9 * 100.0, "{hits}");

        let mut one = LsviUcb::new(&fm, horizon, 1.0, 0.1).unwrap();
        let run = inner_regret_min(&env, &fm, &mut one, 0, &reward, 1, &mut rng).unwrap();
        assert_eq!(run.trajectories.len(), 1);
    }

    fn scalar_env(horizon: usize) -> TabularMdpSpec {
        TabularMdpSpec::new(
            1,
            1,
            horizon,
            vec![1.0; horizon],
            vec![0.5; horizon],
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_case_uses_closed_form_episode_count() {
        let env = scalar_env(1);
        let fm = FeatureMap::one_hot(1, 1);
        for (n_off, tau) in [(0usize, 0.05), (3, 0.04), (7, 0.3)] {
            let offline = if n_off == 0 {
                Dataset::empty(&env)
            } else {
                gen_offline(&env, &UniformPolicy { num_actions: 1 }, n_off, 0).unwrap()
            };
            let mut cfg = OptcovConfig::new(tau, 10_000, 1);
            cfg.lambda = 0.5;
            let out = optcov(&env, &fm, &offline, &cfg, &mut seeded(1)).unwrap();
            let need = (1.0 / tau - 0.5 - n_off as f64).ceil().max(0.0) as usize;
            assert_eq!(out.report.episodes_used, need, "n_off {n_off} τ {tau}");
            assert!(out.report.steps[0].success);
        }
    }

    #[test]
    fn pre_met_tolerance_consumes_nothing() {
        let env = random_tabular_mdp(3, 2, 3, 0).unwrap();
        let fm = FeatureMap::one_hot(3, 2);
        let offline = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 50, 0).unwrap();
        let cfg = OptcovConfig::new(1e6, 100, 3);
        let out = optcov(&env, &fm, &offline, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(out.report.episodes_used, 0);
        assert!(!out.report.coverage_unmet());
    }

    #[test]
    fn budget_is_a_hard_cap_and_success_is_sound() {
        for seed in 0..10 {
            let env = random_tabular_mdp(3, 2, 3, seed).unwrap();
            let fm = FeatureMap::one_hot(3, 2);
            let offline = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 5, seed).unwrap();
            let tau = if seed % 2 == 0 { 0.2 } else { 1e-4 };
            let mut cfg = OptcovConfig::new(tau, 60, 3);
            cfg.trace_interval = 10;
            let out = optcov(&env, &fm, &offline, &cfg, &mut seeded(seed)).unwrap();
            assert!(out.report.episodes_used <= 60);
            assert_eq!(out.data.len(), out.report.episodes_used);
            assert_eq!(out.report.sandwich_violations, 0);
            let off = per_step_covariance(&offline, &fm);
            for (h, r) in out.report.steps.iter().enumerate() {
                if r.success {
                    let m = &out.covariates[h] + &off[h] + DMatrix::identity(6, 6) * cfg.lambda;
                    let inv = m.try_inverse().unwrap();
                    let worst = row_quad_forms(fm.table(), &inv)
                        .into_iter()
                        .fold(0.0, f64::max);
                    assert!(worst <= tau * (1.0 + 1e-6));
                }
            }
            if tau < 1e-3 {
                assert!(out.report.coverage_unmet());
                assert_eq!(out.report.episodes_used, 60);
            }
        }
    }

    #[test]
    fn warm_start_never_hurts_measured_coverage() {
        let env = random_tabular_mdp(4, 2, 3, 3).unwrap();
        let fm = FeatureMap::one_hot(4, 2);
        let offline = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 20, 3).unwrap();
        let extra = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 30, 4).unwrap();
        let online = per_step_covariance(&extra, &fm);
        let off = per_step_covariance(&offline, &fm);
        for h in 0..3 {
            let cold = (&online[h] + DMatrix::identity(8, 8) * 0.1)
                .try_inverse()
                .unwrap();
            let warm = (&online[h] + &off[h] + DMatrix::identity(8, 8) * 0.1)
                .try_inverse()
                .unwrap();
            let c = row_quad_forms(fm.table(), &cold)
                .into_iter()
                .fold(0.0, f64::max);
            let w = row_quad_forms(fm.table(), &warm)
                .into_iter()
                .fold(0.0, f64::max);
            assert!(w <= c + 1e-12);
        }
    }
}
