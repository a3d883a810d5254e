//! Finite episodic environments behind a linear-MDP interface.
//!
//! Horizon indices are zero-based inside the library (`h ∈ 0..H`); files
//! and reports use one-based indices.

mod features;
mod tetris;

pub use features::{FeatureKind, FeatureMap};
pub use tetris::{MiniTetris, MiniTetrisConfig, Piece, BOARD_PATTERNS};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Position inside an episode: the zero-based step index and the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub h: usize,
    pub state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next: EnvState,
    pub terminal: bool,
}

/// A finite-horizon environment with finite state and action sets and a
/// known, deterministic reward function.
pub trait Environment {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Mean reward `r_h(s, a)`.
    fn reward(&self, h: usize, state: usize, action: usize) -> f64;

    fn sample_initial(&self, rng: &mut dyn rand::RngCore) -> usize;

    fn sample_next(
        &self,
        h: usize,
        state: usize,
        action: usize,
        rng: &mut dyn rand::RngCore,
    ) -> usize;

    /// Stable identifier of the dynamics, used to guard dataset loading.
    fn fingerprint(&self) -> String;

    /// The exact transition model when one is available.
    fn tabular(&self) -> Option<&TabularMdpSpec> {
        None
    }

    fn reset(&self, rng: &mut dyn rand::RngCore) -> EnvState {
        EnvState {
            h: 0,
            state: self.sample_initial(rng),
        }
    }

    fn step(
        &self,
        at: EnvState,
        action: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<StepOutcome> {
        if at.h >= self.horizon() {
            return Err(Error::EpisodeFinished(self.horizon()));
        }
        if action >= self.num_actions() {
            return Err(Error::ActionOutOfRange {
                action,
                num_actions: self.num_actions(),
            });
        }
        let reward = self.reward(at.h, at.state, action);
        let next_state = self.sample_next(at.h, at.state, action, rng);
        let next = EnvState {
            h: at.h + 1,
            state: next_state,
        };
        Ok(StepOutcome {
            reward,
            next,
            terminal: next.h == self.horizon(),
        })
    }
}

/// Draws an index from a probability vector by inversion.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Explicit finite-horizon MDP with per-step kernels and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdpSpec {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// `P_h(s'|s,a)` laid out as `[h][s][a][s']`.
    transitions: Vec<f64>,
    /// `r_h(s,a)` laid out as `[h][s][a]`.
    rewards: Vec<f64>,
    initial: Vec<f64>,
    reward_range: (f64, f64),
}

impl TabularMdpSpec {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        Self::with_reward_range(
            num_states,
            num_actions,
            horizon,
            transitions,
            rewards,
            initial,
            (0.0, 1.0),
        )
    }

    pub fn with_reward_range(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        reward_range: (f64, f64),
    ) -> Result<Self> {
        let spec = Self {
            num_states,
            num_actions,
            horizon,
            transitions,
            rewards,
            initial,
            reward_range,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a, h) = (self.num_states, self.num_actions, self.horizon);
        if s == 0 || a == 0 || h == 0 {
            return Err(Error::InvalidSpec(
                "states, actions and horizon must be positive".into(),
            ));
        }
        if self.transitions.len() != h * s * a * s {
            return Err(Error::InvalidSpec(format!(
                "transition table has {} entries, expected {}",
                self.transitions.len(),
                h * s * a * s
            )));
        }
        if self.rewards.len() != h * s * a {
            return Err(Error::InvalidSpec(format!(
                "reward table has {} entries, expected {}",
                self.rewards.len(),
                h * s * a
            )));
        }
        check_distribution(&self.initial, s, "initial distribution")?;
        for (row_idx, row) in self.transitions.chunks(s).enumerate() {
            check_distribution(row, s, &format!("transition row {row_idx}"))?;
        }
        let (lo, hi) = self.reward_range;
        if let Some(r) = self.rewards.iter().find(|r| !(**r >= lo && **r <= hi)) {
            return Err(Error::InvalidSpec(format!(
                "reward {r} outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn transition(&self, h: usize, state: usize, action: usize) -> &[f64] {
        let s = self.num_states;
        let start = ((h * s + state) * self.num_actions + action) * s;
        &self.transitions[start..start + s]
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn reward_range(&self) -> (f64, f64) {
        self.reward_range
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidSpec(format!(
            "{what} has length {}, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec(format!("{what} has a negative entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl Environment for TabularMdpSpec {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward(&self, h: usize, state: usize, action: usize) -> f64 {
        self.rewards[(h * self.num_states + state) * self.num_actions + action]
    }

    fn sample_initial(&self, rng: &mut dyn rand::RngCore) -> usize {
        sample_categorical(&self.initial, rng)
    }

    fn sample_next(
        &self,
        h: usize,
        state: usize,
        action: usize,
        rng: &mut dyn rand::RngCore,
    ) -> usize {
        sample_categorical(self.transition(h, state, action), rng)
    }

    fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn tabular(&self) -> Option<&TabularMdpSpec> {
        Some(self)
    }
}

/// Random MDP with Dirichlet(1) transition rows and initial distribution
/// and uniform rewards in `[0, 1]`.
pub fn random_tabular_mdp(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    seed: u64,
) -> Result<TabularMdpSpec> {
    if num_states == 0 || num_actions == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("sizes must be at least 1".into()));
    }
    let mut rng = seeded(seed);
    let dirichlet = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let draws: Vec<f64> = (0..num_states).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        draws.iter().map(|x| x / total).collect()
    };
    let initial = dirichlet(&mut rng);
    let mut transitions = Vec::with_capacity(horizon * num_states * num_actions * num_states);
    let mut rewards = Vec::with_capacity(horizon * num_states * num_actions);
    for _ in 0..horizon * num_states * num_actions {
        transitions.extend(dirichlet(&mut rng));
        rewards.push(rng.random::<f64>());
    }
    TabularMdpSpec::new(
        num_states,
        num_actions,
        horizon,
        transitions,
        rewards,
        initial,
    )
}
