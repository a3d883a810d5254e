//! Linear Q-function estimates with elliptic bonuses, and their
//! materialization into tables over a finite state-action grid.

use nalgebra::{DMatrix, DVector};

use crate::dataset::DeterministicPolicy;
use crate::env::{Environment, FeatureMap};
use crate::linalg::row_quad_forms;

/// Q-values over `[h][s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn filled(horizon: usize, num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            values: vec![value; horizon * num_states * num_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn idx(&self, h: usize, state: usize, action: usize) -> usize {
        (h * self.num_states + state) * self.num_actions + action
    }

    pub fn get(&self, h: usize, state: usize, action: usize) -> f64 {
        self.values[self.idx(h, state, action)]
    }

    pub fn set(&mut self, h: usize, state: usize, action: usize, value: f64) {
        let i = self.idx(h, state, action);
        self.values[i] = value;
    }

    /// Values at step `h` indexed by pair `s·|A| + a`.
    pub fn stage(&self, h: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.values[h * n..(h + 1) * n]
    }

    pub fn stage_mut(&mut self, h: usize) -> &mut [f64] {
        let n = self.num_states * self.num_actions;
        &mut self.values[h * n..(h + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Greedy action with ties broken towards the lowest action id.
    pub fn greedy_action(&self, h: usize, state: usize) -> usize {
        let row = &self.values[self.idx(h, state, 0)..self.idx(h, state, 0) + self.num_actions];
        argmax_lowest(row)
    }

    pub fn state_value(&self, h: usize, state: usize) -> f64 {
        let start = self.idx(h, state, 0);
        self.values[start..start + self.num_actions]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `V_h(s) = max_a Q_h(s, a)` for every state at step `h`.
    pub fn stage_values(&self, h: usize) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| self.state_value(h, s))
            .collect()
    }

    pub fn greedy_policy(&self) -> DeterministicPolicy {
        let actions = (0..self.horizon)
            .flat_map(|h| (0..self.num_states).map(move |s| (h, s)))
            .map(|(h, s)| self.greedy_action(h, s))
            .collect();
        DeterministicPolicy::new(self.horizon, self.num_states, self.num_actions, actions)
            .expect("greedy actions are in range")
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BonusSign {
    Optimistic,
    Pessimistic,
}

/// `Q_h(s,a) = clamp([r_h(s,a)] + φᵀw_h ± β‖φ‖_{Σ_h⁻¹}, lo_h, hi_h)`,
/// optionally capped by a previous estimate (from above for optimistic
/// estimates, from below for pessimistic ones).
#[derive(Debug, Clone)]
pub struct LinearQFunction {
    pub weights: Vec<DVector<f64>>,
    pub inverse_covariances: Vec<DMatrix<f64>>,
    pub bonus_coeff: f64,
    pub sign: BonusSign,
    pub clamp_ranges: Vec<(f64, f64)>,
    /// Add the known reward `r_h(s,a)` to the linear estimate.
    pub include_reward: bool,
}

impl LinearQFunction {
    /// Uncapped value of every pair at step `h`.
    pub fn stage_values(&self, h: usize, fmap: &FeatureMap, env: &dyn Environment) -> Vec<f64> {
        let table = fmap.table();
        let linear = table * &self.weights[h];
        let bonus: Vec<f64> = if self.bonus_coeff == 0.0 {
            vec![0.0; fmap.num_pairs()]
        } else {
            row_quad_forms(table, &self.inverse_covariances[h])
                .into_iter()
                .map(|q| q.max(0.0).sqrt())
                .collect()
        };
        let (lo, hi) = self.clamp_ranges[h];
        (0..fmap.num_pairs())
            .map(|pair| {
                let (s, a) = (pair / fmap.num_actions(), pair % fmap.num_actions());
                let mut q = linear[pair];
                if self.include_reward {
                    q += env.reward(h, s, a);
                }
                q += match self.sign {
                    BonusSign::Optimistic => self.bonus_coeff * bonus[pair],
                    BonusSign::Pessimistic => -self.bonus_coeff * bonus[pair],
                };
                q.max(lo).min(hi)
            })
            .collect()
    }

    /// Materializes the estimate at step `h` into `table`, applying the
    /// monotone cap against `table`'s current contents when `capped`.
    pub fn write_stage(
        &self,
        h: usize,
        fmap: &FeatureMap,
        env: &dyn Environment,
        table: &mut QTable,
        capped: bool,
    ) {
        let fresh = self.stage_values(h, fmap, env);
        let sign = self.sign;
        for (slot, q) in table.stage_mut(h).iter_mut().zip(fresh) {
            *slot = match (capped, sign) {
                (false, _) => q,
                (true, BonusSign::Optimistic) => q.min(*slot),
                (true, BonusSign::Pessimistic) => q.max(*slot),
            };
        }
    }
}
