//! Trajectories, behavior policies, offline dataset generation and the
//! newline-delimited dataset file format.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, Environment};
use crate::error::{Error, Result};
use crate::rng::{seeded, substream};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Offline,
    Online,
    Exploration,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::Offline => "offline",
            Label::Online => "online",
            Label::Exploration => "exploration",
        };
        f.write_str(s)
    }
}

/// One transition; `h` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: Label,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// State reached after step `h`, when it was recorded.
    pub fn next_state(&self, h: usize) -> Option<usize> {
        self.steps.get(h + 1).map(|s| s.state)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    fn validate(&self, horizon: usize) -> std::result::Result<(), String> {
        if self.steps.len() != horizon {
            return Err(format!(
                "trajectory has {} steps, expected {horizon}",
                self.steps.len()
            ));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.h != i {
                return Err(format!("step {i} carries horizon index {}", step.h + 1));
            }
            if !step.reward.is_finite() {
                return Err(format!("non-finite reward at step {}", i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    env_fingerprint: String,
    feature_map_ref: String,
    horizon: usize,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(
        env_fingerprint: String,
        feature_map_ref: String,
        horizon: usize,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        for (i, t) in trajectories.iter().enumerate() {
            t.validate(horizon)
                .map_err(|m| Error::InvalidArgument(format!("trajectory {i}: {m}")))?;
        }
        Ok(Self {
            env_fingerprint,
            feature_map_ref,
            horizon,
            trajectories,
        })
    }

    pub fn empty(env: &dyn Environment) -> Self {
        Self {
            env_fingerprint: env.fingerprint(),
            feature_map_ref: String::new(),
            horizon: env.horizon(),
            trajectories: Vec::new(),
        }
    }

    pub fn env_fingerprint(&self) -> &str {
        &self.env_fingerprint
    }

    pub fn feature_map_ref(&self) -> &str {
        &self.feature_map_ref
    }

    pub fn set_feature_map_ref(&mut self, r: impl Into<String>) {
        self.feature_map_ref = r.into();
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_off(&self) -> usize {
        self.count_label(Label::Offline)
    }

    pub fn n_on(&self) -> usize {
        self.len() - self.n_off()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.label == label)
            .count()
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate(self.horizon)
            .map_err(|m| Error::InvalidArgument(m))?;
        self.trajectories.push(traj);
        Ok(())
    }

    /// Concatenation of two datasets recorded on the same environment.
    pub fn merged(&self, other: &Dataset) -> Result<Dataset> {
        if other.env_fingerprint != self.env_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.env_fingerprint.clone(),
                found: other.env_fingerprint.clone(),
            });
        }
        let mut out = self.clone();
        out.trajectories.extend(other.trajectories.iter().cloned());
        Ok(out)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            env_fingerprint: self.env_fingerprint.clone(),
            feature_map_ref: self.feature_map_ref.clone(),
            horizon: self.horizon,
            trajectories: indices
                .iter()
                .map(|&i| self.trajectories[i].clone())
                .collect(),
        }
    }

    /// Disjoint split by trajectory after a seeded shuffle; the first side
    /// receives `round(fraction·N)` trajectories.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.len();
        let first = (fraction * n as f64).round() as usize;
        if first == 0 || first == n {
            return Err(Error::InvalidArgument(format!(
                "splitting {n} trajectories at {fraction} leaves one side empty"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeded(seed));
        let (a, b) = idx.split_at(first);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a), self.subset(&b)))
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = Header {
            env_fingerprint: self.env_fingerprint.clone(),
            h: self.horizon,
            version: DATASET_VERSION,
            feature_map: self.feature_map_ref.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (id, t) in self.trajectories.iter().enumerate() {
            let rec = Record {
                id,
                label: t.label,
                steps: t
                    .steps
                    .iter()
                    .map(|s| StepRecord {
                        h: s.h + 1,
                        s: s.state,
                        a: s.action,
                        r: s.reward,
                    })
                    .collect(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses a dataset and checks it was recorded on `env`.
    pub fn read_from(input: impl BufRead, env: &dyn Environment) -> Result<Dataset> {
        let mut lines = input.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let first = first.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("invalid header: {e}"),
        })?;
        if header.version != DATASET_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported dataset version {}", header.version),
            });
        }
        let expected = env.fingerprint();
        if header.env_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: header.env_fingerprint,
            });
        }
        if header.h != env.horizon() {
            return Err(Error::Parse {
                line: 1,
                message: format!("horizon {} does not match environment", header.h),
            });
        }
        let mut trajectories = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let traj = Trajectory {
                label: rec.label,
                steps: rec
                    .steps
                    .iter()
                    .map(|s| Step {
                        h: s.h.wrapping_sub(1),
                        state: s.s,
                        action: s.a,
                        reward: s.r,
                    })
                    .collect(),
            };
            let range_err = traj.steps.iter().find_map(|s| {
                if s.state >= env.num_states() {
                    Some(format!("state {} out of range", s.state))
                } else if s.action >= env.num_actions() {
                    Some(format!("action {} out of range", s.action))
                } else {
                    None
                }
            });
            if let Some(message) = range_err.or_else(|| traj.validate(header.h).err()) {
                return Err(Error::Parse {
                    line: line_no,
                    message,
                });
            }
            trajectories.push(traj);
        }
        Ok(Dataset {
            env_fingerprint: header.env_fingerprint,
            feature_map_ref: header.feature_map,
            horizon: header.h,
            trajectories,
        })
    }

    pub fn load(path: &Path, env: &dyn Environment) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), env)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    env_fingerprint: String,
    #[serde(rename = "H")]
    h: usize,
    version: u32,
    #[serde(default)]
    feature_map: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    label: Label,
    steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    h: usize,
    s: usize,
    a: usize,
    r: f64,
}

/// Per-step randomized decision rule.
pub trait Policy {
    /// Action probabilities at step `h` (zero-based) in `state`.
    fn distribution(&self, h: usize, state: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl Policy for UniformPolicy {
    fn distribution(&self, _h: usize, _state: usize) -> Vec<f64> {
        vec![1.0 / self.num_actions as f64; self.num_actions]
    }
}

/// Deterministic Markov policy, one action per `(h, s)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: Vec<usize>,
    ) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::DimensionMismatch {
                expected: horizon * num_states,
                got: actions.len(),
            });
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= num_actions) {
            return Err(Error::ActionOutOfRange {
                action: a,
                num_actions,
            });
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            actions,
        })
    }

    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, action: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            actions: vec![action; horizon * num_states],
        }
    }

    pub fn action(&self, h: usize, state: usize) -> usize {
        self.actions[h * self.num_states + state]
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

    /// Policy table text: a `H S A` header, then one `h s a` line per
    /// `(h, s)` with one-based `h`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {}\n",
            self.horizon, self.num_states, self.num_actions
        );
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                out.push_str(&format!("{} {} {}\n", h + 1, s, self.action(h, s)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let parse = |line_no: usize, l: &str, n: usize| -> Result<Vec<usize>> {
            let vals = l
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if vals.len() != n {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {n} integers"),
                });
            }
            Ok(vals)
        };
        let (i, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let hv = parse(i + 1, head, 3)?;
        let (horizon, num_states, num_actions) = (hv[0], hv[1], hv[2]);
        let mut actions = vec![usize::MAX; horizon * num_states];
        for (i, l) in lines {
            let v = parse(i + 1, l, 3)?;
            let (h, s, a) = (v[0], v[1], v[2]);
            if h == 0 || h > horizon || s >= num_states || a >= num_actions {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("entry ({h}, {s}, {a}) out of range"),
                });
            }
            actions[(h - 1) * num_states + s] = a;
        }
        if actions.contains(&usize::MAX) {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: "policy table is incomplete".into(),
            });
        }
        Self::new(horizon, num_states, num_actions, actions)
    }
}

impl Policy for DeterministicPolicy {
    fn distribution(&self, h: usize, state: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.num_actions];
        p[self.action(h, state)] = 1.0;
        p
    }
}

/// Episode-level uniform mixture of deterministic policies: one member is
/// drawn at the start of each episode and followed throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMixture {
    members: Vec<(DeterministicPolicy, usize)>,
}

impl PolicyMixture {
    pub fn new() -> Self {
        Self {
            members: Vec::new(),
        }
    }

    /// Adds one copy of `policy` to the mixture.
    pub fn push(&mut self, policy: &DeterministicPolicy) {
        match self.members.last_mut() {
            Some((p, n)) if p == policy => *n += 1,
            _ => self.members.push((policy.clone(), 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.members.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Distinct consecutive members with their multiplicities.
    pub fn members(&self) -> &[(DeterministicPolicy, usize)] {
        &self.members
    }

    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> &DeterministicPolicy {
        let weights: Vec<f64> = self.members.iter().map(|(_, n)| *n as f64).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        &self.members[sample_categorical(&probs, rng)].0
    }
}

impl Default for PolicyMixture {
    fn default() -> Self {
        Self::new()
    }
}

/// Runs one full episode of `policy` in `env`.
pub fn rollout(
    env: &dyn Environment,
    policy: &dyn Policy,
    label: Label,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory> {
    let mut at = env.reset(rng);
    let mut steps = Vec::with_capacity(env.horizon());
    loop {
        let probs = policy.distribution(at.h, at.state);
        let sum: f64 = probs.iter().sum();
        if probs.len() != env.num_actions()
            || (sum - 1.0).abs() > 1e-9
            || probs.iter().any(|p| !(*p >= 0.0))
        {
            return Err(Error::InvalidPolicy {
                h: at.h + 1,
                state: at.state,
                sum,
            });
        }
        let action = sample_categorical(&probs, rng);
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

/// `n` independent rollouts; trajectory `i` uses its own generator derived
/// from `(seed, i)`.
pub fn generate(
    env: &dyn Environment,
    policy: &dyn Policy,
    n: usize,
    label: Label,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "number of trajectories must be at least 1".into(),
        ));
    }
    let trajectories = (0..n)
        .map(|i| rollout(env, policy, label, &mut substream(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        env.fingerprint(),
        String::new(),
        env.horizon(),
        trajectories,
    )
}

/// Offline dataset of `n_off` behavior-policy rollouts.
pub fn gen_offline(
    env: &dyn Environment,
    behavior: &dyn Policy,
    n_off: usize,
    seed: u64,
) -> Result<Dataset> {
    generate(env, behavior, n_off, Label::Offline, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::random_tabular_mdp;

    #[test]
    fn deterministic_env_and_policy_give_identical_trajectories() {
        // Two-state deterministic chain.
        let spec = crate::env::TabularMdpSpec::new(
            2,
            2,
            3,
            [[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]; 3].concat(),
            vec![0.1; 12],
            vec![1.0, 0.0],
        )
        .unwrap();
        let pol = DeterministicPolicy::constant(3, 2, 2, 0);
        let a = rollout(&spec, &pol, Label::Offline, &mut seeded(1)).unwrap();
        let b = rollout(&spec, &pol, Label::Offline, &mut seeded(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 3);
    }

    #[test]
    fn single_step_horizon() {
        let env = random_tabular_mdp(3, 2, 1, 0).unwrap();
        let t = rollout(
            &env,
            &UniformPolicy { num_actions: 2 },
            Label::Online,
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.next_state(0), None);
    }

    struct Broken;
    impl Policy for Broken {
        fn distribution(&self, _h: usize, _s: usize) -> Vec<f64> {
            vec![0.5, 0.4]
        }
    }

    #[test]
    fn invalid_policy_rejected() {
        let env = random_tabular_mdp(2, 2, 2, 0).unwrap();
        assert!(matches!(
            rollout(&env, &Broken, Label::Offline, &mut seeded(0)),
            Err(Error::InvalidPolicy { .. })
        ));
    }

    #[test]
    fn gen_offline_counts_and_reproducibility() {
        let env = random_tabular_mdp(3, 2, 4, 1).unwrap();
        let pol = UniformPolicy { num_actions: 2 };
        let d = gen_offline(&env, &pol, 1, 5).unwrap();
        assert_eq!(d.len(), 1);
        let a = gen_offline(&env, &pol, 20, 5).unwrap();
        let b = gen_offline(&env, &pol, 20, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_off(), 20);
        assert_eq!(a.n_on(), 0);
        assert!(gen_offline(&env, &pol, 0, 5).is_err());
    }

    #[test]
    fn split_properties() {
        let env = random_tabular_mdp(3, 2, 2, 1).unwrap();
        let d = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 10, 3).unwrap();
        let (a, b) = d.split(0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, b2) = d.split(0.5, 7).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<String> = a
            .trajectories()
            .iter()
            .chain(b.trajectories())
            .map(|t| format!("{t:?}"))
            .collect();
        let mut orig: Vec<String> = d.trajectories().iter().map(|t| format!("{t:?}")).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);

        let small = d.subset(&[0, 1]);
        assert!(small.split(0.1, 0).is_err());
        assert!(d.split(1.0, 0).is_err());
    }

    #[test]
    fn file_errors() {
        let env = random_tabular_mdp(3, 2, 3, 1).unwrap();
        let d = gen_offline(&env, &UniformPolicy { num_actions: 2 }, 4, 3).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let cut = &text[..text.len() - 20];
        match Dataset::read_from(cut.as_bytes(), &env) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }

        let other = random_tabular_mdp(3, 2, 3, 2).unwrap();
        assert!(matches!(
            Dataset::read_from(text.as_bytes(), &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn policy_text_round_trip() {
        let p = DeterministicPolicy::new(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        assert_eq!(DeterministicPolicy::from_text(&p.to_text()).unwrap(), p);
        assert!(DeterministicPolicy::from_text("2 3 4\n1 0 0\n").is_err());
    }

    #[test]
    fn mixture_counts_members() {
        let a = DeterministicPolicy::constant(1, 1, 2, 0);
        let b = DeterministicPolicy::constant(1, 1, 2, 1);
        let mut m = PolicyMixture::new();
        m.push(&a);
        m.push(&a);
        m.push(&b);
        assert_eq!(m.len(), 3);
        assert_eq!(m.members().len(), 2);
    }
}
