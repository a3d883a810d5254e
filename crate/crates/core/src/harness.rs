//! Seeded multi-trial experiments and their CSV outputs.
//!
//! Trial `i` runs with seed `seed ^ i`. Each trial writes
//! `trial_NNN.csv` (`x,series,value`); the aggregate `aggregate.csv`
//! holds `x,series,mean,stderr,n_trials` over the trials that finished,
//! and `manifest.txt` the resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore as _;

use crate::config::{
    Algorithm, EnvChoice, ExperimentConfig, FeatureChoice, OfflinePolicy, Planner, Preset, Recipe,
};
use crate::dataset::{gen_offline, Dataset, DeterministicPolicy, PolicyMixture, UniformPolicy};
use crate::diagnostics::{eval_policy_exact, eval_policy_mc, mean_stderr, optimal_value};
use crate::env::{
    random_tabular_mdp, Environment, FeatureMap, MiniTetris, MiniTetrisConfig, TabularMdpSpec,
};
use crate::error::{Error, Result};
use crate::hyrule::{hyrule_run, warm_start, HyruleConfig, HyruleState};
use crate::optcov::{optcov, OptcovConfig};
use crate::qfunc::argmax_lowest;
use crate::rappel::{plan_from, rappel, RappelConfig};
use crate::rng::{seeded, substream};

pub const CODE_VERSION: &str = concat!("hybrid-linmdp ", env!("CARGO_PKG_VERSION"));

/// Environment built from a config, keeping the concrete type for
/// reporting on the native reward scale.
#[derive(Debug, Clone)]
pub enum BuiltEnv {
    Tetris(MiniTetris),
    Tabular(TabularMdpSpec),
}

impl BuiltEnv {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        match &config.env {
            EnvChoice::Tetris => Ok(Self::Tetris(MiniTetris::new(MiniTetrisConfig {
                board_height: config.tetris_board_height,
                horizon: config.horizon,
                seed: config.env_seed,
                ..MiniTetrisConfig::default()
            })?)),
            EnvChoice::Random => Ok(Self::Tabular(random_tabular_mdp(
                config.random_states,
                config.random_actions,
                config.horizon,
                config.env_seed,
            )?)),
            EnvChoice::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(Self::Tabular(TabularMdpSpec::from_json(&text)?))
            }
        }
    }

    pub fn env(&self) -> &dyn Environment {
        match self {
            Self::Tetris(t) => t,
            Self::Tabular(s) => s,
        }
    }

    /// Mini-Tetris values go back to the negative excess-height scale;
    /// other environments report as is.
    pub fn report_value(&self, value: f64) -> f64 {
        match self {
            Self::Tetris(t) => t.to_raw_return(value, t.config().horizon),
            Self::Tabular(_) => value,
        }
    }
}

pub fn hyrule_config(config: &ExperimentConfig) -> HyruleConfig {
    let mut c = match config.preset {
        Preset::Theory => HyruleConfig::theory(),
        Preset::Practical => HyruleConfig::practical(),
    };
    if let Some(l) = config.lambda {
        c.lambda = l;
    }
    c.delta = config.delta;
    c.c1 = config.c1.unwrap_or(c.c1);
    c.c2 = config.c2.unwrap_or(c.c2);
    c.c3 = config.c3.unwrap_or(c.c3);
    c.poly_scale = config.poly_scale.unwrap_or(c.poly_scale);
    c
}

pub fn rappel_config(config: &ExperimentConfig, split_seed: u64) -> RappelConfig {
    let base = match config.preset {
        Preset::Theory => RappelConfig::theory(),
        Preset::Practical => RappelConfig::practical(),
    };
    RappelConfig {
        lambda: config.lambda,
        delta: config.delta,
        c_b: config.c_b.unwrap_or(base.c_b),
        c_var: config.c_var,
        c_e: config.c_e,
        split_seed,
        variance_weighted: config.planner == Planner::AdvPlus,
        trace_interval: config.trace_interval,
        ..base
    }
}

/// Deterministic child seed for a named purpose within a run.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    substream(seed, purpose).next_u64()
}

mod purpose {
    pub const UNIFORM_DATA: u64 = 1;
    pub const ADVERSARIAL_DATA: u64 = 2;
    pub const EXPLORE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const ONLINE: u64 = 6;
    pub const ADVERSARY: u64 = 7;
}

pub fn uniform_data(env: &dyn Environment, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Ok(Dataset::empty(env));
    }
    gen_offline(
        env,
        &UniformPolicy {
            num_actions: env.num_actions(),
        },
        n,
        seed,
    )
}

/// One-hot features, or their projection onto the top-`k` eigenvectors of
/// `projection_data`.
pub fn feature_map(
    config: &ExperimentConfig,
    env: &dyn Environment,
    projection_data: &Dataset,
) -> Result<FeatureMap> {
    let base = FeatureMap::one_hot(env.num_states(), env.num_actions());
    match config.features {
        FeatureChoice::OneHot => Ok(base),
        FeatureChoice::Projected => {
            if projection_data.is_empty() {
                return Err(Error::config(
                    "features",
                    "projected features need uniform offline data (n_off > 0)",
                ));
            }
            FeatureMap::project(&base, projection_data, config.projection_k)
        }
    }
}

/// Greedy policy on the negated value estimates of a trained agent:
/// at every step it picks the action minimizing `r_h + ŵ_hᵀφ`.
pub fn adversarial_policy(
    state: &HyruleState,
    env: &dyn Environment,
    fmap: &FeatureMap,
) -> Result<DeterministicPolicy> {
    let (ns, na, horizon) = (env.num_states(), env.num_actions(), env.horizon());
    let mut actions = Vec::with_capacity(horizon * ns);
    for h in 0..horizon {
        let lin = fmap.table() * state.value_weights(h);
        let rewards = &state.rewards()[h];
        for s in 0..ns {
            let neg: Vec<f64> = (0..na)
                .map(|a| -(rewards[s * na + a] + lin[s * na + a]))
                .collect();
            actions.push(argmax_lowest(&neg));
        }
    }
    DeterministicPolicy::new(horizon, ns, na, actions)
}

/// Trains a cold-start agent on uniform-projected features and returns
/// its adversarial counterpart.
pub fn train_adversary(
    config: &ExperimentConfig,
    env: &dyn Environment,
    seed: u64,
) -> Result<DeterministicPolicy> {
    let data = uniform_data(env, config.n_off, derive_seed(seed, purpose::UNIFORM_DATA))?;
    let fmap = feature_map(config, env, &data)?;
    let hc = HyruleConfig::practical();
    let episodes = config.adversary_episodes.max(1);
    let mut state = HyruleState::cold(env, &fmap, &hc, episodes)?;
    hyrule_run(
        env,
        &mut state,
        episodes,
        &mut seeded(derive_seed(seed, purpose::ADVERSARY)),
    )?;
    adversarial_policy(&state, env, &fmap)
}

/// Expected per-episode regret `V*_1 − V^{π_t}_1` of the policies played,
/// in order.
pub fn pseudo_regret(env: &dyn Environment, mixture: &PolicyMixture) -> Result<Vec<f64>> {
    let spec = env.tabular().ok_or(Error::NotTabular)?;
    let vstar = optimal_value(spec);
    let mut out = Vec::with_capacity(mixture.len());
    for (policy, n) in mixture.members() {
        let v = eval_policy_exact(env, policy)?.initial_value;
        out.extend(std::iter::repeat_n(vstar - v, *n));
    }
    Ok(out)
}

/// One `(x, series, value)` observation of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: usize,
    pub series: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub x: usize,
    pub series: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub points: Vec<Point>,
    pub coverage_unmet: bool,
}

/// Shared per-experiment state.
struct Context {
    built: BuiltEnv,
    adversary: Option<DeterministicPolicy>,
}

fn needs_adversary(config: &ExperimentConfig) -> bool {
    match config.recipe {
        Recipe::Fig1 | Recipe::Fig2 => true,
        Recipe::Fig3 => false,
        Recipe::Single => config.offline_policy == OfflinePolicy::Adversarial && config.n_off > 0,
    }
}

fn coverage_points(series: &str, trace: &[(usize, f64)]) -> Vec<Point> {
    trace
        .iter()
        .map(|&(x, value)| Point {
            x,
            series: series.to_string(),
            value,
        })
        .collect()
}

fn cumulative_points(series: &str, per_episode: &[f64]) -> Vec<Point> {
    let mut acc = 0.0;
    per_episode
        .iter()
        .enumerate()
        .map(|(i, r)| {
            acc += r;
            Point {
                x: i + 1,
                series: series.to_string(),
                value: acc,
            }
        })
        .collect()
}

/// Runs a single trial of the configured recipe.
pub fn run_trial(
    config: &ExperimentConfig,
    ctx_env: &BuiltEnv,
    adversary: Option<&DeterministicPolicy>,
    trial_seed: u64,
) -> Result<TrialOutcome> {
    let env = ctx_env.env();
    let uniform = uniform_data(
        env,
        config.n_off,
        derive_seed(trial_seed, purpose::UNIFORM_DATA),
    )?;
    let fmap = feature_map(config, env, &uniform)?;
    let adversarial = |n: usize| -> Result<Dataset> {
        let policy = adversary.ok_or_else(|| {
            Error::InvalidArgument("adversarial data requested without an adversary".into())
        })?;
        if n == 0 {
            return Ok(Dataset::empty(env));
        }
        gen_offline(
            env,
            policy,
            n,
            derive_seed(trial_seed, purpose::ADVERSARIAL_DATA),
        )
    };
    let offline = |n: usize| -> Result<Dataset> {
        match config.offline_policy {
            OfflinePolicy::Uniform if n == config.n_off => Ok(uniform.clone()),
            OfflinePolicy::Uniform => {
                uniform_data(env, n, derive_seed(trial_seed, purpose::UNIFORM_DATA))
            }
            OfflinePolicy::Adversarial => adversarial(n),
        }
    };
    let rcfg = rappel_config(config, derive_seed(trial_seed, purpose::SPLIT));
    let explore_rng = || seeded(derive_seed(trial_seed, purpose::EXPLORE));
    let eval_seed = derive_seed(trial_seed, purpose::EVAL);
    let mut coverage_unmet = false;
    let mut points = Vec::new();

    let coverage_series = |name: &str, data: &Dataset, points: &mut Vec<Point>| -> Result<()> {
        let mut oc = OptcovConfig::new(config.tau, config.n_on, env.horizon());
        oc.lambda = rcfg.lambda_for(env.horizon());
        oc.delta = config.delta;
        oc.c_e = config.c_e;
        oc.trace_interval = config.trace_interval.max(1);
        let out = optcov(env, &fmap, data, &oc, &mut explore_rng())?;
        points.extend(coverage_points(name, &out.report.coverage_trace));
        Ok(())
    };
    let value_point = |name: &str, x: usize, policy: &DeterministicPolicy| -> Result<Point> {
        let (mean, _) = eval_policy_mc(env, policy, config.eval_rollouts, eval_seed)?;
        Ok(Point {
            x,
            series: name.to_string(),
            value: ctx_env.report_value(mean),
        })
    };
    let hyrule_series = |name: &str, data: Option<&Dataset>| -> Result<Vec<Point>> {
        let hc = hyrule_config(config);
        let mut state = match data {
            Some(d) if !d.is_empty() => warm_start(env, d, &fmap, &hc, config.episodes)?,
            _ => HyruleState::cold(env, &fmap, &hc, config.episodes)?,
        };
        let mut rng = seeded(derive_seed(trial_seed, purpose::ONLINE));
        let run = hyrule_run(env, &mut state, config.episodes, &mut rng)?;
        let per_episode = match env.tabular() {
            Some(_) => pseudo_regret(env, &run.mixture)?,
            None => run
                .episodes
                .iter()
                .map(|e| e.regret.unwrap_or(f64::NAN))
                .collect(),
        };
        Ok(cumulative_points(name, &per_episode))
    };

    match config.recipe {
        Recipe::Fig1 => {
            coverage_series("uniform_offline", &uniform, &mut points)?;
            coverage_series(
                "adversarial_offline",
                &adversarial(config.n_off)?,
                &mut points,
            )?;
            coverage_series("no_offline", &Dataset::empty(env), &mut points)?;
        }
        Recipe::Fig2 => {
            let total = config.n_off + config.n_on;
            let adv = adversarial(config.n_off)?;
            let hybrid = rappel(
                env,
                &fmap,
                &adv,
                config.n_on,
                config.tau,
                &rcfg,
                &mut explore_rng(),
            )?;
            coverage_unmet |= hybrid.report.coverage_unmet();
            points.push(value_point("hybrid", total, &hybrid.policy)?);
            let (plan, _) = plan_from(env, &adversarial(total)?, &fmap, &rcfg)?;
            points.push(value_point("offline_only", total, &plan.policy)?);
            let online = rappel(
                env,
                &fmap,
                &Dataset::empty(env),
                total,
                config.tau,
                &rcfg,
                &mut explore_rng(),
            )?;
            coverage_unmet |= online.report.coverage_unmet();
            points.push(value_point("online_only", total, &online.policy)?);
        }
        Recipe::Fig3 => {
            points.extend(hyrule_series("hyrule_warm", Some(&uniform))?);
            points.extend(hyrule_series("cold_start", None)?);
        }
        Recipe::Single => match config.algorithm {
            Algorithm::OptcovOnly => {
                coverage_series("optcov", &offline(config.n_off)?, &mut points)?;
            }
            Algorithm::Rappel => {
                let out = rappel(
                    env,
                    &fmap,
                    &offline(config.n_off)?,
                    config.n_on,
                    config.tau,
                    &rcfg,
                    &mut explore_rng(),
                )?;
                coverage_unmet |= out.report.coverage_unmet();
                points.push(value_point(
                    "rappel",
                    config.n_off + config.n_on,
                    &out.policy,
                )?);
            }
            Algorithm::OfflineOnly => {
                let (plan, _) = plan_from(env, &offline(config.n_off)?, &fmap, &rcfg)?;
                points.push(value_point("offline_only", config.n_off, &plan.policy)?);
            }
            Algorithm::OnlineOnly => {
                let out = rappel(
                    env,
                    &fmap,
                    &Dataset::empty(env),
                    config.n_on,
                    config.tau,
                    &rcfg,
                    &mut explore_rng(),
                )?;
                coverage_unmet |= out.report.coverage_unmet();
                points.push(value_point("online_only", config.n_on, &out.policy)?);
            }
            Algorithm::Hyrule => {
                let data = offline(config.n_off)?;
                points.extend(hyrule_series("hyrule", Some(&data))?);
            }
        },
    }
    Ok(TrialOutcome {
        points,
        coverage_unmet,
    })
}

pub fn trial_csv(points: &[Point]) -> String {
    let mut out = String::from("x,series,value\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:?}", p.x, p.series, p.value);
    }
    out
}

/// Parses a per-trial CSV back into points.
pub fn parse_trial_csv(text: &str) -> Result<Vec<Point>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "x,series,value")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `x,series,value`".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut f = line.split(',');
            let (Some(x), Some(series), Some(value), None) =
                (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(bad("expected three fields"));
            };
            Ok(Point {
                x: x.parse().map_err(|_| bad("bad x"))?,
                series: series.to_string(),
                value: value.parse().map_err(|_| bad("bad value"))?,
            })
        })
        .collect()
}

/// Mean and standard error per `(series, x)` in first-appearance series
/// order, ascending `x`.
pub fn aggregate(trials: &[Vec<Point>]) -> Vec<AggregateRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for points in trials {
        for p in points {
            let k = match order.iter().position(|s| s == &p.series) {
                Some(k) => k,
                None => {
                    order.push(p.series.clone());
                    order.len() - 1
                }
            };
            groups.entry((k, p.x)).or_default().push(p.value);
        }
    }
    groups
        .into_iter()
        .map(|((k, x), values)| {
            let (mean, stderr) = mean_stderr(&values);
            AggregateRow {
                x,
                series: order[k].clone(),
                mean,
                stderr,
                n_trials: values.len(),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("x,series,mean,stderr,n_trials\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{}",
            r.x, r.series, r.mean, r.stderr, r.n_trials
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub aggregate: Vec<AggregateRow>,
    pub trial_points: Vec<Option<Vec<Point>>>,
    pub failures: Vec<(usize, String)>,
    pub coverage_unmet: bool,
}

impl ExperimentSummary {
    /// Aggregate rows of one series, by ascending `x`.
    pub fn series(&self, name: &str) -> Vec<&AggregateRow> {
        self.aggregate.iter().filter(|r| r.series == name).collect()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every trial, writing results under `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let built = BuiltEnv::from_config(config)?;
    let adversary = if needs_adversary(config) {
        Some(train_adversary(config, built.env(), config.seed)?)
    } else {
        None
    };
    let ctx = Context { built, adversary };
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut trial_points = Vec::with_capacity(config.trials);
    let mut failures = Vec::new();
    let mut coverage_unmet = false;
    for i in 0..config.trials {
        let seed = config.seed ^ i as u64;
        let err_path = dir.join(format!("trial_{i:03}.error"));
        match run_trial(config, &ctx.built, ctx.adversary.as_ref(), seed) {
            Ok(outcome) => {
                write(
                    &dir.join(format!("trial_{i:03}.csv")),
                    &trial_csv(&outcome.points),
                )?;
                if err_path.exists() {
                    std::fs::remove_file(&err_path).map_err(|e| Error::io(&err_path, e))?;
                }
                coverage_unmet |= outcome.coverage_unmet;
                trial_points.push(Some(outcome.points));
            }
            Err(e) => {
                write(&err_path, &format!("{e}\n"))?;
                failures.push((i, e.to_string()));
                trial_points.push(None);
            }
        }
    }
    let finished: Vec<Vec<Point>> = trial_points.iter().flatten().cloned().collect();
    let rows = aggregate(&finished);
    write(&dir.join("aggregate.csv"), &aggregate_csv(&rows))?;

    let mut manifest = format!("# {CODE_VERSION}\n");
    manifest.push_str(&config.to_text());
    let _ = writeln!(manifest, "# trials_finished = {}", finished.len());
    for (i, msg) in &failures {
        let _ = writeln!(manifest, "# trial_{i:03} failed: {msg}");
    }
    write(&dir.join("manifest.txt"), &manifest)?;

    Ok(ExperimentSummary {
        out_dir: dir.clone(),
        aggregate: rows,
        trial_points,
        failures,
        coverage_unmet,
    })
}
