//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are bare
//! strings, integers, decimals or booleans; surrounding double quotes are
//! stripped. Every key must be consumed by the reader, so a typo is an
//! error naming the key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries, consumed key by key.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("invalid key `{key}`"),
                });
            }
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if entries
                .insert(key.to_string(), (i + 1, value.to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}` (line {line})"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::config(key, format!("unknown key (line {line})"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Coverage curves for uniform, adversarial and absent offline data.
    Fig1,
    /// Planned policy value for hybrid, offline-only and online-only data.
    Fig2,
    /// Cumulative regret of warm- and cold-started online learning.
    Fig3,
    /// The configured `algorithm` as a single series.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Rappel,
    Hyrule,
    OfflineOnly,
    OnlineOnly,
    OptcovOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvChoice {
    Tetris,
    Random,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChoice {
    OneHot,
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Theory,
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planner {
    /// Variance-weighted pessimistic planning on a split dataset.
    AdvPlus,
    /// Unit variances on the whole dataset.
    Adv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfflinePolicy {
    Uniform,
    Adversarial,
}

macro_rules! named_enum {
    ($ty:ty, $key:literal, { $($name:literal => $val:expr),+ $(,)? }) => {
        impl $ty {
            pub fn name(&self) -> &'static str {
                $(if *self == $val { return $name; })+
                unreachable!()
            }

            fn parse_named(value: &str) -> Result<Self> {
                match value {
                    $($name => Ok($val),)+
                    other => Err(Error::config(
                        $key,
                        format!("`{other}` is not one of: {}", [$($name),+].join(", ")),
                    )),
                }
            }
        }
    };
}

named_enum!(Recipe, "recipe", {
    "fig1" => Recipe::Fig1,
    "fig2" => Recipe::Fig2,
    "fig3" => Recipe::Fig3,
    "single" => Recipe::Single,
});
named_enum!(Algorithm, "algorithm", {
    "rappel" => Algorithm::Rappel,
    "hyrule" => Algorithm::Hyrule,
    "offline_only" => Algorithm::OfflineOnly,
    "online_only" => Algorithm::OnlineOnly,
    "optcov_only" => Algorithm::OptcovOnly,
});
named_enum!(FeatureChoice, "features", {
    "one_hot" => FeatureChoice::OneHot,
    "projected" => FeatureChoice::Projected,
});
named_enum!(Preset, "preset", {
    "theory" => Preset::Theory,
    "practical" => Preset::Practical,
});
named_enum!(Planner, "planner", {
    "adv_plus" => Planner::AdvPlus,
    "adv" => Planner::Adv,
});
named_enum!(OfflinePolicy, "offline_policy", {
    "uniform" => OfflinePolicy::Uniform,
    "adversarial" => OfflinePolicy::Adversarial,
});

/// Resolved experiment settings. Constants left unset fall back to the
/// chosen preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub algorithm: Algorithm,
    pub env: EnvChoice,
    pub tetris_board_height: usize,
    pub horizon: usize,
    pub random_states: usize,
    pub random_actions: usize,
    pub env_seed: u64,
    pub features: FeatureChoice,
    pub projection_k: usize,
    pub offline_policy: OfflinePolicy,
    pub n_off: usize,
    pub n_on: usize,
    pub episodes: usize,
    pub preset: Preset,
    pub planner: Planner,
    pub tau: f64,
    pub lambda: Option<f64>,
    pub delta: f64,
    pub c_b: Option<f64>,
    pub c_var: f64,
    pub c_e: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub poly_scale: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub trace_interval: usize,
    pub eval_rollouts: usize,
    pub adversary_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Single,
            algorithm: Algorithm::Rappel,
            env: EnvChoice::Tetris,
            tetris_board_height: 5,
            horizon: 10,
            random_states: 5,
            random_actions: 2,
            env_seed: 0,
            features: FeatureChoice::Projected,
            projection_k: 60,
            offline_policy: OfflinePolicy::Uniform,
            n_off: 200,
            n_on: 100,
            episodes: 500,
            preset: Preset::Practical,
            planner: Planner::AdvPlus,
            tau: 1e-6,
            lambda: None,
            delta: 0.05,
            c_b: None,
            c_var: 0.01,
            c_e: 0.1,
            c1: None,
            c2: None,
            c3: None,
            poly_scale: None,
            trials: 1,
            seed: 0,
            out_dir: PathBuf::from("results"),
            trace_interval: 20,
            eval_rollouts: 1000,
            adversary_episodes: 500,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("must be a positive number, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("must be at least {min}, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    /// Defaults for a named recipe.
    pub fn for_recipe(recipe: Recipe) -> Self {
        let base = Self {
            recipe,
            ..Self::default()
        };
        match recipe {
            Recipe::Fig1 => Self {
                algorithm: Algorithm::OptcovOnly,
                n_on: 400,
                trials: 30,
                ..base
            },
            Recipe::Fig2 => Self {
                offline_policy: OfflinePolicy::Adversarial,
                trials: 30,
                ..base
            },
            Recipe::Fig3 => Self {
                algorithm: Algorithm::Hyrule,
                trials: 10,
                ..base
            },
            Recipe::Single => base,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvConfig::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvConfig::load(path)?)
    }

    /// Reads `recipe` first to pick defaults, then every other key.
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let recipe = match kv.take_str("recipe") {
            Some(v) => Recipe::parse_named(&v)?,
            None => Recipe::Single,
        };
        let mut c = Self::for_recipe(recipe);
        if let Some(v) = kv.take_str("algorithm") {
            c.algorithm = Algorithm::parse_named(&v)?;
        }
        if let Some(v) = kv.take_str("env") {
            c.env = match v.as_str() {
                "tetris" => EnvChoice::Tetris,
                "random" => EnvChoice::Random,
                other => match other.strip_prefix("file:") {
                    Some(p) if !p.is_empty() => EnvChoice::File(PathBuf::from(p)),
                    _ => {
                        return Err(Error::config(
                            "env",
                            format!("`{other}` is not one of: tetris, random, file:<path>"),
                        ))
                    }
                },
            };
        }
        c.tetris_board_height = kv.take_or("tetris_board_height", c.tetris_board_height)?;
        c.horizon = kv.take_or("horizon", c.horizon)?;
        c.random_states = kv.take_or("random_states", c.random_states)?;
        c.random_actions = kv.take_or("random_actions", c.random_actions)?;
        c.env_seed = kv.take_or("env_seed", c.env_seed)?;
        if let Some(v) = kv.take_str("features") {
            c.features = FeatureChoice::parse_named(&v)?;
        }
        c.projection_k = kv.take_or("projection_k", c.projection_k)?;
        if let Some(v) = kv.take_str("offline_policy") {
            c.offline_policy = OfflinePolicy::parse_named(&v)?;
        }
        c.n_off = kv.take_or("n_off", c.n_off)?;
        c.n_on = kv.take_or("n_on", c.n_on)?;
        c.episodes = kv.take_or("episodes", c.episodes)?;
        if let Some(v) = kv.take_str("preset") {
            c.preset = Preset::parse_named(&v)?;
        }
        if let Some(v) = kv.take_str("planner") {
            c.planner = Planner::parse_named(&v)?;
        }
        c.tau = kv.take_or("tau", c.tau)?;
        c.lambda = match kv.take_str("lambda").as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::config("lambda", format!("cannot parse `{v}`")))?,
            ),
        };
        c.delta = kv.take_or("delta", c.delta)?;
        c.c_b = kv.take("c_b")?;
        c.c_var = kv.take_or("c_var", c.c_var)?;
        c.c_e = kv.take_or("c_e", c.c_e)?;
        c.c1 = kv.take("c1")?;
        c.c2 = kv.take("c2")?;
        c.c3 = kv.take("c3")?;
        c.poly_scale = kv.take("poly_scale")?;
        c.trials = kv.take_or("trials", c.trials)?;
        c.seed = kv.take_or("seed", c.seed)?;
        if let Some(v) = kv.take_str("out_dir") {
            c.out_dir = PathBuf::from(v);
        }
        c.trace_interval = kv.take_or("trace_interval", c.trace_interval)?;
        c.eval_rollouts = kv.take_or("eval_rollouts", c.eval_rollouts)?;
        c.adversary_episodes = kv.take_or("adversary_episodes", c.adversary_episodes)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        at_least("horizon", self.horizon, 1)?;
        at_least("random_states", self.random_states, 1)?;
        at_least("random_actions", self.random_actions, 1)?;
        at_least("projection_k", self.projection_k, 1)?;
        at_least("trials", self.trials, 1)?;
        at_least("eval_rollouts", self.eval_rollouts, 2)?;
        positive("tau", self.tau)?;
        if let Some(l) = self.lambda {
            positive("lambda", l)?;
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        for (key, v) in [
            ("c_b", self.c_b),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("poly_scale", self.poly_scale),
        ] {
            if let Some(v) = v {
                positive(key, v)?;
            }
        }
        positive("c_var", self.c_var)?;
        positive("c_e", self.c_e)?;
        if self.recipe == Recipe::Fig1 {
            at_least("trace_interval", self.trace_interval, 1)?;
        }
        Ok(())
    }

    /// Flat text form with every field resolved; parses back to `self`.
    pub fn to_text(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "auto".to_string(), |x| format!("{x:?}"))
        }
        let env = match &self.env {
            EnvChoice::Tetris => "tetris".to_string(),
            EnvChoice::Random => "random".to_string(),
            EnvChoice::File(p) => format!("file:{}", p.display()),
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("recipe", self.recipe.name().into());
        kv("algorithm", self.algorithm.name().into());
        kv("env", env);
        kv("tetris_board_height", self.tetris_board_height.to_string());
        kv("horizon", self.horizon.to_string());
        kv("random_states", self.random_states.to_string());
        kv("random_actions", self.random_actions.to_string());
        kv("env_seed", self.env_seed.to_string());
        kv("features", self.features.name().into());
        kv("projection_k", self.projection_k.to_string());
        kv("offline_policy", self.offline_policy.name().into());
        kv("n_off", self.n_off.to_string());
        kv("n_on", self.n_on.to_string());
        kv("episodes", self.episodes.to_string());
        kv("preset", self.preset.name().into());
        kv("planner", self.planner.name().into());
        kv("tau", format!("{:?}", self.tau));
        kv("lambda", opt(self.lambda));
        kv("delta", format!("{:?}", self.delta));
        for (k, v) in [
            ("c_b", self.c_b),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("poly_scale", self.poly_scale),
        ] {
            if let Some(v) = v {
                kv(k, format!("{v:?}"));
            }
        }
        kv("c_var", format!("{:?}", self.c_var));
        kv("c_e", format!("{:?}", self.c_e));
        kv("trials", self.trials.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("trace_interval", self.trace_interval.to_string());
        kv("eval_rollouts", self.eval_rollouts.to_string());
        kv("adversary_episodes", self.adversary_episodes.to_string());
        out
    }
}
