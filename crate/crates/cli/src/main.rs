use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybrid_linmdp::config::{ExperimentConfig, KvConfig, OfflinePolicy};
use hybrid_linmdp::dataset::{gen_offline, Dataset, DeterministicPolicy};
use hybrid_linmdp::diagnostics::{
    coverability_check_on, coverage_rows, diagnostics_csv, empirical_occupancy, eval_policy_exact,
    eval_policy_mc, partial_concentrability_off, partition_from_eigencut, DiagnosticRow,
};
use hybrid_linmdp::env::{Environment, FeatureMap};
use hybrid_linmdp::harness::{
    derive_seed, hyrule_config, rappel_config, run_experiment, train_adversary, uniform_data,
    BuiltEnv,
};
use hybrid_linmdp::hyrule::{hyrule_run, warm_start, HyruleState};
use hybrid_linmdp::optcov::{optcov, per_step_covariance, OptcovConfig};
use hybrid_linmdp::rappel::rappel;
use hybrid_linmdp::rng::seeded;
use hybrid_linmdp::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_COVERAGE_UNMET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hybrid-rl",
    version,
    about = "Hybrid offline/online RL for linear MDPs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy (`offline_policy`) for `n_off` episodes.
    GenOffline,
    /// Coverage-driven exploration against an offline dataset.
    Explore(DataArgs),
    /// Exploration followed by pessimistic planning.
    Rappel(DataArgs),
    /// Warm-started optimistic online learning for `episodes` episodes.
    Hyrule(DataArgs),
    /// Exact and Monte Carlo value of a policy file.
    Eval {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Coverage and concentrability diagnostics of a dataset.
    Diag {
        #[command(flatten)]
        data: DataArgs,
        /// Offline subspace dimension of the eigencut partition.
        #[arg(long)]
        k: Option<usize>,
        /// Policy search budget of the coverability check.
        #[arg(long, default_value_t = 50)]
        search_budget: usize,
    },
    /// Multi-trial experiment (`recipe` = fig1 | fig2 | fig3 | single).
    Experiment,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file; omitted means no offline data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Projection matrix file for projected features.
    #[arg(long)]
    projection: Option<PathBuf>,
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => String::new(),
    };
    // Later settings replace earlier ones of the same key.
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("--set expects KEY=VALUE, got `{kv}`"),
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    if !overrides.is_empty() {
        let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
        text = text
            .lines()
            .filter(|line| {
                line.split_once('=')
                    .is_none_or(|(k, _)| !keys.contains(&k.trim()))
            })
            .map(|l| format!("{l}\n"))
            .collect();
        for (k, v) in &overrides {
            text.push_str(&format!("{k} = {v}\n"));
        }
    }
    ExperimentConfig::from_kv(KvConfig::parse(&text)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_data(args: &DataArgs, env: &dyn Environment) -> Result<Dataset> {
    match &args.data {
        Some(path) => Dataset::load(path, env),
        None => Ok(Dataset::empty(env)),
    }
}

/// Loads a projection file, or fits one from `data` and saves it.
fn features(
    config: &ExperimentConfig,
    args: &DataArgs,
    env: &dyn Environment,
    data: &Dataset,
    dir: &Path,
) -> Result<FeatureMap> {
    let base = FeatureMap::one_hot(env.num_states(), env.num_actions());
    if let Some(path) = &args.projection {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return FeatureMap::from_projection_text(&base, &text);
    }
    let fmap = hybrid_linmdp::harness::feature_map(config, env, data)?;
    if let Some(text) = fmap.projection_text() {
        write(&dir.join("projection.txt"), &text)?;
    }
    Ok(fmap)
}

fn run(cli: Cli, config: ExperimentConfig) -> Result<u8> {
    if let Command::Experiment = cli.command {
        let summary = run_experiment(&config)?;
        println!(
            "wrote {} ({} of {} trials finished)",
            summary.out_dir.display(),
            summary.trial_points.iter().flatten().count(),
            config.trials
        );
        for (i, msg) in &summary.failures {
            eprintln!("trial {i} failed: {msg}");
        }
        return Ok(0);
    }
    let built = BuiltEnv::from_config(&config)?;
    let env = built.env();
    let dir = out_dir(&config)?;
    let mut rng = seeded(config.seed);
    match cli.command {
        Command::GenOffline => {
            let data = match config.offline_policy {
                OfflinePolicy::Uniform => uniform_data(env, config.n_off, config.seed)?,
                OfflinePolicy::Adversarial => {
                    let adv = train_adversary(&config, env, config.seed)?;
                    write(&dir.join("behavior_policy.txt"), &adv.to_text())?;
                    gen_offline(env, &adv, config.n_off, config.seed)?
                }
            };
            data.save(&dir.join("offline.jsonl"))?;
            println!("wrote {} trajectories", data.len());
            Ok(0)
        }
        Command::Explore(args) => {
            let d_off = load_data(&args, env)?;
            let fmap = features(&config, &args, env, &d_off, &dir)?;
            let mut oc = OptcovConfig::new(config.tau, config.n_on, env.horizon());
            oc.lambda = rappel_config(&config, 0).lambda_for(env.horizon());
            oc.delta = config.delta;
            oc.c_e = config.c_e;
            oc.trace_interval = config.trace_interval;
            let out = optcov(env, &fmap, &d_off, &oc, &mut rng)?;
            out.data.save(&dir.join("explored.jsonl"))?;
            let mut trace = String::from("episodes,inv_lambda_min\n");
            for (n, v) in &out.report.coverage_trace {
                trace.push_str(&format!("{n},{v:?}\n"));
            }
            write(&dir.join("coverage_trace.csv"), &trace)?;
            let mut lambdas = per_step_covariance(&d_off, &fmap);
            for (l, c) in lambdas.iter_mut().zip(&out.covariates) {
                *l += c;
                for i in 0..l.nrows() {
                    l[(i, i)] += oc.lambda;
                }
            }
            write(
                &dir.join("coverage.csv"),
                &diagnostics_csv(&coverage_rows(&lambdas, fmap.table())?),
            )?;
            println!("episodes_used = {}", out.report.episodes_used);
            println!("coverage_unmet = {}", out.report.coverage_unmet());
            Ok(if out.report.coverage_unmet() {
                EXIT_COVERAGE_UNMET
            } else {
                0
            })
        }
        Command::Rappel(args) => {
            let d_off = load_data(&args, env)?;
            let fmap = features(&config, &args, env, &d_off, &dir)?;
            let rc = rappel_config(&config, derive_seed(config.seed, 4));
            let out = rappel(env, &fmap, &d_off, config.n_on, config.tau, &rc, &mut rng)?;
            write(&dir.join("policy.txt"), &out.policy.to_text())?;
            write(&dir.join("report.txt"), &out.report.to_text())?;
            out.data.save(&dir.join("combined.jsonl"))?;
            print!("{}", out.report.to_text());
            Ok(if out.report.coverage_unmet() {
                EXIT_COVERAGE_UNMET
            } else {
                0
            })
        }
        Command::Hyrule(args) => {
            let d_off = load_data(&args, env)?;
            let fmap = features(&config, &args, env, &d_off, &dir)?;
            let hc = hyrule_config(&config);
            let mut state = if d_off.is_empty() {
                HyruleState::cold(env, &fmap, &hc, config.episodes)?
            } else {
                warm_start(env, &d_off, &fmap, &hc, config.episodes)?
            };
            let out = hyrule_run(env, &mut state, config.episodes, &mut rng)?;
            write(&dir.join("run.csv"), &out.to_csv())?;
            write(&dir.join("policy.txt"), &out.policy.to_text())?;
            println!("switches = {}", state.switches());
            if let Some(total) = out.cumulative_regret().last() {
                println!("cumulative_regret = {total:?}");
            }
            Ok(0)
        }
        Command::Eval { policy } => {
            let text = std::fs::read_to_string(&policy).map_err(|e| Error::io(&policy, e))?;
            let pol = DeterministicPolicy::from_text(&text)?;
            let mut report = String::new();
            if env.tabular().is_some() {
                let exact = eval_policy_exact(env, &pol)?.initial_value;
                report.push_str(&format!("exact_value = {exact:?}\n"));
                report.push_str(&format!(
                    "exact_value_reported = {:?}\n",
                    built.report_value(exact)
                ));
            }
            let (mean, se) = eval_policy_mc(env, &pol, config.eval_rollouts, config.seed)?;
            report.push_str(&format!("mc_mean = {mean:?}\nmc_stderr = {se:?}\n"));
            report.push_str(&format!(
                "mc_mean_reported = {:?}\n",
                built.report_value(mean)
            ));
            write(&dir.join("eval.txt"), &report)?;
            print!("{report}");
            Ok(0)
        }
        Command::Diag {
            data,
            k,
            search_budget,
        } => {
            let d = load_data(&data, env)?;
            if d.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let fmap = features(&config, &data, env, &d, &dir)?;
            let lambda = rappel_config(&config, 0).lambda_for(env.horizon());
            let mut lambdas = per_step_covariance(&d, &fmap);
            for l in lambdas.iter_mut() {
                for i in 0..l.nrows() {
                    l[(i, i)] += lambda;
                }
            }
            let mut rows = coverage_rows(&lambdas, fmap.table())?;
            if let Some(k) = k {
                let partition = partition_from_eigencut(&d, &fmap, k)?;
                let c_off =
                    partial_concentrability_off(&partition, &fmap, &empirical_occupancy(&d, &fmap));
                rows.push(DiagnosticRow {
                    metric: "c_off".into(),
                    h: None,
                    value: c_off.value().unwrap_or(f64::NAN),
                    flag: c_off.flag().into(),
                });
                if env.tabular().is_some() {
                    let check = coverability_check_on(env, &fmap, &partition, search_budget)?;
                    rows.push(DiagnosticRow {
                        metric: "c_on_upper".into(),
                        h: None,
                        value: check.c_on_upper.value().unwrap_or(f64::NAN),
                        flag: check.verdict().into(),
                    });
                    rows.push(DiagnosticRow {
                        metric: "d_on".into(),
                        h: None,
                        value: check.d_on as f64,
                        flag: String::new(),
                    });
                }
            }
            let csv = diagnostics_csv(&rows);
            write(&dir.join("diagnostics.csv"), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::Experiment => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let config = match resolve_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli, config) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
