use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hympc_core::deep::{collect, train, DeepPolicy, ReplayBuffer};
use hympc_core::harness::{
    run_episode, run_group, run_suite, spawn_seeds, Aggregate, ControllerKind, ScenarioConfig,
    SuiteKind,
};

#[derive(Parser)]
#[command(
    name = "hympc",
    version,
    about = "Swinging-gate traversal with hybrid-policy MPC"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Controller kind, overrides the config.
    #[arg(long, global = true)]
    controller: Option<ControllerKind>,
    /// Worker threads for parallel episodes.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory with a trained policy (default: <out>/policy).
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    /// Number of episodes, overrides the config.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fly one episode and write its log.
    Simulate,
    /// Collect supervision for the distilled policies.
    Collect {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the distilled policies from a collected buffer.
    TrainPolicies {
        /// Buffer CSV (default: <out>/buffer.csv).
        #[arg(long)]
        buffer: Option<PathBuf>,
    },
    /// Evaluate one controller over the configured number of trials.
    Eval,
    Compare,
    DistanceSweep,
    Robustness,
    Multigate,
}

fn load_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            ScenarioConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = c.controller {
        cfg.controller = k;
    }
    if let Some(n) = c.trials {
        cfg.num_trials = n;
    }
    if let Some(p) = &c.policy {
        cfg.policy_dir = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policy_dir(cfg: &ScenarioConfig, out: &Path) -> PathBuf {
    cfg.policy_dir.clone().unwrap_or_else(|| out.join("policy"))
}

/// Loads the policy when the run needs it, or opportunistically for `compare`.
fn maybe_policy(cfg: &ScenarioConfig, out: &Path, required: bool) -> Result<Option<DeepPolicy>> {
    let dir = policy_dir(cfg, out);
    if !required && !dir.join("policy.json").exists() {
        return Ok(None);
    }
    let p =
        DeepPolicy::load(&dir).with_context(|| format!("loading policy from {}", dir.display()))?;
    Ok(Some(p))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn print_aggregate(label: &str, a: &Aggregate) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "{label:<34} success {:>5.1}%  error {:>6} m  time {:>6} s  ({} episodes)",
        100.0 * a.success_rate,
        fmt(a.mean_error),
        fmt(a.mean_time),
        a.episodes
    );
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    let out = c.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(n) = c.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    let needs_deep = cfg.controller == ControllerKind::HympcDeep;

    match cli.command {
        Command::Simulate => {
            cfg.record_log = true;
            let policy = maybe_policy(&cfg, &out, needs_deep)?;
            let seed = spawn_seeds(cfg.seed, 1)[0];
            let m = run_episode(&cfg, cfg.controller, seed, policy.as_ref())?;
            let csv = out.join(format!("episode_{}_{}.csv", cfg.controller, seed));
            m.write_log_csv(std::fs::File::create(&csv)?)?;
            write_json(&out.join("episode.json"), &m)?;
            println!(
                "{} seed {seed}: {:?}, success {}, error {:?} m, time {:?} s",
                cfg.controller, m.outcome, m.success, m.traversal_error, m.traversal_time
            );
        }
        Command::Collect { samples } => {
            let n = samples.unwrap_or(cfg.deep.num_samples);
            let buf = collect(n, &cfg, cfg.seed)?;
            let path = out.join("buffer.csv");
            buf.save_csv(&path)?;
            println!("stored {} records in {}", buf.len(), path.display());
        }
        Command::TrainPolicies { buffer } => {
            let path = buffer.unwrap_or_else(|| out.join("buffer.csv"));
            let buf = ReplayBuffer::load_csv(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let t_max = cfg
                .search
                .candidate_times
                .iter()
                .copied()
                .fold(cfg.mpc.dt, f64::max);
            let (policy, report) = train(&buf, &cfg.deep, cfg.mpc.dt, t_max)?;
            let dir = policy_dir(&cfg, &out);
            policy.save(&dir)?;
            write_json(&dir.join("train_report.json"), &report)?;
            println!(
                "trained on {} records: loss λ {:.4}, t_p {:.4}; validation MSE λ {:?} (label variance {:?})",
                report.train_size,
                report.train_loss_lambda,
                report.train_loss_tp,
                report.val_mse_lambda,
                report.val_var_lambda
            );
        }
        Command::Eval => {
            let policy = maybe_policy(&cfg, &out, needs_deep)?;
            let seeds = spawn_seeds(cfg.seed, cfg.num_trials);
            let eps = run_group(&cfg, cfg.controller, &seeds, false, policy.as_ref())?;
            let agg = Aggregate::from_episodes(&eps);
            print_aggregate(cfg.controller.name(), &agg);
            write_json(
                &out.join(format!("eval_{}.json", cfg.controller)),
                &(agg, eps),
            )?;
        }
        cmd => {
            let suite = match cmd {
                Command::Compare => SuiteKind::Compare,
                Command::DistanceSweep => SuiteKind::DistanceSweep,
                Command::Robustness => SuiteKind::Robustness,
                _ => SuiteKind::Multigate,
            };
            let policy = maybe_policy(&cfg, &out, needs_deep)?;
            let report = run_suite(suite, &cfg, policy.as_ref())?;
            for g in &report.groups {
                print_aggregate(&g.label, &g.aggregate);
            }
            for n in &report.notes {
                println!("note: {n}");
            }
            report.write(&out)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
