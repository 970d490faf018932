use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing::level_filters::LevelFilter;
use tracing_subscriber::layer::SubscriberExt;
use tracing_subscriber::util::SubscriberInitExt;

use searchplanner::config::{load_config, AppConfig, ConfigError, RunDir, Services};
use searchplanner::eval::{
    evaluate_method, load_dataset, parse_methods, render_report, EvalContext, EvalError, Method,
};
use searchplanner::parallel::map_bounded;
use searchplanner::record::{read_records, write_jsonl, write_records, RecordError, TrajectoryRecord};
use searchplanner::reward::{RewardBreakdown, RewardConfig};
use searchplanner::seed::derive_seed;
use searchplanner::toy::{pareto_sweep, train, updates_to_fraction, ParetoRow, ToyWorld, TrainConfig};

#[derive(Parser)]
#[command(name = "searchplanner", version, about = "Search-planner rollouts, rewards, toy training and evaluation")]
struct Cli {
    /// Config file; repeat to layer, later files win.
    #[arg(short = 'c', long = "config", global = true, value_name = "FILE")]
    config: Vec<PathBuf>,
    /// Override a config key, e.g. `--set reward.alpha=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to `run_dir` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run planner episodes over a question file.
    Rollout {
        #[arg(long)]
        questions: PathBuf,
        /// Trajectory file; defaults to `trajectories.jsonl` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip reward computation.
        #[arg(long)]
        no_reward: bool,
    },
    /// Compare planner and baseline accuracy on datasets.
    Evaluate {
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        /// Comma-separated subset of planner,rag,direct.
        #[arg(long)]
        methods: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Abort on malformed dataset lines.
        #[arg(long)]
        strict: bool,
    },
    /// Recompute reward breakdowns for a trajectory file.
    Reward {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy planner with PPO at one cost weight.
    TrainToy {
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        updates: Option<usize>,
        /// Per-update log (JSON Lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train toy planners across cost weights and seeds.
    ParetoSweep {
        /// Comma-separated cost weights.
        #[arg(long)]
        alphas: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Report table; a CSV data file is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate the configuration.
    ValidateConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Rollout { .. } => "rollout",
            Command::Evaluate { .. } => "evaluate",
            Command::Reward { .. } => "reward",
            Command::TrainToy { .. } => "train-toy",
            Command::ParetoSweep { .. } => "pareto-sweep",
            Command::ValidateConfig => "validate-config",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}").replace('\n', " "),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return match c {
                ConfigError::Validation(_) | ConfigError::Override(_) => "validation",
                ConfigError::Parse { .. } => "config_parse",
                ConfigError::Io { .. } => "io",
                ConfigError::Connect { .. } => "connect",
            };
        }
        if cause.downcast_ref::<RecordError>().is_some() {
            return "record";
        }
        if cause.downcast_ref::<EvalError>().is_some() {
            return "dataset";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn level(verbose: u8) -> LevelFilter {
    match verbose {
        0 => LevelFilter::INFO,
        1 => LevelFilter::DEBUG,
        _ => LevelFilter::TRACE,
    }
}

/// Logs to stderr and, when a run directory exists, appends to its `log.txt`.
fn init_logging(verbose: u8, run: Option<&RunDir>) -> Result<()> {
    let stderr = tracing_subscriber::fmt::layer().with_writer(std::io::stderr);
    let file = match run {
        Some(r) => {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(r.log_path())
                .with_context(|| format!("cannot open {}", r.log_path().display()))?;
            Some(tracing_subscriber::fmt::layer().with_ansi(false).with_writer(Mutex::new(f)))
        }
        None => None,
    };
    let _ = tracing_subscriber::registry()
        .with(level(verbose))
        .with(stderr)
        .with(file)
        .try_init();
    Ok(())
}

struct Session {
    cfg: Option<AppConfig>,
    run: Option<RunDir>,
}

/// Loads the config (when required or given), creates the run directory and
/// starts logging. No service is contacted here.
fn start(cli: &Cli, require_config: bool, extra: &[String], run_dir: Option<&Path>, seed: u64) -> Result<Session> {
    let mut overrides = cli.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = if cli.config.is_empty() {
        if require_config {
            bail!(ConfigError::Validation(vec!["--config is required for this command".into()]));
        }
        None
    } else {
        Some(load_config(&cli.config, &overrides)?)
    };
    let dir = run_dir
        .map(Path::to_path_buf)
        .or_else(|| cli.run_dir.clone())
        .or_else(|| cfg.as_ref().map(|c| c.run_dir.clone()));
    let seed = cfg.as_ref().map_or(seed, |c| c.seed);
    let run = match dir {
        Some(d) => Some(RunDir::create(&d, cfg.as_ref(), cli.command.name(), seed)?),
        None => None,
    };
    init_logging(cli.verbose, run.as_ref())?;
    Ok(Session { cfg, run })
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::ValidateConfig => {
            let cfg = load_config(&cli.config, &cli.overrides)?;
            println!(
                "{}",
                serde_json::json!({"status": "ok", "seed": cfg.seed, "alpha": cfg.reward.params.alpha})
            );
            Ok(())
        }
        Command::Rollout {
            questions,
            out,
            parallelism,
            seed,
            no_reward,
        } => {
            let extra: Vec<String> = seed.iter().map(|s| format!("seed={s}")).collect();
            let s = start(&cli, true, &extra, None, 0)?;
            let cfg = s.cfg.expect("config required");
            rollout(&cfg, s.run.as_ref(), questions, out.as_deref(), *parallelism, *no_reward)
        }
        Command::Evaluate {
            dataset,
            methods,
            out,
            strict,
        } => {
            let s = start(&cli, true, &[], Some(out), 0)?;
            let cfg = s.cfg.expect("config required");
            evaluate(&cfg, dataset, methods.as_deref(), out, *strict)
        }
        Command::Reward { input, alpha, out } => {
            let extra: Vec<String> = alpha.iter().map(|a| format!("reward.alpha={a}")).collect();
            let s = start(&cli, false, &extra, None, 0)?;
            reward(s.cfg.as_ref(), input, *alpha, out)
        }
        Command::TrainToy {
            alpha,
            seed,
            updates,
            out,
        } => {
            let s = start(&cli, false, &[], None, seed.unwrap_or(0))?;
            train_toy(s.cfg.as_ref(), *alpha, *seed, *updates, out)
        }
        Command::ParetoSweep {
            alphas,
            seeds,
            updates,
            parallelism,
            out,
        } => {
            let s = start(&cli, false, &[], None, 0)?;
            sweep(s.cfg.as_ref(), alphas.as_deref(), seeds.as_deref(), *updates, *parallelism, out)
        }
    }
}

fn rollout(
    cfg: &AppConfig,
    run: Option<&RunDir>,
    questions: &Path,
    out: Option<&Path>,
    parallelism: Option<usize>,
    no_reward: bool,
) -> Result<()> {
    let ds = load_dataset(questions, cfg.eval.format, cfg.eval.strict)?;
    let services = Services::connect(cfg)?;
    let engine = services.rollout_engine(cfg);
    let par = parallelism.unwrap_or(cfg.rollout.parallelism).max(1);
    tracing::info!(questions = ds.items.len(), parallelism = par, "rollout started");
    let trajectories = engine.run_batch(&ds.items, par);

    let mut records: Vec<TrajectoryRecord> = trajectories
        .into_iter()
        .map(TrajectoryRecord::new)
        .collect::<Result<_, _>>()
        .context("rollout produced an invalid trajectory")?;

    if !no_reward {
        let runner = services.baseline_runner(cfg)?;
        let rewards = services.reward_engine(cfg);
        let items: Vec<(usize, &TrajectoryRecord)> = records.iter().enumerate().collect();
        let breakdowns = map_bounded(&items, par, |_, (_, rec)| {
            let q = &rec.trajectory.question;
            let result = runner
                .compute_baselines(q)
                .and_then(|b| rewards.compute_reward(&rec.trajectory, &b));
            match result {
                Ok(b) => Some(b),
                Err(e) => {
                    tracing::warn!(question = %q.id, "reward unavailable: {e}");
                    None
                }
            }
        });
        for (rec, b) in records.iter_mut().zip(&breakdowns) {
            rec.reward = b.clone();
        }
        if let Some(run) = run {
            let lines: Vec<serde_json::Value> = records
                .iter()
                .filter_map(|r| r.reward.as_ref().map(|b| reward_line(r.trajectory.id(), b)))
                .collect();
            write_jsonl(&run.file("rewards.jsonl"), &lines)?;
        }
    }

    let out = match (out, run) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(r)) => r.file("trajectories.jsonl"),
        (None, None) => PathBuf::from("trajectories.jsonl"),
    };
    write_records(&out, &records)?;
    let completed = records.iter().filter(|r| r.trajectory.answer.is_some()).count();
    tracing::info!(total = records.len(), completed, out = %out.display(), "rollout finished");
    Ok(())
}

fn reward_line(id: &str, b: &RewardBreakdown) -> serde_json::Value {
    let mut v = serde_json::to_value(b).expect("breakdown serializes");
    v.as_object_mut()
        .expect("breakdown is an object")
        .insert("trajectory_id".into(), id.into());
    v
}

/// With a config the judge is called again; without one, stored judge
/// outcomes are re-weighted.
fn reward(cfg: Option<&AppConfig>, input: &Path, alpha: Option<f64>, out: &Path) -> Result<()> {
    let records = read_records(input)?;
    let lines: Vec<serde_json::Value> = match cfg {
        Some(cfg) => {
            let services = Services::connect(cfg)?;
            let runner = services.baseline_runner(cfg)?;
            let engine = services.reward_engine(cfg);
            let results = map_bounded(&records, cfg.rollout.parallelism, |_, rec| {
                let q = &rec.trajectory.question;
                runner
                    .compute_baselines(q)
                    .and_then(|b| engine.compute_reward(&rec.trajectory, &b))
                    .map(|b| reward_line(rec.trajectory.id(), &b))
                    .with_context(|| format!("trajectory {}", rec.trajectory.id()))
            });
            results.into_iter().collect::<Result<_>>()?
        }
        None => {
            let rc = RewardConfig::default().with_alpha(alpha.unwrap_or(0.0));
            records
                .iter()
                .enumerate()
                .map(|(i, rec)| match &rec.reward {
                    Some(b) => Ok(reward_line(rec.trajectory.id(), &b.reweighted(&rc))),
                    None => bail!(
                        "line {}: no stored reward; pass --config to score with the judge",
                        i + 1
                    ),
                })
                .collect::<Result<_>>()?
        }
    };
    write_jsonl(out, &lines)?;
    tracing::info!(records = lines.len(), out = %out.display(), "rewards written");
    Ok(())
}

fn evaluate(cfg: &AppConfig, datasets: &[PathBuf], methods: Option<&str>, out: &Path, strict: bool) -> Result<()> {
    let methods: Vec<Method> = match methods {
        Some(m) => parse_methods(m)?,
        None => cfg.eval.methods.clone(),
    };
    let services = Services::connect(cfg)?;
    let ctx = EvalContext {
        generator: services.generator.clone(),
        search: services.search.clone(),
        scorer: services.scorer(cfg),
        prompts: cfg.templates().baselines,
        planner: methods
            .contains(&Method::Planner)
            .then(|| services.rollout_engine(cfg)),
        parallelism: cfg.rollout.parallelism,
    };
    let mut rows = Vec::new();
    for path in datasets {
        let ds = load_dataset(path, cfg.eval.format, strict || cfg.eval.strict)?;
        for &m in &methods {
            tracing::info!(dataset = %ds.name, method = m.label(), "evaluating");
            let (row, trajectories) = evaluate_method(&ds, m, &ctx)?;
            if !trajectories.is_empty() {
                let records: Vec<TrajectoryRecord> = trajectories
                    .into_iter()
                    .map(TrajectoryRecord::new)
                    .collect::<Result<_, _>>()?;
                let file = out.join("trajectories").join(format!("{}.jsonl", ds.name));
                write_records(&file, &records)?;
            }
            rows.push(row);
        }
    }
    let (table, jsonl) = render_report(&rows);
    std::fs::write(out.join("report.txt"), &table)?;
    std::fs::write(out.join("report.jsonl"), &jsonl)?;
    print!("{table}");
    Ok(())
}

fn toy_settings(cfg: Option<&AppConfig>) -> (RewardConfig, TrainConfig) {
    match cfg {
        Some(c) => (c.reward.params.clone(), c.toy.train.clone()),
        None => (RewardConfig::default(), TrainConfig::default()),
    }
}

fn train_toy(cfg: Option<&AppConfig>, alpha: f64, seed: Option<u64>, updates: Option<usize>, out: &Path) -> Result<()> {
    let (reward_cfg, mut train_cfg) = toy_settings(cfg);
    if let Some(s) = seed.or(cfg.map(|c| c.seed)) {
        train_cfg.seed = s;
    }
    if let Some(u) = updates {
        train_cfg.updates = u;
    }
    let reward_cfg = reward_cfg.with_alpha(alpha);
    let mut problems = reward_cfg.problems();
    problems.extend(train_cfg.problems());
    if !problems.is_empty() {
        bail!(ConfigError::Validation(problems));
    }
    let world = ToyWorld::generate(&train_cfg.world, derive_seed(train_cfg.seed, "toy/world"));
    let result = train(&world, &reward_cfg, &train_cfg)?;
    write_jsonl(out, &result.log)?;
    let series = |f: fn(&searchplanner::toy::UpdateLog) -> f64| -> Vec<f64> { result.log.iter().map(f).collect() };
    let window = 20;
    let summary = serde_json::json!({
        "alpha": result.alpha,
        "effective_alpha": result.effective_alpha,
        "seed": result.seed,
        "updates": result.log.len(),
        "greedy": result.greedy,
        "format_updates_to_95": updates_to_fraction(&series(|l| l.mean_format), 0.95, window),
        "outcome_updates_to_95": updates_to_fraction(&series(|l| l.mean_outcome), 0.95, window),
        "policy": result.policy.weights,
    });
    println!("{summary}");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| anyhow::anyhow!("invalid {what} {s:?}")))
        .collect()
}

fn sweep(
    cfg: Option<&AppConfig>,
    alphas: Option<&str>,
    seeds: Option<&str>,
    updates: Option<usize>,
    parallelism: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (reward_cfg, mut train_cfg) = toy_settings(cfg);
    let alphas: Vec<f64> = match alphas {
        Some(a) => parse_list(a, "alpha")?,
        None => cfg.map_or_else(|| vec![0.0, 0.005, 0.05, 0.125, 0.25], |c| c.toy.alphas.clone()),
    };
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_list(s, "seed")?,
        None => cfg.map_or_else(|| vec![1, 2, 3], |c| c.toy.seeds.clone()),
    };
    if alphas.is_empty() || seeds.is_empty() {
        bail!(ConfigError::Validation(vec!["alphas and seeds must not be empty".into()]));
    }
    if let Some(u) = updates {
        train_cfg.updates = u;
    }
    let mut problems = train_cfg.problems();
    for a in &alphas {
        problems.extend(reward_cfg.clone().with_alpha(*a).problems());
    }
    if !problems.is_empty() {
        bail!(ConfigError::Validation(problems));
    }
    let par = parallelism
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1);
    tracing::info!(alphas = ?alphas, seeds = ?seeds, updates = train_cfg.updates, "sweep started");
    let rows = pareto_sweep(&reward_cfg, &train_cfg, &alphas, &seeds, par)?;
    let table = pareto_table(&rows);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, &table)?;
    std::fs::write(data_path(out), pareto_csv(&rows))?;
    print!("{table}");
    Ok(())
}

fn data_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "csv") {
        out.with_extension("data.csv")
    } else {
        out.with_extension("csv")
    }
}

fn pareto_table(rows: &[ParetoRow]) -> String {
    let mut s = format!(
        "{:>8} {:>10} {:>8} {:>9} {:>11} {:>9}\n",
        "alpha", "eff_alpha", "reward", "turns", "subqueries", "accuracy"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>8} {:>10.3} {:>8.3} {:>9} {:>11.3} {:>9.3}\n",
            r.alpha,
            r.effective_alpha,
            r.mean_total,
            format!("[{:.3}]", r.mean_turns),
            r.mean_subqueries,
            r.accuracy
        ));
    }
    s
}

fn pareto_csv(rows: &[ParetoRow]) -> String {
    let mut s = String::from("alpha,effective_alpha,mean_reward,mean_turns,mean_subqueries,accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha, r.effective_alpha, r.mean_total, r.mean_turns, r.mean_subqueries, r.accuracy
        ));
    }
    s
}
