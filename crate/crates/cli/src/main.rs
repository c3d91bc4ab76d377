use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use intensity_rl::baselines::{
    evaluate, solve_cdlp, solve_dp, train_a2c, A2cConfig, CdlpPolicy, EvalReport,
};
use intensity_rl::instances::{bursty, experiment_one, experiment_two};
use intensity_rl::learn::{train_actor_critic, LearnError, TrainConfig};
use intensity_rl::policy::{read_params, GreedyPolicy, ParamPolicy, UniformPolicy};
use intensity_rl::queueing::{
    best_threshold, evaluate_queue, solve_queue_dp, train_queue_actor_critic, QueueActor,
    QueueDpPolicy, QueueInstance, QueueTrainConfig, ThresholdPolicy, UniformAdmission,
};
use intensity_rl::{DifferentiablePolicy, NetworkInstance, RngStream};
use serde::de::DeserializeOwned;
use serde::Serialize;

mod output;

use output::{
    format_table, git_describe, read_rows, sha256_hex, OutDir, ResultRow, RunManifest, RESULTS_FILE,
};

/// Stream index for evaluation paths, kept apart from training streams.
const CLI_EVAL_STREAM: u64 = 0xE7A1;

#[derive(Parser)]
#[command(
    name = "intensity-rl",
    version,
    about = "Continuous-time actor-critic for intensity control"
)]
struct Cli {
    /// Worker threads for library-level parallelism.
    #[arg(long, global = true, env = "INTENSITY_RL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Instance JSON file, or a built-in name (builtin:experiment-one, ...).
    #[arg(long)]
    instance: String,
    /// Output directory for the manifest and run artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Write 0 for every wallclock column so outputs are byte-stable.
    #[arg(long)]
    fixed_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Continuous-time actor-critic on a network instance.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        /// Evaluation paths for the final policy.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
    },
    /// Monte-Carlo evaluation of a fixed or trained policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// uniform, greedy, cdlp, dp, or a parameter file.
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Grid step for the dp policy.
        #[arg(long, default_value_t = 0.001)]
        dt: f64,
    },
    /// Exact discrete-time dynamic program.
    Dp {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.001)]
        dt: f64,
        /// Also simulate the DP policy on this many paths.
        #[arg(long, default_value_t = 0)]
        paths: usize,
    },
    /// CDLP upper bound, optionally with a simulation of its schedule policy.
    Cdlp {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        paths: usize,
    },
    /// Discrete-time advantage actor-critic.
    A2c {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's grid step.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
    },
    /// Actor-critic admission control on a queue instance.
    QueueingTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
    },
    /// Queue baselines: uniform, threshold:K, best-threshold, dp, or a parameter file.
    QueueingEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 0.001)]
        dt: f64,
    },
    /// Comparison table with a ratio-to-reference column.
    Table {
        /// Manifest CSV, or a directory containing one.
        manifest: PathBuf,
        /// Policy label of the reference row; defaults to the first row.
        #[arg(long)]
        reference: Option<String>,
        /// Only rows for this instance.
        #[arg(long)]
        instance: Option<String>,
    },
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    NonFinite(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            LearnError::Config(_) => CliError::Validation(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::NonFinite(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            common,
            config,
            paths,
        } => cmd_train(&common, &config, paths),
        Command::Evaluate {
            common,
            policy,
            paths,
            dt,
        } => cmd_evaluate(&common, &policy, paths, dt),
        Command::Dp { common, dt, paths } => cmd_dp(&common, dt, paths),
        Command::Cdlp { common, paths } => cmd_cdlp(&common, paths),
        Command::A2c {
            common,
            config,
            dt,
            paths,
        } => cmd_a2c(&common, &config, dt, paths),
        Command::QueueingTrain {
            common,
            config,
            paths,
        } => cmd_queueing_train(&common, &config, paths),
        Command::QueueingEval {
            common,
            policy,
            paths,
            dt,
        } => cmd_queueing_eval(&common, &policy, paths, dt),
        Command::Table {
            manifest,
            reference,
            instance,
        } => cmd_table(&manifest, reference.as_deref(), instance.as_deref()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{what} {}: {e}", path.display())))
}

fn load_network(spec: &str) -> CliResult<NetworkInstance> {
    match spec.strip_prefix("builtin:") {
        Some("experiment-one") => Ok(experiment_one()),
        Some("experiment-two") => Ok(experiment_two()),
        Some("bursty") => Ok(bursty()),
        Some(other) => Err(validation(format!(
            "unknown built-in instance {other:?} (experiment-one, experiment-two, bursty)"
        ))),
        None => read_json(Path::new(spec), "instance"),
    }
}

fn load_queue(spec: &str) -> CliResult<QueueInstance> {
    match spec.strip_prefix("builtin:") {
        Some("queue-reference") => Ok(QueueInstance::reference()),
        Some(other) => Err(validation(format!(
            "unknown built-in queue instance {other:?} (queue-reference)"
        ))),
        None => read_json(Path::new(spec), "queue instance"),
    }
}

fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

fn eval_stream(seed: u64) -> RngStream {
    RngStream::new(seed).child(CLI_EVAL_STREAM)
}

fn row(report: &EvalReport, common: &Common, seed: u64) -> ResultRow {
    ResultRow {
        policy: report.label.clone(),
        instance: common.instance.clone(),
        mean: report.mean,
        ci99: report.ci99,
        paths: report.paths,
        seed,
        wallclock: report.wallclock_s,
    }
}

fn exact_row(label: &str, value: f64, common: &Common, seed: u64, wallclock: f64) -> ResultRow {
    ResultRow {
        policy: label.into(),
        instance: common.instance.clone(),
        mean: value,
        ci99: 0.0,
        paths: 0,
        seed,
        wallclock,
    }
}

/// Appends rows and one run record, then echoes the rows to stdout.
fn finish(
    out: &OutDir,
    command: &str,
    common: &Common,
    hash: String,
    seed: u64,
    rows: &[ResultRow],
    files: Vec<PathBuf>,
) -> CliResult<()> {
    out.append_rows(rows)?;
    let mut outputs: Vec<String> = files.iter().map(|f| out.relative(f)).collect();
    outputs.push(RESULTS_FILE.to_string());
    out.append_run(&RunManifest {
        command: command.into(),
        instance: common.instance.clone(),
        config_hash: hash,
        seed,
        git_describe: git_describe(),
        outputs,
    })?;
    for r in rows {
        println!(
            "{},{},{:.3},{:.3},{}",
            r.policy, r.instance, r.mean, r.ci99, r.paths
        );
    }
    Ok(())
}

fn cmd_train(common: &Common, config_path: &Path, paths: usize) -> CliResult<()> {
    let inst = load_network(&common.instance)?;
    let mut config: TrainConfig = read_json(config_path, "config")?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    if paths < 2 {
        return Err(validation("--paths must be at least 2"));
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let dir = out.run_dir("train")?;
    let policy = config.policy.build(&inst, config.gamma, config.seed);
    let header = policy.header();
    let label = header.parametrization.clone();
    let checkpoint_every = (config.episodes / config.batch / 10).max(1);
    let mut files = Vec::new();
    let mut checkpoint_error = None;
    let outcome = train_actor_critic(&inst, policy, &config, &mut |p| {
        if (p.update + 1) % checkpoint_every == 0 && checkpoint_error.is_none() {
            let path = dir.join(format!("checkpoint-{:06}.txt", p.update + 1));
            match output::write_param_file(&path, &header, p.policy_params) {
                Ok(()) => files.push(path),
                Err(e) => checkpoint_error = Some(e),
            }
        }
    })?;
    if let Some(e) = checkpoint_error {
        return Err(e.into());
    }
    let curve = dir.join("curve.csv");
    out.write_curve(&curve, &outcome.curve)?;
    let params = dir.join("policy.txt");
    output::write_param_file(&params, &outcome.policy.header(), outcome.policy.params())?;
    let critic = dir.join("critic.txt");
    output::write_values(&critic, outcome.critic.params())?;
    files.extend([curve, params, critic]);
    let report = evaluate(
        &inst,
        &outcome.policy,
        &label,
        paths,
        &eval_stream(config.seed),
    );
    finish(
        &out,
        "train",
        common,
        config_hash(&config),
        config.seed,
        &[row(&report, common, config.seed)],
        files,
    )
}

fn load_param_policy(inst: &NetworkInstance, path: &str) -> CliResult<ParamPolicy> {
    let file = std::fs::File::open(path).map_err(|e| validation(format!("policy {path}: {e}")))?;
    let (header, values) = read_params(std::io::BufReader::new(file))
        .map_err(|e| validation(format!("policy {path}: {e}")))?;
    ParamPolicy::from_params(inst, &header, &values)
        .map_err(|e| validation(format!("policy {path}: {e}")))
}

fn cmd_evaluate(common: &Common, policy: &str, paths: usize, dt: f64) -> CliResult<()> {
    let inst = load_network(&common.instance)?;
    if paths < 2 {
        return Err(validation("--paths must be at least 2"));
    }
    let seed = common.seed.unwrap_or(0);
    let rng = eval_stream(seed);
    let report = match policy {
        "uniform" => evaluate(&inst, &UniformPolicy, "uniform", paths, &rng),
        "greedy" => evaluate(&inst, &GreedyPolicy::new(&inst), "greedy", paths, &rng),
        "cdlp" => {
            let sol = solve_cdlp(&inst).map_err(|e| validation(e.to_string()))?;
            evaluate(&inst, &CdlpPolicy::new(&sol), "cdlp", paths, &rng)
        }
        "dp" => {
            let sol = solve_dp(&inst, dt).map_err(|e| validation(e.to_string()))?;
            evaluate(&inst, &sol, "dp", paths, &rng)
        }
        file => {
            let p = load_param_policy(&inst, file)?;
            let label = p.header().parametrization;
            evaluate(&inst, &p, &label, paths, &rng)
        }
    };
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let hash = config_hash(&serde_json::json!({ "policy": policy, "paths": paths, "dt": dt }));
    finish(
        &out,
        "evaluate",
        common,
        hash,
        seed,
        &[row(&report, common, seed)],
        vec![],
    )
}

fn cmd_dp(common: &Common, dt: f64, paths: usize) -> CliResult<()> {
    let inst = load_network(&common.instance)?;
    let seed = common.seed.unwrap_or(0);
    let start = Instant::now();
    let sol = solve_dp(&inst, dt).map_err(|e| validation(e.to_string()))?;
    let value = sol.value(0, inst.capacity());
    let mut rows = vec![exact_row(
        "dp-value",
        value,
        common,
        seed,
        start.elapsed().as_secs_f64(),
    )];
    if paths >= 2 {
        rows.push(row(
            &evaluate(&inst, &sol, "dp", paths, &eval_stream(seed)),
            common,
            seed,
        ));
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let hash = config_hash(&serde_json::json!({ "dt": dt, "paths": paths }));
    finish(&out, "dp", common, hash, seed, &rows, vec![])
}

fn cmd_cdlp(common: &Common, paths: usize) -> CliResult<()> {
    let inst = load_network(&common.instance)?;
    let seed = common.seed.unwrap_or(0);
    let start = Instant::now();
    let sol = solve_cdlp(&inst).map_err(|e| validation(e.to_string()))?;
    let mut rows = vec![exact_row(
        "cdlp-bound",
        sol.objective,
        common,
        seed,
        start.elapsed().as_secs_f64(),
    )];
    if paths >= 2 {
        let report = evaluate(
            &inst,
            &CdlpPolicy::new(&sol),
            "cdlp",
            paths,
            &eval_stream(seed),
        );
        rows.push(row(&report, common, seed));
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let dir = out.run_dir("cdlp")?;
    let schedule = dir.join("schedule.json");
    std::fs::write(
        &schedule,
        serde_json::to_string_pretty(&sol).context("serializing schedule")?,
    )
    .context("writing schedule")?;
    let hash = config_hash(&serde_json::json!({ "paths": paths }));
    finish(&out, "cdlp", common, hash, seed, &rows, vec![schedule])
}

fn cmd_a2c(common: &Common, config_path: &Path, dt: Option<f64>, paths: usize) -> CliResult<()> {
    let inst = load_network(&common.instance)?;
    let mut config: A2cConfig = read_json(config_path, "config")?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dt) = dt {
        config.dt = dt;
    }
    config.validate(&inst)?;
    if paths < 2 {
        return Err(validation("--paths must be at least 2"));
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let dir = out.run_dir("a2c")?;
    let policy = config.policy.build(&inst, config.gamma, config.seed);
    let label = format!("a2c-{}", policy.header().parametrization);
    let outcome = train_a2c(&inst, policy, &config, &mut |_| {})?;
    let curve = dir.join("curve.csv");
    out.write_curve(&curve, &outcome.curve)?;
    let params = dir.join("policy.txt");
    output::write_param_file(&params, &outcome.policy.header(), outcome.policy.params())?;
    let report = evaluate(
        &inst,
        &outcome.policy,
        &label,
        paths,
        &eval_stream(config.seed),
    );
    finish(
        &out,
        "a2c",
        common,
        config_hash(&config),
        config.seed,
        &[row(&report, common, config.seed)],
        vec![curve, params],
    )
}

fn cmd_queueing_train(common: &Common, config_path: &Path, paths: usize) -> CliResult<()> {
    let inst = load_queue(&common.instance)?;
    let mut config: QueueTrainConfig = read_json(config_path, "config")?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    if paths < 2 {
        return Err(validation("--paths must be at least 2"));
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let dir = out.run_dir("queueing-train")?;
    let outcome = train_queue_actor_critic(&inst, &config, &mut |_, _, _| {})?;
    let curve = dir.join("curve.csv");
    out.write_curve(&curve, &outcome.curve)?;
    let params = dir.join("actor.txt");
    output::write_param_file(&params, &outcome.actor.header(), outcome.actor.net.params())?;
    let critic = dir.join("critic.txt");
    output::write_values(&critic, outcome.critic.net.params())?;
    let report = evaluate_queue(
        &inst,
        &outcome.actor,
        "queue-mlp",
        paths,
        &eval_stream(config.seed),
    );
    finish(
        &out,
        "queueing-train",
        common,
        config_hash(&config),
        config.seed,
        &[row(&report, common, config.seed)],
        vec![curve, params, critic],
    )
}

fn cmd_queueing_eval(common: &Common, policy: &str, paths: usize, dt: f64) -> CliResult<()> {
    let inst = load_queue(&common.instance)?;
    if paths < 2 {
        return Err(validation("--paths must be at least 2"));
    }
    let seed = common.seed.unwrap_or(0);
    let rng = eval_stream(seed);
    let mut rows = Vec::new();
    match policy {
        "uniform" => {
            let p = UniformAdmission {
                capacity: inst.capacity(),
            };
            rows.push(row(
                &evaluate_queue(&inst, &p, "uniform", paths, &rng),
                common,
                seed,
            ));
        }
        "best-threshold" => {
            let (k, report) = best_threshold(&inst, paths, &rng);
            let mut report = report;
            report.label = format!("threshold-{k}");
            rows.push(row(&report, common, seed));
        }
        "dp" => {
            let start = Instant::now();
            let sol = solve_queue_dp(&inst, dt).map_err(|e| validation(e.to_string()))?;
            rows.push(exact_row(
                "dp-value",
                sol.value(0, 0),
                common,
                seed,
                start.elapsed().as_secs_f64(),
            ));
            let p = QueueDpPolicy::new(sol, &inst);
            rows.push(row(
                &evaluate_queue(&inst, &p, "dp", paths, &rng),
                common,
                seed,
            ));
        }
        spec if spec.starts_with("threshold:") => {
            let k: u32 = spec["threshold:".len()..]
                .parse()
                .map_err(|_| validation(format!("bad threshold in {spec:?}")))?;
            let label = format!("threshold-{k}");
            rows.push(row(
                &evaluate_queue(&inst, &ThresholdPolicy(k), &label, paths, &rng),
                common,
                seed,
            ));
        }
        file => {
            let f =
                std::fs::File::open(file).map_err(|e| validation(format!("policy {file}: {e}")))?;
            let (header, values) = read_params(std::io::BufReader::new(f))
                .map_err(|e| validation(format!("policy {file}: {e}")))?;
            let actor = QueueActor::from_params(&inst, &header, &values)
                .map_err(|e| validation(format!("policy {file}: {e}")))?;
            rows.push(row(
                &evaluate_queue(&inst, &actor, "queue-mlp", paths, &rng),
                common,
                seed,
            ));
        }
    }
    let out = OutDir::new(&common.out, common.fixed_clock)?;
    let hash = config_hash(&serde_json::json!({ "policy": policy, "paths": paths, "dt": dt }));
    finish(&out, "queueing-eval", common, hash, seed, &rows, vec![])
}

fn cmd_table(manifest: &Path, reference: Option<&str>, instance: Option<&str>) -> CliResult<()> {
    let path = if manifest.is_dir() {
        manifest.join(RESULTS_FILE)
    } else {
        manifest.to_path_buf()
    };
    if !path.exists() {
        return Err(validation(format!(
            "manifest {} does not exist",
            path.display()
        )));
    }
    let mut rows = read_rows(&path)?;
    if let Some(name) = instance {
        rows.retain(|r| r.instance == name);
    }
    if rows.is_empty() {
        return Err(validation(format!(
            "manifest {} has no rows",
            path.display()
        )));
    }
    let reference = match reference {
        Some(label) => rows
            .iter()
            .find(|r| r.policy == label)
            .ok_or_else(|| validation(format!("no row with policy {label:?}")))?,
        None => &rows[0],
    };
    print!("{}", format_table(&rows, reference));
    Ok(())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(anyhow!(e))
    }
}
