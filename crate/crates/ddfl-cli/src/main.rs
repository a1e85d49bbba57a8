//! Command line front end for the decision-focused learning experiments:
//! training runs, checkpoint evaluation, gradient checks, estimator
//! diagnostics, and dataset generation.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ddfl::runner::{
    diffusion_agreement_cosine, evaluate, gaussian_agreement_cosine, generate_dataset,
    gradcheck_suite, load_split, metrics_to_csv, timestep_variance_traces, train, Checkpoint,
    ExperimentConfig, TaskKind,
};

#[derive(Parser)]
#[command(
    name = "ddfl",
    about = "Train and evaluate diffusion, Gaussian, and deterministic predictors \
             through a convex decision layer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a predictor and write metrics.csv, summary.json, and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the config's test split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite; exits 0 only if every check passes.
    Gradcheck,
    /// Print estimator agreement cosines and timestep-variance diagnostics.
    CompareEstimators(CompareArgs),
    /// Write a CSV dataset drawn from a task's synthetic generator.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; takes precedence over the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Inline config overrides, e.g. `task=factory method=diff-sf epochs=5`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("config line {}: expected `key = value`", idx + 1))?;
                pairs.push((key.trim().to_string(), value.trim().to_string()));
            }
        }
        for item in &self.overrides {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("override `{item}`: expected KEY=VALUE"))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        let config = ExperimentConfig::from_pairs(&pairs)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for metrics.csv, summary.json, config.txt, and the checkpoint.
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional second checkpoint; reports the paired win rate against it.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Directory for eval.json; stdout only when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Largest outcome dimension for the diffusion agreement sweep.
    #[arg(long, default_value_t = 2)]
    max_dim: usize,
    /// Shared sample count for the Gaussian agreement cosine.
    #[arg(long, default_value_t = 20_000)]
    gauss_samples: usize,
    /// Instance repetitions averaged into the diffusion cosines.
    #[arg(long, default_value_t = 40)]
    reps: usize,
    /// Gradient draws behind each variance trace.
    #[arg(long, default_value_t = 1_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    /// Task whose generator to sample.
    #[arg(long)]
    task: TaskKind,
    /// Number of rows.
    #[arg(long, default_value_t = 384)]
    count: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Outcome dimension; defaults to the task's.
    #[arg(long)]
    y_dim: Option<usize>,
    /// Feature dimension; defaults to the task's.
    #[arg(long)]
    x_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn config_json(config: &ExperimentConfig) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for line in config.to_kv_text().lines() {
        if let Some((key, value)) = line.split_once(" = ") {
            map.insert(key.to_string(), json!(value));
        }
    }
    serde_json::Value::Object(map)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.config.build()?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let result = train(&config)?;

    let metrics_path = args.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(&result.metrics))?;
    let config_path = args.out_dir.join("config.txt");
    std::fs::write(&config_path, config.to_kv_text())?;
    let ckpt_path = args.out_dir.join("checkpoint.ddfl");
    result.checkpoint.save(&ckpt_path)?;

    let last = result.metrics.last().expect("training emits at least one row");
    let summary = json!({
        "config": config_json(&config),
        "final": {
            "epoch": last.epoch,
            "train_task_loss": last.train_task_loss,
            "test_task_loss": last.test_task_loss,
            "test_rmse": last.test_rmse,
            "regret": last.regret,
            "wall_time_s": last.wall_time_s,
        },
    });
    let summary_path = args.out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    for row in &result.metrics {
        println!(
            "epoch {:>3}  train {:>12.5}  test {:>12.5}  rmse {:>10.5}  regret {:>12.5}  {:>7.1}s",
            row.epoch,
            row.train_task_loss,
            row.test_task_loss,
            row.test_rmse,
            row.regret,
            row.wall_time_s
        );
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let config = args.config.build()?;
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (_, test) = load_split(&config)?;
    let report = evaluate(&checkpoint, &config, &test)?;

    let mut out = json!({
        "task_loss": report.task_loss,
        "rmse": report.rmse,
        "regret": report.regret,
        "instances": report.per_instance_cost.len(),
    });
    println!(
        "task_loss {:.6}  rmse {:.6}  regret {:.6}  ({} instances)",
        report.task_loss,
        report.rmse,
        report.regret,
        report.per_instance_cost.len()
    );

    if let Some(baseline_path) = &args.baseline {
        let baseline = Checkpoint::load(baseline_path)
            .with_context(|| format!("loading {}", baseline_path.display()))?;
        let base_report = evaluate(&baseline, &config, &test)?;
        let rate = ddfl::runner::win_rate(
            &report.per_instance_cost,
            &base_report.per_instance_cost,
        )?;
        println!(
            "vs baseline: {} wins / {} ties / {} losses (win rate {:.3})",
            rate.wins,
            rate.ties,
            rate.losses,
            rate.rate()
        );
        out["baseline"] = json!({
            "task_loss": base_report.task_loss,
            "wins": rate.wins,
            "ties": rate.ties,
            "losses": rate.losses,
            "win_rate": rate.rate(),
        });
    }

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let checks = gradcheck_suite()?;
    let mut all_pass = true;
    for check in &checks {
        println!(
            "{:<16} rel err {:>12.3e}  tol {:.0e}  {}",
            check.name,
            check.rel_err,
            check.tol,
            if check.pass() { "pass" } else { "FAIL" }
        );
        all_pass &= check.pass();
    }
    if !all_pass {
        bail!("gradient checks failed");
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let gauss = gaussian_agreement_cosine(args.gauss_samples, args.seed)?;
    println!(
        "gauss agreement   n {:>7}          cosine {:+.4}",
        args.gauss_samples, gauss
    );
    for dim in 1..=args.max_dim {
        let cos = diffusion_agreement_cosine(dim, args.reps, args.seed)?;
        println!(
            "diff agreement    dim {:>2}  reps {:>4}  cosine {:+.4}",
            dim, args.reps, cos
        );
    }
    let (is_trace, uniform_trace) = timestep_variance_traces(args.draws, args.seed)?;
    println!(
        "timestep variance is {:.4e}  uniform {:.4e}  ratio {:.3}",
        is_trace,
        uniform_trace,
        is_trace / uniform_trace
    );
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let y_dim = args.y_dim.unwrap_or_else(|| args.task.default_y_dim());
    let x_dim = args.x_dim.unwrap_or_else(|| args.task.default_x_dim());
    let data = generate_dataset(args.task, y_dim, x_dim, args.count, args.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    data.write_csv(&args.out)?;
    println!(
        "wrote {} rows (x_dim {}, y_dim {}) to {}",
        data.len(),
        x_dim,
        y_dim,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::CompareEstimators(args) => cmd_compare(args),
        Command::GenData(args) => cmd_gen_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
