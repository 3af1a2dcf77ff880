//! `pgg` command line: train, eval, plot, verify.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{discover_runs, evaluate_runs, read_reports, write_reports, SweepSpec};
use crate::plot::write_plots;
use crate::trainer::{train, Combine, TrainConfig};
use crate::verify::{run_all, Injection};

#[derive(Debug, Parser)]
#[command(name = "pgg", version, about = "PPO with policy gradient guidance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more seeds into run directories.
    Train(TrainArgs),
    /// Evaluate checkpoints over a γ sweep.
    Eval(EvalArgs),
    /// Draw charts and tables from evaluation reports.
    Plot(PlotArgs),
    /// Run the built-in correctness suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file (`key: type = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds; each goes to `<out>/seed_<n>`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub gamma_train: Option<f64>,
    #[arg(long)]
    pub p_drop: Option<f64>,
    #[arg(long)]
    pub total_timesteps: Option<u64>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directories, or directories holding them.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Comma-separated γ values; defaults depend on the environment.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Vec<f64>,
    /// Comma-separated checkpoint steps; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<u64>,
    #[arg(long, default_value_t = crate::eval::EPISODES_PER_SEED)]
    pub episodes: usize,
    /// Greedy actions instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `report.json` files written by `eval`.
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Plant a fault: none, drop-uncond, biased-advantage.
    #[arg(long, default_value = "none")]
    pub inject: String,
}

fn train_overrides(args: &TrainArgs) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects key=value, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("env", args.env.clone());
    push("seed", args.seed.map(|s| s.to_string()));
    push("gamma_train", args.gamma_train.map(|g| g.to_string()));
    push("p_drop", args.p_drop.map(|p| p.to_string()));
    push("total_timesteps", args.total_timesteps.map(|t| t.to_string()));
    Ok(out)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let base = TrainConfig::load(args.config.as_deref(), &train_overrides(args)?)?;
    let jobs: Vec<(TrainConfig, PathBuf)> = if args.seeds.is_empty() {
        vec![(base, args.out.clone())]
    } else {
        args.seeds
            .iter()
            .map(|&s| {
                let mut cfg = base.clone();
                cfg.seed = s;
                (cfg, args.out.join(format!("seed_{s}")))
            })
            .collect()
    };
    let outcomes: Vec<_> = jobs.par_iter().map(|(cfg, dir)| train(cfg, dir).map(|o| (dir, o))).collect::<Result<_>>()?;
    for (dir, o) in outcomes {
        for w in &o.warnings {
            log::warn!("{w}");
            eprintln!("warning: {w}");
        }
        println!(
            "{}: {} iterations, {} checkpoints",
            dir.display(),
            o.records.len(),
            o.checkpoints.len()
        );
    }
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let runs = discover_runs(&args.runs)?;
    let env = TrainConfig::parse(&std::fs::read_to_string(runs[0].path.join("config.txt"))?)?.env;
    let mut spec = SweepSpec::default_for(&env);
    if !args.gammas.is_empty() {
        spec.gammas = args.gammas.clone();
    }
    spec.checkpoints = args.checkpoints.clone();
    spec.episodes_per_seed = args.episodes;
    spec.deterministic = args.deterministic;
    let reports = evaluate_runs(&runs, &spec, Combine::Interpolate)?;
    let (csv, json) = write_reports(&reports, &args.out)?;
    for r in &reports {
        println!("{} step {} γ={}: {:.1} ± {:.1}", r.env, r.step, r.gamma, r.mean, r.ci95);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(0)
}

fn cmd_plot(args: &PlotArgs) -> Result<i32> {
    let mut reports = Vec::new();
    for p in &args.reports {
        reports.extend(read_reports(p)?);
    }
    for path in write_plots(&reports, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let inject = Injection::parse(&args.inject).ok_or_else(|| {
        Error::Invalid(format!(
            "unknown injection `{}` (known: none, drop-uncond, biased-advantage)",
            args.inject
        ))
    })?;
    let results = run_all(inject)?;
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    Ok(i32::from(failed > 0))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Verify(a) => cmd_verify(a),
    }
}
