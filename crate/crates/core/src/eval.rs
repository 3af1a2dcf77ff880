//! Checkpoint evaluation over a γ sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{make_env, Env};
use crate::error::{Error, Result};
use crate::trainer::checkpoint::file_hash;
use crate::trainer::config::is_discrete_env;
use crate::trainer::{list_checkpoints, policy_step, rng_stream, Checkpoint, Combine};

pub const REPORT_HEADER: &str = "env,step,gamma,mean,std,ci95,n_episodes,n_seeds";
pub const DISCRETE_GAMMAS: [f64; 6] = [1.0, 1.5, 2.0, 5.0, 10.0, 20.0];
pub const CONTINUOUS_GAMMAS: [f64; 8] = [1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3, 1.5];
pub const EPISODES_PER_SEED: usize = 50;
/// Evaluation environments are seeded from here, well away from training seeds.
pub const EVAL_SEED_BASE: u64 = 1_000_003;
const STREAM_EVAL: u64 = 4;
const CI_METHOD: &str = "normal approximation over pooled episodes: 1.96 * sample std / sqrt(n)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub gammas: Vec<f64>,
    /// Checkpoint labels to evaluate; empty means all of them.
    pub checkpoints: Vec<u64>,
    pub episodes_per_seed: usize,
    pub deterministic: bool,
}

impl SweepSpec {
    pub fn default_for(env: &str) -> Self {
        let gammas = if is_discrete_env(env) {
            DISCRETE_GAMMAS.to_vec()
        } else {
            CONTINUOUS_GAMMAS.to_vec()
        };
        Self {
            gammas,
            checkpoints: Vec::new(),
            episodes_per_seed: EPISODES_PER_SEED,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::config("gammas", "at least one value is required"));
        }
        if let Some(g) = self.gammas.iter().find(|g| !g.is_finite()) {
            return Err(Error::config("gammas", format!("{g} is not finite")));
        }
        if self.episodes_per_seed == 0 {
            return Err(Error::config("episodes", "must be positive"));
        }
        Ok(())
    }
}

/// Results for one (checkpoint, γ) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub step: u64,
    pub gamma: f64,
    /// `returns[seed][episode]`.
    pub returns: Vec<Vec<f64>>,
    pub train_seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl EvalReport {
    pub fn new(env: &str, step: u64, gamma: f64, train_seeds: Vec<u64>, returns: Vec<Vec<f64>>) -> Self {
        let pooled: Vec<f64> = returns.iter().flatten().copied().collect();
        let (mean, std, ci95) = pooled_stats(&pooled);
        Self {
            env: env.to_string(),
            step,
            gamma,
            returns,
            train_seeds,
            mean,
            std,
            ci95,
        }
    }

    pub fn n_seeds(&self) -> usize {
        self.returns.len()
    }

    /// Episodes per seed.
    pub fn n_episodes(&self) -> usize {
        self.returns.first().map_or(0, Vec::len)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.env,
            self.step,
            self.gamma,
            self.mean,
            self.std,
            self.ci95,
            self.n_episodes(),
            self.n_seeds()
        )
    }
}

/// Mean, sample std and 95% CI half-width of a pooled sample.
pub fn pooled_stats(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    (mean, std, 1.96 * std / n.sqrt())
}

/// Runs `episodes` stochastic (or greedy) episodes of a checkpoint's guided
/// policy at `gamma`. Episode `i` uses environment seed `env_seed + i`; the
/// action stream depends only on `action_seed`, so a γ sweep shares its
/// randomness across γ values.
pub fn run_episodes(
    ck: &Checkpoint,
    gamma: f64,
    episodes: usize,
    env_seed: u64,
    action_seed: u64,
    deterministic: bool,
    combine: Combine,
) -> Result<Vec<f64>> {
    let mut envs: Vec<Box<dyn Env>> = (0..episodes)
        .map(|_| make_env(&ck.config.env))
        .collect::<Result<_>>()?;
    let mut obs: Vec<Vec<f64>> = envs
        .iter_mut()
        .enumerate()
        .map(|(i, e)| e.reset(Some(env_seed + i as u64)))
        .collect();
    let mut returns = vec![0.0; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    let mut rng = rng_stream(action_seed, STREAM_EVAL);
    while !active.is_empty() {
        let batch: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| match &ck.obs_norm {
                Some(n) => n.normalize(&obs[i]),
                None => obs[i].clone(),
            })
            .collect();
        let step = policy_step(&ck.model, &batch, gamma, combine, deterministic, &mut rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, action) in active.iter().zip(&step.actions) {
            let s = envs[i].step(action)?;
            returns[i] += s.reward;
            if !s.done() {
                obs[i] = s.obs;
                still.push(i);
            }
        }
        active = still;
    }
    Ok(returns)
}

/// A training run on disk: `config.txt`, `metrics.csv`, `checkpoints/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub checkpoints: Vec<(u64, PathBuf)>,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            checkpoints: list_checkpoints(&path.join("checkpoints"))?,
        })
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|(s, _)| *s).collect()
    }

    pub fn checkpoint_path(&self, step: u64) -> Result<&Path> {
        self.checkpoints
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, p)| p.as_path())
            .ok_or_else(|| {
                let available: Vec<String> = self.steps().iter().map(u64::to_string).collect();
                Error::Invalid(format!(
                    "no checkpoint for step {step} in {} (available: {})",
                    self.path.display(),
                    if available.is_empty() { "none".into() } else { available.join(", ") }
                ))
            })
    }
}

/// Expands `paths` into run directories. A path holding `config.txt` is a
/// run; otherwise its immediate subdirectories that hold one are.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<RunDir>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("config.txt").is_file() {
            out.push(RunDir::open(p)?);
            continue;
        }
        if !p.is_dir() {
            return Err(Error::Invalid(format!("{} is not a directory", p.display())));
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(p)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        subs.sort();
        for s in subs {
            if s.join("config.txt").is_file() {
                out.push(RunDir::open(&s)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no run directories found".into()));
    }
    Ok(out)
}

/// Evaluates every (checkpoint, γ) cell across `checkpoints`, where
/// `checkpoints[k]` lists the per-seed checkpoints for one step. Reports are
/// sorted by (step, γ).
pub fn evaluate(cells: &[(u64, Vec<Checkpoint>)], spec: &SweepSpec, combine: Combine) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.gammas.len()).flat_map(move |g| (0..cells[c].1.len()).map(move |s| (c, g, s))))
        .collect();
    let results: Vec<((usize, usize, usize), Vec<f64>)> = jobs
        .par_iter()
        .map(|&(c, g, s)| {
            let ck = &cells[c].1[s];
            let seed = ck.config.seed;
            let env_seed = EVAL_SEED_BASE + seed * 10_000;
            let returns = run_episodes(
                ck,
                spec.gammas[g],
                spec.episodes_per_seed,
                env_seed,
                env_seed,
                spec.deterministic,
                combine,
            )?;
            Ok(((c, g, s), returns))
        })
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<(usize, usize), Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for ((c, g, s), r) in results {
        grouped.entry((c, g)).or_default().push((s, r));
    }
    let mut reports = Vec::new();
    for ((c, g), mut per_seed) in grouped {
        per_seed.sort_by_key(|(s, _)| *s);
        let (step, cks) = &cells[c];
        let seeds = cks.iter().map(|ck| ck.config.seed).collect();
        let returns = per_seed.into_iter().map(|(_, r)| r).collect();
        reports.push(EvalReport::new(&cks[0].config.env, *step, spec.gammas[g], seeds, returns));
    }
    reports.sort_by(|a, b| a.step.cmp(&b.step).then(a.gamma.total_cmp(&b.gamma)));
    Ok(reports)
}

/// Loads the requested steps from each run, evaluates them, and checks that
/// no checkpoint file changed in the process.
pub fn evaluate_runs(runs: &[RunDir], spec: &SweepSpec, combine: Combine) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    let steps = if spec.checkpoints.is_empty() {
        runs[0].steps()
    } else {
        spec.checkpoints.clone()
    };
    if steps.is_empty() {
        return Err(Error::Invalid(format!("no checkpoints in {}", runs[0].path.display())));
    }
    let mut cells = Vec::new();
    let mut hashes = Vec::new();
    for &step in &steps {
        let mut cks = Vec::new();
        for run in runs {
            let path = run.checkpoint_path(step)?;
            hashes.push((path.to_path_buf(), file_hash(path)?));
            cks.push(Checkpoint::load(path)?);
        }
        let env = &cks[0].config.env;
        if let Some(other) = cks.iter().find(|c| &c.config.env != env) {
            return Err(Error::Invalid(format!(
                "runs mix environments `{env}` and `{}`",
                other.config.env
            )));
        }
        cells.push((step, cks));
    }
    let reports = evaluate(&cells, spec, combine)?;
    for (path, before) in hashes {
        if file_hash(&path)? != before {
            return Err(Error::Invalid(format!("checkpoint {} changed during evaluation", path.display())));
        }
    }
    Ok(reports)
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    ci_method: String,
    reports: Vec<EvalReport>,
}

pub fn reports_json(reports: &[EvalReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportFile {
        ci_method: CI_METHOD.into(),
        reports: reports.to_vec(),
    })?)
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_reports(reports: &[EvalReport], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    fs::write(&csv, reports_csv(reports))?;
    fs::write(&json, reports_json(reports)?)?;
    Ok((csv, json))
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let file: ReportFile = serde_json::from_slice(&fs::read(path)?)?;
    Ok(file.reports)
}
