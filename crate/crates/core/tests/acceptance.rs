//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Training runs are cached under the test target's scratch directory and
//! reused when their config snapshot and checkpoints are intact; the training
//! time of each run is stored next to it so that budgets are still checked on
//! reruns. Set `ACCEPTANCE_STRICT=1` to exit non-zero when a criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pgg::eval::{evaluate_runs, EvalReport, RunDir, SweepSpec};
use pgg::trainer::{list_checkpoints, train, Combine, TrainConfig};
use pgg::verify::{
    biased_gaps, cancellation, gamma_one_reduction, gaussian_product, gradient_fd, gradient_interpolation,
    zero_mean_advantage, Injection,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CPU_BUDGET_SECS: f64 = 1.5 * 3600.0;

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: &'static str, passed: bool, detail: String) -> Outcome {
    println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs")
}

/// Trains (or reuses) one run per seed; returns the run dirs and the total
/// training seconds.
fn runs_for(name: &str, base: &TrainConfig) -> Result<(Vec<RunDir>, f64), String> {
    let mut dirs = Vec::new();
    let mut seconds = 0.0;
    for &seed in &SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let dir = cache_root().join(name).join(format!("seed_{seed}"));
        let timing = dir.join("train_seconds.txt");
        let labels = cfg.checkpoint_labels();
        let cached = fs::read_to_string(dir.join("config.txt")).ok() == Some(cfg.to_text())
            && list_checkpoints(&dir.join("checkpoints"))
                .map(|c| c.iter().map(|(l, _)| *l).collect::<Vec<_>>() == labels)
                .unwrap_or(false);
        let secs = match fs::read_to_string(&timing).ok().and_then(|s| s.trim().parse::<f64>().ok()) {
            Some(s) if cached => s,
            _ => {
                let _ = fs::remove_dir_all(&dir);
                let start = Instant::now();
                train(&cfg, &dir).map_err(|e| format!("{name} seed {seed}: {e}"))?;
                let s = start.elapsed().as_secs_f64();
                fs::write(&timing, format!("{s}\n")).map_err(|e| e.to_string())?;
                s
            }
        };
        seconds += secs;
        dirs.push(RunDir::open(&dir).map_err(|e| e.to_string())?);
    }
    Ok((dirs, seconds))
}

fn sweep(runs: &[RunDir], env: &str, step: u64, gammas: &[f64]) -> Result<(Vec<EvalReport>, f64), String> {
    let spec = SweepSpec {
        gammas: gammas.to_vec(),
        checkpoints: vec![step],
        ..SweepSpec::default_for(env)
    };
    let start = Instant::now();
    let reports = evaluate_runs(runs, &spec, Combine::Interpolate).map_err(|e| e.to_string())?;
    Ok((reports, start.elapsed().as_secs_f64()))
}

fn mean_at(reports: &[EvalReport], gamma: f64) -> f64 {
    reports
        .iter()
        .find(|r| r.gamma == gamma)
        .map_or(f64::NAN, |r| r.mean)
}

fn table(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| format!("γ={} {:.1}±{:.1}", r.gamma, r.mean, r.ci95))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    match cancellation(100, 1, Injection::None) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            report(
                "1",
                r.passed && secs < 10.0,
                format!("max gap {:.3e} < 1e-10 over 100 MDPs in {secs:.2}s (< 10s)", r.value),
            )
        }
        Err(e) => report("1", false, e.to_string()),
    }
}

fn criterion_2() -> Outcome {
    match zero_mean_advantage(100, 1) {
        Ok(r) => report("2", r.passed, format!("max |E[A]| {:.3e} < 1e-12", r.value)),
        Err(e) => report("2", false, e.to_string()),
    }
}

fn criterion_3() -> Outcome {
    let cfg = TrainConfig::defaults_for("cartpole").expect("cartpole defaults");
    match gamma_one_reduction(&cfg, 3, Injection::None) {
        Ok(r) => report("3", r.passed, r.detail),
        Err(e) => report("3", false, e.to_string()),
    }
}

fn criterion_4() -> Outcome {
    match gaussian_product(1000, 2) {
        Ok(r) => report("4", r.passed, format!("max |Δ| {:.3e} < 1e-10 at 1000 points", r.value)),
        Err(e) => report("4", false, e.to_string()),
    }
}

fn criterion_5() -> Outcome {
    match gradient_fd(50, 3, Injection::None) {
        Ok(r) => report(
            "5",
            r.passed,
            format!("max relative error {:.3e} < 1e-4 (categorical, Gaussian, PPO loss; 50 configs each)", r.value),
        ),
        Err(e) => report("5", false, e.to_string()),
    }
}

fn criterion_6() -> Outcome {
    let mut cfg = TrainConfig::defaults_for("cartpole").expect("cartpole defaults");
    cfg.gamma_train = 1.1;
    let result = runs_for("cartpole_gtrain1.1", &cfg).and_then(|(runs, train_s)| {
        let (reports, eval_s) = sweep(&runs, "cartpole", 200_000, &pgg::eval::DISCRETE_GAMMAS)?;
        Ok((reports, train_s + eval_s))
    });
    match result {
        Ok((reports, secs)) => {
            let (g2, g1) = (mean_at(&reports, 2.0), mean_at(&reports, 1.0));
            report(
                "6",
                g2 >= 490.0 && g2 > g1 && secs <= CPU_BUDGET_SECS,
                format!(
                    "CartPole γ_train=1.1 at 200k: γ=2 mean {g2:.1} (≥ 490, > γ=1 mean {g1:.1}); {:.1} CPU-min; [{}]",
                    secs / 60.0,
                    table(&reports)
                ),
            )
        }
        Err(e) => report("6", false, e),
    }
}

fn dropout_runs(env: &str) -> Result<(Vec<RunDir>, f64), String> {
    let mut cfg = TrainConfig::defaults_for(env).map_err(|e| e.to_string())?;
    cfg.p_drop = 0.1;
    runs_for(&format!("{env}_pdrop0.1"), &cfg)
}

fn criterion_7() -> Outcome {
    let result = dropout_runs("acrobot").and_then(|(runs, train_s)| {
        let (reports, eval_s) = sweep(&runs, "acrobot", 100_000, &pgg::eval::DISCRETE_GAMMAS)?;
        Ok((reports, train_s + eval_s))
    });
    match result {
        Ok((reports, secs)) => {
            let (g20, g1) = (mean_at(&reports, 20.0), mean_at(&reports, 1.0));
            report(
                "7",
                g20 - g1 >= 10.0 && secs <= CPU_BUDGET_SECS,
                format!(
                    "Acrobot p_drop=0.1 at 100k: γ=20 {g20:.1} vs γ=1 {g1:.1} (gain {:.1} ≥ 10); {:.1} CPU-min; [{}]",
                    g20 - g1,
                    secs / 60.0,
                    table(&reports)
                ),
            )
        }
        Err(e) => report("7", false, e),
    }
}

fn criterion_8() -> Outcome {
    let result = dropout_runs("cartpole").and_then(|(runs, _)| {
        let (reports, _) = sweep(&runs, "cartpole", 100_000, &pgg::eval::DISCRETE_GAMMAS)?;
        Ok(reports)
    });
    match result {
        Ok(reports) => {
            let (g20, g1) = (mean_at(&reports, 20.0), mean_at(&reports, 1.0));
            let rising = reports.windows(2).filter(|w| w[1].mean > w[0].mean).count();
            report(
                "8",
                g20 - g1 >= 50.0,
                format!(
                    "CartPole p_drop=0.1 at 100k: γ=20 {g20:.1} vs γ=1 {g1:.1} (gain {:.1} ≥ 50); {rising}/5 adjacent γ pairs rising; [{}]",
                    g20 - g1,
                    table(&reports)
                ),
            )
        }
        Err(e) => report("8", false, e),
    }
}

fn criterion_9() -> Outcome {
    let mut cfg = TrainConfig::defaults_for("pendulum").expect("pendulum defaults");
    cfg.gamma_train = 1.1;
    let interp = gradient_interpolation(20, 5, Some(true), Injection::None);
    let (c_ok, c_detail) = match &interp {
        Ok(r) => (r.passed, format!("(c) interpolation error {:.3e} < 1e-10", r.value)),
        Err(e) => (false, format!("(c) {e}")),
    };
    let result = runs_for("pendulum_gtrain1.1", &cfg).and_then(|(runs, _)| {
        let (reports, _) = sweep(&runs, "pendulum", cfg.total_timesteps, &pgg::eval::CONTINUOUS_GAMMAS)?;
        Ok(reports)
    });
    match result {
        Ok(reports) => {
            let g1 = mean_at(&reports, 1.0);
            let best = reports
                .iter()
                .filter(|r| r.gamma != 1.0)
                .max_by(|a, b| a.mean.total_cmp(&b.mean))
                .expect("sweep has γ ≠ 1");
            let b_ok = best.mean >= g1;
            report(
                "9",
                b_ok && c_ok,
                format!(
                    "(a) 5 Pendulum runs to 1e6 without divergence; (b) best γ={} {:.1} vs γ=1 {g1:.1}; {c_detail}; [{}]",
                    best.gamma,
                    best.mean,
                    table(&reports)
                ),
            )
        }
        Err(e) => report("9", false, format!("(a) {e}; {c_detail}")),
    }
}

fn criterion_10() -> Outcome {
    let bs = [0.01, 0.1, 1.0];
    match biased_gaps(100, 1, &bs) {
        Ok(g) => report(
            "10",
            g[0] < g[1] && g[1] < g[2],
            format!("gaps {:.3e} < {:.3e} < {:.3e} for b = 0.01, 0.1, 1.0", g[0], g[1], g[2]),
        ),
        Err(e) => report("10", false, e.to_string()),
    }
}

fn main() {
    let outcomes = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
    ];
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed} of {} criteria passed", outcomes.len());
    for o in outcomes.iter().filter(|o| !o.passed) {
        println!("failed: {} ({})", o.id, o.detail);
    }
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") && passed < outcomes.len() {
        std::process::exit(1);
    }
}
