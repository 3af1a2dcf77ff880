//! Self-checks behind the `verify` subcommand and the acceptance target.
//!
//! Each suite returns its worst observed error next to the threshold it is
//! judged against. [`Injection`] plants a known fault so that the suites can
//! be shown to catch it.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor};
use crate::distributions::{
    categorical_log_prob_var, gaussian_log_prob_var, gaussian_product_check, guided_logits_var, GuidedCategorical,
    GuidedGaussian,
};
use crate::error::Result;
use crate::nets::{ActorCritic, Head};
use crate::tabular::{
    biased_advantages, exact_advantages, expected_advantage_zero, z_term_cancellation_with, TabularGuidedPolicy,
    TabularMdp,
};
use crate::trainer::{gradient_interpolation_error, ppo_loss, vanilla::VanillaPpo, BatchActions, Combine, Minibatch};
use crate::trainer::{TrainConfig, Trainer};

pub const CANCELLATION_TOL: f64 = 1e-10;
pub const ZERO_MEAN_TOL: f64 = 1e-12;
pub const GAUSSIAN_TOL: f64 = 1e-10;
pub const FD_TOL: f64 = 1e-4;
pub const INTERPOLATION_TOL: f64 = 1e-10;
pub const DISCOUNT: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Injection {
    #[default]
    None,
    /// Drops the `(1-γ)` unconditional branch from the guided head.
    DropUnconditional,
    /// Adds a state-dependent bias of size 1 to the oracle's advantages.
    BiasedAdvantage,
}

impl Injection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Injection::None),
            "drop-uncond" => Some(Injection::DropUnconditional),
            "biased-advantage" => Some(Injection::BiasedAdvantage),
            _ => None,
        }
    }

    fn combine(self) -> Combine {
        match self {
            Injection::DropUnconditional => Combine::ConditionalOnly,
            _ => Combine::Interpolate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error observed (or 0/1 for exact comparisons).
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl SuiteResult {
    fn below(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: value < threshold,
            value,
            threshold,
            detail,
        }
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (threshold {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

/// Random tabular instances with `|S| ≤ 8`, `|A| ≤ 4` and `γ ∈ [0, 2]`.
pub fn tabular_instances(count: usize, seed: u64) -> Result<Vec<(TabularMdp, TabularGuidedPolicy)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = rng.random_range(1..=8);
            let a = rng.random_range(2..=4);
            let gamma = rng.random_range(0.0..=2.0);
            let mdp = TabularMdp::random(&mut rng, s, a, DISCOUNT)?;
            let policy = TabularGuidedPolicy::random(&mut rng, s, a, gamma);
            Ok((mdp, policy))
        })
        .collect()
}

/// A fixed state-dependent bias direction in `[-1, 1]`.
pub fn bias_direction(num_states: usize) -> Vec<f64> {
    (0..num_states).map(|s| ((s as f64 + 1.0) * 1.7).sin()).collect()
}

/// Max-norm gap between the gradient with and without the `∇log Z` term.
pub fn cancellation(count: usize, seed: u64, inject: Injection) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for (mdp, policy) in tabular_instances(count, seed)? {
        let adv = match inject {
            Injection::BiasedAdvantage => biased_advantages(&mdp, &policy, &bias_direction(mdp.num_states), 1.0)?,
            _ => exact_advantages(&mdp, &policy)?,
        };
        worst = worst.max(z_term_cancellation_with(&mdp, &policy, &adv)?.gap);
    }
    Ok(SuiteResult::below(
        "z-cancellation",
        worst,
        CANCELLATION_TOL,
        format!("max gap over {count} random MDPs"),
    ))
}

/// `|E_{a∼π̂}[A(s,a)]|` per state on the same instances.
pub fn zero_mean_advantage(count: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for (mdp, policy) in tabular_instances(count, seed)? {
        for e in expected_advantage_zero(&mdp, &policy)? {
            worst = worst.max(e.abs());
        }
    }
    Ok(SuiteResult::below(
        "zero-mean-advantage",
        worst,
        ZERO_MEAN_TOL,
        format!("max |E[A]| over the states of {count} MDPs"),
    ))
}

/// Cancellation gaps for each bias magnitude; the gap should grow with it.
pub fn biased_gaps(count: usize, seed: u64, magnitudes: &[f64]) -> Result<Vec<f64>> {
    let instances = tabular_instances(count, seed)?;
    magnitudes
        .iter()
        .map(|&b| {
            let mut worst: f64 = 0.0;
            for (mdp, policy) in &instances {
                let adv = biased_advantages(mdp, policy, &bias_direction(mdp.num_states), b)?;
                worst = worst.max(z_term_cancellation_with(mdp, policy, &adv)?.gap);
            }
            Ok(worst)
        })
        .collect()
}

/// Powered product of two shared-covariance Gaussians against the Gaussian
/// at the interpolated mean.
pub fn gaussian_product(points: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let d = rng.random_range(1..=4);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let mc = draw(-1.0, 1.0);
        let mu = draw(-1.0, 1.0);
        let ls = draw(-1.0, 0.5);
        let x = draw(-2.0, 2.0);
        let gamma = rng.random_range(0.0..=2.0);
        let (lhs, rhs) = gaussian_product_check(&mc, &mu, &ls, gamma, &x)?;
        worst = worst.max((lhs - rhs).abs());
        let g = GuidedGaussian::new(mc, mu, ls, gamma)?;
        worst = worst.max((g.log_prob(&x)?.exp() - rhs).abs());
    }
    Ok(SuiteResult::below(
        "gaussian-product",
        worst,
        GAUSSIAN_TOL,
        format!("max |Δ density| at {points} random points"),
    ))
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().chain(analytic).map(|x| x.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-8)
}

fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn categorical_fd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(2..=5);
    let mut draw = || -> Vec<f64> { (0..k).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let (c, u) = (draw(), draw());
    let gamma = rng.random_range(-0.5..3.0);
    let action = rng.random_range(0..k);
    let tape = Tape::<f64>::new();
    let cv = tape.param(Tensor::new(vec![1, k], c.clone())?)?;
    let uv = tape.param(Tensor::new(vec![1, k], u.clone())?)?;
    let g = guided_logits_var(&tape, cv, uv, gamma)?;
    let lp = categorical_log_prob_var(&tape, g, &[action])?;
    let loss = tape.sum(lp)?;
    let grads = tape.backward(loss)?;
    let mut analytic = grads.wrt(cv).into_data();
    analytic.extend(grads.wrt(uv).into_data());
    let x: Vec<f64> = c.iter().chain(&u).copied().collect();
    let numeric = central_difference(&x, 1e-6, |x| {
        GuidedCategorical::new(x[..k].to_vec(), x[k..].to_vec(), gamma)?.log_prob(action)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

fn gaussian_fd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(1..=3);
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
    let (mc, mu, ls, a) = (draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 0.5), draw(-2.0, 2.0));
    let gamma = rng.random_range(-0.5..3.0);
    let tape = Tape::<f64>::new();
    let cv = tape.param(Tensor::new(vec![1, d], mc.clone())?)?;
    let uv = tape.param(Tensor::new(vec![1, d], mu.clone())?)?;
    let lv = tape.param(Tensor::new(vec![d], ls.clone())?)?;
    let m = guided_logits_var(&tape, cv, uv, gamma)?;
    let lp = gaussian_log_prob_var(&tape, m, lv, &Tensor::new(vec![1, d], a.clone())?)?;
    let loss = tape.sum(lp)?;
    let grads = tape.backward(loss)?;
    let mut analytic = grads.wrt(cv).into_data();
    analytic.extend(grads.wrt(uv).into_data());
    analytic.extend(grads.wrt(lv).into_data());
    let x: Vec<f64> = mc.iter().chain(&mu).chain(&ls).copied().collect();
    let numeric = central_difference(&x, 1e-6, |x| {
        GuidedGaussian::new(x[..d].to_vec(), x[d..2 * d].to_vec(), x[2 * d..].to_vec(), gamma)?.log_prob(&a)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// A small model with perturbed parameters and a minibatch whose ratios sit
/// inside the clip range.
pub fn random_loss_setup(rng: &mut ChaCha8Rng, continuous: bool) -> Result<(ActorCritic<f64>, Minibatch, TrainConfig, f64)> {
    let (env, head) = if continuous {
        ("pendulum", Head::Continuous(rng.random_range(1..=2)))
    } else {
        ("cartpole", Head::Discrete(rng.random_range(2..=3)))
    };
    let obs_dim = rng.random_range(2..=4);
    let mut model = ActorCritic::new(obs_dim, head, 8, rng)?;
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let gamma = rng.random_range(0.0..=2.0);
    let n = 12;
    let obs: Vec<f64> = (0..n * obs_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let actions = match head {
        Head::Discrete(k) => BatchActions::Discrete((0..n).map(|_| rng.random_range(0..k)).collect()),
        Head::Continuous(d) => BatchActions::Continuous(Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?),
    };
    let mut cfg = TrainConfig::defaults_for(env)?;
    cfg.ent_coef = 0.01;
    let mut mb = Minibatch {
        obs: Tensor::new(vec![n, obs_dim], obs)?,
        actions,
        old_log_probs: vec![0.0; n],
        advantages: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        returns: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        old_values: vec![0.0; n],
        drop_mask: Some((0..n).map(|_| rng.random_bool(0.25)).collect()),
    };
    // place ratios and value deltas strictly inside the clip range
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let out = ppo_loss(&tape, &bound, head, &mb, &cfg, gamma, Combine::Interpolate)?;
    let lp = tape.value(out.new_log_probs).into_data();
    let values = bound.critic(&tape, tape.constant(mb.obs.clone())?)?;
    let values = tape.value(values).into_data();
    for i in 0..n {
        mb.old_log_probs[i] = lp[i] + rng.random_range(-0.1..0.1);
        mb.old_values[i] = values[i] + rng.random_range(-0.1..0.1);
    }
    Ok((model, mb, cfg, gamma))
}

/// Relative max-norm error between the autodiff gradient of the PPO loss
/// and central differences, over every model parameter.
pub fn relative_gradient_error(model: &ActorCritic<f64>, mb: &Minibatch, cfg: &TrainConfig, gamma: f64) -> Result<f64> {
    loss_fd(model, mb, cfg, gamma, Combine::Interpolate)
}

fn loss_fd(model: &ActorCritic<f64>, mb: &Minibatch, cfg: &TrainConfig, gamma: f64, combine: Combine) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let out = ppo_loss(&tape, &bound, model.head, mb, cfg, gamma, combine)?;
    let grads = tape.backward(out.loss)?;
    let analytic: Vec<f64> = bound.vars().into_iter().flat_map(|v| grads.wrt(v).into_data()).collect();
    let flat: Vec<f64> = model.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    let numeric = central_difference(&flat, 1e-6, |x| {
        let mut m = model.clone();
        let mut offset = 0;
        for p in m.params_mut() {
            let len = p.value.len();
            p.value.data_mut().copy_from_slice(&x[offset..offset + len]);
            offset += len;
        }
        let tape = Tape::new();
        let bound = m.bind(&tape)?;
        let out = ppo_loss(&tape, &bound, m.head, mb, cfg, gamma, combine)?;
        Ok(tape.item(out.loss))
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// Autodiff against central differences for `log π̂` (both families) and the
/// full PPO loss, `configs` random draws each.
pub fn gradient_fd(configs: usize, seed: u64, inject: Injection) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        worst = worst.max(categorical_fd(&mut rng)?);
        worst = worst.max(gaussian_fd(&mut rng)?);
        let (model, mb, cfg, gamma) = random_loss_setup(&mut rng, i % 2 == 1)?;
        worst = worst.max(loss_fd(&model, &mb, &cfg, gamma, inject.combine())?);
    }
    Ok(SuiteResult::below(
        "gradient-fd",
        worst,
        FD_TOL,
        format!("max relative error over {configs} configurations per check"),
    ))
}

/// Guided trainer at `γ = 1, p_drop = 0` against plain PPO, parameters
/// compared bit for bit after every iteration.
pub fn gamma_one_reduction(config: &TrainConfig, iterations: usize, inject: Injection) -> Result<SuiteResult> {
    let mut cfg = config.clone();
    cfg.gamma_train = 1.0;
    cfg.p_drop = 0.0;
    let mut guided = Trainer::new(cfg.clone())?;
    guided.combine = inject.combine();
    let mut plain = VanillaPpo::new(cfg)?;
    let mut mismatched = 0usize;
    let mut first_bad = None;
    for it in 1..=iterations {
        guided.iterate()?;
        plain.iterate()?;
        let g = guided.model.params();
        let bad = g
            .iter()
            .zip(plain.params())
            .filter(|(a, b)| {
                a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .count();
        if bad > 0 && first_bad.is_none() {
            first_bad = Some(it);
        }
        mismatched += bad;
    }
    let detail = match first_bad {
        None => format!("{iterations} iterations on {}, all parameters bit-identical", config.env),
        Some(it) => format!("parameters differ from iteration {it}"),
    };
    Ok(SuiteResult {
        name: "gamma-one-reduction",
        passed: mismatched == 0,
        value: mismatched as f64,
        threshold: 1.0,
        detail,
    })
}

/// The unconditional head gradient equals `(1-γ)/γ` times the row-summed
/// conditional head gradient, for γ ∈ {0.5, 1.5}.
pub fn gradient_interpolation(configs: usize, seed: u64, continuous: Option<bool>, inject: Injection) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let cont = continuous.unwrap_or(i % 2 == 1);
        let (model, mb, cfg, _) = random_loss_setup(&mut rng, cont)?;
        for gamma in [0.5, 1.5] {
            worst = worst.max(gradient_interpolation_error(&model, &mb, &cfg, gamma, inject.combine())?);
        }
    }
    let which = match continuous {
        Some(true) => "continuous head",
        Some(false) => "discrete head",
        None => "both heads",
    };
    Ok(SuiteResult::below(
        "gradient-interpolation",
        worst,
        INTERPOLATION_TOL,
        format!("max relative error, {which}, {configs} configurations"),
    ))
}

/// All suites with their default sizes.
pub fn run_all(inject: Injection) -> Result<Vec<SuiteResult>> {
    let cartpole = TrainConfig::defaults_for("cartpole")?;
    Ok(vec![
        cancellation(100, 1, inject)?,
        zero_mean_advantage(100, 1)?,
        gaussian_product(1000, 2)?,
        gradient_fd(50, 3, inject)?,
        gamma_one_reduction(&cartpole, 3, inject)?,
        gradient_interpolation(20, 4, None, inject)?,
    ])
}
