//! Exact small-MDP computations for the guided policy gradient.
//!
//! The guided policy is tabular: `π̂(·|s) = softmax(γ L[s] + (1-γ) U)` where
//! `L` is a conditional logit table and `U` a single unconditional logit row.
//! Gradients are taken with respect to the flat parameter vector
//! `[L (row-major, |S|·|A|), U (|A|)]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, softmax};

/// Most state-action pairs the exact enumeration is meant for.
pub const MAX_PAIRS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `P(s'|s,a)` at `[(s * A + a) * S + s']`.
    pub transitions: Vec<f64>,
    /// `R(s,a)` at `[s * A + a]`.
    pub rewards: Vec<f64>,
    pub discount: f64,
    pub initial: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let (s, a) = (num_states, num_actions);
        if s == 0 || a == 0 || s * a > MAX_PAIRS {
            return Err(Error::Invalid(format!(
                "tabular mdp: {s} states × {a} actions outside the exact regime (1..={MAX_PAIRS} pairs)"
            )));
        }
        if transitions.len() != s * a * s || rewards.len() != s * a || initial.len() != s {
            return Err(Error::Invalid("tabular mdp: table sizes do not match |S| and |A|".into()));
        }
        for (i, row) in transitions.chunks(s).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "tabular mdp: P(·|s={}, a={}) sums to {total}",
                    i / a,
                    i % a
                )));
            }
        }
        let total: f64 = initial.iter().sum();
        if initial.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("tabular mdp: initial distribution sums to {total}")));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::Invalid(format!("tabular mdp: discount {discount} outside [0, 1]")));
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            rewards,
            discount,
            initial,
        })
    }

    /// Random instance: transition rows and the initial distribution are
    /// normalised uniform draws, rewards uniform in `[-1, 1]`.
    pub fn random(rng: &mut ChaCha8Rng, num_states: usize, num_actions: usize, discount: f64) -> Result<Self> {
        let mut simplex = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect::<Vec<f64>>()
        };
        let transitions = (0..num_states * num_actions).flat_map(|_| simplex(num_states)).collect();
        let initial = simplex(num_states);
        let rewards = (0..num_states * num_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(num_states, num_actions, transitions, rewards, discount, initial)
    }

    pub fn p(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let i = (s * self.num_actions + a) * n;
        &self.transitions[i..i + n]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularGuidedPolicy {
    pub num_states: usize,
    pub num_actions: usize,
    /// `L[s, a]`, row-major.
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
    pub gamma: f64,
}

impl TabularGuidedPolicy {
    pub fn new(num_states: usize, num_actions: usize, cond: Vec<f64>, uncond: Vec<f64>, gamma: f64) -> Result<Self> {
        if cond.len() != num_states * num_actions || uncond.len() != num_actions {
            return Err(Error::Invalid("tabular policy: logit table sizes do not match".into()));
        }
        if !gamma.is_finite() || cond.iter().chain(&uncond).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("tabular policy: non-finite entry".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            cond,
            uncond,
            gamma,
        })
    }

    /// Logits drawn uniformly from `[-2, 2]`.
    pub fn random(rng: &mut ChaCha8Rng, num_states: usize, num_actions: usize, gamma: f64) -> Self {
        let cond = (0..num_states * num_actions).map(|_| rng.random_range(-2.0..2.0)).collect();
        let uncond = (0..num_actions).map(|_| rng.random_range(-2.0..2.0)).collect();
        Self {
            num_states,
            num_actions,
            cond,
            uncond,
            gamma,
        }
    }

    pub fn num_params(&self) -> usize {
        self.cond.len() + self.uncond.len()
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }

    fn cond_row(&self, s: usize) -> &[f64] {
        &self.cond[s * self.num_actions..(s + 1) * self.num_actions]
    }

    fn guided_logits(&self, s: usize) -> Vec<f64> {
        let g = self.gamma;
        self.cond_row(s).iter().zip(&self.uncond).map(|(c, u)| g * c + (1.0 - g) * u).collect()
    }

    /// `π̂(·|s)`.
    pub fn probs(&self, s: usize) -> Vec<f64> {
        softmax(&self.guided_logits(s))
    }

    pub fn cond_probs(&self, s: usize) -> Vec<f64> {
        softmax(self.cond_row(s))
    }

    pub fn uncond_probs(&self) -> Vec<f64> {
        softmax(&self.uncond)
    }

    /// `log Z(s) = log Σ_a π_u(a)^(1-γ) π_c(a|s)^γ`.
    pub fn log_z(&self, s: usize) -> f64 {
        let g = self.gamma;
        let lc = crate::scalar::log_softmax(self.cond_row(s));
        let lu = crate::scalar::log_softmax(&self.uncond);
        let terms: Vec<f64> = lc.iter().zip(&lu).map(|(c, u)| g * c + (1.0 - g) * u).collect();
        log_sum_exp(&terms)
    }

    /// `γ ∇log π_c(a|s) + (1-γ) ∇log π_u(a)` as a flat parameter vector.
    pub fn interpolated_score(&self, s: usize, a: usize) -> Vec<f64> {
        let n_a = self.num_actions;
        let g = self.gamma;
        let mut out = vec![0.0; self.num_params()];
        let pc = self.cond_probs(s);
        let pu = self.uncond_probs();
        let u0 = self.cond.len();
        for b in 0..n_a {
            let hit = if a == b { 1.0 } else { 0.0 };
            out[s * n_a + b] = g * (hit - pc[b]);
            out[u0 + b] = (1.0 - g) * (hit - pu[b]);
        }
        out
    }

    /// `∇log Z(s) = E_{a∼π̂}[γ ∇log π_c + (1-γ) ∇log π_u]`.
    pub fn grad_log_z(&self, s: usize) -> Vec<f64> {
        let probs = self.probs(s);
        let mut out = vec![0.0; self.num_params()];
        for (a, p) in probs.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.interpolated_score(s, a)) {
                *o += p * x;
            }
        }
        out
    }

    /// Same policy with the parameter vector replaced.
    pub fn with_params(&self, theta: &[f64]) -> Self {
        let (c, u) = theta.split_at(self.cond.len());
        Self {
            cond: c.to_vec(),
            uncond: u.to_vec(),
            ..self.clone()
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.cond.iter().chain(&self.uncond).copied().collect()
    }
}

fn check_pair(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<()> {
    if mdp.num_states != policy.num_states || mdp.num_actions != policy.num_actions {
        return Err(Error::Invalid(format!(
            "policy is {}×{} but mdp is {}×{}",
            policy.num_states, policy.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    Ok(())
}

/// State-to-state transition matrix under `π̂`.
fn policy_transition(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> DMatrix<f64> {
    let n = mdp.num_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for (a, pa) in policy.probs(s).into_iter().enumerate() {
            for (s2, q) in mdp.p(s, a).iter().enumerate() {
                p[(s, s2)] += pa * q;
            }
        }
    }
    p
}

/// Solves `(I - δ M) x = b`; pivots below `1e-12` count as singular.
fn solve_resolvent(m: &DMatrix<f64>, discount: f64, b: DVector<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    let a = DMatrix::identity(n, n) - m * discount;
    let lu = a.lu();
    let u = lu.u();
    if (0..n).any(|i| u[(i, i)].abs() < 1e-12) {
        return Err(Error::Singular);
    }
    lu.solve(&b).ok_or(Error::Singular)
}

/// Exact `Q[s*A + a]` and `V[s]` of the guided policy.
pub fn exact_q_v(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(mdp, policy)?;
    let (n_s, n_a) = (mdp.num_states, mdp.num_actions);
    let p = policy_transition(mdp, policy);
    let r_pi = DVector::from_fn(n_s, |s, _| {
        policy.probs(s).iter().enumerate().map(|(a, pa)| pa * mdp.r(s, a)).sum()
    });
    let v = solve_resolvent(&p, mdp.discount, r_pi)?;
    let mut q = vec![0.0; n_s * n_a];
    for s in 0..n_s {
        for a in 0..n_a {
            let next: f64 = mdp.p(s, a).iter().zip(v.iter()).map(|(pp, vv)| pp * vv).sum();
            q[s * n_a + a] = mdp.r(s, a) + mdp.discount * next;
        }
    }
    Ok((q, v.as_slice().to_vec()))
}

/// `A = Q - V` under `π̂`.
pub fn exact_advantages(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<Vec<f64>> {
    let (q, v) = exact_q_v(mdp, policy)?;
    let n_a = mdp.num_actions;
    Ok(q.iter().enumerate().map(|(i, x)| x - v[i / n_a]).collect())
}

/// Normalised discounted occupancy `d ∝ μ0ᵀ (I - δ P_π̂)⁻¹`.
pub fn occupancy(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<Vec<f64>> {
    check_pair(mdp, policy)?;
    let p = policy_transition(mdp, policy);
    let d = solve_resolvent(&p.transpose(), mdp.discount, DVector::from_vec(mdp.initial.clone()))?;
    let total = d.sum();
    Ok(d.iter().map(|x| x / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cancellation {
    /// `E_{d, π̂}[A (γ ∇log π_c + (1-γ) ∇log π_u - ∇log Z)]`
    pub full_grad: Vec<f64>,
    /// The same expectation without the `∇log Z` term.
    pub simplified_grad: Vec<f64>,
    /// Max-norm of the difference.
    pub gap: f64,
}

/// Full versus simplified guided gradient with exact advantages.
pub fn z_term_cancellation(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<Cancellation> {
    let adv = exact_advantages(mdp, policy)?;
    z_term_cancellation_with(mdp, policy, &adv)
}

/// As [`z_term_cancellation`] with caller-supplied advantages `A[s*A + a]`.
pub fn z_term_cancellation_with(mdp: &TabularMdp, policy: &TabularGuidedPolicy, adv: &[f64]) -> Result<Cancellation> {
    let d = occupancy(mdp, policy)?;
    let n_a = mdp.num_actions;
    if adv.len() != mdp.num_states * n_a {
        return Err(Error::Invalid("advantage table size does not match the mdp".into()));
    }
    let k = policy.num_params();
    let mut full_grad = vec![0.0; k];
    let mut simplified_grad = vec![0.0; k];
    for (s, ds) in d.iter().enumerate() {
        let probs = policy.probs(s);
        let glz = policy.grad_log_z(s);
        for (a, pa) in probs.iter().enumerate() {
            let w = ds * pa * adv[s * n_a + a];
            let score = policy.interpolated_score(s, a);
            for i in 0..k {
                simplified_grad[i] += w * score[i];
                full_grad[i] += w * (score[i] - glz[i]);
            }
        }
    }
    let gap = full_grad
        .iter()
        .zip(&simplified_grad)
        .map(|(f, s)| (f - s).abs())
        .fold(0.0, f64::max);
    Ok(Cancellation {
        full_grad,
        simplified_grad,
        gap,
    })
}

/// Exact advantages shifted by `magnitude · direction[s]` in every action of `s`.
pub fn biased_advantages(
    mdp: &TabularMdp,
    policy: &TabularGuidedPolicy,
    direction: &[f64],
    magnitude: f64,
) -> Result<Vec<f64>> {
    if direction.len() != mdp.num_states {
        return Err(Error::Invalid("bias direction must have one entry per state".into()));
    }
    let n_a = mdp.num_actions;
    let mut adv = exact_advantages(mdp, policy)?;
    for (i, x) in adv.iter_mut().enumerate() {
        *x += magnitude * direction[i / n_a];
    }
    Ok(adv)
}

/// `Σ_a π̂(a|s) A(s,a)` per state, with `A` computed under `π̂`.
pub fn expected_advantage_zero(mdp: &TabularMdp, policy: &TabularGuidedPolicy) -> Result<Vec<f64>> {
    expected_advantage_under(mdp, policy, policy)
}

/// Advantages of `adv_policy` averaged over the actions of `weight_policy`.
pub fn expected_advantage_under(
    mdp: &TabularMdp,
    adv_policy: &TabularGuidedPolicy,
    weight_policy: &TabularGuidedPolicy,
) -> Result<Vec<f64>> {
    check_pair(mdp, weight_policy)?;
    let adv = exact_advantages(mdp, adv_policy)?;
    let n_a = mdp.num_actions;
    Ok((0..mdp.num_states)
        .map(|s| {
            weight_policy
                .probs(s)
                .iter()
                .zip(&adv[s * n_a..(s + 1) * n_a])
                .map(|(p, a)| p * a)
                .sum()
        })
        .collect())
}

/// Discounted returns from `start` truncated at `horizon`, one per episode.
pub fn monte_carlo_returns(
    mdp: &TabularMdp,
    policy: &TabularGuidedPolicy,
    start: usize,
    episodes: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let probs: Vec<Vec<f64>> = (0..mdp.num_states).map(|s| policy.probs(s)).collect();
    (0..episodes)
        .map(|_| {
            let mut s = start;
            let mut total = 0.0;
            let mut weight = 1.0;
            for _ in 0..horizon {
                let a = crate::distributions::sample_index(&probs[s], rng);
                total += weight * mdp.r(s, a);
                weight *= mdp.discount;
                s = crate::distributions::sample_index(mdp.p(s, a), rng);
            }
            total
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single_state(rewards: Vec<f64>, discount: f64) -> TabularMdp {
        let n_a = rewards.len();
        TabularMdp::new(1, n_a, vec![1.0; n_a], rewards, discount, vec![1.0]).unwrap()
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mdp = TabularMdp::random(&mut rng, 3, 2, 0.9).unwrap();
        mdp.rewards.iter_mut().for_each(|r| *r = 0.0);
        let pi = TabularGuidedPolicy::random(&mut rng, 3, 2, 1.4);
        let (q, v) = exact_q_v(&mdp, &pi).unwrap();
        assert!(q.iter().chain(&v).all(|&x| x == 0.0));
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = single_state(vec![1.0, 1.0], 0.9);
        let pi = TabularGuidedPolicy::new(1, 2, vec![0.3, -0.2], vec![0.0, 1.0], 1.7).unwrap();
        let (q, v) = exact_q_v(&mdp, &pi).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12, "{v:?}");
        assert!(q.iter().all(|x| (x - 10.0).abs() < 1e-12));
    }

    #[test]
    fn undiscounted_recurrent_chain_is_singular() {
        let mdp = single_state(vec![1.0, 0.0], 1.0);
        let pi = TabularGuidedPolicy::new(1, 2, vec![0.0; 2], vec![0.0; 2], 1.0).unwrap();
        assert!(matches!(exact_q_v(&mdp, &pi), Err(Error::Singular)));
    }

    #[test]
    fn hand_example_q_one_zero() {
        // one state, Q = R = [1, 0], π̂ = [0.7, 0.3]
        let mdp = single_state(vec![1.0, 0.0], 0.0);
        let pi = TabularGuidedPolicy::new(1, 2, vec![0.7f64.ln(), 0.3f64.ln()], vec![0.0; 2], 1.0).unwrap();
        let (q, v) = exact_q_v(&mdp, &pi).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
        assert!((v[0] - 0.7).abs() < 1e-15);
        let e = expected_advantage_zero(&mdp, &pi).unwrap();
        assert!(e[0].abs() < 1e-15);
    }

    #[test]
    fn advantages_weighted_by_another_policy_do_not_vanish() {
        // A = [0.3, -0.7] under π̂ = [0.7, 0.3]; uniform weights give -0.2
        let mdp = single_state(vec![1.0, 0.0], 0.0);
        let guided = TabularGuidedPolicy::new(1, 2, vec![0.7f64.ln(), 0.3f64.ln()], vec![0.0; 2], 1.0).unwrap();
        let uniform = TabularGuidedPolicy::new(1, 2, vec![0.0; 2], vec![0.0; 2], 1.0).unwrap();
        let e = expected_advantage_under(&mdp, &guided, &uniform).unwrap();
        assert!((e[0] + 0.2).abs() < 1e-15, "{e:?}");
    }

    #[test]
    fn expected_advantage_vanishes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mdp = TabularMdp::random(&mut rng, 5, 3, 0.95).unwrap();
            let gamma = rng.random_range(0.0..2.0);
            let pi = TabularGuidedPolicy::random(&mut rng, 5, 3, gamma);
            for e in expected_advantage_zero(&mdp, &pi).unwrap() {
                assert!(e.abs() < 1e-12, "{e}");
            }
        }
    }

    #[test]
    fn guided_probs_follow_power_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = TabularGuidedPolicy::random(&mut rng, 2, 4, 1.6);
        for s in 0..2 {
            let pc = pi.cond_probs(s);
            let pu = pi.uncond_probs();
            let w: Vec<f64> = pc.iter().zip(&pu).map(|(c, u)| c.powf(1.6) * u.powf(-0.6)).collect();
            let z: f64 = w.iter().sum();
            assert!((z.ln() - pi.log_z(s)).abs() < 1e-12);
            for (p, x) in pi.probs(s).iter().zip(&w) {
                assert!((p - x / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_log_z_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for gamma in [0.0, 0.4, 1.3, 2.0] {
            let pi = TabularGuidedPolicy::random(&mut rng, 3, 3, gamma);
            let theta = pi.params();
            for s in 0..3 {
                let g = pi.grad_log_z(s);
                for i in 0..theta.len() {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[i] += h;
                    tm[i] -= h;
                    let fd = (pi.with_params(&tp).log_z(s) - pi.with_params(&tm).log_z(s)) / (2.0 * h);
                    let scale = g[i].abs().max(fd.abs());
                    if scale > 1e-8 {
                        assert!((g[i] - fd).abs() / scale < 1e-6, "γ={gamma} s={s} i={i}: {} vs {fd}", g[i]);
                    } else {
                        assert!((g[i] - fd).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn guided_score_matches_finite_differences_of_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pi = TabularGuidedPolicy::random(&mut rng, 2, 3, 1.3);
        let theta = pi.params();
        let h = 1e-6;
        for s in 0..2 {
            let glz = pi.grad_log_z(s);
            for a in 0..3 {
                let score = pi.interpolated_score(s, a);
                for i in 0..theta.len() {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[i] += h;
                    tm[i] -= h;
                    let fd = (pi.with_params(&tp).probs(s)[a].ln() - pi.with_params(&tm).probs(s)[a].ln()) / (2.0 * h);
                    assert!((score[i] - glz[i] - fd).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn gamma_one_gap_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = TabularMdp::random(&mut rng, 4, 3, 0.9).unwrap();
        let pi = TabularGuidedPolicy::random(&mut rng, 4, 3, 1.0);
        let c = z_term_cancellation(&mdp, &pi).unwrap();
        assert!(c.gap < 1e-15, "{}", c.gap);
    }

    #[test]
    fn gap_vanishes_at_gamma_one_point_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = TabularMdp::random(&mut rng, 6, 3, 0.95).unwrap();
        let pi = TabularGuidedPolicy::random(&mut rng, 6, 3, 1.3);
        let c = z_term_cancellation(&mdp, &pi).unwrap();
        assert!(c.gap < 1e-10, "{}", c.gap);
        assert!(c.full_grad.iter().any(|x| x.abs() > 1e-3));
    }

    #[test]
    fn biased_advantage_gap_grows_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = TabularMdp::random(&mut rng, 4, 2, 0.9).unwrap();
        let pi = TabularGuidedPolicy::random(&mut rng, 4, 2, 1.3);
        let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gaps: Vec<f64> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&b| {
                let adv = biased_advantages(&mdp, &pi, &dir, b).unwrap();
                z_term_cancellation_with(&mdp, &pi, &adv).unwrap().gap
            })
            .collect();
        assert!(gaps[0] > 1e-6 && gaps[0] < gaps[1] && gaps[1] < gaps[2], "{gaps:?}");
        assert!((gaps[1] / gaps[0] - 10.0).abs() < 1e-6 && (gaps[2] / gaps[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn occupancy_is_a_distribution_satisfying_the_flow_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mdp = TabularMdp::random(&mut rng, 5, 2, 0.8).unwrap();
        let pi = TabularGuidedPolicy::random(&mut rng, 5, 2, 0.5);
        let d = occupancy(&mdp, &pi).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // d = (1-δ) μ0 + δ Pᵀ d
        let p = policy_transition(&mdp, &pi);
        for s2 in 0..5 {
            let inflow: f64 = (0..5).map(|s| d[s] * p[(s, s2)]).sum();
            assert!((d[s2] - (0.2 * mdp.initial[s2] + 0.8 * inflow)).abs() < 1e-12);
        }
    }

    #[test]
    fn values_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(&mut rng, 4, 2, 0.9).unwrap();
        let pi = TabularGuidedPolicy::random(&mut rng, 4, 2, 1.2);
        let (_, v) = exact_q_v(&mdp, &pi).unwrap();
        // 4 states × 1250 episodes × 200 steps = 10⁶ steps; 0.9^200 ≈ 7e-10
        for (s, vs) in v.iter().enumerate() {
            let rets = monte_carlo_returns(&mdp, &pi, s, 1250, 200, &mut rng);
            let n = rets.len() as f64;
            let mean = rets.iter().sum::<f64>() / n;
            let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((mean - vs).abs() < 3.0 * se, "s={s}: mc {mean} ± {se} vs exact {vs}");
        }
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(TabularMdp::new(1, 2, vec![0.5, 0.4], vec![0.0; 2], 0.9, vec![1.0]).is_err());
        assert!(TabularMdp::new(9, 8, vec![], vec![], 0.9, vec![]).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.5, vec![1.0]).is_err());
        assert!(TabularGuidedPolicy::new(1, 2, vec![0.0], vec![0.0; 2], 1.0).is_err());
    }
}
