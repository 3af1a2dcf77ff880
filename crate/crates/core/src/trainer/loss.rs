//! Clipped PPO loss on the guided distribution.

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{
    categorical_entropy_var, categorical_log_prob_var, gaussian_entropy_var, gaussian_log_prob_var, guided_logits_var,
};
use crate::error::{Error, Result};
use crate::nets::{BoundActorCritic, Head};

use super::config::TrainConfig;

/// How the conditional and unconditional heads are combined.
///
/// `ConditionalOnly` ignores the unconditional branch. It is a deliberate
/// fault used to check that the verification suites notice it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combine {
    #[default]
    Interpolate,
    ConditionalOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchActions {
    Discrete(Vec<usize>),
    /// `[B, action_dim]`.
    Continuous(Tensor<f64>),
}

impl BatchActions {
    pub fn len(&self) -> usize {
        match self {
            BatchActions::Discrete(a) => a.len(),
            BatchActions::Continuous(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One minibatch worth of rollout data.
#[derive(Clone, Debug)]
pub struct Minibatch {
    /// `[B, obs_dim]` actor/critic inputs.
    pub obs: Tensor<f64>,
    pub actions: BatchActions,
    pub old_log_probs: Vec<f64>,
    /// Already standardised if the config asks for it.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_values: Vec<f64>,
    /// Rows whose actor input is replaced by the null embedding.
    pub drop_mask: Option<Vec<bool>>,
}

/// Loss graph plus the handles the checks need.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Conditional head output, `[B, out]`.
    pub cond_head: Var,
    /// Unconditional head output, `[1, out]`.
    pub uncond_head: Var,
    /// Guided head (logits or mean), `[B, out]`.
    pub guided_head: Var,
    pub new_log_probs: Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipfrac: f64,
}

/// Guided head for an actor input batch: `γ·f(x) + (1-γ)·f(null)`.
pub fn guided_head(
    tape: &Tape<f64>,
    bound: &BoundActorCritic,
    actor_input: Var,
    gamma: f64,
    combine: Combine,
) -> Result<(Var, Var, Var)> {
    let cond = bound.actor(tape, actor_input)?;
    let uncond = bound.actor_null(tape)?;
    let guided = match combine {
        Combine::Interpolate => guided_logits_var(tape, cond, uncond, gamma)?,
        Combine::ConditionalOnly => cond,
    };
    Ok((cond, uncond, guided))
}

/// Per-row log-probabilities of `actions` under a guided head.
pub fn head_log_probs(
    tape: &Tape<f64>,
    bound: &BoundActorCritic,
    head: Head,
    guided: Var,
    actions: &BatchActions,
) -> Result<Var> {
    match (head, actions) {
        (Head::Discrete(_), BatchActions::Discrete(a)) => categorical_log_prob_var(tape, guided, a),
        (Head::Continuous(_), BatchActions::Continuous(a)) => {
            let log_std = bound.log_std.expect("continuous head has a log-std");
            gaussian_log_prob_var(tape, guided, log_std, a)
        }
        _ => Err(Error::Invalid("action batch does not match the policy head".into())),
    }
}

fn actor_input(tape: &Tape<f64>, bound: &BoundActorCritic, obs: Var, mb: &Minibatch) -> Result<Var> {
    let Some(mask) = mb.drop_mask.as_ref().filter(|m| m.iter().any(|&d| d)) else {
        return Ok(obs);
    };
    let shape = mb.obs.shape().to_vec();
    let d = shape[1];
    let mut m = Vec::with_capacity(shape[0] * d);
    let mut keep = Vec::with_capacity(shape[0] * d);
    for &dropped in mask {
        let (a, b) = if dropped { (1.0, 0.0) } else { (0.0, 1.0) };
        m.extend(std::iter::repeat_n(a, d));
        keep.extend(std::iter::repeat_n(b, d));
    }
    let m = tape.constant(Tensor::new(shape.clone(), m)?)?;
    let keep = tape.constant(Tensor::new(shape, keep)?)?;
    let kept = tape.mul(obs, keep)?;
    let nulls = tape.mul(m, bound.null_embedding)?;
    tape.add(kept, nulls)
}

/// `pg - ent_coef·entropy + vf_coef·v_loss` with the clipped surrogate and
/// (optionally) clipped value loss.
pub fn ppo_loss(
    tape: &Tape<f64>,
    bound: &BoundActorCritic,
    head: Head,
    mb: &Minibatch,
    cfg: &TrainConfig,
    gamma: f64,
    combine: Combine,
) -> Result<LossOutput> {
    let n = mb.actions.len();
    let obs = tape.constant(mb.obs.clone())?;
    let x = actor_input(tape, bound, obs, mb)?;
    let (cond_head, uncond_head, guided) = guided_head(tape, bound, x, gamma, combine)?;
    let new_log_probs = head_log_probs(tape, bound, head, guided, &mb.actions)?;
    let entropy = match head {
        Head::Discrete(_) => {
            let e = categorical_entropy_var(tape, guided)?;
            tape.mean(e)?
        }
        Head::Continuous(_) => gaussian_entropy_var(tape, bound.log_std.expect("continuous head has a log-std"))?,
    };

    let old = tape.constant(Tensor::new(vec![n], mb.old_log_probs.clone())?)?;
    let logratio = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(logratio)?;
    let neg_adv = tape.constant(Tensor::new(vec![n], mb.advantages.iter().map(|a| -a).collect())?)?;
    let pg1 = tape.mul(neg_adv, ratio)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef)?;
    let pg2 = tape.mul(neg_adv, clipped)?;
    let pg = tape.maximum(pg1, pg2)?;
    let pg = tape.mean(pg)?;

    let new_values = bound.critic(tape, obs)?;
    let returns = tape.constant(Tensor::new(vec![n], mb.returns.clone())?)?;
    let diff = tape.sub(new_values, returns)?;
    let unclipped = tape.square(diff)?;
    let v_loss = if cfg.clip_vloss {
        let old_v = tape.constant(Tensor::new(vec![n], mb.old_values.clone())?)?;
        let dv = tape.sub(new_values, old_v)?;
        let dv = tape.clamp(dv, -cfg.clip_coef, cfg.clip_coef)?;
        let v_clipped = tape.add(old_v, dv)?;
        let dc = tape.sub(v_clipped, returns)?;
        let sq = tape.square(dc)?;
        let worst = tape.maximum(unclipped, sq)?;
        let m = tape.mean(worst)?;
        tape.scale(m, 0.5)?
    } else {
        let m = tape.mean(unclipped)?;
        tape.scale(m, 0.5)?
    };

    let ent_term = tape.scale(entropy, cfg.ent_coef)?;
    let loss = tape.sub(pg, ent_term)?;
    let v_term = tape.scale(v_loss, cfg.vf_coef)?;
    let loss = tape.add(loss, v_term)?;

    let lr = tape.value(logratio);
    let (mut kl, mut clipfrac) = (0.0, 0.0);
    for &l in lr.data() {
        let r = l.exp();
        kl += (r - 1.0) - l;
        if (r - 1.0).abs() > cfg.clip_coef {
            clipfrac += 1.0;
        }
    }
    Ok(LossOutput {
        loss,
        cond_head,
        uncond_head,
        guided_head: guided,
        new_log_probs,
        policy_loss: tape.item(pg),
        value_loss: tape.item(v_loss),
        entropy: tape.item(entropy),
        approx_kl: kl / n as f64,
        clipfrac: clipfrac / n as f64,
    })
}

/// Checks that the loss gradient reaching the unconditional head is the
/// conditional head gradient, summed over rows, times `(1-γ)/γ`.
///
/// Returns the max-norm error relative to the predicted gradient. A
/// predicted gradient of exactly zero (for instance at `γ = 1`) gives 0 when
/// the observed gradient is zero too and infinity otherwise.
pub fn gradient_interpolation_error(
    model: &crate::nets::ActorCritic<f64>,
    mb: &Minibatch,
    cfg: &TrainConfig,
    gamma: f64,
    combine: Combine,
) -> Result<f64> {
    if gamma == 0.0 {
        return Err(Error::Invalid("gradient interpolation check needs γ ≠ 0".into()));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let out = ppo_loss(&tape, &bound, model.head, mb, cfg, gamma, combine)?;
    let grads = tape.backward_retaining(out.loss, &[out.cond_head, out.uncond_head])?;
    let g_cond = grads.wrt(out.cond_head);
    let g_uncond = grads.wrt(out.uncond_head);
    let width = g_uncond.len();
    let mut predicted = vec![0.0; width];
    for (i, g) in g_cond.data().iter().enumerate() {
        predicted[i % width] += g;
    }
    let factor = (1.0 - gamma) / gamma;
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (p, g) in predicted.iter().zip(g_uncond.data()) {
        err = err.max((p * factor - g).abs());
        scale = scale.max((p * factor).abs());
    }
    Ok(if scale > 0.0 {
        err / scale
    } else if err == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}
