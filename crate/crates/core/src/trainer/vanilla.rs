//! Plain PPO without an unconditional branch.
//!
//! Kept separate from [`super::Trainer`] on purpose: it shares the building
//! blocks (tape, MLP, GAE, Adam, environments) and the seeding discipline but
//! has its own actor, rollout and loss code, so the guided trainer at
//! `γ = 1, p_drop = 0` can be compared against it parameter by parameter.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{adam_step, AdamState, Param, Tape, Tensor, Var};
use crate::distributions::{
    categorical_entropy_var, categorical_log_prob_var, gaussian_entropy_var, gaussian_log_prob_var, sample_index,
};
use crate::envs::{Action, VecEnv};
use crate::error::Result;
use crate::nets::{Head, Mlp};
use crate::rollout::{compute_gae, standardize, AdvantageEstimate, RolloutBuffer};
use crate::scalar::softmax;

use super::{
    act_dim, head_for, rng_stream, RewardNormalizer, RunningMeanStd, TrainConfig, STREAM_ACTIONS, STREAM_INIT,
    STREAM_SHUFFLE,
};

pub struct VanillaPpo {
    pub config: TrainConfig,
    pub head: Head,
    pub critic: Mlp<f64>,
    pub actor: Mlp<f64>,
    pub log_std: Option<Param<f64>>,
    pub optimizer: AdamState<f64>,
    pub global_step: u64,
    iteration: u64,
    envs: VecEnv,
    obs_norm: Option<RunningMeanStd>,
    reward_norm: Option<RewardNormalizer>,
    next_obs: Vec<Vec<f64>>,
    buffer: RolloutBuffer,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

struct Bound {
    critic: crate::nets::BoundMlp,
    actor: crate::nets::BoundMlp,
    log_std: Option<Var>,
}

impl VanillaPpo {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut envs = VecEnv::new(&config.env, config.num_envs, config.seed)?;
        let head = head_for(&envs.action_space());
        let obs_dim = envs.obs_dim();
        let h = config.hidden;
        let s2 = std::f64::consts::SQRT_2;
        let mut init = rng_stream(config.seed, STREAM_INIT);
        let critic = Mlp::orthogonal("critic", &[obs_dim, h, h, 1], &[s2, s2, 1.0], &mut init)?;
        let actor = Mlp::orthogonal("actor", &[obs_dim, h, h, head.output_dim()], &[s2, s2, 0.01], &mut init)?;
        let log_std = match head {
            Head::Discrete(_) => None,
            Head::Continuous(d) => Some(Param::new("actor.log_std", Tensor::zeros(&[d]))),
        };
        let mut obs_norm = config.normalize_obs.then(|| RunningMeanStd::new(obs_dim));
        let raw = envs.reset();
        let next_obs = normalize_obs(&mut obs_norm, raw);
        Ok(Self {
            optimizer: AdamState::new(
                critic.params().chain(actor.params()).chain(log_std.as_ref()),
                config.learning_rate,
                0.9,
                0.999,
                config.adam_eps,
            ),
            head,
            critic,
            actor,
            log_std,
            global_step: 0,
            iteration: 0,
            obs_norm,
            reward_norm: config
                .normalize_reward
                .then(|| RewardNormalizer::new(config.num_envs, config.discount)),
            next_obs,
            buffer: RolloutBuffer::new(config.num_steps, config.num_envs, obs_dim, act_dim(head)),
            action_rng: rng_stream(config.seed, STREAM_ACTIONS),
            shuffle_rng: rng_stream(config.seed, STREAM_SHUFFLE),
            config,
            envs,
        })
    }

    /// Critic, actor and log-std parameters in optimizer order.
    pub fn params(&self) -> Vec<&Param<f64>> {
        self.critic.params().chain(self.actor.params()).chain(self.log_std.as_ref()).collect()
    }

    fn bind(&self, tape: &Tape<f64>) -> Result<Bound> {
        Ok(Bound {
            critic: self.critic.bind(tape)?,
            actor: self.actor.bind(tape)?,
            log_std: self.log_std.as_ref().map(|p| tape.param(p.value.clone())).transpose()?,
        })
    }

    fn collect(&mut self) -> Result<()> {
        for _ in 0..self.config.num_steps {
            let obs = std::mem::take(&mut self.next_obs);
            let n = obs.len();
            let tape = Tape::new();
            let b = self.bind(&tape)?;
            let x = tape.constant(Tensor::from_rows(&obs)?)?;
            let out = b.actor.forward(&tape, x)?;
            let out_v = tape.value(out);
            let mut rows = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            let lp = match self.head {
                Head::Discrete(_) => {
                    let idx: Vec<usize> = (0..n)
                        .map(|i| sample_index(&softmax(out_v.row(i)), &mut self.action_rng))
                        .collect();
                    for &a in &idx {
                        rows.push(vec![a as f64]);
                        actions.push(Action::Discrete(a));
                    }
                    categorical_log_prob_var(&tape, out, &idx)?
                }
                Head::Continuous(d) => {
                    let ls = self.log_std.as_ref().expect("continuous head has a log-std").value.clone();
                    for i in 0..n {
                        let a: Vec<f64> = out_v
                            .row(i)
                            .iter()
                            .zip(ls.data())
                            .map(|(m, s)| m + s.exp() * self.action_rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        actions.push(Action::Continuous(a.clone()));
                        rows.push(a);
                    }
                    let flat = Tensor::new(vec![n, d], rows.iter().flatten().copied().collect())?;
                    gaussian_log_prob_var(&tape, out, b.log_std.expect("continuous"), &flat)?
                }
            };
            let v = b.critic.forward(&tape, x)?;
            let v = tape.reshape(v, &[n])?;
            let step = self.envs.step(&actions)?;
            self.global_step += n as u64;
            let dones = step.dones();
            let rewards = match self.reward_norm.as_mut() {
                Some(rn) => rn.normalize(&step.rewards, &dones),
                None => step.rewards.clone(),
            };
            self.buffer.push_step(
                &obs,
                &rows,
                &rewards,
                &dones,
                tape.value(lp).data(),
                tape.value(v).data(),
            )?;
            self.next_obs = normalize_obs(&mut self.obs_norm, step.obs);
        }
        let tape = Tape::new();
        let b = self.bind(&tape)?;
        let x = tape.constant(Tensor::from_rows(&self.next_obs)?)?;
        let v = b.critic.forward(&tape, x)?;
        self.buffer.set_bootstrap(tape.value(v).into_data())
    }

    fn update(&mut self, est: &AdvantageEstimate) -> Result<()> {
        let cfg = self.config.clone();
        let batch = cfg.batch_size();
        let mut order: Vec<usize> = (0..batch).collect();
        let d = self.buffer.obs_dim();
        for _ in 0..cfg.update_epochs {
            order.shuffle(&mut self.shuffle_rng);
            for idx in order.chunks(cfg.minibatch_size()) {
                let n = idx.len();
                let mut obs = Vec::with_capacity(n * d);
                for &i in idx {
                    obs.extend_from_slice(self.buffer.obs_row(i));
                }
                let adv: Vec<f64> = idx.iter().map(|&i| est.advantages[i]).collect();
                let adv = if cfg.norm_adv { standardize(&adv) } else { adv };

                let tape = Tape::new();
                let b = self.bind(&tape)?;
                let x = tape.constant(Tensor::new(vec![n, d], obs)?)?;
                let out = b.actor.forward(&tape, x)?;
                let (new_lp, entropy) = match self.head {
                    Head::Discrete(_) => {
                        let a: Vec<usize> = idx.iter().map(|&i| self.buffer.action_row(i)[0] as usize).collect();
                        let lp = categorical_log_prob_var(&tape, out, &a)?;
                        let e = categorical_entropy_var(&tape, out)?;
                        (lp, tape.mean(e)?)
                    }
                    Head::Continuous(k) => {
                        let mut a = Vec::with_capacity(n * k);
                        for &i in idx {
                            a.extend_from_slice(self.buffer.action_row(i));
                        }
                        let ls = b.log_std.expect("continuous head has a log-std");
                        let lp = gaussian_log_prob_var(&tape, out, ls, &Tensor::new(vec![n, k], a)?)?;
                        (lp, gaussian_entropy_var(&tape, ls)?)
                    }
                };
                let old = tape.constant(Tensor::new(vec![n], idx.iter().map(|&i| self.buffer.log_probs[i]).collect())?)?;
                let ratio = tape.sub(new_lp, old)?;
                let ratio = tape.exp(ratio)?;
                let neg_adv = tape.constant(Tensor::new(vec![n], adv.iter().map(|a| -a).collect())?)?;
                let pg1 = tape.mul(neg_adv, ratio)?;
                let clipped = tape.clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef)?;
                let pg2 = tape.mul(neg_adv, clipped)?;
                let pg = tape.maximum(pg1, pg2)?;
                let pg = tape.mean(pg)?;

                let v = b.critic.forward(&tape, x)?;
                let v = tape.reshape(v, &[n])?;
                let ret = tape.constant(Tensor::new(vec![n], idx.iter().map(|&i| est.returns[i]).collect())?)?;
                let diff = tape.sub(v, ret)?;
                let unclipped = tape.square(diff)?;
                let v_loss = if cfg.clip_vloss {
                    let old_v =
                        tape.constant(Tensor::new(vec![n], idx.iter().map(|&i| self.buffer.values[i]).collect())?)?;
                    let dv = tape.sub(v, old_v)?;
                    let dv = tape.clamp(dv, -cfg.clip_coef, cfg.clip_coef)?;
                    let vc = tape.add(old_v, dv)?;
                    let dc = tape.sub(vc, ret)?;
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

                let grads = tape.backward(loss)?;
                let vars: Vec<Var> = b.critic.vars().chain(b.actor.vars()).chain(b.log_std).collect();
                let grads: Vec<Tensor<f64>> = vars.into_iter().map(|v| grads.wrt(v)).collect();
                let mut params: Vec<&mut Param<f64>> = self
                    .critic
                    .params_mut()
                    .chain(self.actor.params_mut())
                    .chain(self.log_std.as_mut())
                    .collect();
                adam_step(&mut params, grads, &mut self.optimizer, cfg.max_grad_norm)?;
            }
        }
        Ok(())
    }

    /// One collect/GAE/update iteration with the same learning-rate schedule
    /// as the guided trainer.
    pub fn iterate(&mut self) -> Result<()> {
        self.iteration += 1;
        if self.config.anneal_lr {
            let n = self.config.num_iterations() as f64;
            self.optimizer.lr = (1.0 - (self.iteration - 1) as f64 / n) * self.config.learning_rate;
        }
        self.collect()?;
        let est = compute_gae(&self.buffer, self.config.discount, self.config.gae_lambda)?;
        self.update(&est)?;
        self.buffer.clear();
        Ok(())
    }
}

fn normalize_obs(norm: &mut Option<RunningMeanStd>, raw: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    match norm {
        Some(n) => {
            n.update(&raw);
            raw.iter().map(|o| n.normalize(o)).collect()
        }
        None => raw,
    }
}
