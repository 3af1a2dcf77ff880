//! PPO with policy gradient guidance.
//!
//! Rollouts are sampled from the guided policy at `gamma_train`, stored
//! log-probabilities are guided log-probabilities, and the clipped surrogate
//! is evaluated on the guided distribution. Gradients reach the conditional
//! branch scaled by `γ` and the unconditional branch (null embedding and the
//! shared trunk) scaled by `1 - γ`. With `p_drop > 0` the actor input of
//! dropped transitions is replaced by the null embedding during updates.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod normalize;
pub mod vanilla;


use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{adam_step, AdamState, Tape, Tensor};
use crate::distributions::sample_index;
use crate::envs::{Action, ActionSpace, VecEnv};
use crate::error::{Error, Result};
use crate::nets::{ActorCritic, Head};
use crate::rollout::{compute_gae, standardize, AdvantageEstimate, RolloutBuffer};
use crate::scalar::softmax;

pub use checkpoint::{list_checkpoints, Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use loss::{gradient_interpolation_error, ppo_loss, BatchActions, Combine, LossOutput, Minibatch};
pub use normalize::{RewardNormalizer, RunningMeanStd};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_ACTIONS: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;

/// Independent ChaCha stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn head_for(space: &ActionSpace) -> Head {
    match space {
        ActionSpace::Discrete(n) => Head::Discrete(*n),
        ActionSpace::Box { low, .. } => Head::Continuous(low.len()),
    }
}

pub fn act_dim(head: Head) -> usize {
    match head {
        Head::Discrete(_) => 1,
        Head::Continuous(d) => d,
    }
}

pub const METRICS_HEADER: &str = "step,return,policy_loss,value_loss,entropy,approx_kl,clipfrac";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub global_step: u64,
    pub iteration: u64,
    /// Mean return of episodes finished during the iteration, NaN if none.
    pub episodic_return: f64,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipfrac: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.global_step,
            self.episodic_return,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clipfrac
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipfrac: f64,
    pub minibatches: usize,
}

impl UpdateStats {
    fn add(&mut self, out: &LossOutput) {
        self.policy_loss += out.policy_loss;
        self.value_loss += out.value_loss;
        self.entropy += out.entropy;
        self.approx_kl += out.approx_kl;
        self.clipfrac += out.clipfrac;
        self.minibatches += 1;
    }

    fn finish(mut self) -> Self {
        let n = self.minibatches.max(1) as f64;
        self.policy_loss /= n;
        self.value_loss /= n;
        self.entropy /= n;
        self.approx_kl /= n;
        self.clipfrac /= n;
        self
    }
}

/// Guided action selection for a batch of (already normalised) observations.
pub struct PolicyStep {
    pub actions: Vec<Action>,
    /// Flat action rows as stored in the rollout buffer.
    pub action_rows: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Samples actions from `π̂` at `gamma` and evaluates the critic.
pub fn policy_step<R: Rng + ?Sized>(
    model: &ActorCritic<f64>,
    obs: &[Vec<f64>],
    gamma: f64,
    combine: Combine,
    deterministic: bool,
    rng: &mut R,
) -> Result<PolicyStep> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let x = tape.constant(Tensor::from_rows(obs)?)?;
    let (_, _, guided) = loss::guided_head(&tape, &bound, x, gamma, combine)?;
    let head_value = tape.value(guided);
    let mut action_rows = Vec::with_capacity(obs.len());
    let mut actions = Vec::with_capacity(obs.len());
    let batch = match model.head {
        Head::Discrete(_) => {
            let mut idx = Vec::with_capacity(obs.len());
            for i in 0..obs.len() {
                let row = head_value.row(i);
                let a = if deterministic {
                    argmax(row)
                } else {
                    sample_index(&softmax(row), rng)
                };
                idx.push(a);
                actions.push(Action::Discrete(a));
                action_rows.push(vec![a as f64]);
            }
            BatchActions::Discrete(idx)
        }
        Head::Continuous(d) => {
            let log_std = &model.log_std.as_ref().expect("continuous head has a log-std").value;
            for i in 0..obs.len() {
                let mean = head_value.row(i);
                let a: Vec<f64> = if deterministic {
                    mean.to_vec()
                } else {
                    mean.iter()
                        .zip(log_std.data())
                        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                actions.push(Action::Continuous(a.clone()));
                action_rows.push(a);
            }
            let flat = action_rows.iter().flatten().copied().collect();
            BatchActions::Continuous(Tensor::new(vec![obs.len(), d], flat)?)
        }
    };
    let lp = loss::head_log_probs(&tape, &bound, model.head, guided, &batch)?;
    let values = bound.critic(&tape, x)?;
    Ok(PolicyStep {
        actions,
        action_rows,
        log_probs: tape.value(lp).into_data(),
        values: tape.value(values).into_data(),
    })
}

/// Critic values for a batch of observations.
pub fn critic_values(model: &ActorCritic<f64>, obs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let x = tape.constant(Tensor::from_rows(obs)?)?;
    let v = bound.critic(&tape, x)?;
    Ok(tape.value(v).into_data())
}

/// Gathers rows `idx` of a full buffer into a minibatch.
pub fn gather_minibatch(
    buffer: &RolloutBuffer,
    est: &AdvantageEstimate,
    head: Head,
    idx: &[usize],
    norm_adv: bool,
) -> Result<Minibatch> {
    let d = buffer.obs_dim();
    let mut obs = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        obs.extend_from_slice(buffer.obs_row(i));
    }
    let actions = match head {
        Head::Discrete(_) => BatchActions::Discrete(idx.iter().map(|&i| buffer.action_row(i)[0] as usize).collect()),
        Head::Continuous(k) => {
            let mut a = Vec::with_capacity(idx.len() * k);
            for &i in idx {
                a.extend_from_slice(buffer.action_row(i));
            }
            BatchActions::Continuous(Tensor::new(vec![idx.len(), k], a)?)
        }
    };
    let adv: Vec<f64> = idx.iter().map(|&i| est.advantages[i]).collect();
    Ok(Minibatch {
        obs: Tensor::new(vec![idx.len(), d], obs)?,
        actions,
        old_log_probs: idx.iter().map(|&i| buffer.log_probs[i]).collect(),
        advantages: if norm_adv { standardize(&adv) } else { adv },
        returns: idx.iter().map(|&i| est.returns[i]).collect(),
        old_values: idx.iter().map(|&i| buffer.values[i]).collect(),
        drop_mask: None,
    })
}

/// Single-seed training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ActorCritic<f64>,
    pub optimizer: AdamState<f64>,
    pub obs_norm: Option<RunningMeanStd>,
    pub reward_norm: Option<RewardNormalizer>,
    pub global_step: u64,
    pub iteration: u64,
    pub combine: Combine,
    pub buffer: RolloutBuffer,
    envs: VecEnv,
    next_obs: Vec<Vec<f64>>,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    finished: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut envs = VecEnv::new(&config.env, config.num_envs, config.seed)?;
        let head = head_for(&envs.action_space());
        let obs_dim = envs.obs_dim();
        let model = ActorCritic::new(obs_dim, head, config.hidden, &mut rng_stream(config.seed, STREAM_INIT))?;
        let optimizer = AdamState::new(model.params(), config.learning_rate, 0.9, 0.999, config.adam_eps);
        let mut obs_norm = config.normalize_obs.then(|| RunningMeanStd::new(obs_dim));
        let reward_norm = config
            .normalize_reward
            .then(|| RewardNormalizer::new(config.num_envs, config.discount));
        let raw = envs.reset();
        let next_obs = observe(&mut obs_norm, raw);
        let buffer = RolloutBuffer::new(config.num_steps, config.num_envs, obs_dim, act_dim(head));
        Ok(Self {
            action_rng: rng_stream(config.seed, STREAM_ACTIONS),
            shuffle_rng: rng_stream(config.seed, STREAM_SHUFFLE),
            dropout_rng: rng_stream(config.seed, STREAM_DROPOUT),
            config,
            model,
            optimizer,
            obs_norm,
            reward_norm,
            global_step: 0,
            iteration: 0,
            combine: Combine::Interpolate,
            buffer,
            envs,
            next_obs,
            finished: Vec::new(),
        })
    }

    /// Fills the buffer with `num_steps` lockstep steps of the guided policy.
    pub fn collect_rollout(&mut self) -> Result<()> {
        if !self.buffer.is_empty() {
            return Err(Error::Invalid("collect_rollout: buffer is not empty".into()));
        }
        for _ in 0..self.config.num_steps {
            let obs = std::mem::take(&mut self.next_obs);
            let step = policy_step(
                &self.model,
                &obs,
                self.config.gamma_train,
                self.combine,
                false,
                &mut self.action_rng,
            )?;
            let out = self.envs.step(&step.actions)?;
            self.global_step += self.config.num_envs as u64;
            let dones = out.dones();
            let rewards = match self.reward_norm.as_mut() {
                Some(rn) => rn.normalize(&out.rewards, &dones),
                None => out.rewards.clone(),
            };
            self.finished.extend(out.finished.iter().map(|&(_, ret, _)| ret));
            self.buffer
                .push_step(&obs, &step.action_rows, &rewards, &dones, &step.log_probs, &step.values)?;
            self.next_obs = observe(&mut self.obs_norm, out.obs);
        }
        let boot = critic_values(&self.model, &self.next_obs)?;
        self.buffer.set_bootstrap(boot)
    }

    fn drop_mask(&mut self, n: usize) -> Option<Vec<bool>> {
        let p = self.config.p_drop;
        if p <= 0.0 {
            return None;
        }
        if self.config.dropout_per_minibatch {
            let d = self.dropout_rng.random::<f64>() < p;
            Some(vec![d; n])
        } else {
            Some((0..n).map(|_| self.dropout_rng.random::<f64>() < p).collect())
        }
    }

    /// Epochs of shuffled minibatch updates over the full buffer.
    pub fn ppo_update(&mut self, est: &AdvantageEstimate) -> Result<UpdateStats> {
        let batch = self.config.batch_size();
        let mb_size = self.config.minibatch_size();
        let mut order: Vec<usize> = (0..batch).collect();
        let mut stats = UpdateStats::default();
        for _ in 0..self.config.update_epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(mb_size) {
                let mut mb = gather_minibatch(&self.buffer, est, self.model.head, chunk, self.config.norm_adv)?;
                mb.drop_mask = self.drop_mask(chunk.len());
                let out = self.minibatch_step(&mb)?;
                stats.add(&out);
            }
        }
        Ok(stats.finish())
    }

    /// One gradient step; returns the loss diagnostics.
    pub fn minibatch_step(&mut self, mb: &Minibatch) -> Result<LossOutput> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape)?;
        let out = ppo_loss(&tape, &bound, self.model.head, mb, &self.config, self.config.gamma_train, self.combine)?;
        let grads = tape.backward(out.loss)?;
        let grads: Vec<Tensor<f64>> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
        let mut params = self.model.params_mut();
        adam_step(&mut params, grads, &mut self.optimizer, self.config.max_grad_norm)?;
        Ok(out)
    }

    /// Collect, estimate advantages, update. NaN errors are reported as
    /// divergence at the current step.
    pub fn iterate(&mut self) -> Result<TrainLogRecord> {
        let start = Instant::now();
        self.iteration += 1;
        if self.config.anneal_lr {
            let n = self.config.num_iterations() as f64;
            let frac = 1.0 - (self.iteration - 1) as f64 / n;
            self.optimizer.lr = frac * self.config.learning_rate;
        }
        let step = self.global_step;
        self.collect_rollout().map_err(|e| diverged(step, e))?;
        let est = compute_gae(&self.buffer, self.config.discount, self.config.gae_lambda)?;
        let step = self.global_step;
        let stats = self.ppo_update(&est).map_err(|e| diverged(step, e))?;
        self.buffer.clear();
        let finished = std::mem::take(&mut self.finished);
        let episodic_return = if finished.is_empty() {
            f64::NAN
        } else {
            finished.iter().sum::<f64>() / finished.len() as f64
        };
        Ok(TrainLogRecord {
            global_step: self.global_step,
            iteration: self.iteration,
            episodic_return,
            episodes: finished.len(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clipfrac: stats.clipfrac,
            learning_rate: self.optimizer.lr,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self, label: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            label,
            global_step: self.global_step,
            iteration: self.iteration,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            obs_norm: self.obs_norm.clone(),
            reward_norm: self.reward_norm.clone(),
        }
    }

    /// Runs every iteration, handing records and checkpoints to the callbacks
    /// as they are produced.
    ///
    /// A checkpoint labelled `L` is taken after the first iteration whose
    /// global step reaches `L`; labels still pending after the last
    /// iteration are taken there.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&TrainLogRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(Checkpoint) -> Result<()>,
    ) -> Result<Vec<String>> {
        let iterations = self.config.num_iterations();
        let mut warnings = Vec::new();
        if iterations == 0 {
            let msg = format!(
                "total_timesteps {} is below one rollout of {} steps; no updates will run",
                self.config.total_timesteps,
                self.config.batch_size()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            return Ok(warnings);
        }
        let mut pending = self.config.checkpoint_labels().into_iter().peekable();
        for it in 1..=iterations {
            let record = self.iterate()?;
            on_record(&record)?;
            while let Some(&label) = pending.peek() {
                if self.global_step >= label || it == iterations {
                    on_checkpoint(self.checkpoint(label))?;
                    pending.next();
                } else {
                    break;
                }
            }
        }
        Ok(warnings)
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NaN { .. } | Error::NanGradient(_) => {
            log::error!("non-finite values at step {step}: {e}");
            Error::Diverged {
                step,
                message: e.to_string(),
            }
        }
        other => other,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn observe(norm: &mut Option<RunningMeanStd>, raw: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    match norm {
        Some(n) => {
            n.update(&raw);
            raw.iter().map(|o| n.normalize(o)).collect()
        }
        None => raw,
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainLogRecord>,
    /// `(label, global_step, path)` of every checkpoint written.
    pub checkpoints: Vec<(u64, u64, PathBuf)>,
    pub warnings: Vec<String>,
}

/// Trains one seed into `run_dir` (`config.txt`, `metrics.csv`,
/// `checkpoints/`). Rows and checkpoints already written survive an error.
pub fn train(config: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    train_with(config, run_dir, Combine::Interpolate)
}

pub fn train_with(config: &TrainConfig, run_dir: &Path, combine: Combine) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.txt"), config.to_text())?;
    let mut metrics = fs::File::create(run_dir.join("metrics.csv"))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let ck_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;

    let mut trainer = Trainer::new(config.clone())?;
    trainer.combine = combine;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let warnings = trainer.run(
        |r| {
            writeln!(metrics, "{}", r.csv_row())?;
            metrics.flush()?;
            log::info!(
                "seed {} step {} return {:.2} kl {:.4}",
                config.seed,
                r.global_step,
                r.episodic_return,
                r.approx_kl
            );
            records.push(r.clone());
            Ok(())
        },
        |ck| {
            let path = ck.save(&ck_dir)?;
            checkpoints.push((ck.label, ck.global_step, path));
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        records,
        checkpoints,
        warnings,
    })
}

/// Trains in memory and returns the checkpoints instead of writing them.
pub fn train_in_memory(config: &TrainConfig, combine: Combine) -> Result<(Vec<TrainLogRecord>, Vec<Checkpoint>)> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.combine = combine;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    trainer.run(
        |r| {
            records.push(r.clone());
            Ok(())
        },
        |ck| {
            checkpoints.push(ck);
            Ok(())
        },
    )?;
    Ok((records, checkpoints))
}
