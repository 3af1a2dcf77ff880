//! Actor-critic with a learnable null embedding.
//!
//! The unconditional branch `π(a|∅)` reuses the actor trunk unchanged and
//! feeds it the null embedding in place of the observation, so the only
//! added parameters are `obs_dim` scalars. The critic always sees the real
//! observation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{constant_init, orthogonal_init, Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Logits over `n` actions.
    Discrete(usize),
    /// Mean of a `d`-dimensional Gaussian with a shared state-independent log-std.
    Continuous(usize),
}

impl Head {
    pub fn output_dim(self) -> usize {
        match self {
            Head::Discrete(n) | Head::Continuous(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// Stack of affine layers with tanh between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `sizes` lists layer widths including input and output; `gains[i]`
    /// is the orthogonal gain of layer `i`. Biases start at zero.
    pub fn orthogonal<R: Rng + ?Sized>(prefix: &str, sizes: &[usize], gains: &[f64], rng: &mut R) -> Result<Self> {
        assert_eq!(sizes.len(), gains.len() + 1);
        let mut layers = Vec::with_capacity(gains.len());
        for (i, (w, &gain)) in sizes.windows(2).zip(gains).enumerate() {
            let weight = orthogonal_init(&[w[0], w[1]], T::lit(gain), rng)?;
            layers.push(Linear {
                weight: Param::new(format!("{prefix}.{i}.weight"), weight),
                bias: Param::new(format!("{prefix}.{i}.bias"), constant_init(&[w[1]], T::zero())),
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.shape()[0]
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn bind(&self, tape: &Tape<T>) -> Result<BoundMlp> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.param(l.weight.value.clone())?, tape.param(l.bias.value.clone())?)))
            .collect::<Result<_>>()?;
        Ok(BoundMlp { layers })
    }
}

/// [`Mlp`] parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.add(tape.matmul(h, w)?, b)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic<T> {
    pub obs_dim: usize,
    pub head: Head,
    pub critic: Mlp<T>,
    pub actor: Mlp<T>,
    pub log_std: Option<Param<T>>,
    pub null_embedding: Param<T>,
}

pub const HIDDEN: usize = 64;

impl<T: Real> ActorCritic<T> {
    /// Reference initialisation: orthogonal weights (gain √2 hidden, 0.01
    /// policy head, 1.0 value head), zero biases, zero log-std, zero null
    /// embedding. The critic is drawn first.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, head: Head, hidden: usize, rng: &mut R) -> Result<Self> {
        let s2 = std::f64::consts::SQRT_2;
        let critic = Mlp::orthogonal("critic", &[obs_dim, hidden, hidden, 1], &[s2, s2, 1.0], rng)?;
        let actor = Mlp::orthogonal(
            "actor",
            &[obs_dim, hidden, hidden, head.output_dim()],
            &[s2, s2, 0.01],
            rng,
        )?;
        let log_std = match head {
            Head::Discrete(_) => None,
            Head::Continuous(d) => Some(Param::new("actor.log_std", Tensor::zeros(&[d]))),
        };
        Ok(Self {
            obs_dim,
            head,
            critic,
            actor,
            log_std,
            null_embedding: Param::new("actor.null_embedding", Tensor::zeros(&[obs_dim])),
        })
    }

    /// Parameters in canonical order: critic, actor, log-std, null embedding.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.critic.params().chain(self.actor.params()).collect();
        out.extend(self.log_std.as_ref());
        out.push(&self.null_embedding);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.critic.params_mut().chain(self.actor.params_mut()).collect();
        out.extend(self.log_std.as_mut());
        out.push(&mut self.null_embedding);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &Tape<T>) -> Result<BoundActorCritic> {
        let critic = self.critic.bind(tape)?;
        let actor = self.actor.bind(tape)?;
        let log_std = self.log_std.as_ref().map(|p| tape.param(p.value.clone())).transpose()?;
        let null_embedding = tape.param(self.null_embedding.value.clone())?;
        Ok(BoundActorCritic {
            obs_dim: self.obs_dim,
            critic,
            actor,
            log_std,
            null_embedding,
        })
    }

    fn check_obs(&self, obs: &[T]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::ShapeMismatch {
                op: "actor_critic",
                lhs: vec![self.obs_dim],
                rhs: vec![obs.len()],
            });
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NaN { op: "actor_critic" });
        }
        Ok(())
    }

    /// Head output (logits or mean) for one observation.
    pub fn actor_forward(&self, obs: &[T]) -> Result<Vec<T>> {
        self.check_obs(obs)?;
        let tape = Tape::new();
        let b = self.bind(&tape)?;
        let x = tape.constant(Tensor::new(vec![1, obs.len()], obs.to_vec())?)?;
        Ok(tape.value(b.actor(&tape, x)?).into_data())
    }

    /// Head output of the unconditional branch.
    pub fn actor_forward_null(&self) -> Result<Vec<T>> {
        let tape = Tape::new();
        let b = self.bind(&tape)?;
        Ok(tape.value(b.actor_null(&tape)?).into_data())
    }

    pub fn critic_forward(&self, obs: &[T]) -> Result<T> {
        self.check_obs(obs)?;
        let tape = Tape::new();
        let b = self.bind(&tape)?;
        let x = tape.constant(Tensor::new(vec![1, obs.len()], obs.to_vec())?)?;
        Ok(tape.item(b.critic(&tape, x)?))
    }
}

/// [`ActorCritic`] parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundActorCritic {
    obs_dim: usize,
    pub critic: BoundMlp,
    pub actor: BoundMlp,
    pub log_std: Option<Var>,
    pub null_embedding: Var,
}

impl BoundActorCritic {
    /// Actor head on a `[B, obs_dim]` batch.
    pub fn actor<T: Real>(&self, tape: &Tape<T>, obs: Var) -> Result<Var> {
        self.actor.forward(tape, obs)
    }

    /// Actor head on the null embedding, shape `[1, out]`.
    pub fn actor_null<T: Real>(&self, tape: &Tape<T>) -> Result<Var> {
        let x = tape.reshape(self.null_embedding, &[1, self.obs_dim])?;
        self.actor.forward(tape, x)
    }

    /// Value estimates, shape `[B]`.
    pub fn critic<T: Real>(&self, tape: &Tape<T>, obs: Var) -> Result<Var> {
        let v = self.critic.forward(tape, obs)?;
        let n = tape.shape(v)[0];
        tape.reshape(v, &[n])
    }

    /// Vars in the same order as [`ActorCritic::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.critic.vars().chain(self.actor.vars()).collect();
        out.extend(self.log_std);
        out.push(self.null_embedding);
        out
    }
}
