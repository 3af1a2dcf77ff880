//! Classic control environments and a lockstep vectorised wrapper.
//!
//! Dynamics follow the public Gym definitions of CartPole-v1, Acrobot-v1,
//! Pendulum-v1 and MountainCarContinuous-v0. Each environment owns a seeded
//! ChaCha stream, so `(seed, actions)` fully determines a trajectory.

mod acrobot;
mod cartpole;
mod mountain_car;
mod pendulum;
mod vec_env;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use acrobot::Acrobot;
pub use cartpole::CartPole;
pub use mountain_car::MountainCarContinuous;
pub use pendulum::Pendulum;
pub use vec_env::{VecEnv, VecStep};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Physics of one task, without episode bookkeeping.
pub trait Dynamics: Send {
    const NAME: &'static str;
    const TIME_LIMIT: usize;

    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset_state(&mut self, rng: &mut ChaCha8Rng);
    /// Advances one step; returns `(reward, terminated)`.
    fn transition(&mut self, action: &Action) -> Result<(f64, bool)>;
    fn observe(&self) -> Vec<f64>;
}

pub trait Env: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn time_limit(&self) -> usize;
    /// Starts a new episode. `Some(seed)` reseeds the environment stream.
    fn reset(&mut self, seed: Option<u64>) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<Step>;
    fn steps_elapsed(&self) -> usize;
}

/// Episode bookkeeping around a [`Dynamics`]: time limit, termination
/// flags and the environment RNG.
pub struct EnvState<D> {
    dynamics: D,
    rng: ChaCha8Rng,
    steps_elapsed: usize,
    terminated: bool,
    truncated: bool,
    needs_reset: bool,
}

impl<D: Dynamics> EnvState<D> {
    pub fn new(dynamics: D) -> Self {
        Self {
            dynamics,
            rng: ChaCha8Rng::seed_from_u64(0),
            steps_elapsed: 0,
            terminated: false,
            truncated: false,
            needs_reset: true,
        }
    }

    pub fn dynamics(&self) -> &D {
        &self.dynamics
    }

    /// Direct access to the physical state, e.g. to start from a chosen configuration.
    pub fn dynamics_mut(&mut self) -> &mut D {
        &mut self.dynamics
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    fn validate(&self, action: &Action) -> Result<()> {
        let bad = |message: String| Error::Env { env: D::NAME, message };
        match (self.dynamics.action_space(), action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) if *a < n => Ok(()),
            (ActionSpace::Discrete(n), Action::Discrete(a)) => Err(bad(format!("action {a} outside 0..{n}"))),
            (ActionSpace::Box { low, .. }, Action::Continuous(a)) => {
                if a.len() != low.len() {
                    Err(bad(format!("expected {}-dim action, got {}", low.len(), a.len())))
                } else if a.iter().any(|v| !v.is_finite()) {
                    Err(bad("non-finite action".into()))
                } else {
                    Ok(())
                }
            }
            (space, a) => Err(bad(format!("action {a:?} does not fit {space:?}"))),
        }
    }
}

impl<D: Dynamics> Env for EnvState<D> {
    fn name(&self) -> &'static str {
        D::NAME
    }

    fn obs_dim(&self) -> usize {
        self.dynamics.obs_dim()
    }

    fn action_space(&self) -> ActionSpace {
        self.dynamics.action_space()
    }

    fn time_limit(&self) -> usize {
        D::TIME_LIMIT
    }

    fn reset(&mut self, seed: Option<u64>) -> Vec<f64> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.dynamics.reset_state(&mut self.rng);
        self.steps_elapsed = 0;
        self.terminated = false;
        self.truncated = false;
        self.needs_reset = false;
        self.dynamics.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.needs_reset {
            return Err(Error::Env {
                env: D::NAME,
                message: "step called before reset or after the episode ended".into(),
            });
        }
        self.validate(action)?;
        let (reward, terminated) = self.dynamics.transition(action)?;
        self.steps_elapsed += 1;
        self.terminated = terminated;
        self.truncated = !terminated && self.steps_elapsed >= D::TIME_LIMIT;
        self.needs_reset = self.terminated || self.truncated;
        Ok(Step {
            obs: self.dynamics.observe(),
            reward,
            terminated: self.terminated,
            truncated: self.truncated,
        })
    }

    fn steps_elapsed(&self) -> usize {
        self.steps_elapsed
    }
}

pub const ENV_NAMES: [&str; 4] = ["cartpole", "acrobot", "pendulum", "mountaincar-cont"];

/// Looks an environment up by registry name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    Ok(match name {
        "cartpole" => Box::new(EnvState::new(CartPole::default())),
        "acrobot" => Box::new(EnvState::new(Acrobot::default())),
        "pendulum" => Box::new(EnvState::new(Pendulum::default())),
        "mountaincar-cont" => Box::new(EnvState::new(MountainCarContinuous::default())),
        other => {
            return Err(Error::config(
                "env",
                format!("unknown environment `{other}` (known: {})", ENV_NAMES.join(", ")),
            ))
        }
    })
}

pub(crate) fn clip_to(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}
