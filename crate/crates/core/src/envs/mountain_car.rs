use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip_to, Action, ActionSpace, Dynamics};
use crate::error::Result;

/// Continuous-action mountain car.
#[derive(Clone, Debug)]
pub struct MountainCarContinuous {
    pub power: f64,
    /// `[position, velocity]`
    pub state: [f64; 2],
}

const MIN_POSITION: f64 = -1.2;
const MAX_POSITION: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;
const GOAL_POSITION: f64 = 0.45;

impl Default for MountainCarContinuous {
    fn default() -> Self {
        Self {
            power: 0.0015,
            state: [0.0; 2],
        }
    }
}

impl Dynamics for MountainCarContinuous {
    const NAME: &'static str = "mountaincar-cont";
    const TIME_LIMIT: usize = 999;

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Box {
            low: vec![-1.0],
            high: vec![1.0],
        }
    }

    fn reset_state(&mut self, rng: &mut ChaCha8Rng) {
        self.state = [rng.random_range(-0.6..-0.4), 0.0];
    }

    fn transition(&mut self, action: &Action) -> Result<(f64, bool)> {
        let force = match action {
            Action::Continuous(a) => clip_to(a[0], -1.0, 1.0),
            Action::Discrete(_) => unreachable!("validated by EnvState"),
        };
        let [mut position, mut velocity] = self.state;
        velocity += force * self.power - 0.0025 * (3.0 * position).cos();
        velocity = clip_to(velocity, -MAX_SPEED, MAX_SPEED);
        position += velocity;
        position = clip_to(position, MIN_POSITION, MAX_POSITION);
        if position == MIN_POSITION && velocity < 0.0 {
            velocity = 0.0;
        }
        self.state = [position, velocity];
        let terminated = position >= GOAL_POSITION && velocity >= 0.0;
        let reward = if terminated { 100.0 } else { 0.0 } - 0.1 * force * force;
        Ok((reward, terminated))
    }

    fn observe(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}
