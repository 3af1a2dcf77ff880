use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Dynamics};
use crate::error::Result;

/// Cart-pole balancing with explicit Euler integration.
#[derive(Clone, Debug)]
pub struct CartPole {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// half the pole length
    pub length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub theta_threshold: f64,
    pub x_threshold: f64,
    /// `[x, x_dot, theta, theta_dot]`
    pub state: [f64; 4],
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            theta_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            x_threshold: 2.4,
            state: [0.0; 4],
        }
    }
}

impl Dynamics for CartPole {
    const NAME: &'static str = "cartpole";
    const TIME_LIMIT: usize = 500;

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn reset_state(&mut self, rng: &mut ChaCha8Rng) {
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
    }

    fn transition(&mut self, action: &Action) -> Result<(f64, bool)> {
        let push_right = matches!(action, Action::Discrete(1));
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if push_right { self.force_mag } else { -self.force_mag };
        let total_mass = self.mass_cart + self.mass_pole;
        let pole_mass_length = self.mass_pole * self.length;
        let (sin, cos) = theta.sin_cos();

        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.length * (4.0 / 3.0 - self.mass_pole * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

        self.state = [
            x + self.tau * x_dot,
            x_dot + self.tau * x_acc,
            theta + self.tau * theta_dot,
            theta_dot + self.tau * theta_acc,
        ];
        let [x, _, theta, _] = self.state;
        let terminated = x < -self.x_threshold
            || x > self.x_threshold
            || theta < -self.theta_threshold
            || theta > self.theta_threshold;
        Ok((1.0, terminated))
    }

    fn observe(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, EnvState};
    use rand::SeedableRng;

    #[test]
    fn reset_is_small_and_deterministic() {
        let mut env = EnvState::new(CartPole::default());
        let a = env.reset(Some(5));
        let b = env.reset(Some(5));
        assert_eq!(a, b);
        for seed in 0..100 {
            let obs = env.reset(Some(seed));
            assert!(obs.iter().all(|v| (-0.05..=0.05).contains(v)));
        }
    }

    #[test]
    fn push_right_from_rest() {
        let mut env = EnvState::new(CartPole::default());
        env.reset(Some(0));
        env.dynamics_mut().state = [0.0; 4];
        let s = env.step(&Action::Discrete(1)).unwrap();
        assert!(s.obs[1] > 0.0, "cart velocity {}", s.obs[1]);
        assert!(s.obs[3] < 0.0, "pole angular velocity {}", s.obs[3]);
        assert_eq!(s.reward, 1.0);
    }

    #[test]
    fn random_policy_return_band() {
        // Monte-Carlo sanity band for the implemented dynamics.
        let mut env = EnvState::new(CartPole::default());
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let episodes = 1000;
        let mut total = 0.0;
        for ep in 0..episodes {
            env.reset(Some(ep));
            loop {
                let s = env.step(&Action::Discrete(rng.random_range(0..2))).unwrap();
                total += s.reward;
                if s.done() {
                    break;
                }
            }
        }
        let mean = total / episodes as f64;
        assert!((20.0..=25.0).contains(&mean), "mean random return {mean}");
    }

    #[test]
    fn truncates_at_time_limit() {
        let mut env = EnvState::new(CartPole::default());
        env.reset(Some(0));
        // hold the pole upright by teleporting back to rest each step
        let mut last = None;
        for _ in 0..500 {
            env.dynamics_mut().state = [0.0; 4];
            last = Some(env.step(&Action::Discrete(0)).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated);
        assert_eq!(env.steps_elapsed(), 500);
    }
}
