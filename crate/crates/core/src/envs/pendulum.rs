use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip_to, Action, ActionSpace, Dynamics};
use crate::error::Result;

/// Torque-limited pendulum swing-up; θ = 0 is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub max_speed: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub g: f64,
    pub m: f64,
    pub l: f64,
    /// `[theta, theta_dot]`
    pub state: [f64; 2],
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            max_speed: 8.0,
            max_torque: 2.0,
            dt: 0.05,
            g: 10.0,
            m: 1.0,
            l: 1.0,
            state: [0.0; 2],
        }
    }
}

pub(crate) fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    /// `½θ̇² + (3g/2l)·cos θ`, conserved by the continuous-time dynamics
    /// without torque (up to the constant factor `ml²/3`).
    pub fn energy(&self) -> f64 {
        let [th, thdot] = self.state;
        0.5 * thdot * thdot + 3.0 * self.g / (2.0 * self.l) * th.cos()
    }
}

impl Dynamics for Pendulum {
    const NAME: &'static str = "pendulum";
    const TIME_LIMIT: usize = 200;

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Box {
            low: vec![-self.max_torque],
            high: vec![self.max_torque],
        }
    }

    fn reset_state(&mut self, rng: &mut ChaCha8Rng) {
        self.state = [rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)];
    }

    fn transition(&mut self, action: &Action) -> Result<(f64, bool)> {
        let u = match action {
            Action::Continuous(a) => clip_to(a[0], -self.max_torque, self.max_torque),
            Action::Discrete(_) => unreachable!("validated by EnvState"),
        };
        let [th, thdot] = self.state;
        let cost = angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
        let new_thdot = thdot
            + (3.0 * self.g / (2.0 * self.l) * th.sin() + 3.0 / (self.m * self.l * self.l) * u) * self.dt;
        let new_thdot = clip_to(new_thdot, -self.max_speed, self.max_speed);
        self.state = [th + new_thdot * self.dt, new_thdot];
        Ok((-cost, false))
    }

    fn observe(&self) -> Vec<f64> {
        let [th, thdot] = self.state;
        vec![th.cos(), th.sin(), thdot]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, EnvState};

    #[test]
    fn hanging_rest_is_a_fixed_point() {
        let mut env = EnvState::new(Pendulum::default());
        env.reset(Some(0));
        env.dynamics_mut().state = [PI, 0.0];
        for _ in 0..100 {
            let s = env.step(&Action::Continuous(vec![0.0])).unwrap();
            assert!((s.reward + PI * PI).abs() < 1e-9, "reward {}", s.reward);
        }
        let [th, thdot] = env.dynamics().state;
        assert!((th - PI).abs() < 1e-9 && thdot.abs() < 1e-9);
    }

    #[test]
    fn energy_drift_per_step_is_small_without_torque() {
        // semi-implicit Euler; a small swing around the bottom keeps the
        // per-step relative energy error well under 1e-3
        let mut env = EnvState::new(Pendulum::default());
        env.reset(Some(0));
        env.dynamics_mut().state = [PI - 0.05, 0.0];
        let mut e = env.dynamics().energy();
        for _ in 0..200 {
            env.step(&Action::Continuous(vec![0.0])).unwrap();
            let e_next = env.dynamics().energy();
            assert!(((e_next - e) / e).abs() < 1e-3);
            e = e_next;
        }
    }

    #[test]
    fn episodes_truncate_at_two_hundred() {
        let mut env = EnvState::new(Pendulum::default());
        env.reset(Some(3));
        for i in 1..=200 {
            let s = env.step(&Action::Continuous(vec![1.0])).unwrap();
            assert!(!s.terminated);
            assert_eq!(s.truncated, i == 200);
        }
    }

    #[test]
    fn torque_is_clipped() {
        let mut a = Pendulum::default();
        let mut b = Pendulum::default();
        a.state = [0.3, 0.1];
        b.state = [0.3, 0.1];
        a.transition(&Action::Continuous(vec![10.0])).unwrap();
        b.transition(&Action::Continuous(vec![2.0])).unwrap();
        assert_eq!(a.state, b.state);
    }
}
