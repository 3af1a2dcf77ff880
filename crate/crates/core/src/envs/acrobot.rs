use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip_to, Action, ActionSpace, Dynamics};
use crate::error::Result;

/// Two-link underactuated swing-up ("book" dynamics, one RK4 step per action).
#[derive(Clone, Debug)]
pub struct Acrobot {
    pub dt: f64,
    /// `[theta1, theta2, dtheta1, dtheta2]`
    pub state: [f64; 4],
}

const LINK_LENGTH_1: f64 = 1.0;
const LINK_MASS_1: f64 = 1.0;
const LINK_MASS_2: f64 = 1.0;
const LINK_COM_POS_1: f64 = 0.5;
const LINK_COM_POS_2: f64 = 0.5;
const LINK_MOI: f64 = 1.0;
const MAX_VEL_1: f64 = 4.0 * PI;
const MAX_VEL_2: f64 = 9.0 * PI;
const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];
const GRAVITY: f64 = 9.8;

impl Default for Acrobot {
    fn default() -> Self {
        Self { dt: 0.2, state: [0.0; 4] }
    }
}

fn wrap(mut x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    while x > hi {
        x -= span;
    }
    while x < lo {
        x += span;
    }
    x
}

fn derivs(s: [f64; 4], torque: f64) -> [f64; 4] {
    let (m1, m2) = (LINK_MASS_1, LINK_MASS_2);
    let (l1, lc1, lc2) = (LINK_LENGTH_1, LINK_COM_POS_1, LINK_COM_POS_2);
    let (i1, i2) = (LINK_MOI, LINK_MOI);
    let g = GRAVITY;
    let [theta1, theta2, dtheta1, dtheta2] = s;
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
    let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
        - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
        + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
        + phi2;
    let ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
    [dtheta1, dtheta2, ddtheta1, ddtheta2]
}

fn rk4(s: [f64; 4], torque: f64, dt: f64) -> [f64; 4] {
    let add = |a: [f64; 4], b: [f64; 4], h: f64| std::array::from_fn(|i| a[i] + h * b[i]);
    let k1 = derivs(s, torque);
    let k2 = derivs(add(s, k1, dt / 2.0), torque);
    let k3 = derivs(add(s, k2, dt / 2.0), torque);
    let k4 = derivs(add(s, k3, dt), torque);
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

impl Acrobot {
    pub fn at_goal(&self) -> bool {
        let [t1, t2, _, _] = self.state;
        -t1.cos() - (t2 + t1).cos() > 1.0
    }
}

impl Dynamics for Acrobot {
    const NAME: &'static str = "acrobot";
    const TIME_LIMIT: usize = 500;

    fn obs_dim(&self) -> usize {
        6
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn reset_state(&mut self, rng: &mut ChaCha8Rng) {
        for s in &mut self.state {
            *s = rng.random_range(-0.1..0.1);
        }
    }

    fn transition(&mut self, action: &Action) -> Result<(f64, bool)> {
        let torque = match action {
            Action::Discrete(a) => TORQUES[*a],
            Action::Continuous(_) => unreachable!("validated by EnvState"),
        };
        let ns = rk4(self.state, torque, self.dt);
        self.state = [
            wrap(ns[0], -PI, PI),
            wrap(ns[1], -PI, PI),
            clip_to(ns[2], -MAX_VEL_1, MAX_VEL_1),
            clip_to(ns[3], -MAX_VEL_2, MAX_VEL_2),
        ];
        let terminal = self.at_goal();
        Ok((if terminal { 0.0 } else { -1.0 }, terminal))
    }

    fn observe(&self) -> Vec<f64> {
        let [t1, t2, d1, d2] = self.state;
        vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2]
    }
}
