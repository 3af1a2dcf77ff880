//! On-policy rollout storage and generalised advantage estimation.
//!
//! Every per-transition array is laid out `[step][env]`, flattened with the
//! env index varying fastest. `done[t]` marks that transition `t` ended its
//! episode (terminated or truncated), so the next stored observation for that
//! env belongs to a fresh episode.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    num_steps: usize,
    num_envs: usize,
    obs_dim: usize,
    act_dim: usize,
    pub obs: Vec<f64>,
    /// Discrete actions are stored as their index (`act_dim == 1`).
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Log-probabilities under the guided policy that sampled the actions.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_T)` for the state following the last stored step, per env.
    pub bootstrap: Option<Vec<f64>>,
    len: usize,
}

impl RolloutBuffer {
    pub fn new(num_steps: usize, num_envs: usize, obs_dim: usize, act_dim: usize) -> Self {
        let n = num_steps * num_envs;
        Self {
            num_steps,
            num_envs,
            obs_dim,
            act_dim,
            obs: Vec::with_capacity(n * obs_dim),
            actions: Vec::with_capacity(n * act_dim),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            bootstrap: None,
            len: 0,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Number of stored transitions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.num_steps * self.num_envs
    }

    /// Appends one lockstep step for all envs.
    pub fn push_step(
        &mut self,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
        rewards: &[f64],
        dones: &[bool],
        log_probs: &[f64],
        values: &[f64],
    ) -> Result<()> {
        if self.is_full() {
            return Err(Error::Invalid("rollout buffer is full".into()));
        }
        let n = self.num_envs;
        for (what, len) in [
            ("obs", obs.len()),
            ("actions", actions.len()),
            ("rewards", rewards.len()),
            ("dones", dones.len()),
            ("log_probs", log_probs.len()),
            ("values", values.len()),
        ] {
            if len != n {
                return Err(Error::Invalid(format!("push_step: {what} has {len} rows, expected {n}")));
            }
        }
        for (o, a) in obs.iter().zip(actions) {
            if o.len() != self.obs_dim || a.len() != self.act_dim {
                return Err(Error::ShapeMismatch {
                    op: "push_step",
                    lhs: vec![self.obs_dim, self.act_dim],
                    rhs: vec![o.len(), a.len()],
                });
            }
            self.obs.extend_from_slice(o);
            self.actions.extend_from_slice(a);
        }
        self.rewards.extend_from_slice(rewards);
        self.dones.extend_from_slice(dones);
        self.log_probs.extend_from_slice(log_probs);
        self.values.extend_from_slice(values);
        self.len += n;
        Ok(())
    }

    pub fn set_bootstrap(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.num_envs {
            return Err(Error::ShapeMismatch {
                op: "set_bootstrap",
                lhs: vec![self.num_envs],
                rhs: vec![values.len()],
            });
        }
        self.bootstrap = Some(values);
        Ok(())
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.rewards.clear();
        self.dones.clear();
        self.log_probs.clear();
        self.values.clear();
        self.bootstrap = None;
        self.len = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    /// `advantages + values`, the value-loss targets.
    pub returns: Vec<f64>,
}

/// GAE over a full buffer.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<AdvantageEstimate> {
    if !buffer.is_full() {
        return Err(Error::Invalid(format!(
            "compute_gae: buffer holds {} of {} transitions",
            buffer.len(),
            buffer.num_steps * buffer.num_envs
        )));
    }
    let bootstrap = buffer
        .bootstrap
        .as_deref()
        .ok_or_else(|| Error::Invalid("compute_gae: missing bootstrap values".into()))?;
    let advantages = gae(
        &buffer.rewards,
        &buffer.values,
        &buffer.dones,
        bootstrap,
        buffer.num_envs,
        gamma,
        lambda,
    )?;
    let returns = advantages.iter().zip(&buffer.values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate { advantages, returns })
}

/// Backward recursion `A_t = δ_t + γλ(1 - done_t) A_{t+1}` on `[step][env]`
/// arrays.
pub fn gae<T: Real>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    bootstrap: &[T],
    num_envs: usize,
    gamma: T,
    lambda: T,
) -> Result<Vec<T>> {
    let unit = T::zero()..=T::one();
    if !unit.contains(&gamma) || !unit.contains(&lambda) {
        return Err(Error::Invalid(format!(
            "gae: discount and lambda must lie in [0, 1], got {} and {}",
            gamma.to_f64_lossy(),
            lambda.to_f64_lossy()
        )));
    }
    let n = rewards.len();
    if num_envs == 0 || !n.is_multiple_of(num_envs) || values.len() != n || dones.len() != n || bootstrap.len() != num_envs {
        return Err(Error::Invalid(format!(
            "gae: inconsistent lengths (rewards {n}, values {}, dones {}, bootstrap {}, envs {num_envs})",
            values.len(),
            dones.len(),
            bootstrap.len()
        )));
    }
    let steps = n / num_envs;
    let mut adv = vec![T::zero(); n];
    let mut last = vec![T::zero(); num_envs];
    for t in (0..steps).rev() {
        for e in 0..num_envs {
            let i = t * num_envs + e;
            let next_value = if t + 1 == steps { bootstrap[e] } else { values[i + num_envs] };
            let not_done = if dones[i] { T::zero() } else { T::one() };
            let delta = rewards[i] + gamma * next_value * not_done - values[i];
            last[e] = delta + gamma * lambda * not_done * last[e];
            adv[i] = last[e];
        }
    }
    Ok(adv)
}

/// Zero mean, unit population standard deviation. Arrays whose spread is
/// below `1e-8` map to zeros.
pub fn standardize<T: Real>(xs: &[T]) -> Vec<T> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = T::from_usize(xs.len()).expect("length fits in the scalar type");
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std > T::lit(1e-8) {
        xs.iter().map(|&x| (x - mean) / std).collect()
    } else {
        vec![T::zero(); xs.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(T²) direct summation for a single env.
    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let t_max = r.len();
        let value = |t: usize| if t == t_max { boot } else { v[t] };
        let delta: Vec<f64> = (0..t_max)
            .map(|t| r[t] + g * value(t + 1) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..t_max)
            .map(|t| {
                let mut acc = 0.0;
                let mut weight = 1.0;
                for k in t..t_max {
                    acc += weight * delta[k];
                    if d[k] {
                        break;
                    }
                    weight *= g * l;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn lambda_zero_is_td_residual() {
        let r = [1.0, -2.0, 0.5, 3.0];
        let v = [0.1, 0.2, -0.3, 0.4];
        let d = [false, true, false, false];
        let a = gae(&r, &v, &d, &[0.7], 1, 0.9, 0.0).unwrap();
        let expect = [
            1.0 + 0.9 * 0.2 - 0.1,
            -2.0 - 0.2,
            0.5 + 0.9 * 0.4 + 0.3,
            3.0 + 0.9 * 0.7 - 0.4,
        ];
        assert_eq!(a, expect);
    }

    #[test]
    fn zero_rewards_and_values_give_zero_advantages() {
        let a = gae(&[0.0; 6], &[0.0; 6], &[false; 6], &[0.0, 0.0], 2, 0.99, 0.95).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_step_toy_matches_double_loop() {
        let a = gae(&[1.0f64; 3], &[0.5; 3], &[false; 3], &[0.5], 1, 0.99, 0.95).unwrap();
        let frozen = [2.81091504875, 1.9307975000000002, 0.9950000000000001];
        for (x, y) in a.iter().zip(frozen) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        let oracle = gae_oracle(&[1.0; 3], &[0.5; 3], &[false; 3], 0.5, 0.99, 0.95);
        for (x, y) in a.iter().zip(oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn interleaved_envs_are_independent() {
        // env 0 and env 1 interleaved must equal each computed alone
        let r0 = [1.0, 0.0, 2.0];
        let r1 = [-1.0, 0.5, 0.0];
        let v0 = [0.3, 0.1, 0.2];
        let v1 = [0.0, -0.4, 0.9];
        let d0 = [false, true, false];
        let d1 = [false, false, false];
        let mut r = vec![];
        let mut v = vec![];
        let mut d = vec![];
        for t in 0..3 {
            r.extend([r0[t], r1[t]]);
            v.extend([v0[t], v1[t]]);
            d.extend([d0[t], d1[t]]);
        }
        let a = gae(&r, &v, &d, &[0.4, -0.2], 2, 0.99, 0.95).unwrap();
        let a0 = gae(&r0, &v0, &d0, &[0.4], 1, 0.99, 0.95).unwrap();
        let a1 = gae(&r1, &v1, &d1, &[-0.2], 1, 0.99, 0.95).unwrap();
        for t in 0..3 {
            assert_eq!(a[2 * t], a0[t]);
            assert_eq!(a[2 * t + 1], a1[t]);
        }
    }

    #[test]
    fn missing_bootstrap_is_an_error() {
        let mut buf = RolloutBuffer::new(1, 1, 1, 1);
        buf.push_step(&[vec![0.0]], &[vec![0.0]], &[1.0], &[false], &[0.0], &[0.0]).unwrap();
        let err = compute_gae(&buf, 0.99, 0.95).unwrap_err();
        assert!(err.to_string().contains("bootstrap"), "{err}");
        buf.set_bootstrap(vec![0.0]).unwrap();
        let est = compute_gae(&buf, 0.99, 0.95).unwrap();
        assert_eq!(est.advantages, vec![1.0]);
        assert_eq!(est.returns, vec![1.0]);
    }

    #[test]
    fn partial_buffer_is_rejected() {
        let mut buf = RolloutBuffer::new(2, 1, 1, 1);
        buf.push_step(&[vec![0.0]], &[vec![0.0]], &[1.0], &[false], &[0.0], &[0.0]).unwrap();
        buf.set_bootstrap(vec![0.0]).unwrap();
        assert!(compute_gae(&buf, 0.99, 0.95).is_err());
    }

    #[test]
    fn buffer_rows_and_clear() {
        let mut buf = RolloutBuffer::new(2, 2, 2, 1);
        buf.push_step(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![0.0], vec![1.0]], &[0.0; 2], &[false; 2], &[0.0; 2], &[0.0; 2])
            .unwrap();
        assert_eq!(buf.obs_row(1), &[3.0, 4.0]);
        assert_eq!(buf.action_row(1), &[1.0]);
        assert!(buf.push_step(&[vec![1.0]], &[vec![0.0]], &[0.0], &[false], &[0.0], &[0.0]).is_err());
        buf.clear();
        assert!(buf.is_empty() && buf.bootstrap.is_none());
    }

    #[test]
    fn out_of_range_discount_is_rejected() {
        assert!(gae(&[0.0], &[0.0], &[false], &[0.0], 1, 1.5, 0.9).is_err());
        assert!(gae(&[0.0], &[0.0], &[false], &[0.0], 1, 0.9, -0.1).is_err());
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0f64, -1.0]), vec![1.0, -1.0]);
        assert_eq!(standardize(&[3.0; 5]), vec![0.0; 5]);
        let s = standardize(&[0.0f64, 1.0, 2.0, 3.0]);
        let frozen = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738];
        for (x, y) in s.iter().zip(frozen) {
            assert!((x - y).abs() < 1e-10);
        }
        let mean: f64 = s.iter().sum::<f64>() / 4.0;
        let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
    }

    fn episode() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, f64, f64, f64)> {
        (1usize..=64)
            .prop_flat_map(|t| {
                (
                    prop::collection::vec(-5.0..5.0f64, t),
                    prop::collection::vec(-5.0..5.0f64, t),
                    prop::collection::vec(prop::bool::weighted(0.1), t),
                    -5.0..5.0f64,
                    0.0..=1.0f64,
                    0.0..=1.0f64,
                )
            })
    }

    proptest! {
        #[test]
        fn recursion_matches_direct_sum((r, v, d, boot, g, l) in episode()) {
            let a = gae(&r, &v, &d, &[boot], 1, g, l).unwrap();
            let o = gae_oracle(&r, &v, &d, boot, g, l);
            for (x, y) in a.iter().zip(&o) {
                prop_assert!((x - y).abs() < 1e-10, "{} vs {}", x, y);
            }
        }

        #[test]
        fn done_cuts_the_suffix((r, v, mut d, boot, g, l) in episode(), cut in 0usize..64, noise in -9.0..9.0f64) {
            let cut = cut % r.len();
            d[cut] = true;
            let a = gae(&r, &v, &d, &[boot], 1, g, l).unwrap();
            let mut r2 = r.clone();
            let mut v2 = v.clone();
            for t in cut + 1..r.len() {
                r2[t] += noise;
                v2[t] -= noise;
            }
            let a2 = gae(&r2, &v2, &d, &[boot + noise], 1, g, l).unwrap();
            prop_assert_eq!(&a[..=cut], &a2[..=cut]);
        }

        #[test]
        fn standardized_moments(xs in prop::collection::vec(-100.0..100.0f64, 2..200)) {
            let s = standardize(&xs);
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(s.iter().all(|&x| x == 0.0) || (std - 1.0).abs() < 1e-6);
        }
    }
}
