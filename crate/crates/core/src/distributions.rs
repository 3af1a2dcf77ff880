//! Guided action distributions.
//!
//! The guided policy combines a conditional and an unconditional head as
//! `π̂(a|s) ∝ π(a|∅)^(1-γ) · π(a|s)^γ`. For a softmax head this is the softmax
//! of the interpolated logits; for Gaussians with a shared covariance it is
//! the Gaussian at the interpolated mean. Both forms are normalised exactly,
//! so `log_prob` never needs a separate partition function.
//!
//! The value-level types below are used for sampling and evaluation; the
//! `*_var` functions build the same quantities on a [`Tape`] for training.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{log_softmax, softmax, Real};

/// `γ·cond + (1−γ)·uncond`, elementwise.
pub fn guided_logits<T: Real>(cond: &[T], uncond: &[T], gamma: T) -> Result<Vec<T>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch {
            op: "guided_logits",
            lhs: vec![cond.len()],
            rhs: vec![uncond.len()],
        });
    }
    let w_uncond = T::one() - gamma;
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| c * gamma + u * w_uncond)
        .collect())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = T::lit(rng.random::<f64>());
    let mut cum = T::zero();
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if p > T::zero() {
            last_positive = i;
        }
        if u < cum {
            return i;
        }
    }
    last_positive
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedCategorical<T> {
    cond: Vec<T>,
    uncond: Vec<T>,
    gamma: T,
    log_probs: Vec<T>,
}

impl<T: Real> GuidedCategorical<T> {
    pub fn new(cond: Vec<T>, uncond: Vec<T>, gamma: T) -> Result<Self> {
        if cond.iter().chain(&uncond).any(|v| !v.is_finite()) || !gamma.is_finite() {
            return Err(Error::NaN { op: "GuidedCategorical" });
        }
        let logits = guided_logits(&cond, &uncond, gamma)?;
        let log_probs = log_softmax(&logits);
        Ok(Self {
            cond,
            uncond,
            gamma,
            log_probs,
        })
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn num_actions(&self) -> usize {
        self.cond.len()
    }

    pub fn logits(&self) -> Vec<T> {
        guided_logits(&self.cond, &self.uncond, self.gamma).expect("lengths checked at construction")
    }

    pub fn probs(&self) -> Vec<T> {
        softmax(&self.logits())
    }

    pub fn log_prob(&self, action: usize) -> Result<T> {
        self.log_probs.get(action).copied().ok_or(Error::IndexOutOfRange {
            what: "categorical action",
            index: action,
            len: self.log_probs.len(),
        })
    }

    pub fn entropy(&self) -> T {
        -self.log_probs.iter().map(|&lp| lp.exp() * lp).sum::<T>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs(), rng)
    }

    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedGaussian<T> {
    mean_cond: Vec<T>,
    mean_uncond: Vec<T>,
    log_std: Vec<T>,
    gamma: T,
}

fn half_log_two_pi<T: Real>() -> T {
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

impl<T: Real> GuidedGaussian<T> {
    pub fn new(mean_cond: Vec<T>, mean_uncond: Vec<T>, log_std: Vec<T>, gamma: T) -> Result<Self> {
        if mean_cond.len() != mean_uncond.len() || mean_cond.len() != log_std.len() {
            return Err(Error::ShapeMismatch {
                op: "GuidedGaussian",
                lhs: vec![mean_cond.len(), mean_uncond.len()],
                rhs: vec![log_std.len()],
            });
        }
        if mean_cond.iter().chain(&mean_uncond).chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::NaN { op: "GuidedGaussian" });
        }
        Ok(Self {
            mean_cond,
            mean_uncond,
            log_std,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self) -> Vec<T> {
        guided_logits(&self.mean_cond, &self.mean_uncond, self.gamma).expect("lengths checked")
    }

    pub fn log_std(&self) -> &[T] {
        &self.log_std
    }

    /// Diagonal variances; independent of γ.
    pub fn variance(&self) -> Vec<T> {
        self.log_std.iter().map(|&s| (s + s).exp()).collect()
    }

    pub fn log_prob(&self, action: &[T]) -> Result<T> {
        if action.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "GuidedGaussian::log_prob",
                lhs: vec![self.dim()],
                rhs: vec![action.len()],
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NaN { op: "GuidedGaussian::log_prob" });
        }
        let half = T::lit(0.5);
        let c = half_log_two_pi::<T>();
        Ok(action
            .iter()
            .zip(self.mean())
            .zip(&self.log_std)
            .map(|((&a, m), &ls)| {
                let z = (a - m) * (-ls).exp();
                -(half * (z * z)) - ls - c
            })
            .sum())
    }

    pub fn entropy(&self) -> T {
        let c = T::lit(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
        self.log_std.iter().map(|&ls| ls + c).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.mean()
            .into_iter()
            .zip(&self.log_std)
            .map(|(m, &ls)| {
                let n = T::lit(rng.sample::<f64, _>(StandardNormal));
                m + ls.exp() * n
            })
            .collect()
    }
}

/// Evaluates the powered product `N(μu,Σ)^(1−γ)·N(μc,Σ)^γ`, normalised with
/// its closed-form constant, against `N(γμc+(1−γ)μu, Σ)` at `point`.
///
/// Returns `(lhs, rhs)`; the two agree for any γ when Σ is shared.
pub fn gaussian_product_check<T: Real>(
    mean_cond: &[T],
    mean_uncond: &[T],
    log_std: &[T],
    gamma: T,
    point: &[T],
) -> Result<(T, T)> {
    let d = log_std.len();
    if mean_cond.len() != d || mean_uncond.len() != d || point.len() != d {
        return Err(Error::ShapeMismatch {
            op: "gaussian_product_check",
            lhs: vec![mean_cond.len(), mean_uncond.len(), point.len()],
            rhs: vec![d],
        });
    }
    let half = T::lit(0.5);
    let c = half_log_two_pi::<T>();
    let log_density = |x: T, mu: T, ls: T| {
        let z = (x - mu) / ls.exp();
        -half * z * z - ls - c
    };
    let mut log_unnormalised = T::zero();
    let mut log_norm = T::zero();
    let mut log_rhs = T::zero();
    for i in 0..d {
        let (mc, mu, ls, x) = (mean_cond[i], mean_uncond[i], log_std[i], point[i]);
        log_unnormalised += (T::one() - gamma) * log_density(x, mu, ls) + gamma * log_density(x, mc, ls);
        // ∫ N_u^(1-γ) N_c^γ dx = exp(-γ(1-γ)(μc-μu)² / 2σ²)
        let var = (ls + ls).exp();
        let delta = mc - mu;
        log_norm += -(gamma * (T::one() - gamma) * delta * delta) / (T::lit(2.0) * var);
        let m = gamma * mc + (T::one() - gamma) * mu;
        log_rhs += log_density(x, m, ls);
    }
    Ok(((log_unnormalised - log_norm).exp(), log_rhs.exp()))
}

/// Tape version of [`guided_logits`]; `uncond` may be a single row that
/// broadcasts over the batch of `cond`.
pub fn guided_logits_var<T: Real>(tape: &Tape<T>, cond: Var, uncond: Var, gamma: T) -> Result<Var> {
    let c = tape.scale(cond, gamma)?;
    let u = tape.scale(uncond, T::one() - gamma)?;
    tape.add(c, u)
}

/// Per-row log-probability of `actions` under softmax(`logits`).
pub fn categorical_log_prob_var<T: Real>(tape: &Tape<T>, logits: Var, actions: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    tape.gather(lp, actions)
}

/// Per-row Shannon entropy of softmax(`logits`).
pub fn categorical_entropy_var<T: Real>(tape: &Tape<T>, logits: Var) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let p = tape.softmax(logits)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_last(plp)?;
    tape.neg(s)
}

/// Per-row diagonal Gaussian log density of constant `actions` (`[B, d]`).
pub fn gaussian_log_prob_var<T: Real>(tape: &Tape<T>, mean: Var, log_std: Var, actions: &Tensor<T>) -> Result<Var> {
    let a = tape.constant(actions.clone())?;
    let diff = tape.sub(a, mean)?;
    let neg_ls = tape.neg(log_std)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let quad = tape.scale(z2, -T::lit(0.5))?;
    let t = tape.sub(quad, log_std)?;
    let t = tape.offset(t, -half_log_two_pi::<T>())?;
    tape.sum_last(t)
}

/// Differential entropy of the shared-covariance Gaussian (a scalar).
pub fn gaussian_entropy_var<T: Real>(tape: &Tape<T>, log_std: Var) -> Result<Var> {
    let c = T::lit(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
    let e = tape.offset(log_std, c)?;
    tape.sum(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2, PI};

    #[test]
    fn guided_logits_endpoints_and_extrapolation() {
        assert_eq!(guided_logits(&[1.0, 0.0], &[5.0, 5.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(guided_logits(&[1.0, 0.0], &[5.0, 5.0], 0.0).unwrap(), vec![5.0, 5.0]);
        assert_eq!(guided_logits(&[1.0, 0.0], &[0.0, 0.0], 2.0).unwrap(), vec![2.0, 0.0]);
        assert!(guided_logits(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn categorical_log_prob_examples() {
        let d = GuidedCategorical::new(vec![0.0, 0.0], vec![3.0, -1.0], 1.0).unwrap();
        assert!((d.log_prob(0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let d = GuidedCategorical::new(vec![1.0, 0.0], vec![0.0, 0.0], 2.0).unwrap();
        let expected = 2.0 - (E * E + 1.0).ln();
        assert!((d.log_prob(0).unwrap() - expected).abs() < 1e-14);
        assert!(matches!(d.log_prob(2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn gaussian_density_at_own_mean() {
        let d = GuidedGaussian::new(vec![1.0], vec![0.0], vec![0.0], 1.5).unwrap();
        assert_eq!(d.mean(), vec![1.5]);
        let lp = d.log_prob(&[1.5]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let d = GuidedCategorical::new(vec![0.0, 0.0], vec![0.0, 0.0], 1.0).unwrap();
        assert!((d.entropy() - LN_2).abs() < 1e-15);
        let g = GuidedGaussian::new(vec![0.0], vec![0.0], vec![0.0], 1.0).unwrap();
        assert!((g.entropy() - 0.5 * (2.0 * PI * E).ln()).abs() < 1e-15);
        let d = GuidedCategorical::new(vec![2.0, 0.0], vec![0.0, 0.0], 1.0).unwrap();
        let z = 2f64.exp() + 1.0;
        let (p0, p1) = (2f64.exp() / z, 1.0 / z);
        let oracle = -(p0 * p0.ln() + p1 * p1.ln());
        assert!((d.entropy() - oracle).abs() < 1e-14);
    }

    #[test]
    fn degenerate_mass_always_samples_it() {
        let d = GuidedCategorical::new(vec![50.0, -50.0], vec![0.0, 0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| d.sample(&mut rng) == 0));
    }

    #[test]
    fn vanishing_noise_sample_is_mean() {
        let g = GuidedGaussian::<f64>::new(vec![0.3, -1.0], vec![1.0, 1.0], vec![-20.0, -20.0], 1.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = g.sample(&mut rng);
        for (a, m) in s.iter().zip(g.mean()) {
            assert!((a - m).abs() < 1e-6);
        }
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let d = GuidedCategorical::new(vec![2.0, 0.0], vec![0.0, 0.0], 1.0).unwrap();
        let p0 = 2f64.exp() / (2f64.exp() + 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let hits = (0..n).filter(|_| d.sample(&mut rng) == 0).count();
        assert!((hits as f64 / n as f64 - p0).abs() < 0.01);
    }

    #[test]
    fn gaussian_product_examples() {
        for &(gamma, x) in &[(1.0f64, 0.4f64), (0.0, -0.3), (1.3, 0.7)] {
            let (lhs, rhs) = gaussian_product_check(&[1.0], &[0.0], &[0.0], gamma, &[x]).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "γ={gamma}: {lhs} vs {rhs}");
        }
        // γ = 0 reduces to the unconditional density
        let (lhs, _) = gaussian_product_check(&[1.0], &[0.0], &[0.0], 0.0, &[-0.3]).unwrap();
        let n_u = (-0.5 * 0.09f64).exp() / (2.0 * PI).sqrt();
        assert!((lhs - n_u).abs() < 1e-15);
    }

    #[test]
    fn variance_is_independent_of_gamma() {
        let a = GuidedGaussian::new(vec![1.0], vec![0.0], vec![0.3], 1.0).unwrap();
        let b = GuidedGaussian::new(vec![1.0], vec![0.0], vec![0.3], 7.0).unwrap();
        assert_eq!(a.variance(), b.variance());
        assert_eq!(a.variance()[0], 0.6f64.exp());
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let tape = Tape::<f64>::new();
        let c = tape.param(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -2.0]).unwrap()).unwrap();
        let u = tape.param(Tensor::new(vec![1, 3], vec![0.5, 0.2, -0.3]).unwrap()).unwrap();
        let g = guided_logits_var(&tape, c, u, 1.7).unwrap();
        let lp = tape.value(categorical_log_prob_var(&tape, g, &[2, 0]).unwrap());
        let ent = tape.value(categorical_entropy_var(&tape, g).unwrap());
        let rows = [[0.1, -0.4, 0.9], [1.2, 0.0, -2.0]];
        for (i, (row, a)) in rows.iter().zip([2usize, 0]).enumerate() {
            let d = GuidedCategorical::new(row.to_vec(), vec![0.5, 0.2, -0.3], 1.7).unwrap();
            assert_eq!(lp.data()[i], d.log_prob(a).unwrap());
            assert!((ent.data()[i] - d.entropy()).abs() < 1e-15);
        }
    }
}
