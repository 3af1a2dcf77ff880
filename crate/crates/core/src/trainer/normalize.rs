//! Running observation and reward normalisation for continuous tasks.

use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-8;
const CLIP: f64 = 10.0;

/// Parallel-merge running mean and variance, starting from a tiny pseudo
/// count so the first batch dominates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let dim = self.mean.len();
        let mut b_mean = vec![0.0; dim];
        for row in batch {
            for (m, x) in b_mean.iter_mut().zip(row) {
                *m += x / n;
            }
        }
        let mut b_var = vec![0.0; dim];
        for row in batch {
            for ((v, x), m) in b_var.iter_mut().zip(row).zip(&b_mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = b_mean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + b_var[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    /// `(x - mean) / sqrt(var + 1e-8)`, clipped to ±10.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v + EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }
}

/// Scales rewards by the running std of the per-env discounted return,
/// clipped to ±10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub stats: RunningMeanStd,
    pub returns: Vec<f64>,
    pub discount: f64,
}

impl RewardNormalizer {
    pub fn new(num_envs: usize, discount: f64) -> Self {
        Self {
            stats: RunningMeanStd::new(1),
            returns: vec![0.0; num_envs],
            discount,
        }
    }

    pub fn normalize(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        for (g, r) in self.returns.iter_mut().zip(rewards) {
            *g = *g * self.discount + r;
        }
        let batch: Vec<Vec<f64>> = self.returns.iter().map(|&g| vec![g]).collect();
        self.stats.update(&batch);
        for (g, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *g = 0.0;
            }
        }
        let scale = (self.stats.var[0] + EPS).sqrt();
        rewards.iter().map(|r| (r / scale).clamp(-CLIP, CLIP)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_match_batch_moments() {
        let data: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * i) as f64 * 0.01]).collect();
        let mut rms = RunningMeanStd::new(2);
        for chunk in data.chunks(7) {
            rms.update(chunk);
        }
        for d in 0..2 {
            let xs: Vec<f64> = data.iter().map(|r| r[d]).collect();
            let m = xs.iter().sum::<f64>() / 50.0;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
            assert!((rms.mean[d] - m).abs() < 1e-3 * m.abs().max(1.0));
            assert!((rms.var[d] - v).abs() < 1e-3 * v.max(1.0));
        }
    }

    #[test]
    fn normalised_values_are_clipped() {
        let mut rms = RunningMeanStd::new(1);
        rms.update(&[vec![0.0], vec![0.0], vec![0.001]]);
        assert_eq!(rms.normalize(&[1e6]), vec![10.0]);
        assert_eq!(rms.normalize(&[-1e6]), vec![-10.0]);
    }

    #[test]
    fn reward_scale_tracks_return_spread() {
        let mut rn = RewardNormalizer::new(1, 0.99);
        let mut out = Vec::new();
        for t in 0..1000 {
            out.extend(rn.normalize(&[-5.0], &[t % 200 == 199]));
        }
        assert!(out.iter().all(|r| r.is_finite() && r.abs() <= 10.0));
        assert!(out.last().unwrap().abs() < 5.0);
    }
}
