//! Reference values computed without the library: a plain Euler loop over
//! the five-dimensional safety system, driven by one sequential RNG.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub const K: [f64; 5] = [1.0, 0.7, 0.6, 0.5, 0.4];

/// Moments of the safety indicators of several `(dimension, dt)` rungs,
/// all driven by the same fine-grid Brownian increments.
#[derive(Debug, Clone)]
pub struct SafetyMoments {
    pub n: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Correlation of each rung with the last one.
    pub rho: Vec<f64>,
}

impl SafetyMoments {
    pub fn sigma(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn standard_error(&self, i: usize) -> f64 {
        (self.variance[i] / self.n as f64).sqrt()
    }

    pub fn top(&self) -> usize {
        self.mean.len() - 1
    }
}

/// Brute-force Monte Carlo over `n` paths of `dx = −K x dt + K dW`,
/// `x(0) = 1`, on `[0, horizon]`. A path is safe when every simulated
/// coordinate stays strictly positive at every grid point.
pub fn safety_moments(rungs: &[(usize, f64)], horizon: f64, n: usize, seed: u64) -> SafetyMoments {
    let fine = rungs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let n_fine = (horizon / fine).round() as usize;
    let width = rungs.iter().map(|r| r.0).max().unwrap();
    let factors: Vec<usize> = rungs.iter().map(|r| (r.1 / fine).round() as usize).collect();
    let l = rungs.len();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut z = vec![0.0; n_fine * width];
    let mut hits = vec![0u64; l];
    let mut joint = vec![0u64; l];
    let mut safe = vec![false; l];
    let scale = fine.sqrt();
    for _ in 0..n {
        for v in z.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = e * scale;
        }
        for (r, &(d, dt)) in rungs.iter().enumerate() {
            let f = factors[r];
            let mut x = [1.0f64; 5];
            let mut ok = true;
            for s in 0..n_fine / f {
                for c in 0..d {
                    let mut dw = 0.0;
                    for j in 0..f {
                        dw += z[(s * f + j) * width + c];
                    }
                    x[c] += -K[c] * x[c] * dt + K[c] * dw;
                    if x[c] <= 0.0 {
                        ok = false;
                    }
                }
            }
            safe[r] = ok;
        }
        for r in 0..l {
            if safe[r] {
                hits[r] += 1;
                if safe[l - 1] {
                    joint[r] += 1;
                }
            }
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = hits.iter().map(|&h| h as f64 / nf).collect();
    let variance: Vec<f64> = mean.iter().map(|p| p * (1.0 - p) * nf / (nf - 1.0)).collect();
    let rho = (0..l)
        .map(|r| {
            let cov = (joint[r] as f64 / nf - mean[r] * mean[l - 1]) * nf / (nf - 1.0);
            cov / (variance[r] * variance[l - 1]).sqrt()
        })
        .collect();
    SafetyMoments { n, mean, variance, rho }
}

/// Sample mean, unbiased variance and standard error of the mean.
pub fn moments(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var, (var / n).sqrt())
}

/// Standard error of the unbiased sample variance, from the fourth
/// central moment.
pub fn variance_standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let (mean, var, _) = moments(values);
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).sqrt()
}

/// Sample covariance of paired values and its standard error.
pub fn covariance(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let (m, var, _) = moments(&prods);
    (m * n / (n - 1.0), (var / n).sqrt())
}
