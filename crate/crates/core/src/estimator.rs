//! The telescoping multi-level multi-fidelity estimator
//!
//! `Y = a_1 P_1^(N_1) + Σ_{l≥2} [a_l P_l^(N_l) − a_{l−1} P_{l−1}^(N_l)]`
//!
//! and its replication harness. Plain MC (one level), MLMC (`a ≡ 1`, one
//! model at several time steps) and MFMC (several models at one time step)
//! are all configurations of the same engine.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_grid, select_channels, simulate_into, validate_cost_order, LevelSpec, Policy, Trajectory, Workspace,
    ZeroPolicy,
};
use crate::noise::{whole_steps, NoiseGrid, NoiseSource};
use crate::sum::{exact_sum, ordered_mean, sample_variance};

/// A deterministic scalar quantity of interest on a trajectory.
pub trait Functional: Send + Sync {
    fn evaluate(&self, traj: &Trajectory) -> f64;
}

impl<F> Functional for F
where
    F: Fn(&Trajectory) -> f64 + Send + Sync,
{
    fn evaluate(&self, traj: &Trajectory) -> f64 {
        self(traj)
    }
}

/// A level paired with its functional and the policy it is simulated under.
#[derive(Clone)]
pub struct Level {
    pub spec: LevelSpec,
    pub functional: Arc<dyn Functional>,
    pub policy: Arc<dyn Policy>,
}

impl Level {
    pub fn new(spec: LevelSpec, functional: Arc<dyn Functional>) -> Self {
        Self {
            spec,
            functional,
            policy: Arc::new(ZeroPolicy),
        }
    }

    pub fn with_policy(mut self, policy: Arc<dyn Policy>) -> Self {
        self.policy = policy;
        self
    }
}

impl std::fmt::Debug for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Level")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Adjacent levels share paths, and each level's paths are a prefix of
    /// the level below.
    Coupled,
    /// Every mean uses its own disjoint block of paths.
    Independent,
}

#[derive(Debug, Clone)]
pub struct MlmfConfig {
    pub levels: Vec<Level>,
    pub coefficients: Vec<f64>,
    pub counts: Vec<usize>,
    pub coupling: Coupling,
    pub horizon: f64,
    pub seed: u64,
}

impl MlmfConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels.len();
        if l == 0 {
            return Err(Error::config("at least one level is required"));
        }
        for level in &self.levels {
            level.spec.validate()?;
        }
        let specs: Vec<_> = self.levels.iter().map(|lv| lv.spec.clone()).collect();
        validate_cost_order(&specs)?;
        validate_coefficients(&self.coefficients, l)?;
        validate_counts(&self.counts, l)?;
        NoisePlan::new(&specs, self.horizon, self.seed).map(|_| ())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn total_cost(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.counts)
            .map(|(lv, &n)| n as f64 * lv.spec.cost)
            .sum()
    }
}

pub(crate) fn validate_coefficients(a: &[f64], levels: usize) -> Result<()> {
    if a.len() != levels {
        return Err(Error::Coefficients(format!(
            "expected {levels} coefficients, got {}",
            a.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Coefficients("coefficients must be finite".into()));
    }
    if a[levels - 1] != 1.0 {
        return Err(Error::Coefficients(format!(
            "the top-level coefficient must be 1, got {}",
            a[levels - 1]
        )));
    }
    Ok(())
}

pub(crate) fn validate_counts(n: &[usize], levels: usize) -> Result<()> {
    if n.len() != levels {
        return Err(Error::SampleCounts(format!(
            "expected {levels} counts, got {}",
            n.len()
        )));
    }
    if n.contains(&0) {
        return Err(Error::SampleCounts("every level needs at least one sample".into()));
    }
    if n.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::SampleCounts(format!("counts {n:?} must be non-increasing")));
    }
    Ok(())
}

/// The shared finest grid and each level's coarsening factor.
#[derive(Debug, Clone)]
pub(crate) struct NoisePlan {
    pub source: NoiseSource,
    pub factors: Vec<usize>,
}

impl NoisePlan {
    pub fn new(specs: &[LevelSpec], horizon: f64, seed: u64) -> Result<Self> {
        let dt_fine = specs.iter().map(|s| s.dt).fold(f64::INFINITY, f64::min);
        let m = specs
            .iter()
            .flat_map(|s| s.noise_channels.iter().copied())
            .max()
            .map_or(1, |c| c + 1);
        let source = NoiseSource::new(seed, m, dt_fine, horizon)?;
        let factors = specs
            .iter()
            .map(|s| {
                whole_steps(s.dt, dt_fine).ok_or_else(|| {
                    Error::config(format!(
                        "level {}: dt {} is not a multiple of the finest dt {dt_fine}",
                        s.level_index, s.dt
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, &f) in specs.iter().zip(&factors) {
            if source.n_steps() % f != 0 {
                return Err(Error::config(format!(
                    "level {}: dt {} does not divide the horizon {horizon}",
                    s.level_index, s.dt
                )));
            }
        }
        Ok(Self { source, factors })
    }
}

#[derive(Default)]
struct Scratch {
    traj: Trajectory,
    ws: Workspace,
    fine: Vec<f64>,
    incr: Vec<f64>,
}

/// Functional values of one level on the given path indices, in order.
pub(crate) fn level_values(
    level: &Level,
    xi0: &[f64],
    source: &NoiseSource,
    factor: usize,
    paths: Range<u64>,
) -> Result<Vec<f64>> {
    paths
        .into_par_iter()
        .map_init(Scratch::default, |s, p| {
            source.level_increments(p, &level.spec.noise_channels, factor, &mut s.fine, &mut s.incr);
            simulate_into(
                &level.spec,
                xi0,
                0.0,
                level.policy.as_ref(),
                &s.incr,
                p,
                &mut s.traj,
                &mut s.ws,
            )?;
            Ok(level.functional.evaluate(&s.traj))
        })
        .collect()
}

/// Evaluate every level on the same `n` coupled paths.
pub fn coupled_samples(levels: &[Level], x0_full: &[f64], horizon: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let specs: Vec<_> = levels.iter().map(|l| l.spec.clone()).collect();
    for s in &specs {
        s.validate()?;
    }
    let plan = NoisePlan::new(&specs, horizon, seed)?;
    levels
        .iter()
        .zip(&plan.factors)
        .map(|(lv, &f)| {
            let xi0 = lv.spec.initial_feature(x0_full)?;
            level_values(lv, &xi0, &plan.source, f, 0..n as u64)
        })
        .collect()
}

/// Sample mean and unbiased sample variance of a level on named grid paths.
pub fn level_mean(level: &Level, x0_full: &[f64], grid: &NoiseGrid, path_indices: &[usize]) -> Result<(f64, f64)> {
    if path_indices.is_empty() {
        return Err(Error::EmptySample);
    }
    level.spec.validate()?;
    check_grid(&level.spec, grid)?;
    if let Some(&p) = path_indices.iter().find(|&&p| p >= grid.n_paths()) {
        return Err(Error::config(format!(
            "path {p} is outside a grid of {} paths",
            grid.n_paths()
        )));
    }
    let xi0 = level.spec.initial_feature(x0_full)?;
    let values: Vec<f64> = path_indices
        .par_iter()
        .map_init(Scratch::default, |s, &p| {
            let incr = select_channels(grid, p, &level.spec.noise_channels);
            simulate_into(
                &level.spec,
                &xi0,
                0.0,
                level.policy.as_ref(),
                &incr,
                p as u64,
                &mut s.traj,
                &mut s.ws,
            )?;
            Ok(level.functional.evaluate(&s.traj))
        })
        .collect::<Result<_>>()?;
    let mean = ordered_mean(&values);
    Ok((mean, sample_variance(&values, mean)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level_index: usize,
    pub samples: usize,
    /// `P_l^(N_l)`.
    pub mean: f64,
    /// `P_l^(N_{l+1})`, absent for the top level.
    pub mean_next: Option<f64>,
    /// Sample variance of the `N_l` values.
    pub variance: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// The raw, unbiased estimate.
    pub value: f64,
    /// `value` clipped to `[0, 1]`, meaningful for probabilities only.
    pub clamped: f64,
    /// `a_1 P_1`, then `a_l P_l^(N_l) − a_{l−1} P_{l−1}^(N_l)`.
    pub per_level_terms: Vec<f64>,
    pub levels: Vec<LevelSummary>,
    pub coefficients: Vec<f64>,
    pub counts: Vec<usize>,
    pub coupling: Coupling,
    /// `Σ N_l C_l`.
    pub total_cost: f64,
    /// Cost of every simulated path; exceeds `total_cost` without coupling.
    pub simulated_cost: f64,
    pub seed: u64,
}

pub fn mlmf_estimate(config: &MlmfConfig, x0_full: &[f64]) -> Result<EstimateReport> {
    config.validate()?;
    let specs: Vec<_> = config.levels.iter().map(|l| l.spec.clone()).collect();
    let plan = NoisePlan::new(&specs, config.horizon, config.seed)?;
    let l = config.levels.len();
    let n = &config.counts;
    let a = &config.coefficients;

    let mut means = Vec::with_capacity(l);
    let mut means_next = Vec::with_capacity(l);
    let mut variances = Vec::with_capacity(l);
    let mut simulated = 0usize;
    let mut offset = 0u64;
    for (i, level) in config.levels.iter().enumerate() {
        let xi0 = level.spec.initial_feature(x0_full)?;
        let f = plan.factors[i];
        let next = (i + 1 < l).then(|| n[i + 1]);
        match config.coupling {
            Coupling::Coupled => {
                let v = level_values(level, &xi0, &plan.source, f, 0..n[i] as u64)?;
                let mean = ordered_mean(&v);
                means_next.push(next.map(|k| ordered_mean(&v[..k])));
                variances.push(sample_variance(&v, mean));
                means.push(mean);
                simulated += n[i];
            }
            Coupling::Independent => {
                let end = offset + n[i] as u64;
                let v = level_values(level, &xi0, &plan.source, f, offset..end)?;
                offset = end;
                let mean = ordered_mean(&v);
                variances.push(sample_variance(&v, mean));
                means.push(mean);
                simulated += n[i];
                means_next.push(match next {
                    Some(k) => {
                        let end = offset + k as u64;
                        let w = level_values(level, &xi0, &plan.source, f, offset..end)?;
                        offset = end;
                        simulated += k;
                        Some(ordered_mean(&w))
                    }
                    None => None,
                });
            }
        }
    }

    let mut signed = vec![a[0] * means[0]];
    let mut per_level_terms = vec![a[0] * means[0]];
    for i in 1..l {
        let hi = a[i] * means[i];
        let lo = a[i - 1] * means_next[i - 1].expect("lower levels have a next mean");
        signed.push(hi);
        signed.push(-lo);
        per_level_terms.push(hi - lo);
    }
    let value = exact_sum(signed);

    let levels = config
        .levels
        .iter()
        .enumerate()
        .map(|(i, lv)| LevelSummary {
            level_index: lv.spec.level_index,
            samples: n[i],
            mean: means[i],
            mean_next: means_next[i],
            variance: variances[i],
            cost: lv.spec.cost,
        })
        .collect();
    let simulated_cost = match config.coupling {
        Coupling::Coupled => config.total_cost(),
        Coupling::Independent => {
            let mut c = 0.0;
            for i in 0..l {
                c += n[i] as f64 * specs[i].cost;
                if i + 1 < l {
                    c += n[i + 1] as f64 * specs[i].cost;
                }
            }
            debug_assert_eq!(simulated, n.iter().sum::<usize>() + n[1..].iter().sum::<usize>());
            c
        }
    };

    Ok(EstimateReport {
        value,
        clamped: value.clamp(0.0, 1.0),
        per_level_terms,
        levels,
        coefficients: a.clone(),
        counts: n.clone(),
        coupling: config.coupling,
        total_cost: config.total_cost(),
        simulated_cost,
        seed: config.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub n_reps: usize,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `mean`.
    pub standard_error: f64,
    pub mean_abs_error: Option<f64>,
    pub mse: Option<f64>,
}

/// Estimates with seeds `base_seed, base_seed + 1, …`, in seed order.
pub fn replicate_reports(
    config: &MlmfConfig,
    x0_full: &[f64],
    n_reps: usize,
    base_seed: u64,
) -> Result<Vec<EstimateReport>> {
    if n_reps < 2 {
        return Err(Error::config("replication needs at least two runs"));
    }
    config.validate()?;
    (0..n_reps as u64)
        .into_par_iter()
        .map(|r| mlmf_estimate(&config.with_seed(base_seed.wrapping_add(r)), x0_full))
        .collect()
}

pub fn replicate(
    config: &MlmfConfig,
    x0_full: &[f64],
    n_reps: usize,
    base_seed: u64,
    reference: Option<f64>,
) -> Result<ReplicationSummary> {
    let values: Vec<f64> = replicate_reports(config, x0_full, n_reps, base_seed)?
        .into_iter()
        .map(|r| r.value)
        .collect();
    summarize(&values, reference)
}

/// Cross-replication statistics of a set of estimates.
pub fn summarize(values: &[f64], reference: Option<f64>) -> Result<ReplicationSummary> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = values.len();
    let mean = ordered_mean(values);
    let variance = sample_variance(values, mean);
    let (mean_abs_error, mse) = match reference {
        Some(r) => (
            Some(values.iter().map(|v| (v - r).abs()).sum::<f64>() / n as f64),
            Some(values.iter().map(|v| (v - r) * (v - r)).sum::<f64>() / n as f64),
        ),
        None => (None, None),
    };
    Ok(ReplicationSummary {
        n_reps: n,
        mean,
        variance,
        standard_error: (variance / n as f64).sqrt(),
        mean_abs_error,
        mse,
    })
}
