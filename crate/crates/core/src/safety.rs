//! Long-horizon safety probability: the indicator functional, its MLMF
//! estimate, and a subset-simulation baseline.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{mlmf_estimate, Coupling, EstimateReport, Functional, Level, MlmfConfig};
use crate::model::{simulate_into, LevelSpec, Payoff, Policy, Trajectory, Workspace, ZeroPolicy};
use crate::noise::{derive_seed, stream_rng};

#[derive(Clone)]
pub struct SafetySpec {
    pub horizon: f64,
    /// Nominal policy on each level's feature state.
    pub nominal_policy: Arc<dyn Policy>,
}

impl SafetySpec {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            nominal_policy: Arc::new(ZeroPolicy),
        }
    }
}

impl std::fmt::Debug for SafetySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SafetySpec")
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Smallest payoff along the trajectory, including the initial state.
pub fn safety_margin(level: &LevelSpec, traj: &Trajectory) -> f64 {
    if let Payoff::MinCoordinate = level.payoff {
        return traj.states.iter().copied().fold(f64::INFINITY, f64::min);
    }
    (0..=traj.n_steps())
        .map(|k| level.payoff.eval(traj.state(k)))
        .fold(f64::INFINITY, f64::min)
}

/// 1 if the payoff stays strictly positive at every grid point, else 0.
pub fn safety_functional(level: &LevelSpec) -> Arc<dyn Functional> {
    let spec = level.clone();
    Arc::new(move |traj: &Trajectory| if safety_margin(&spec, traj) > 0.0 { 1.0 } else { 0.0 })
}

pub fn safety_levels(spec: &SafetySpec, levels: &[LevelSpec]) -> Vec<Level> {
    levels
        .iter()
        .map(|l| Level::new(l.clone(), safety_functional(l)).with_policy(Arc::clone(&spec.nominal_policy)))
        .collect()
}

pub fn safety_config(
    spec: &SafetySpec,
    levels: &[LevelSpec],
    coefficients: Vec<f64>,
    counts: Vec<usize>,
    coupling: Coupling,
    seed: u64,
) -> MlmfConfig {
    MlmfConfig {
        levels: safety_levels(spec, levels),
        coefficients,
        counts,
        coupling,
        horizon: spec.horizon,
        seed,
    }
}

/// MLMF safety-probability estimate; `clamped` holds the value cut to `[0, 1]`.
pub fn estimate_safety(config: &MlmfConfig, x0_full: &[f64]) -> Result<EstimateReport> {
    mlmf_estimate(config, x0_full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    /// Estimated probability of staying safe.
    pub probability: f64,
    pub failure_probability: f64,
    /// `P(F_1)`, then `P(F_k | F_{k−1})` for `F_k = {margin ≤ p_k}`.
    pub conditionals: Vec<f64>,
    /// Trajectories actually simulated.
    pub simulations: usize,
    pub cost: f64,
    /// A stage found no failing samples to continue from.
    pub degenerate: bool,
}

/// Subset simulation over the nested failure sets `{margin ≤ p_k}`.
///
/// Stage 1 is plain Monte Carlo. Each later stage restarts Markov chains from
/// the samples that reached the previous threshold, proposing whole noise
/// paths with a preconditioned Crank–Nicolson move (which keeps the Gaussian
/// noise law invariant) and accepting only proposals that still reach the
/// previous threshold.
#[allow(clippy::too_many_arguments)]
pub fn subset_simulation(
    spec: &SafetySpec,
    level: &LevelSpec,
    x0_full: &[f64],
    thresholds: &[f64],
    n_per_stage: usize,
    seed: u64,
) -> Result<SubsetResult> {
    validate_thresholds(thresholds)?;
    if n_per_stage < 2 {
        return Err(Error::SampleCounts(
            "subset simulation needs at least two samples per stage".into(),
        ));
    }
    level.validate()?;
    let steps = level.steps_in(spec.horizon)?;
    let xi0 = level.initial_feature(x0_full)?;
    let width = steps * level.noise_dim();
    let scale = level.dt.sqrt();
    let policy = spec.nominal_policy.as_ref();

    let margin_of = |z: &[f64], path: u64, s: &mut Scratch| -> Result<f64> {
        s.incr.clear();
        s.incr.extend(z.iter().map(|v| v * scale));
        simulate_into(level, &xi0, 0.0, policy, &s.incr, path, &mut s.traj, &mut s.ws)?;
        Ok(safety_margin(level, &s.traj))
    };

    // Stage 1: independent samples.
    let key0 = derive_seed(seed, 0);
    let mut samples: Vec<(Vec<f64>, f64)> = (0..n_per_stage as u64)
        .into_par_iter()
        .map_init(Scratch::default, |s, i| {
            let mut rng = stream_rng(key0, i);
            let z: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = margin_of(&z, i, s)?;
            Ok((z, g))
        })
        .collect::<Result<_>>()?;
    let mut simulations = n_per_stage;
    let mut conditionals = Vec::with_capacity(thresholds.len());
    let mut degenerate = false;
    let beta: f64 = 0.5;
    let keep = (1.0 - beta * beta).sqrt();

    for (k, &p) in thresholds.iter().enumerate() {
        if k > 0 {
            let prev = thresholds[k - 1];
            let seeds: Vec<&(Vec<f64>, f64)> = samples.iter().filter(|(_, g)| *g <= prev).collect();
            let n_seeds = seeds.len();
            let key = derive_seed(seed, k as u64);
            let chains: Vec<Vec<(Vec<f64>, f64)>> = seeds
                .par_iter()
                .enumerate()
                .map_init(Scratch::default, |s, (j, start)| {
                    let len = n_per_stage / n_seeds + usize::from(j < n_per_stage % n_seeds);
                    let mut rng = stream_rng(key, j as u64);
                    let mut cur = (*start).clone();
                    let mut chain = Vec::with_capacity(len);
                    for step in 0..len {
                        if step > 0 {
                            let prop: Vec<f64> = cur
                                .0
                                .iter()
                                .map(|v| {
                                    let e: f64 = StandardNormal.sample(&mut rng);
                                    keep * v + beta * e
                                })
                                .collect();
                            let path = ((k as u64) << 48) ^ ((j as u64) << 20) ^ step as u64;
                            let g = margin_of(&prop, path, s)?;
                            if g <= prev {
                                cur = (prop, g);
                            }
                        }
                        chain.push(cur.clone());
                    }
                    Ok(chain)
                })
                .collect::<Result<_>>()?;
            samples = chains.into_iter().flatten().collect();
            simulations += samples.len().saturating_sub(n_seeds);
        }
        let hits = samples.iter().filter(|(_, g)| *g <= p).count();
        conditionals.push(hits as f64 / samples.len() as f64);
        if hits == 0 {
            degenerate = k + 1 < thresholds.len();
            conditionals.resize(thresholds.len(), 0.0);
            break;
        }
    }

    let failure_probability: f64 = conditionals.iter().product();
    Ok(SubsetResult {
        probability: 1.0 - failure_probability,
        failure_probability,
        conditionals,
        simulations,
        cost: simulations as f64 * level.cost,
        degenerate,
    })
}

pub(crate) fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::config("at least one threshold is required"));
    }
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::config(format!(
            "thresholds {thresholds:?} must be strictly descending"
        )));
    }
    if *thresholds.last().unwrap() != 0.0 {
        return Err(Error::config("the last threshold must be 0"));
    }
    Ok(())
}

#[derive(Default)]
struct Scratch {
    traj: Trajectory,
    ws: Workspace,
    incr: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::summarize;
    use crate::model::{Dynamics, FeatureMap, Payoff};

    fn traj_with_payoffs(values: &[f64]) -> (LevelSpec, Trajectory) {
        let spec = LevelSpec::linear_diagonal(1, vec![0.0], vec![0.0], 0.1, 1.0);
        let traj = Trajectory {
            level_index: 1,
            t0: 0.0,
            dt: 0.1,
            dim: 1,
            control_dim: 1,
            states: values.to_vec(),
            controls: vec![0.0; values.len() - 1],
            noise_used: vec![0.0; values.len() - 1],
        };
        (spec, traj)
    }

    #[test]
    fn indicator_examples() {
        let (spec, traj) = traj_with_payoffs(&[1.0, 0.3, 0.5]);
        assert_eq!(safety_functional(&spec).evaluate(&traj), 1.0);
        let (spec, traj) = traj_with_payoffs(&[1.0, -0.01, 0.5]);
        assert_eq!(safety_functional(&spec).evaluate(&traj), 0.0);

        // Level 3 of the diagonal system: all of the first three coordinates stay positive.
        let spec = LevelSpec::linear_diagonal(3, vec![1.0, 0.7, 0.6], vec![1.0, 0.7, 0.6], 0.05, 10.0);
        let traj = Trajectory {
            dim: 3,
            control_dim: 3,
            states: vec![1.0, 1.0, 1.0, 0.5, 0.2, 0.1, 0.4, -0.1, 0.3],
            controls: vec![0.0; 6],
            noise_used: vec![0.0; 6],
            ..Trajectory::default()
        };
        assert_eq!(safety_functional(&spec).evaluate(&traj), 0.0);
    }

    fn deterministic_level(k: f64) -> LevelSpec {
        LevelSpec::linear_diagonal(1, vec![k], vec![0.0], 0.1, 1.0)
    }

    #[test]
    fn deterministic_safety() {
        let spec = SafetySpec::new(1.0);
        let inside = safety_config(
            &spec,
            &[deterministic_level(1.0)],
            vec![1.0],
            vec![20],
            Coupling::Coupled,
            1,
        );
        assert_eq!(estimate_safety(&inside, &[1.0]).unwrap().value, 1.0);
        assert_eq!(estimate_safety(&inside, &[-0.5]).unwrap().value, 0.0);
    }

    fn brownian_level() -> LevelSpec {
        LevelSpec {
            level_index: 1,
            dim: 1,
            dynamics: Dynamics::LinearDiagonal {
                k: vec![0.0],
                sigma: vec![1.0],
            },
            dt: 0.1,
            cost: 1.0,
            noise_channels: vec![0],
            feature_map: FeatureMap::Identity,
            payoff: Payoff::MinCoordinate,
        }
    }

    #[test]
    fn rejects_bad_thresholds() {
        let spec = SafetySpec::new(1.0);
        let level = brownian_level();
        for t in [&[][..], &[0.5, 0.5, 0.0], &[0.2, 0.5, 0.0], &[0.5, 0.1]] {
            assert!(subset_simulation(&spec, &level, &[1.0], t, 100, 0).is_err());
        }
    }

    #[test]
    fn single_stage_is_plain_mc() {
        let spec = SafetySpec::new(1.0);
        let level = brownian_level();
        let n = 200;
        let reps = 300;
        let sub: Vec<f64> = (0..reps)
            .map(|r| {
                subset_simulation(&spec, &level, &[1.0], &[0.0], n, r)
                    .unwrap()
                    .probability
            })
            .collect();
        let cfg = safety_config(
            &spec,
            std::slice::from_ref(&level),
            vec![1.0],
            vec![n],
            Coupling::Coupled,
            0,
        );
        let mc: Vec<f64> = (0..reps)
            .map(|r| estimate_safety(&cfg.with_seed(10_000 + r), &[1.0]).unwrap().value)
            .collect();
        let (a, b) = (summarize(&sub, None).unwrap(), summarize(&mc, None).unwrap());
        let se = (a.standard_error.powi(2) + b.standard_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 4.0 * se, "{} vs {}", a.mean, b.mean);
        // Variance of a sample variance of Bernoulli means is small; compare loosely at 4 SE.
        let var_se = b.variance * (2.0 / (reps as f64 - 1.0)).sqrt() * 2.0_f64.sqrt();
        assert!((a.variance - b.variance).abs() < 4.0 * var_se);
        let one = subset_simulation(&spec, &level, &[1.0], &[0.0], n, 3).unwrap();
        assert_eq!(one.simulations, n);
        assert_eq!(one.cost, n as f64);
    }

    #[test]
    fn easy_instance_matches_plain_mc() {
        // Brownian motion from 0.7 over one time unit: safe with probability near 0.5.
        let spec = SafetySpec::new(1.0);
        let level = brownian_level();
        let x0 = [0.7];
        let cfg = safety_config(
            &spec,
            std::slice::from_ref(&level),
            vec![1.0],
            vec![200_000],
            Coupling::Coupled,
            77,
        );
        let reference = estimate_safety(&cfg, &x0).unwrap();
        let p = reference.value;
        let ref_se = (p * (1.0 - p) / 200_000.0).sqrt();
        let runs: Vec<f64> = (0..40)
            .map(|r| {
                subset_simulation(&spec, &level, &x0, &[0.4, 0.2, 0.0], 2000, 500 + r)
                    .unwrap()
                    .probability
            })
            .collect();
        let s = summarize(&runs, None).unwrap();
        let joint = (s.standard_error.powi(2) + ref_se * ref_se).sqrt();
        assert!((s.mean - p).abs() < 4.0 * joint, "subset {} vs mc {p}", s.mean);
    }

    #[test]
    fn degenerate_stage_is_flagged() {
        let spec = SafetySpec::new(1.0);
        let r = subset_simulation(&spec, &deterministic_level(0.0), &[1.0], &[0.5, 0.0], 50, 1).unwrap();
        assert_eq!(r.failure_probability, 0.0);
        assert_eq!(r.probability, 1.0);
        assert!(r.degenerate);
    }
}
