//! Path-integral optimal control, single level and multi-level.
//!
//! With unit control weight and control entering through the noise gain,
//! the optimal first-step control is
//!
//! `u* = u + Σ_n e^{−S_n} Δw_{0,n} / (dt Σ_n e^{−S_n})`
//!
//! where the rollouts apply the sampling control `u` on their first step and
//! zero afterwards, and `S_n` is the cost-to-go of rollout `n` including the
//! likelihood-ratio terms `½|u|² dt + u·Δw` of that first step. Holding `u`
//! over the whole remaining horizon instead makes the likelihood ratio's
//! log-variance grow like `|u|² T`, which collapses the weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::validate_counts;
use crate::model::{simulate_into, ConstantPolicy, LevelSpec, Payoff, Policy, Trajectory, Workspace};
use crate::noise::{derive_seed, whole_steps, NoiseSource};
use crate::sum::exact_sum;

#[derive(Debug, Clone)]
pub enum TerminalCost {
    /// Reuse each level's running payoff.
    Running,
    Zero,
    Custom(Payoff),
}

#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub horizon: f64,
    pub terminal: TerminalCost,
    /// Add `Σ u·Δw` to the rollout cost; required for unbiased estimates
    /// when the sampling control is non-zero.
    pub likelihood_ratio: bool,
}

impl ControlProblem {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            terminal: TerminalCost::Running,
            likelihood_ratio: true,
        }
    }

    fn terminal_cost(&self, level: &LevelSpec, xi: &[f64]) -> f64 {
        match &self.terminal {
            TerminalCost::Running => level.payoff.eval(xi),
            TerminalCost::Zero => 0.0,
            TerminalCost::Custom(p) => p.eval(xi),
        }
    }

    /// Cost-to-go of a rollout by left-endpoint quadrature.
    pub fn rollout_cost(&self, level: &LevelSpec, traj: &Trajectory) -> f64 {
        let dt = traj.dt;
        let mut s = 0.0;
        for k in 0..traj.n_steps() {
            let u = traj.control(k);
            let uu: f64 = u.iter().map(|v| v * v).sum();
            s += (level.payoff.eval(traj.state(k)) + 0.5 * uu) * dt;
            if self.likelihood_ratio {
                s += u.iter().zip(traj.noise(k)).map(|(u, w)| u * w).sum::<f64>();
            }
        }
        s + self.terminal_cost(level, traj.final_state())
    }
}

/// `exp(−(S − min S))`: every weight lies in `(0, 1]` and the cheapest is 1.
pub fn path_weights(costs: &[f64]) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    costs.iter().map(|s| (-(s - min)).exp()).collect()
}

/// Self-normalized control estimate from the first `n` rollouts.
pub fn weighted_control(sampling: &[f64], costs: &[f64], first_noise: &[f64], dt: f64, n: usize) -> Vec<f64> {
    let m = sampling.len();
    let w = path_weights(&costs[..n]);
    let total = exact_sum(w.iter().copied());
    (0..m)
        .map(|j| {
            let num = exact_sum((0..n).map(|i| w[i] * first_noise[i * m + j]));
            sampling[j] + num / (dt * total)
        })
        .collect()
}

/// Rollout costs and first-step increments of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub sampling: Vec<f64>,
    pub costs: Vec<f64>,
    /// `n × m`, row-major.
    pub first_noise: Vec<f64>,
    pub dt: f64,
}

impl Rollouts {
    pub fn len(&self) -> usize {
        self.costs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
    /// Control estimate from the first `n` rollouts.
    pub fn estimate(&self, n: usize) -> Vec<f64> {
        weighted_control(&self.sampling, &self.costs, &self.first_noise, self.dt, n)
    }
    /// Effective sample size of the first `n` weights.
    pub fn effective_sample_size(&self, n: usize) -> f64 {
        let w = path_weights(&self.costs[..n]);
        let s: f64 = w.iter().sum();
        s * s / w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Simulate `n` rollouts of `level` from feature state `xi` at time `t`
/// with `sampling` applied on the first step, on paths `0..n` of `source`.
pub fn rollouts(
    problem: &ControlProblem,
    level: &LevelSpec,
    sampling: &[f64],
    xi: &[f64],
    t: f64,
    n: usize,
    source: &NoiseSource,
) -> Result<Rollouts> {
    let m = level.noise_dim();
    if sampling.len() != m {
        return Err(Error::config(format!(
            "sampling control has {} entries, level {} expects {m}",
            sampling.len(),
            level.level_index
        )));
    }
    let factor = whole_steps(level.dt, source.dt())
        .ok_or_else(|| Error::config("level dt is not a multiple of the noise dt"))?;
    let policy = FirstStep(sampling);
    let rows: Vec<(f64, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map_init(Scratch::default, |s, p| {
            source.level_increments(p, &level.noise_channels, factor, &mut s.fine, &mut s.incr);
            simulate_into(level, xi, t, &policy, &s.incr, p, &mut s.traj, &mut s.ws)?;
            Ok((problem.rollout_cost(level, &s.traj), s.incr[..m].to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut costs = Vec::with_capacity(n);
    let mut first_noise = Vec::with_capacity(n * m);
    for (c, w) in rows {
        costs.push(c);
        first_noise.extend(w);
    }
    Ok(Rollouts {
        sampling: sampling.to_vec(),
        costs,
        first_noise,
        dt: level.dt,
    })
}

/// The sampling control on step 0, zero afterwards.
struct FirstStep<'a>(&'a [f64]);

impl Policy for FirstStep<'_> {
    fn control(&self, step: usize, _: f64, _: &[f64], out: &mut [f64]) {
        if step == 0 {
            out.copy_from_slice(self.0);
        } else {
            out.fill(0.0);
        }
    }
}

#[derive(Default)]
struct Scratch {
    traj: Trajectory,
    ws: Workspace,
    fine: Vec<f64>,
    incr: Vec<f64>,
}

/// Single-level path-integral control at time `t` from `x0_full`.
#[allow(clippy::too_many_arguments)]
pub fn path_integral_level(
    problem: &ControlProblem,
    level: &LevelSpec,
    sampling: &[f64],
    x0_full: &[f64],
    n: usize,
    t: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::SampleCounts(
            "path-integral control needs at least two rollouts".into(),
        ));
    }
    level.validate()?;
    let remaining = problem.horizon - t;
    let steps = level.steps_in(remaining)?;
    let source = NoiseSource::new(seed, max_channel(level) + 1, level.dt, steps as f64 * level.dt)?;
    let xi = level.initial_feature(x0_full)?;
    Ok(rollouts(problem, level, sampling, &xi, t, n, &source)?.estimate(n))
}

fn max_channel(level: &LevelSpec) -> usize {
    level.noise_channels.iter().copied().max().unwrap_or(0)
}

/// How the plant is driven during closed-loop evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalNoise {
    /// One fixed noise realization, shared by every compared controller.
    Fixed {
        seed: u64,
    },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    /// Applied control per step.
    pub controls: Vec<Vec<f64>>,
    /// Plant states `x_0 … x_n`.
    pub states: Vec<Vec<f64>>,
    /// `P_l^(N_l)` per step and level.
    pub level_estimates: Vec<Vec<Vec<f64>>>,
    /// Realized closed-loop cost on the plant.
    pub realized_cost: f64,
    /// `Σ_steps Σ_l N_l C_l`.
    pub computation_cost: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub seed: u64,
    pub eval_noise: EvalNoise,
    /// Sample level 1 under the previously applied control instead of zero.
    pub warm_start: bool,
}

/// Receding-horizon closed loop driven by the multi-level control estimate.
///
/// At each plant step, level 1 is sampled under zero (or the previous
/// control), level `l` under level `l−1`'s estimate, and the estimates are
/// combined with the telescoping sum. Level `l−1`'s estimate on `N_l`
/// samples reuses the first `N_l` of its own rollouts.
pub fn mlmf_control_rollout(
    problem: &ControlProblem,
    plant: &LevelSpec,
    levels: &[LevelSpec],
    coefficients: &[f64],
    counts: &[usize],
    x0: &[f64],
    options: &RolloutOptions,
) -> Result<ControlResult> {
    let l = levels.len();
    if l == 0 {
        return Err(Error::config("at least one control level is required"));
    }
    crate::estimator::validate_coefficients(coefficients, l)?;
    validate_counts(counts, l)?;
    if counts[l - 1] < 2 {
        return Err(Error::SampleCounts(
            "path-integral control needs at least two rollouts".into(),
        ));
    }
    plant.validate()?;
    let m = plant.noise_dim();
    for lv in levels {
        lv.validate()?;
        if lv.dt != plant.dt {
            return Err(Error::config(format!(
                "level {} has dt {}, control levels must share the plant dt {}",
                lv.level_index, lv.dt, plant.dt
            )));
        }
        if lv.noise_dim() != m {
            return Err(Error::config(format!(
                "level {} has {} control channels, the plant has {m}",
                lv.level_index,
                lv.noise_dim()
            )));
        }
    }
    let dt = plant.dt;
    let n_steps = plant.steps_in(problem.horizon)?;
    let master = levels
        .iter()
        .map(max_channel)
        .chain([max_channel(plant)])
        .max()
        .unwrap()
        + 1;

    let eval: Vec<f64> = match options.eval_noise {
        EvalNoise::Fixed { seed } => {
            let src = NoiseSource::new(seed, master, dt, problem.horizon)?;
            let (mut fine, mut out) = (Vec::new(), Vec::new());
            src.level_increments(0, &plant.noise_channels, 1, &mut fine, &mut out);
            out
        }
        EvalNoise::Zero => vec![0.0; n_steps * m],
    };

    let mut x = plant.initial_feature(x0)?;
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(n_steps);
    let mut level_estimates = Vec::with_capacity(n_steps);
    let mut realized = 0.0;
    let mut computation = 0.0;
    let mut previous = vec![0.0; m];
    let (mut traj, mut ws) = (Trajectory::default(), Workspace::default());

    for k in 0..n_steps {
        let t = k as f64 * dt;
        let remaining = (n_steps - k) as f64 * dt;
        let source = NoiseSource::new(derive_seed(options.seed, k as u64), master, dt, remaining)?;
        let mut full = Vec::with_capacity(l);
        let mut reuse = Vec::with_capacity(l);
        let mut sampling = if options.warm_start {
            previous.clone()
        } else {
            vec![0.0; m]
        };
        for (i, lv) in levels.iter().enumerate() {
            let xi = lv.initial_feature(&x)?;
            let r = rollouts(problem, lv, &sampling, &xi, t, counts[i], &source)?;
            let est = r.estimate(counts[i]);
            reuse.push((i + 1 < l).then(|| r.estimate(counts[i + 1])));
            computation += counts[i] as f64 * lv.cost;
            sampling = est.clone();
            full.push(est);
        }
        let u: Vec<f64> = (0..m)
            .map(|j| {
                let mut terms = vec![coefficients[0] * full[0][j]];
                for i in 1..l {
                    terms.push(coefficients[i] * full[i][j]);
                    terms.push(-coefficients[i - 1] * reuse[i - 1].as_ref().unwrap()[j]);
                }
                exact_sum(terms)
            })
            .collect();

        let uu: f64 = u.iter().map(|v| v * v).sum();
        realized += (plant.payoff.eval(&x) + 0.5 * uu) * dt;
        simulate_into(
            plant,
            &x,
            t,
            &ConstantPolicy(u.clone()),
            &eval[k * m..(k + 1) * m],
            0,
            &mut traj,
            &mut ws,
        )?;
        x = traj.final_state().to_vec();
        states.push(x.clone());
        previous = u.clone();
        controls.push(u);
        level_estimates.push(full);
    }
    realized += problem.terminal_cost(plant, &x);

    Ok(ControlResult {
        controls,
        states,
        level_estimates,
        realized_cost: realized,
        computation_cost: computation,
    })
}
