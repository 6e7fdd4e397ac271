//! Built-in experiment setups: the five-dimensional safety benchmark and the
//! scalar path-integral control benchmark, plus the drivers that turn them
//! into comparison tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, optimal_allocation, pilot_statistics, AllocationPlan, LevelStats};
use crate::control::{mlmf_control_rollout, ControlProblem, ControlResult, EvalNoise, RolloutOptions, TerminalCost};
use crate::error::Result;
use crate::estimator::{mlmf_estimate, Coupling};
use crate::model::{LevelSpec, Payoff};
use crate::safety::{safety_config, safety_levels, subset_simulation, SafetySpec};
use crate::sum::{ordered_mean, sample_variance};

/// Decay rates and noise gains of the diagonal safety system.
pub const SAFETY_K: [f64; 5] = [1.0, 0.7, 0.6, 0.5, 0.4];
/// Cost of simulating the first `d` coordinates at `dt = 0.1`.
pub const SAFETY_COSTS: [f64; 5] = [1.0, 5.0, 10.0, 100.0, 1000.0];
pub const SAFETY_THRESHOLDS: [f64; 5] = [0.8, 0.5, 0.3, 0.2, 0.0];
pub const SAFETY_HORIZON: f64 = 1.0;
pub const SAFETY_X0: [f64; 5] = [1.0; 5];

/// The first `dim` coordinates of the safety system at step `dt`.
pub fn safety_level(level_index: usize, dim: usize, dt: f64, cost: f64) -> LevelSpec {
    LevelSpec::linear_diagonal(
        level_index,
        SAFETY_K[..dim].to_vec(),
        SAFETY_K[..dim].to_vec(),
        dt,
        cost,
    )
}

/// Cost model for mixed ladders: per-dimension cost scaled by the number of
/// steps relative to `dt = 0.1`.
pub fn safety_cost(dim: usize, dt: f64) -> f64 {
    SAFETY_COSTS[dim - 1] * (0.1 / dt)
}

/// Levels from `(dimension, dt)` pairs priced by [`safety_cost`].
pub fn safety_ladder(rungs: &[(usize, f64)]) -> Vec<LevelSpec> {
    rungs
        .iter()
        .enumerate()
        .map(|(i, &(d, dt))| safety_level(i + 1, d, dt, safety_cost(d, dt)))
        .collect()
}

/// The five fidelities with `dt = 0.05` for the first three and `0.1` for the
/// last two, priced directly by [`SAFETY_COSTS`].
pub fn reference_safety_levels() -> Vec<LevelSpec> {
    let dts = [0.05, 0.05, 0.05, 0.1, 0.1];
    (0..5)
        .map(|i| safety_level(i + 1, i + 1, dts[i], SAFETY_COSTS[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mc,
    Subset,
    Mlmc,
    Mfmc,
    Mlmf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Mc, Method::Subset, Method::Mlmc, Method::Mfmc, Method::Mlmf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Subset => "subset",
            Method::Mlmc => "mlmc",
            Method::Mfmc => "mfmc",
            Method::Mlmf => "mlmf",
        }
    }

    /// `(dimension, dt)` rungs; subset simulation runs on the single rung.
    pub fn ladder(self) -> Vec<(usize, f64)> {
        match self {
            Method::Mc | Method::Subset => vec![(5, 0.1)],
            Method::Mlmc => vec![(5, 1.0), (5, 0.1)],
            Method::Mfmc => (1..=5).map(|d| (d, 0.1)).collect(),
            Method::Mlmf => vec![(1, 1.0), (2, 1.0), (3, 0.1), (4, 0.1), (5, 0.1)],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fig2Settings {
    pub budgets: Vec<f64>,
    pub replications: usize,
    pub base_seed: u64,
    pub pilot_samples: usize,
    pub pilot_seed: u64,
    pub reference_samples: usize,
    pub reference_seed: u64,
    pub methods: Vec<Method>,
}

impl Default for Fig2Settings {
    fn default() -> Self {
        Self {
            budgets: log_grid(1e4, 1e7, 6),
            replications: 200,
            base_seed: 1_000,
            pilot_samples: 10_000,
            pilot_seed: 17,
            reference_samples: 1_000_000,
            reference_seed: 99,
            methods: Method::ALL.to_vec(),
        }
    }
}

/// `points` logarithmically spaced values from `lo` to `hi`, rounded to integers.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| {
            let f = i as f64 / (points - 1) as f64;
            (lo.ln() + f * (hi.ln() - lo.ln())).exp().round()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub budget: f64,
    pub seed: u64,
    pub estimate: f64,
    pub abs_error: f64,
    /// `Σ N_l C_l` of the plan, or simulated paths times cost for subset
    /// simulation.
    pub cost_spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: Method,
    pub budget: f64,
    pub replications: usize,
    pub mean_estimate: f64,
    pub mean_abs_error: f64,
    pub abs_error_se: f64,
    pub mse: f64,
    pub variance: f64,
    pub mean_cost: f64,
}

/// Sample counts chosen for one method at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub method: Method,
    pub budget: f64,
    pub coefficients: Vec<f64>,
    /// Per-level counts, or the per-stage sample count for subset simulation.
    pub counts: Vec<usize>,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutput {
    pub reference: f64,
    pub reference_se: f64,
    pub pilots: Vec<(Method, LevelStats)>,
    pub plans: Vec<SweepPlan>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// One competitor in a budget sweep. Plain Monte Carlo and subset
/// simulation use only the last level.
#[derive(Debug, Clone)]
pub struct MethodSetup {
    pub method: Method,
    pub levels: Vec<LevelSpec>,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub spec: SafetySpec,
    pub x0: Vec<f64>,
    pub setups: Vec<MethodSetup>,
    pub thresholds: Vec<f64>,
    pub budgets: Vec<f64>,
    pub replications: usize,
    pub base_seed: u64,
    pub pilot_samples: usize,
    pub pilot_seed: u64,
}

/// Plain Monte Carlo of the full system at `dt = 0.1`.
pub fn safety_reference(samples: usize, seed: u64) -> Result<(f64, f64)> {
    let levels = safety_ladder(&[(5, 0.1)]);
    plain_reference(&SafetySpec::new(SAFETY_HORIZON), &levels[0], &SAFETY_X0, samples, seed)
}

/// Plain Monte Carlo estimate of `level`'s safety probability and its
/// standard error.
pub fn plain_reference(
    spec: &SafetySpec,
    level: &LevelSpec,
    x0: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = safety_config(
        spec,
        std::slice::from_ref(level),
        vec![1.0],
        vec![samples],
        Coupling::Coupled,
        seed,
    );
    let r = mlmf_estimate(&cfg, x0)?;
    Ok((r.value, (r.levels[0].variance / samples as f64).sqrt()))
}

/// Integer counts and coefficients of `method` for `budget`.
pub fn plan_method(method: Method, stats: &LevelStats, budget: f64) -> Result<AllocationPlan> {
    match method {
        Method::Mlmc => allocate(stats, &vec![1.0; stats.levels()], Coupling::Coupled, budget),
        _ => optimal_allocation(stats, budget, Coupling::Coupled),
    }
}

pub fn run_fig2(settings: &Fig2Settings) -> Result<SweepOutput> {
    let reference = safety_reference(settings.reference_samples, settings.reference_seed)?;
    let mut methods = settings.methods.clone();
    methods.sort();
    methods.dedup();
    let sweep = Sweep {
        spec: SafetySpec::new(SAFETY_HORIZON),
        x0: SAFETY_X0.to_vec(),
        setups: methods
            .into_iter()
            .map(|method| MethodSetup {
                method,
                levels: safety_ladder(&method.ladder()),
            })
            .collect(),
        thresholds: SAFETY_THRESHOLDS.to_vec(),
        budgets: settings.budgets.clone(),
        replications: settings.replications,
        base_seed: settings.base_seed,
        pilot_samples: settings.pilot_samples,
        pilot_seed: settings.pilot_seed,
    };
    run_sweep(&sweep, reference)
}

/// Every method at every budget over seeds `base_seed, base_seed + 1, …`,
/// so replication `r` uses the same seed for every method.
pub fn run_sweep(sweep: &Sweep, (reference, reference_se): (f64, f64)) -> Result<SweepOutput> {
    let spec = &sweep.spec;
    let x0 = &sweep.x0;
    let mut pilots = Vec::new();
    let mut plans = Vec::new();
    let mut rows = Vec::new();
    for setup in &sweep.setups {
        let method = setup.method;
        let levels = &setup.levels;
        let top = &levels[levels.len() - 1];
        let stats = match method {
            Method::Mlmc | Method::Mfmc | Method::Mlmf => {
                let horizon = spec.horizon;
                let s = pilot_statistics(
                    &safety_levels(spec, levels),
                    x0,
                    horizon,
                    sweep.pilot_samples,
                    sweep.pilot_seed,
                )?;
                pilots.push((method, s.clone()));
                Some(s)
            }
            Method::Mc | Method::Subset => None,
        };
        let subset_rate = match method {
            Method::Subset => subset_cost_per_sample(sweep, top)?,
            _ => 1.0,
        };
        let seeds: Vec<u64> = (0..sweep.replications as u64).map(|r| sweep.base_seed + r).collect();
        for &budget in &sweep.budgets {
            let batch: Vec<SweepRow> = match method {
                Method::Subset => {
                    let n = ((budget / (top.cost * subset_rate)).floor() as usize).max(2);
                    plans.push(SweepPlan {
                        method,
                        budget,
                        coefficients: vec![1.0],
                        counts: vec![n],
                        costs: vec![top.cost],
                    });
                    seeds
                        .par_iter()
                        .map(|&seed| {
                            let r = subset_simulation(spec, top, x0, &sweep.thresholds, n, seed)?;
                            Ok(row(method, budget, seed, r.probability, reference, r.cost))
                        })
                        .collect::<Result<_>>()?
                }
                _ => {
                    let (levels, coefficients, counts) = match &stats {
                        Some(s) => {
                            let p = plan_method(method, s, budget)?;
                            (levels.clone(), p.coefficients, p.counts)
                        }
                        None => (
                            vec![top.clone()],
                            vec![1.0],
                            vec![(budget / top.cost).floor().max(1.0) as usize],
                        ),
                    };
                    plans.push(SweepPlan {
                        method,
                        budget,
                        coefficients: coefficients.clone(),
                        counts: counts.clone(),
                        costs: levels.iter().map(|l| l.cost).collect(),
                    });
                    let cfg = safety_config(spec, &levels, coefficients, counts, Coupling::Coupled, 0);
                    seeds
                        .par_iter()
                        .map(|&seed| {
                            let r = mlmf_estimate(&cfg.with_seed(seed), x0)?;
                            Ok(row(method, budget, seed, r.value, reference, r.total_cost))
                        })
                        .collect::<Result<_>>()?
                }
            };
            rows.extend(batch);
        }
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.budget.total_cmp(&b.budget))
            .then(a.seed.cmp(&b.seed))
    });
    let summary = summarize_sweep(&rows, reference);
    Ok(SweepOutput {
        reference,
        reference_se,
        pilots,
        plans,
        rows,
        summary,
    })
}

/// Simulations per requested sample of one subset-simulation run, measured
/// on a pilot run. Chains restart from stored samples, so a run with `n`
/// samples per stage simulates fewer than `n` paths per stage.
fn subset_cost_per_sample(sweep: &Sweep, level: &LevelSpec) -> Result<f64> {
    let n = sweep.pilot_samples.max(2);
    let r = subset_simulation(&sweep.spec, level, &sweep.x0, &sweep.thresholds, n, sweep.pilot_seed)?;
    Ok(r.simulations as f64 / n as f64)
}

fn row(method: Method, budget: f64, seed: u64, estimate: f64, reference: f64, cost: f64) -> SweepRow {
    SweepRow {
        method,
        budget,
        seed,
        estimate,
        abs_error: (estimate - reference).abs(),
        cost_spent: cost,
    }
}

/// Aggregate rows per `(method, budget)`, in row order.
pub fn summarize_sweep(rows: &[SweepRow], reference: f64) -> Vec<SweepSummary> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let (m, b) = (rows[start].method, rows[start].budget);
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| r.method == m && r.budget == b)
                .count();
        let group = &rows[start..end];
        let errs: Vec<f64> = group.iter().map(|r| r.abs_error).collect();
        let est: Vec<f64> = group.iter().map(|r| r.estimate).collect();
        let n = group.len() as f64;
        let mae = ordered_mean(&errs);
        let est_mean = ordered_mean(&est);
        out.push(SweepSummary {
            method: m,
            budget: b,
            replications: group.len(),
            mean_estimate: est_mean,
            mean_abs_error: mae,
            abs_error_se: (sample_variance(&errs, mae) / n).sqrt(),
            mse: est.iter().map(|e| (e - reference).powi(2)).sum::<f64>() / n,
            variance: sample_variance(&est, est_mean),
            mean_cost: group.iter().map(|r| r.cost_spent).sum::<f64>() / n,
        });
        start = end;
    }
    out
}

/// Scalar system gains of the three control models, cheapest first.
pub const CONTROL_K: [f64; 3] = [0.99, 0.96, 0.9];
pub const CONTROL_COSTS: [f64; 3] = [1.0, 20.0, 40.0];
pub const CONTROL_COEFFICIENTS: [f64; 3] = [0.05, 0.1, 1.0];
pub const CONTROL_DT: f64 = 0.05;
pub const CONTROL_HORIZON: f64 = 5.0;
pub const CONTROL_X0: f64 = 10.0;

pub fn control_model(i: usize) -> LevelSpec {
    let mut spec = LevelSpec::linear_map(i + 1, vec![CONTROL_K[i]], CONTROL_DT, CONTROL_COSTS[i]);
    spec.payoff = Payoff::Quadratic { weight: 1.0 };
    spec
}

pub fn control_models() -> Vec<LevelSpec> {
    (0..3).map(control_model).collect()
}

/// `½x²` running cost, no terminal cost.
pub fn control_problem() -> ControlProblem {
    ControlProblem {
        horizon: CONTROL_HORIZON,
        terminal: TerminalCost::Zero,
        likelihood_ratio: true,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fig3Settings {
    /// Rollouts per step for each single-model run.
    pub model_samples: usize,
    pub mlmf_counts: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub seed: u64,
    pub eval_noise: EvalNoise,
}

impl Default for Fig3Settings {
    fn default() -> Self {
        Self {
            model_samples: 1_000,
            mlmf_counts: vec![4_000, 800, 400],
            coefficients: CONTROL_COEFFICIENTS.to_vec(),
            seed: 2_024,
            eval_noise: EvalNoise::Fixed { seed: 7 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Run {
    /// `model1`, `model2`, `model3` or `mlmf`.
    pub name: String,
    pub result: ControlResult,
}

pub fn run_fig3(settings: &Fig3Settings) -> Result<Vec<Fig3Run>> {
    let problem = control_problem();
    let models = control_models();
    let plant = models[2].clone();
    let options = RolloutOptions {
        seed: settings.seed,
        eval_noise: settings.eval_noise,
        warm_start: false,
    };
    let mut runs = Vec::new();
    for (i, model) in models.iter().enumerate() {
        let result = mlmf_control_rollout(
            &problem,
            &plant,
            std::slice::from_ref(model),
            &[1.0],
            &[settings.model_samples],
            &[CONTROL_X0],
            &options,
        )?;
        runs.push(Fig3Run {
            name: format!("model{}", i + 1),
            result,
        });
    }
    let result = mlmf_control_rollout(
        &problem,
        &plant,
        &models,
        &settings.coefficients,
        &settings.mlmf_counts,
        &[CONTROL_X0],
        &options,
    )?;
    runs.push(Fig3Run {
        name: "mlmf".into(),
        result,
    });
    Ok(runs)
}

/// Largest per-step gap between two control traces.
pub fn max_trace_deviation(a: &ControlResult, b: &ControlResult) -> f64 {
    a.controls
        .iter()
        .zip(&b.controls)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
