//! The subcommands, as functions from a validated config to an [`Outcome`].

use std::collections::BTreeMap;

use serde_json::json;

use mlmf_core::experiments::{
    plain_reference, run_fig2, run_fig3, run_sweep, Fig2Settings, Fig3Settings, Method, MethodSetup, Sweep, SweepOutput,
};
use mlmf_core::{
    allocate, mlmf_control_rollout, mlmf_estimate, optimal_coefficients, pilot_statistics, predicted_variance,
    safety_config, safety_levels, summarize, AllocationPlan, ControlResult, LevelSpec, LevelStats, RolloutOptions,
};

use crate::config::{
    Baseline, CoefficientMode, CountMode, ExperimentConfig, LevelConfig, ProblemKind, ReferenceConfig,
};
use crate::error::CliError;
use crate::report::{num, opt, sha256_hex, Outcome, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    /// Error against budget for the five safety estimators.
    Fig2,
    /// Control and computation cost of the control comparison.
    Fig3,
    /// Control traces of the control comparison.
    Fig4,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
        }
    }
}

/// Apply `--seed` and `--reps` and re-validate.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, reps: Option<usize>) -> Result<(), CliError> {
    if let Some(s) = seed {
        cfg.seeds.base = s;
    }
    if let Some(r) = reps {
        cfg.replications = r;
    }
    cfg.validate()
}

fn config_hash(cfg: &ExperimentConfig) -> Result<String, CliError> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

fn require_safety(cfg: &ExperimentConfig, command: &str) -> Result<(), CliError> {
    if cfg.problem != ProblemKind::Safety {
        return Err(CliError::Schema(format!(
            "problem: `{command}` applies to safety problems"
        )));
    }
    Ok(())
}

fn base_seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::from([("base".to_string(), cfg.seeds.base)]);
    if cfg.needs_pilot() {
        seeds.insert("pilot".into(), cfg.seeds.pilot);
    }
    if let Some(ReferenceConfig::MonteCarlo { seed, .. }) = &cfg.reference {
        seeds.insert("reference".into(), *seed);
    }
    seeds
}

fn csv_name(cfg: &ExperimentConfig, default: &str) -> String {
    cfg.output.csv.clone().unwrap_or_else(|| default.to_string())
}

fn level_stats(cfg: &ExperimentConfig, specs: &[LevelSpec]) -> Result<LevelStats, CliError> {
    let levels = safety_levels(&cfg.safety_spec(), specs);
    Ok(pilot_statistics(
        &levels,
        &cfg.x0,
        cfg.horizon,
        cfg.pilot_samples,
        cfg.seeds.pilot,
    )?)
}

/// Coefficients and counts for a safety config, with the pilot and plan
/// that produced them when the config asks for them.
struct Resolved {
    stats: Option<LevelStats>,
    plan: Option<AllocationPlan>,
    coefficients: Vec<f64>,
    counts: Vec<usize>,
    predicted_variance: Option<f64>,
}

fn resolve(cfg: &ExperimentConfig, specs: &[LevelSpec]) -> Result<Resolved, CliError> {
    let stats = if cfg.needs_pilot() {
        Some(level_stats(cfg, specs)?)
    } else {
        None
    };
    let coefficients = match (&cfg.coefficients, &stats) {
        (CoefficientMode::Manual { values }, _) => values.clone(),
        (CoefficientMode::Optimal, Some(s)) => optimal_coefficients(s)?,
        (CoefficientMode::Optimal, None) => unreachable!("optimal coefficients imply a pilot"),
    };
    match (&cfg.counts, &stats) {
        (CountMode::Budget { budget }, Some(s)) => {
            let plan = allocate(s, &coefficients, cfg.coupling, *budget)?;
            Ok(Resolved {
                counts: plan.counts.clone(),
                predicted_variance: Some(plan.predicted_variance),
                stats,
                plan: Some(plan),
                coefficients,
            })
        }
        (CountMode::Budget { .. }, None) => unreachable!("a budget implies a pilot"),
        (CountMode::Manual { values }, _) => {
            let predicted = stats
                .as_ref()
                .map(|s| predicted_variance(s, &coefficients, values, cfg.coupling))
                .transpose()?;
            Ok(Resolved {
                stats,
                plan: None,
                coefficients,
                counts: values.clone(),
                predicted_variance: predicted,
            })
        }
    }
}

fn reference(cfg: &ExperimentConfig, top: &LevelSpec) -> Result<Option<(f64, f64)>, CliError> {
    Ok(match &cfg.reference {
        None => None,
        Some(ReferenceConfig::Value { value, standard_error }) => Some((*value, *standard_error)),
        Some(ReferenceConfig::MonteCarlo { samples, seed }) => {
            Some(plain_reference(&cfg.safety_spec(), top, &cfg.x0, *samples, *seed)?)
        }
    })
}

/// Pilot statistics and the ordering assumptions of a safety config.
pub fn pilot(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_safety(cfg, "pilot")?;
    let specs = cfg.level_specs()?;
    let stats = level_stats(cfg, &specs)?;
    let a_star = optimal_coefficients(&stats).ok();
    let mut t = Table::new(["level", "dim", "dt", "cost", "sigma", "rho", "optimal_coefficient"]);
    for (i, s) in specs.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            s.dim.to_string(),
            num(s.dt),
            num(s.cost),
            num(stats.sigma[i]),
            num(stats.rho[i]),
            opt(a_star.as_ref().map(|a| a[i])),
        ]);
    }
    Ok(Outcome {
        artifacts: vec![t.into_artifact(csv_name(cfg, "pilot.csv"))?],
        seeds: BTreeMap::from([("pilot".to_string(), cfg.seeds.pilot)]),
        config_sha256: config_hash(cfg)?,
        result: json!({
            "stats": stats,
            "assumptions": stats.assumptions(),
            "optimal_coefficients": a_star,
        }),
        notes: Vec::new(),
    })
}

/// Coefficients and sample counts, allocated from a pilot when the config
/// gives a budget.
pub fn allocate_plan(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_safety(cfg, "allocate")?;
    let specs = cfg.level_specs()?;
    let r = resolve(cfg, &specs)?;
    let mut t = Table::new([
        "level",
        "dim",
        "dt",
        "cost",
        "coefficient",
        "count",
        "level_cost",
        "continuous_count",
    ]);
    for (i, s) in specs.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            s.dim.to_string(),
            num(s.dt),
            num(s.cost),
            num(r.coefficients[i]),
            r.counts[i].to_string(),
            num(r.counts[i] as f64 * s.cost),
            opt(r.plan.as_ref().map(|p| p.continuous_counts[i])),
        ]);
    }
    let total_cost: f64 = specs.iter().zip(&r.counts).map(|(s, &n)| n as f64 * s.cost).sum();
    Ok(Outcome {
        artifacts: vec![t.into_artifact(csv_name(cfg, "allocate.csv"))?],
        seeds: base_seeds(cfg),
        config_sha256: config_hash(cfg)?,
        result: json!({
            "coefficients": r.coefficients,
            "counts": r.counts,
            "total_cost": total_cost,
            "predicted_variance": r.predicted_variance,
            "plan": r.plan,
            "stats": r.stats,
        }),
        notes: Vec::new(),
    })
}

/// One estimate per replication, with seeds `base, base + 1, …`.
pub fn estimate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match cfg.problem {
        ProblemKind::Safety => estimate_safety(cfg),
        ProblemKind::Control => estimate_control(cfg),
    }
}

fn estimate_safety(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let specs = cfg.level_specs()?;
    let r = resolve(cfg, &specs)?;
    let reference = reference(cfg, &specs[specs.len() - 1])?;
    let base = safety_config(
        &cfg.safety_spec(),
        &specs,
        r.coefficients.clone(),
        r.counts.clone(),
        cfg.coupling,
        0,
    );
    let reports = (0..cfg.replications as u64)
        .map(|k| mlmf_estimate(&base.with_seed(cfg.seeds.base.wrapping_add(k)), &cfg.x0))
        .collect::<Result<Vec<_>, _>>()?;

    let mut t = Table::new([
        "replication",
        "seed",
        "estimate",
        "clamped",
        "abs_error",
        "cost_spent",
        "simulated_cost",
    ]);
    for (k, rep) in reports.iter().enumerate() {
        t.push(vec![
            k.to_string(),
            rep.seed.to_string(),
            num(rep.value),
            num(rep.clamped),
            opt(reference.map(|(v, _)| (rep.value - v).abs())),
            num(rep.total_cost),
            num(rep.simulated_cost),
        ]);
    }
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let summary = if values.len() >= 2 {
        Some(summarize(&values, reference.map(|(v, _)| v))?)
    } else {
        None
    };
    Ok(Outcome {
        artifacts: vec![t.into_artifact(csv_name(cfg, "estimate.csv"))?],
        seeds: base_seeds(cfg),
        config_sha256: config_hash(cfg)?,
        result: json!({
            "reference": reference.map(|(v, _)| v),
            "reference_se": reference.map(|(_, se)| se),
            "predicted_variance": r.predicted_variance,
            "summary": summary,
            "first_report": reports[0],
            "plan": r.plan,
            "stats": r.stats,
        }),
        notes: Vec::new(),
    })
}

fn estimate_control(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let specs = cfg.level_specs()?;
    let (CoefficientMode::Manual { values: a }, CountMode::Manual { values: n }) = (&cfg.coefficients, &cfg.counts)
    else {
        unreachable!("validated: control problems take manual coefficients and counts")
    };
    let problem = cfg.control_problem();
    let options = cfg.control.clone().unwrap_or_default();
    let plant = &specs[specs.len() - 1];
    let runs = (0..cfg.replications as u64)
        .map(|k| {
            let opts = RolloutOptions {
                seed: cfg.seeds.base.wrapping_add(k),
                eval_noise: options.eval_noise,
                warm_start: options.warm_start,
            };
            mlmf_control_rollout(&problem, plant, &specs, a, n, &cfg.x0, &opts)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let dim = plant.dim;
    let m = plant.noise_dim();
    let mut header = vec!["replication".to_string(), "seed".into(), "step".into(), "t".into()];
    header.extend((0..dim).map(|i| format!("state_{i}")));
    header.extend((0..m).map(|i| format!("control_{i}")));
    let mut t = Table::new(header);
    for (k, run) in runs.iter().enumerate() {
        for (step, u) in run.controls.iter().enumerate() {
            let mut row = vec![
                k.to_string(),
                cfg.seeds.base.wrapping_add(k as u64).to_string(),
                step.to_string(),
                num(step as f64 * plant.dt),
            ];
            row.extend(run.states[step].iter().map(|&v| num(v)));
            row.extend(u.iter().map(|&v| num(v)));
            t.push(row);
        }
    }
    let costs: Vec<_> = runs
        .iter()
        .map(|r| json!({"realized_cost": r.realized_cost, "computation_cost": r.computation_cost}))
        .collect();
    Ok(Outcome {
        artifacts: vec![t.into_artifact(csv_name(cfg, "estimate.csv"))?],
        seeds: base_seeds(cfg),
        config_sha256: config_hash(cfg)?,
        result: json!({ "runs": costs, "final_states": runs.iter().map(|r| r.states.last()).collect::<Vec<_>>() }),
        notes: Vec::new(),
    })
}

fn ladder(
    cfg: &ExperimentConfig,
    explicit: &Option<Vec<LevelConfig>>,
    keep: impl Fn(&LevelConfig) -> bool,
) -> Vec<LevelConfig> {
    match explicit {
        Some(levels) => levels.clone(),
        None => cfg.levels.iter().filter(|lv| keep(lv)).cloned().collect(),
    }
}

/// Every configured method at every budget, paired by seed.
pub fn bench(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_safety(cfg, "bench")?;
    if cfg.replications < 2 {
        return Err(CliError::Schema("replications: bench needs at least two".into()));
    }
    let budgets = match (&cfg.budgets[..], &cfg.counts) {
        ([], CountMode::Budget { budget }) => vec![*budget],
        ([], CountMode::Manual { .. }) => {
            return Err(CliError::Schema(
                "budgets: bench needs a budget grid or a budget in counts".into(),
            ));
        }
        (grid, _) => grid.to_vec(),
    };
    let specs = cfg.level_specs()?;
    let top_cfg = &cfg.levels[cfg.levels.len() - 1];
    let top = specs[specs.len() - 1].clone();
    let Some(reference) = reference(cfg, &top)? else {
        return Err(CliError::Schema("reference: bench needs a reference".into()));
    };

    let mut setups = vec![MethodSetup {
        method: Method::Mlmf,
        levels: specs.clone(),
    }];
    let mut thresholds = Vec::new();
    for (i, b) in cfg.baselines.iter().enumerate() {
        let (method, levels) = match b {
            Baseline::PlainMc => (Method::Mc, vec![top.clone()]),
            Baseline::Subset { thresholds: t } => {
                thresholds = t.clone();
                (Method::Subset, vec![top.clone()])
            }
            Baseline::Mlmc { levels } => {
                let l = ladder(cfg, levels, |lv| lv.dim == top_cfg.dim);
                (Method::Mlmc, cfg.specs_of(&l)?)
            }
            Baseline::Mfmc { levels } => {
                let l = ladder(cfg, levels, |lv| lv.dt == top_cfg.dt);
                (Method::Mfmc, cfg.specs_of(&l)?)
            }
        };
        if setups.iter().any(|s| s.method == method) {
            return Err(CliError::Schema(format!(
                "baselines[{i}]: {} is listed twice",
                method.name()
            )));
        }
        setups.push(MethodSetup { method, levels });
    }
    setups.sort_by_key(|s| s.method);

    let sweep = Sweep {
        spec: cfg.safety_spec(),
        x0: cfg.x0.clone(),
        setups,
        thresholds,
        budgets,
        replications: cfg.replications,
        base_seed: cfg.seeds.base,
        pilot_samples: cfg.pilot_samples,
        pilot_seed: cfg.seeds.pilot,
    };
    let out = run_sweep(&sweep, reference)?;
    let mut seeds = base_seeds(cfg);
    seeds.insert("pilot".into(), cfg.seeds.pilot);
    sweep_outcome(&out, csv_name(cfg, "bench.csv"), seeds, config_hash(cfg)?, Vec::new())
}

fn sweep_outcome(
    out: &SweepOutput,
    rows_name: String,
    seeds: BTreeMap<String, u64>,
    config_sha256: String,
    notes: Vec<String>,
) -> Result<Outcome, CliError> {
    let mut rows = Table::new(["method", "budget", "seed", "estimate", "abs_error", "cost_spent"]);
    for r in &out.rows {
        rows.push(vec![
            r.method.name().into(),
            num(r.budget),
            r.seed.to_string(),
            num(r.estimate),
            num(r.abs_error),
            num(r.cost_spent),
        ]);
    }
    let mut summary = Table::new([
        "method",
        "budget",
        "replications",
        "mean_estimate",
        "mean_abs_error",
        "abs_error_se",
        "mse",
        "variance",
        "mean_cost",
    ]);
    for s in &out.summary {
        summary.push(vec![
            s.method.name().into(),
            num(s.budget),
            s.replications.to_string(),
            num(s.mean_estimate),
            num(s.mean_abs_error),
            num(s.abs_error_se),
            num(s.mse),
            num(s.variance),
            num(s.mean_cost),
        ]);
    }
    let summary_name = match rows_name.strip_suffix(".csv") {
        Some(stem) => format!("{stem}_summary.csv"),
        None => format!("{rows_name}_summary.csv"),
    };
    Ok(Outcome {
        artifacts: vec![rows.into_artifact(rows_name)?, summary.into_artifact(summary_name)?],
        seeds,
        config_sha256,
        result: json!({
            "reference": out.reference,
            "reference_se": out.reference_se,
            "pilots": out.pilots,
            "plans": out.plans,
        }),
        notes,
    })
}

/// Regenerate one of the built-in experiments.
pub fn reproduce(figure: Figure, seed: Option<u64>, reps: Option<usize>) -> Result<Outcome, CliError> {
    match figure {
        Figure::Fig2 => {
            let mut settings = Fig2Settings::default();
            if let Some(s) = seed {
                settings.base_seed = s;
            }
            if let Some(r) = reps {
                if r < 2 {
                    return Err(CliError::Schema(
                        "--reps: at least two replications are required".into(),
                    ));
                }
                settings.replications = r;
            }
            let out = run_fig2(&settings)?;
            let seeds = BTreeMap::from([
                ("base".to_string(), settings.base_seed),
                ("pilot".to_string(), settings.pilot_seed),
                ("reference".to_string(), settings.reference_seed),
            ]);
            let note = format!(
                "reference from {} plain Monte Carlo paths; its standard error bounds how small an absolute error can be resolved",
                settings.reference_samples
            );
            sweep_outcome(
                &out,
                "fig2.csv".into(),
                seeds,
                sha256_hex(&serde_json::to_vec(&settings)?),
                vec![note],
            )
        }
        Figure::Fig3 | Figure::Fig4 => {
            if reps.is_some() {
                return Err(CliError::Schema("--reps: only fig2 has replications".into()));
            }
            let mut settings = Fig3Settings::default();
            if let Some(s) = seed {
                settings.seed = s;
            }
            let runs = run_fig3(&settings)?;
            let artifact = if figure == Figure::Fig3 {
                let mut t = Table::new(["model", "control_cost", "computation_cost"]);
                for r in &runs {
                    t.push(vec![
                        r.name.clone(),
                        num(r.result.realized_cost),
                        num(r.result.computation_cost),
                    ]);
                }
                t.into_artifact("fig3.csv")?
            } else {
                traces(&runs.iter().map(|r| (r.name.as_str(), &r.result)).collect::<Vec<_>>())?
            };
            let costs: BTreeMap<&str, _> = runs
                .iter()
                .map(|r| {
                    (
                        r.name.as_str(),
                        json!({"control_cost": r.result.realized_cost, "computation_cost": r.result.computation_cost}),
                    )
                })
                .collect();
            Ok(Outcome {
                artifacts: vec![artifact],
                seeds: BTreeMap::from([("base".to_string(), settings.seed)]),
                config_sha256: sha256_hex(&serde_json::to_vec(&settings)?),
                result: json!({ "settings": settings, "costs": costs }),
                notes: Vec::new(),
            })
        }
    }
}

fn traces(runs: &[(&str, &ControlResult)]) -> Result<crate::report::Artifact, CliError> {
    let mut header = vec!["step".to_string(), "t".into()];
    header.extend(runs.iter().map(|(name, _)| format!("{name}_control")));
    header.extend(runs.iter().map(|(name, _)| format!("{name}_state")));
    let dt = mlmf_core::experiments::CONTROL_DT;
    let mut t = Table::new(header);
    for step in 0..runs[0].1.controls.len() {
        let mut row = vec![step.to_string(), num(step as f64 * dt)];
        row.extend(runs.iter().map(|(_, r)| num(r.controls[step][0])));
        row.extend(runs.iter().map(|(_, r)| num(r.states[step][0])));
        t.push(row);
    }
    t.into_artifact("fig4.csv")
}
