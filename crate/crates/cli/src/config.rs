//! Experiment configuration: a JSON document with an explicit schema version.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mlmf_core::control::{ControlProblem, EvalNoise, TerminalCost};
use mlmf_core::model::validate_cost_order;
use mlmf_core::{Coupling, LevelSpec, Payoff, SafetySpec};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub problem: ProblemKind,
    /// Cheapest first; the last level is the one being estimated.
    pub levels: Vec<LevelConfig>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub coefficients: CoefficientMode,
    pub counts: CountMode,
    #[serde(default = "default_coupling")]
    pub coupling: Coupling,
    pub seeds: Seeds,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_pilot_samples")]
    pub pilot_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<Baseline>,
    /// Budget grid for `bench`; defaults to the budget in `counts`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budgets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_coupling() -> Coupling {
    Coupling::Coupled
}

fn default_replications() -> usize {
    1
}

fn default_pilot_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Safety,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub dim: usize,
    pub dynamics: DynamicsConfig,
    pub dt: f64,
    pub cost: f64,
    /// 0-based master-grid channels; defaults to `0..dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_channels: Option<Vec<usize>>,
    /// Defaults to the minimum coordinate for safety problems and `x²/2`
    /// for control problems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsConfig {
    /// `dx = −k x dt + σ (u dt + dW)`, per coordinate.
    LinearDiagonal { k: Vec<f64>, sigma: Vec<f64> },
    /// `x' = k x + u dt + Δw`, per coordinate.
    LinearMap { k: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    MinCoordinate,
    Quadratic { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientMode {
    Manual {
        values: Vec<f64>,
    },
    /// `a*` from pilot statistics.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CountMode {
    Manual {
        values: Vec<usize>,
    },
    /// Allocate from pilot statistics within `Σ N_l C_l ≤ budget`.
    Budget {
        budget: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Estimation seed; replication `r` uses `base + r`.
    pub base: u64,
    pub pilot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Plain Monte Carlo of the last level.
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
    Value {
        value: f64,
        standard_error: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// The last level alone.
    PlainMc,
    /// Multilevel Monte Carlo with `a ≡ 1`. Without explicit levels, the
    /// levels sharing the last level's dimension.
    Mlmc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<LevelConfig>>,
    },
    /// Multi-fidelity Monte Carlo with optimal coefficients. Without
    /// explicit levels, the levels sharing the last level's `dt`.
    Mfmc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<LevelConfig>>,
    },
    /// Subset simulation on the last level.
    Subset { thresholds: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default = "default_terminal")]
    pub terminal: TerminalKind,
    #[serde(default = "default_eval_noise")]
    pub eval_noise: EvalNoise,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_true")]
    pub likelihood_ratio: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            terminal: default_terminal(),
            eval_noise: default_eval_noise(),
            warm_start: false,
            likelihood_ratio: true,
        }
    }
}

fn default_terminal() -> TerminalKind {
    TerminalKind::Running
}

fn default_eval_noise() -> EvalNoise {
    EvalNoise::Fixed { seed: 0 }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// The level's running payoff at the final state.
    Running,
    Zero,
}

/// File names inside the `--out` directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

/// Parse a config document, reporting the path of the offending field.
pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Schema(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

fn schema(path: impl std::fmt::Display, msg: impl std::fmt::Display) -> CliError {
    CliError::Schema(format!("{path}: {msg}"))
}

fn check_thresholds(path: &str, t: &[f64]) -> Result<(), CliError> {
    if t.is_empty() || t.windows(2).any(|w| !(w[0] > w[1])) || t[t.len() - 1] != 0.0 {
        return Err(schema(path, "thresholds must be strictly descending and end at 0"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(schema(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(schema("horizon", "must be positive and finite"));
        }
        if self.levels.is_empty() {
            return Err(schema("levels", "at least one level is required"));
        }
        let specs = self.level_specs()?;
        for (i, spec) in specs.iter().enumerate() {
            spec.validate().map_err(|e| schema(format!("levels[{i}]"), e))?;
            spec.steps_in(self.horizon)
                .map_err(|e| schema(format!("levels[{i}].dt"), e))?;
            spec.initial_feature(&self.x0).map_err(|e| schema("x0", e))?;
        }
        validate_cost_order(&specs).map_err(|e| schema("levels", e))?;
        let l = specs.len();
        let total_cost: f64 = specs.iter().map(|s| s.cost).sum();

        if let CoefficientMode::Manual { values } = &self.coefficients {
            if values.len() != l {
                return Err(schema(
                    "coefficients.values",
                    format!("expected {l} values, got {}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(schema("coefficients.values", "values must be finite"));
            }
            if values[l - 1] != 1.0 {
                return Err(schema("coefficients.values", "the last coefficient must be 1"));
            }
        }
        match &self.counts {
            CountMode::Manual { values } => {
                if values.len() != l {
                    return Err(schema(
                        "counts.values",
                        format!("expected {l} values, got {}", values.len()),
                    ));
                }
                if values.contains(&0) || values.windows(2).any(|w| w[0] < w[1]) {
                    return Err(schema("counts.values", "counts must be positive and non-increasing"));
                }
            }
            CountMode::Budget { budget } => {
                if !(*budget >= total_cost && budget.is_finite()) {
                    return Err(schema(
                        "counts.budget",
                        format!("budget {budget} cannot buy one sample of every level ({total_cost})"),
                    ));
                }
            }
        }
        for (i, b) in self.budgets.iter().enumerate() {
            if !(*b >= total_cost && b.is_finite()) {
                return Err(schema(
                    format!("budgets[{i}]"),
                    format!("budget {b} is below {total_cost}"),
                ));
            }
        }
        if self.replications == 0 {
            return Err(schema("replications", "must be at least 1"));
        }
        if self.needs_pilot() && self.pilot_samples < 30 {
            return Err(schema("pilot_samples", "a pilot needs at least 30 paths"));
        }
        match &self.reference {
            Some(ReferenceConfig::MonteCarlo { samples, .. }) if *samples < 2 => {
                return Err(schema("reference.samples", "at least two samples are required"));
            }
            Some(ReferenceConfig::Value { value, standard_error })
                if !value.is_finite() || !(*standard_error >= 0.0) =>
            {
                return Err(schema(
                    "reference",
                    "value must be finite and standard_error non-negative",
                ));
            }
            _ => {}
        }
        for (i, b) in self.baselines.iter().enumerate() {
            match b {
                Baseline::Subset { thresholds } => check_thresholds(&format!("baselines[{i}].thresholds"), thresholds)?,
                Baseline::Mlmc { levels: Some(ladder) } | Baseline::Mfmc { levels: Some(ladder) } => {
                    self.check_ladder(&format!("baselines[{i}].levels"), ladder)?;
                }
                _ => {}
            }
        }
        for (field, name) in [
            (&self.output.csv, "output.csv"),
            (&self.output.sidecar, "output.sidecar"),
        ] {
            if let Some(f) = field {
                if f.is_empty() || f.contains(['/', '\\']) || f == "." || f == ".." {
                    return Err(schema(name, "must be a plain file name"));
                }
            }
        }

        match self.problem {
            ProblemKind::Safety => {
                if self.control.is_some() {
                    return Err(schema("control", "only valid for control problems"));
                }
            }
            ProblemKind::Control => {
                if !matches!(self.coefficients, CoefficientMode::Manual { .. }) {
                    return Err(schema("coefficients.mode", "control problems take manual coefficients"));
                }
                match &self.counts {
                    CountMode::Manual { values } if values[l - 1] < 2 => {
                        return Err(schema("counts.values", "the last level needs at least two rollouts"));
                    }
                    CountMode::Budget { .. } => {
                        return Err(schema("counts.mode", "control problems take manual counts"));
                    }
                    _ => {}
                }
                let plant = &specs[l - 1];
                for (i, s) in specs.iter().enumerate() {
                    if s.dt != plant.dt {
                        return Err(schema(format!("levels[{i}].dt"), "control levels must share one dt"));
                    }
                    if s.noise_dim() != plant.noise_dim() {
                        return Err(schema(
                            format!("levels[{i}].noise_channels"),
                            "control levels must have as many channels as the last level",
                        ));
                    }
                }
                if !self.baselines.is_empty() {
                    return Err(schema("baselines", "baselines apply to safety problems"));
                }
            }
        }
        Ok(())
    }

    fn check_ladder(&self, path: &str, ladder: &[LevelConfig]) -> Result<(), CliError> {
        if ladder.is_empty() {
            return Err(schema(path, "at least one level is required"));
        }
        let mut specs = Vec::with_capacity(ladder.len());
        for (i, lv) in ladder.iter().enumerate() {
            let spec = lv
                .to_spec(i, self.problem)
                .map_err(|m| schema(format!("{path}[{i}]"), m))?;
            spec.validate().map_err(|e| schema(format!("{path}[{i}]"), e))?;
            spec.steps_in(self.horizon)
                .map_err(|e| schema(format!("{path}[{i}].dt"), e))?;
            spec.initial_feature(&self.x0).map_err(|e| schema("x0", e))?;
            specs.push(spec);
        }
        validate_cost_order(&specs).map_err(|e| schema(path, e))
    }

    /// Whether any command needs pilot statistics.
    pub fn needs_pilot(&self) -> bool {
        matches!(self.coefficients, CoefficientMode::Optimal) || matches!(self.counts, CountMode::Budget { .. })
    }

    pub fn level_specs(&self) -> Result<Vec<LevelSpec>, CliError> {
        self.specs_of(&self.levels)
    }

    pub fn specs_of(&self, ladder: &[LevelConfig]) -> Result<Vec<LevelSpec>, CliError> {
        ladder
            .iter()
            .enumerate()
            .map(|(i, lv)| {
                lv.to_spec(i, self.problem)
                    .map_err(|m| schema(format!("levels[{i}]"), m))
            })
            .collect()
    }

    pub fn safety_spec(&self) -> SafetySpec {
        SafetySpec::new(self.horizon)
    }

    pub fn control_problem(&self) -> ControlProblem {
        let c = self.control.clone().unwrap_or_default();
        ControlProblem {
            horizon: self.horizon,
            terminal: match c.terminal {
                TerminalKind::Running => TerminalCost::Running,
                TerminalKind::Zero => TerminalCost::Zero,
            },
            likelihood_ratio: c.likelihood_ratio,
        }
    }

    pub fn subset_thresholds(&self) -> Option<&[f64]> {
        self.baselines.iter().find_map(|b| match b {
            Baseline::Subset { thresholds } => Some(thresholds.as_slice()),
            _ => None,
        })
    }
}

impl LevelConfig {
    fn to_spec(&self, index: usize, problem: ProblemKind) -> Result<LevelSpec, String> {
        let mut spec = match &self.dynamics {
            DynamicsConfig::LinearDiagonal { k, sigma } => {
                if k.len() != self.dim || sigma.len() != self.dim {
                    return Err(format!("k and sigma need {} entries", self.dim));
                }
                LevelSpec::linear_diagonal(index + 1, k.clone(), sigma.clone(), self.dt, self.cost)
            }
            DynamicsConfig::LinearMap { k } => {
                if k.len() != self.dim {
                    return Err(format!("k needs {} entries", self.dim));
                }
                LevelSpec::linear_map(index + 1, k.clone(), self.dt, self.cost)
            }
        };
        if let Some(ch) = &self.noise_channels {
            spec.noise_channels = ch.clone();
        }
        spec.payoff = match (&self.payoff, problem) {
            (Some(PayoffConfig::MinCoordinate), _) | (None, ProblemKind::Safety) => Payoff::MinCoordinate,
            (Some(PayoffConfig::Quadratic { weight }), _) => Payoff::Quadratic { weight: *weight },
            (None, ProblemKind::Control) => Payoff::Quadratic { weight: 1.0 },
        };
        Ok(spec)
    }
}
