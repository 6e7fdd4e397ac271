//! Level specifications and Euler–Maruyama trajectory simulation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::noise::{whole_steps, NoiseGrid};

/// `(t, state, out)`: writes the drift vector into `out`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, state, out)`: writes the `n × m` diffusion matrix row-major into `out`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(state, control, dw, dt, out)`: one step of a user supplied discrete map.
pub type DiscreteFn = Arc<dyn Fn(&[f64], &[f64], &[f64], f64, &mut [f64]) + Send + Sync>;
pub type FeatureFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Per-level state dynamics. The control always enters through the noise
/// gain, `x' = x + f dt + G (u dt + dw)`, so control and noise share a
/// dimension.
#[derive(Clone)]
pub enum Dynamics {
    /// `dx = -k ∘ x dt + sigma ∘ (u dt + dW)`, one noise channel per coordinate.
    LinearDiagonal { k: Vec<f64>, sigma: Vec<f64> },
    /// `x' = k ∘ x + (u dt + dw)` with `dw ~ N(0, dt)`.
    LinearMap { k: Vec<f64> },
    /// General drift and `n × m` diffusion.
    Sde { drift: DriftFn, diffusion: DiffusionFn },
    /// Arbitrary discrete map `x' = F(x, u, dw, dt)`.
    Discrete(DiscreteFn),
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::LinearDiagonal { k, sigma } => f
                .debug_struct("LinearDiagonal")
                .field("k", k)
                .field("sigma", sigma)
                .finish(),
            Dynamics::LinearMap { k } => f.debug_struct("LinearMap").field("k", k).finish(),
            Dynamics::Sde { .. } => f.write_str("Sde(..)"),
            Dynamics::Discrete(_) => f.write_str("Discrete(..)"),
        }
    }
}

/// Projection `p_l` from the full state onto a level's feature space.
#[derive(Clone)]
pub enum FeatureMap {
    /// The first `n` coordinates.
    Prefix(usize),
    Identity,
    Custom(FeatureFn),
}

impl FeatureMap {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Prefix(n) => x[..(*n).min(x.len())].to_vec(),
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Prefix(n) => write!(f, "Prefix({n})"),
            FeatureMap::Identity => f.write_str("Identity"),
            FeatureMap::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Scalar feature payoff `r_l`.
#[derive(Clone)]
pub enum Payoff {
    /// `min_i ξ_i`; positive exactly on the open positive orthant.
    MinCoordinate,
    /// `weight / 2 · |ξ|²`.
    Quadratic {
        weight: f64,
    },
    Custom(PayoffFn),
}

impl Payoff {
    #[inline]
    pub fn eval(&self, xi: &[f64]) -> f64 {
        match self {
            Payoff::MinCoordinate => xi.iter().copied().fold(f64::INFINITY, f64::min),
            Payoff::Quadratic { weight } => 0.5 * weight * xi.iter().map(|v| v * v).sum::<f64>(),
            Payoff::Custom(f) => f(xi),
        }
    }
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::MinCoordinate => f.write_str("MinCoordinate"),
            Payoff::Quadratic { weight } => write!(f, "Quadratic {{ weight: {weight} }}"),
            Payoff::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A feedback law evaluated along a trajectory.
pub trait Policy: Send + Sync {
    /// Write the control for `step` (at time `t`, in `state`) into `out`.
    fn control(&self, step: usize, t: f64, state: &[f64], out: &mut [f64]);

    /// True if `control` always writes zeros, letting simulation skip it.
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn control(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// Open-loop constant control.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn control(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// One fidelity and time resolution.
#[derive(Debug, Clone)]
pub struct LevelSpec {
    /// 1-based position in the level hierarchy.
    pub level_index: usize,
    /// Feature-state dimension `n_l`.
    pub dim: usize,
    pub dynamics: Dynamics,
    pub dt: f64,
    /// Abstract cost of one sample, `C_l`.
    pub cost: f64,
    /// 0-based master-grid channels driving this level, in order.
    pub noise_channels: Vec<usize>,
    pub feature_map: FeatureMap,
    pub payoff: Payoff,
}

impl LevelSpec {
    /// Diagonal linear SDE on the first `k.len()` coordinates, driven by the
    /// first `k.len()` channels, with the min-coordinate payoff.
    pub fn linear_diagonal(level_index: usize, k: Vec<f64>, sigma: Vec<f64>, dt: f64, cost: f64) -> Self {
        let dim = k.len();
        Self {
            level_index,
            dim,
            dynamics: Dynamics::LinearDiagonal { k, sigma },
            dt,
            cost,
            noise_channels: (0..dim).collect(),
            feature_map: FeatureMap::Prefix(dim),
            payoff: Payoff::MinCoordinate,
        }
    }

    /// Discrete map `x' = k x + u dt + dw` with quadratic payoff `x² / 2`.
    pub fn linear_map(level_index: usize, k: Vec<f64>, dt: f64, cost: f64) -> Self {
        let dim = k.len();
        Self {
            level_index,
            dim,
            dynamics: Dynamics::LinearMap { k },
            dt,
            cost,
            noise_channels: (0..dim).collect(),
            feature_map: FeatureMap::Prefix(dim),
            payoff: Payoff::Quadratic { weight: 1.0 },
        }
    }

    /// Number of noise (and control) channels.
    pub fn noise_dim(&self) -> usize {
        self.noise_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("level {}: {msg}", self.level_index)));
        if self.dim == 0 {
            return fail("dimension must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt {} must be positive", self.dt));
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return fail(format!("cost {} must be positive", self.cost));
        }
        if self.noise_channels.is_empty() {
            return fail("at least one noise channel is required".into());
        }
        let n = self.dim;
        let m = self.noise_dim();
        match &self.dynamics {
            Dynamics::LinearDiagonal { k, sigma } => {
                if k.len() != n || sigma.len() != n || m != n {
                    return fail(format!(
                        "linear diagonal dynamics need k, sigma and channels of length {n}"
                    ));
                }
            }
            Dynamics::LinearMap { k } => {
                if k.len() != n || m != n {
                    return fail(format!("linear map dynamics need k and channels of length {n}"));
                }
            }
            Dynamics::Sde { .. } | Dynamics::Discrete(_) => {}
        }
        if let FeatureMap::Prefix(p) = self.feature_map {
            if p != n {
                return fail(format!("prefix feature map of width {p} does not match dimension {n}"));
            }
        }
        Ok(())
    }

    /// Feature-space initial state, checked against `dim`.
    pub fn initial_feature(&self, x0_full: &[f64]) -> Result<Vec<f64>> {
        let xi = self.feature_map.project(x0_full);
        if xi.len() != self.dim || xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "level {}: initial state does not map to a finite point of dimension {}",
                self.level_index, self.dim
            )));
        }
        Ok(xi)
    }

    /// Steps of size `dt` in `span`, if it divides exactly.
    pub fn steps_in(&self, span: f64) -> Result<usize> {
        whole_steps(span, self.dt).ok_or_else(|| {
            Error::config(format!(
                "level {}: dt {} does not divide {span}",
                self.level_index, self.dt
            ))
        })
    }
}

/// Check that costs are positive and strictly increasing across levels.
pub fn validate_cost_order(levels: &[LevelSpec]) -> Result<()> {
    for w in levels.windows(2) {
        if !(w[1].cost > w[0].cost) {
            return Err(Error::config(format!(
                "costs must be strictly increasing, level {} costs {} after {}",
                w[1].level_index, w[1].cost, w[0].cost
            )));
        }
    }
    Ok(())
}

/// A simulated path in feature space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub level_index: usize,
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    pub control_dim: usize,
    /// `(n_steps + 1) × dim`, row-major.
    pub states: Vec<f64>,
    /// `n_steps × control_dim`.
    pub controls: Vec<f64>,
    /// `n_steps × control_dim`.
    pub noise_used: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.controls.len() / self.control_dim.max(1)
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.control_dim..(k + 1) * self.control_dim]
    }
    pub fn noise(&self, k: usize) -> &[f64] {
        &self.noise_used[k * self.control_dim..(k + 1) * self.control_dim]
    }
    pub fn final_state(&self) -> &[f64] {
        self.state(self.n_steps())
    }
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|k| self.t0 + k as f64 * self.dt).collect()
    }
}

/// Scratch space reused across simulations on one thread.
#[derive(Debug, Default)]
pub struct Workspace {
    drift: Vec<f64>,
    gain: Vec<f64>,
    drive: Vec<f64>,
}

/// Simulate from feature state `xi0` at time `t0` using step-major
/// increments (`n_steps × noise_dim`), writing into `traj`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_into(
    spec: &LevelSpec,
    xi0: &[f64],
    t0: f64,
    policy: &dyn Policy,
    increments: &[f64],
    path: u64,
    traj: &mut Trajectory,
    ws: &mut Workspace,
) -> Result<()> {
    let n = spec.dim;
    let m = spec.noise_dim();
    let steps = increments.len() / m;
    let dt = spec.dt;
    traj.level_index = spec.level_index;
    traj.t0 = t0;
    traj.dt = dt;
    traj.dim = n;
    traj.control_dim = m;
    traj.states.clear();
    traj.states.resize((steps + 1) * n, 0.0);
    traj.states[..n].copy_from_slice(xi0);
    traj.controls.clear();
    traj.controls.resize(steps * m, 0.0);
    traj.noise_used.clear();
    traj.noise_used.extend_from_slice(&increments[..steps * m]);
    let run = Run {
        policy,
        increments,
        t0,
        dt,
        n,
        m,
        level: spec.level_index,
        path,
    };

    match &spec.dynamics {
        Dynamics::LinearDiagonal { k: kk, sigma } => run.steps(traj, |_, x, u, dw, next| {
            let (kk, sigma, u, dw) = (&kk[..n], &sigma[..n], &u[..n], &dw[..n]);
            for i in 0..n {
                next[i] = x[i] - kk[i] * x[i] * dt + sigma[i] * (u[i] * dt + dw[i]);
            }
        }),
        Dynamics::LinearMap { k: kk } => run.steps(traj, |_, x, u, dw, next| {
            let (kk, u, dw) = (&kk[..n], &u[..n], &dw[..n]);
            for i in 0..n {
                next[i] = kk[i] * x[i] + (u[i] * dt + dw[i]);
            }
        }),
        Dynamics::Sde { drift, diffusion } => {
            ws.drive.resize(m, 0.0);
            ws.drift.resize(n, 0.0);
            ws.gain.resize(n * m, 0.0);
            run.steps(traj, |t, x, u, dw, next| {
                for j in 0..m {
                    ws.drive[j] = u[j] * dt + dw[j];
                }
                drift(t, x, &mut ws.drift);
                diffusion(t, x, &mut ws.gain);
                for i in 0..n {
                    let row = &ws.gain[i * m..(i + 1) * m];
                    let noise: f64 = row.iter().zip(&ws.drive).map(|(g, d)| g * d).sum();
                    next[i] = x[i] + ws.drift[i] * dt + noise;
                }
            })
        }
        Dynamics::Discrete(map) => run.steps(traj, |_, x, u, dw, next| map(x, u, dw, dt, next)),
    }
}

/// The fixed inputs of one simulation; `steps` is monomorphized per update rule.
struct Run<'a> {
    policy: &'a dyn Policy,
    increments: &'a [f64],
    t0: f64,
    dt: f64,
    n: usize,
    m: usize,
    level: usize,
    path: u64,
}

impl Run<'_> {
    #[inline]
    fn steps(
        &self,
        traj: &mut Trajectory,
        mut update: impl FnMut(f64, &[f64], &[f64], &[f64], &mut [f64]),
    ) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let steps = traj.controls.len() / m;
        let zero = self.policy.is_zero();
        for k in 0..steps {
            let t = self.t0 + k as f64 * self.dt;
            let (done, rest) = traj.states.split_at_mut((k + 1) * n);
            let x = &done[k * n..];
            let next = &mut rest[..n];
            let u = &mut traj.controls[k * m..(k + 1) * m];
            if !zero {
                self.policy.control(k, t, x, u);
            }
            update(t, x, u, &self.increments[k * m..(k + 1) * m], next);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    level: self.level,
                    path: self.path,
                    step: k + 1,
                });
            }
        }
        Ok(())
    }
}

/// Simulate one path of `grid` (already coarsened to the level's `dt`) from
/// the full initial state.
pub fn simulate_level(
    spec: &LevelSpec,
    x0_full: &[f64],
    policy: &dyn Policy,
    grid: &NoiseGrid,
    path_index: usize,
) -> Result<Trajectory> {
    spec.validate()?;
    check_grid(spec, grid)?;
    if path_index >= grid.n_paths() {
        return Err(Error::config(format!(
            "path {path_index} is outside a grid of {} paths",
            grid.n_paths()
        )));
    }
    let xi0 = spec.initial_feature(x0_full)?;
    let increments = select_channels(grid, path_index, &spec.noise_channels);
    let mut traj = Trajectory::default();
    simulate_into(
        spec,
        &xi0,
        0.0,
        policy,
        &increments,
        path_index as u64,
        &mut traj,
        &mut Workspace::default(),
    )?;
    Ok(traj)
}

pub(crate) fn check_grid(spec: &LevelSpec, grid: &NoiseGrid) -> Result<()> {
    let ratio = spec.dt / grid.dt();
    if (ratio - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "level {}: grid step {} does not match level step {}",
            spec.level_index,
            grid.dt(),
            spec.dt
        )));
    }
    if let Some(&c) = spec.noise_channels.iter().find(|&&c| c >= grid.m()) {
        return Err(Error::config(format!(
            "level {}: noise channel {c} is outside the master dimension {}",
            spec.level_index,
            grid.m()
        )));
    }
    Ok(())
}

pub(crate) fn select_channels(grid: &NoiseGrid, path: usize, channels: &[usize]) -> Vec<f64> {
    let row = grid.path(path);
    let m = grid.m();
    let mut out = Vec::with_capacity(grid.n_steps() * channels.len());
    for k in 0..grid.n_steps() {
        for &c in channels {
            out.push(row[k * m + c]);
        }
    }
    out
}
