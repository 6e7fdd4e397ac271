//! Exact finite-horizon LQ solution for `x' = A x + dt u + w`, `w ~ N(0, dt I)`,
//! with cost `Σ_k ½(x'Qx + u'Ru) dt + ½ x_n' Q_f x_n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::noise::whole_steps;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub dt: f64,
    /// Feedback gains `G_k`, so that `u_k = −G_k x_k`.
    pub gains: Vec<DMatrix<f64>>,
    /// Value matrices `P_0 … P_n`.
    pub value: Vec<DMatrix<f64>>,
    /// Noise-driven value constants `c_0 … c_n`.
    pub constants: Vec<f64>,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.gains.len()
    }

    pub fn control(&self, step: usize, x: &[f64]) -> Vec<f64> {
        let u = -(&self.gains[step] * DVector::from_column_slice(x));
        u.iter().copied().collect()
    }

    /// Expected optimal cost from state `x` at `step`.
    pub fn cost_to_go(&self, step: usize, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * (x.transpose() * &self.value[step] * &x)[(0, 0)] + self.constants[step]
    }
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    let scale = m.amax().max(1.0);
    sym.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12 * scale)
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    ((m + m.transpose()) * 0.5).cholesky().is_some()
}

pub fn riccati_oracle(
    a: &DMatrix<f64>,
    dt: f64,
    horizon: f64,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_final: &DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) || r.shape() != (n, n) || q_final.shape() != (n, n) {
        return Err(Error::config(
            "dynamics and weight matrices must be square and of equal size",
        ));
    }
    if !is_pd(r) {
        return Err(Error::CostWeights("control weight must be positive definite".into()));
    }
    if !is_psd(q) || !is_psd(q_final) {
        return Err(Error::CostWeights("state weights must be positive semidefinite".into()));
    }
    let steps = whole_steps(horizon, dt)
        .ok_or_else(|| Error::config(format!("dt {dt} does not divide the horizon {horizon}")))?;

    let mut value = vec![DMatrix::zeros(n, n); steps + 1];
    let mut gains = vec![DMatrix::zeros(n, n); steps];
    let mut constants = vec![0.0; steps + 1];
    value[steps] = q_final.clone();
    for k in (0..steps).rev() {
        let p = value[k + 1].clone();
        let lhs = r + &p * dt;
        let g = lhs
            .clone()
            .lu()
            .solve(&(&p * a))
            .ok_or_else(|| Error::CostWeights("singular gain system".into()))?;
        let next = q * dt + a.transpose() * &p * (a - &g * dt);
        value[k] = (&next + next.transpose()) * 0.5;
        constants[k] = constants[k + 1] + 0.5 * p.trace() * dt;
        gains[k] = g;
    }
    Ok(RiccatiSolution {
        dt,
        gains,
        value,
        constants,
    })
}

/// Scalar convenience wrapper.
pub fn scalar_riccati(
    k: f64,
    dt: f64,
    horizon: f64,
    state_weight: f64,
    control_weight: f64,
    terminal_weight: f64,
) -> Result<RiccatiSolution> {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    riccati_oracle(
        &m(k),
        dt,
        horizon,
        &m(state_weight),
        &m(control_weight),
        &m(terminal_weight),
    )
}
