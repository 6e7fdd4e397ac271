//! Pilot statistics, optimal coefficients, variance prediction and
//! budget-constrained sample allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{coupled_samples, validate_coefficients, validate_counts, Coupling, Level};
use crate::sum::{ordered_mean, sample_variance};

/// Per-level standard deviations, correlations with the top level, and costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub sigma: Vec<f64>,
    /// `ρ_{l,L}`; the last entry is 1.
    pub rho: Vec<f64>,
    pub cost: Vec<f64>,
    pub n_pilot: usize,
}

/// Which ordering assumptions the statistics satisfy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `|ρ_1| < … < |ρ_L|`.
    pub correlation_ordering: bool,
    /// `C_{l+1}/C_l > (ρ²_{l+1} − ρ²_l)/(ρ²_l − ρ²_{l−1})` with `ρ_0 = 0`.
    pub cost_ratio: bool,
    pub violations: Vec<String>,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        self.correlation_ordering && self.cost_ratio
    }
}

impl LevelStats {
    pub fn new(sigma: Vec<f64>, rho: Vec<f64>, cost: Vec<f64>, n_pilot: usize) -> Result<Self> {
        let l = sigma.len();
        if l == 0 || rho.len() != l || cost.len() != l {
            return Err(Error::DegenerateStats(format!(
                "need matching non-empty sigma, rho and cost, got {}, {}, {}",
                l,
                rho.len(),
                cost.len()
            )));
        }
        if sigma.iter().chain(&rho).any(|v| !v.is_finite()) || sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::DegenerateStats("sigma must be finite and non-negative".into()));
        }
        if rho.iter().any(|r| r.abs() > 1.0 + 1e-12) {
            return Err(Error::DegenerateStats("correlations must lie in [-1, 1]".into()));
        }
        if cost.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::CostWeights("costs must be positive and finite".into()));
        }
        Ok(Self {
            sigma,
            rho,
            cost,
            n_pilot,
        })
    }

    pub fn levels(&self) -> usize {
        self.sigma.len()
    }

    /// `V_L = σ_L²`.
    pub fn top_variance(&self) -> f64 {
        let s = self.sigma[self.levels() - 1];
        s * s
    }

    pub fn assumptions(&self) -> AssumptionReport {
        let l = self.levels();
        let mut violations = Vec::new();
        let abs: Vec<f64> = self.rho.iter().map(|r| r.abs()).collect();
        for i in 1..l {
            if !(abs[i] > abs[i - 1]) {
                violations.push(format!("|rho| is not increasing between levels {} and {}", i, i + 1));
            }
        }
        let correlation_ordering = violations.is_empty();
        let sq = |i: usize| if i == 0 { 0.0 } else { self.rho[i - 1] * self.rho[i - 1] };
        let mut cost_ratio = true;
        for i in 1..l {
            let lhs = self.cost[i] / self.cost[i - 1];
            let denom = sq(i) - sq(i - 1);
            let rhs = (sq(i + 1) - sq(i)) / denom;
            if !(denom > 0.0 && lhs > rhs) {
                cost_ratio = false;
                violations.push(format!(
                    "cost ratio {lhs:.4} between levels {} and {} does not exceed {rhs:.4}",
                    i,
                    i + 1
                ));
            }
        }
        AssumptionReport {
            correlation_ordering,
            cost_ratio,
            violations,
        }
    }
}

/// Estimate `σ_l` and `ρ_{l,L}` from `n_pilot` coupled paths.
pub fn pilot_statistics(
    levels: &[Level],
    x0_full: &[f64],
    horizon: f64,
    n_pilot: usize,
    seed: u64,
) -> Result<LevelStats> {
    if n_pilot < 30 {
        return Err(Error::SampleCounts(format!(
            "pilot needs at least 30 paths, got {n_pilot}"
        )));
    }
    let samples = coupled_samples(levels, x0_full, horizon, n_pilot, seed)?;
    stats_from_samples(&samples, levels.iter().map(|l| l.spec.cost).collect(), n_pilot)
}

/// Sample moments of coupled per-level values.
pub fn stats_from_samples(samples: &[Vec<f64>], cost: Vec<f64>, n_pilot: usize) -> Result<LevelStats> {
    let l = samples.len();
    if l == 0 {
        return Err(Error::EmptySample);
    }
    let means: Vec<f64> = samples.iter().map(|v| ordered_mean(v)).collect();
    let sigma: Vec<f64> = samples
        .iter()
        .zip(&means)
        .map(|(v, &m)| sample_variance(v, m).sqrt())
        .collect();
    let top = &samples[l - 1];
    if !(sigma[l - 1] > 0.0) {
        return Err(Error::DegenerateStats(
            "the top level has zero variance, correlations are undefined".into(),
        ));
    }
    let rho = (0..l)
        .map(|i| {
            if i == l - 1 {
                return 1.0;
            }
            if sigma[i] == 0.0 {
                return 0.0;
            }
            let n = samples[i].len().min(top.len());
            let cov: f64 = (0..n)
                .map(|k| (samples[i][k] - means[i]) * (top[k] - means[l - 1]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            (cov / (sigma[i] * sigma[l - 1])).clamp(-1.0, 1.0)
        })
        .collect();
    LevelStats::new(sigma, rho, cost, n_pilot)
}

/// `a*_l = ρ_{l,L} σ_L / σ_l`, with `a*_L = 1`.
pub fn optimal_coefficients(stats: &LevelStats) -> Result<Vec<f64>> {
    let l = stats.levels();
    if let Some(i) = stats.sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateStats(format!(
            "level {} has zero standard deviation",
            i + 1
        )));
    }
    let top = stats.sigma[l - 1];
    Ok((0..l)
        .map(|i| {
            if i == l - 1 {
                1.0
            } else {
                stats.rho[i] * top / stats.sigma[i]
            }
        })
        .collect())
}

/// Per-level variance contributions `R_l` under optimal coefficients:
/// `V_L (ρ_l² ∓ ρ_{l−1}²)`, minus when coupled and plus when independent.
pub fn variance_contributions(stats: &LevelStats, coupling: Coupling) -> Vec<f64> {
    let v = stats.top_variance();
    let sign = match coupling {
        Coupling::Coupled => -1.0,
        Coupling::Independent => 1.0,
    };
    (0..stats.levels())
        .map(|i| {
            let cur = stats.rho[i] * stats.rho[i];
            let prev = if i == 0 {
                0.0
            } else {
                stats.rho[i - 1] * stats.rho[i - 1]
            };
            v * (cur + sign * prev)
        })
        .collect()
}

/// Weights `W_l` with `Var(Y) = Σ W_l / N_l` for arbitrary coefficients.
pub fn variance_weights(stats: &LevelStats, coefficients: &[f64], coupling: Coupling) -> Vec<f64> {
    let l = stats.levels();
    let var = |i: usize| stats.sigma[i] * stats.sigma[i];
    let top = stats.sigma[l - 1];
    match coupling {
        Coupling::Coupled => {
            // Q_l = a_l² V_l − 2 a_l Cov(h_l, h_L) for l < L, Q_0 = 0, Q_L = −a_L² V_L.
            let q = |i: usize| -> f64 {
                if i == 0 {
                    0.0
                } else if i == l {
                    -coefficients[l - 1].powi(2) * var(l - 1)
                } else {
                    let a = coefficients[i - 1];
                    a * a * var(i - 1) - 2.0 * a * stats.rho[i - 1] * stats.sigma[i - 1] * top
                }
            };
            (1..=l).map(|i| q(i - 1) - q(i)).collect()
        }
        Coupling::Independent => (0..l)
            .map(|i| {
                let own = coefficients[i].powi(2) * var(i);
                let below = if i == 0 {
                    0.0
                } else {
                    coefficients[i - 1].powi(2) * var(i - 1)
                };
                own + below
            })
            .collect(),
    }
}

/// Estimator variance for real-valued counts.
///
/// Assembled from its parts: the top-level variance, the variance of each
/// lower-level difference `a_l (P_l^(N_l) − P_l^(N_{l+1}))`, and the
/// cross term between the top level and those differences.
pub fn variance_at(stats: &LevelStats, coefficients: &[f64], counts: &[f64], coupling: Coupling) -> f64 {
    let l = stats.levels();
    let top = stats.sigma[l - 1];
    let a_top = coefficients[l - 1];
    let mut total = a_top * a_top * top * top / counts[l - 1];
    let mut cross = 0.0;
    for i in 0..l - 1 {
        let v = stats.sigma[i] * stats.sigma[i];
        let (n, n_next) = (counts[i], counts[i + 1]);
        let reuse_cov = match coupling {
            Coupling::Coupled => v / n,
            Coupling::Independent => 0.0,
        };
        total += coefficients[i].powi(2) * (v / n + v / n_next - 2.0 * reuse_cov);
        if coupling == Coupling::Coupled {
            cross += 2.0 * coefficients[i] * stats.rho[i] * stats.sigma[i] * top * (1.0 / n_next - 1.0 / n);
        }
    }
    total - cross
}

pub fn predicted_variance(
    stats: &LevelStats,
    coefficients: &[f64],
    counts: &[usize],
    coupling: Coupling,
) -> Result<f64> {
    let l = stats.levels();
    validate_coefficients(coefficients, l)?;
    validate_counts(counts, l)?;
    let n: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(variance_at(stats, coefficients, &n, coupling))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub coefficients: Vec<f64>,
    pub counts: Vec<usize>,
    pub coupling: Coupling,
    pub predicted_variance: f64,
    pub budget: f64,
    /// `Σ N_l C_l` of the integer plan.
    pub cost: f64,
    /// Unconstrained continuous optimum `B/Σ√(C_j W_j) · √(W_l/C_l)`.
    pub continuous_counts: Vec<f64>,
    /// `(Σ √(W_l C_l))² / B`.
    pub continuous_variance: f64,
    pub assumptions: AssumptionReport,
}

/// Allocation with the optimal coefficients.
pub fn optimal_allocation(stats: &LevelStats, budget: f64, coupling: Coupling) -> Result<AllocationPlan> {
    let a = optimal_coefficients(stats)?;
    allocate(stats, &a, coupling, budget)
}

/// Budget-optimal integer counts for given coefficients.
pub fn allocate(stats: &LevelStats, coefficients: &[f64], coupling: Coupling, budget: f64) -> Result<AllocationPlan> {
    validate_coefficients(coefficients, stats.levels())?;
    let w = variance_weights(stats, coefficients, coupling);
    let counts = allocate_counts(&w, &stats.cost, budget)?;
    let s: f64 = w.iter().zip(&stats.cost).map(|(w, c)| (w.max(0.0) * c).sqrt()).sum();
    let continuous_counts = w
        .iter()
        .zip(&stats.cost)
        .map(|(w, c)| budget / s * (w.max(0.0) / c).sqrt())
        .collect();
    let predicted_variance = predicted_variance(stats, coefficients, &counts, coupling)?;
    Ok(AllocationPlan {
        coefficients: coefficients.to_vec(),
        cost: counts.iter().zip(&stats.cost).map(|(&n, c)| n as f64 * c).sum(),
        counts,
        coupling,
        predicted_variance,
        budget,
        continuous_counts,
        continuous_variance: s * s / budget,
        assumptions: stats.assumptions(),
    })
}

/// Continuous minimizer of `Σ W_l/N_l` subject to `Σ C_l N_l = B` and
/// `N_1 ≥ … ≥ N_L`, by merging adjacent violating blocks.
fn monotone_continuous(w: &[f64], c: &[f64], budget: f64) -> Vec<f64> {
    // (sum W, sum C, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&wi, &ci) in w.iter().zip(c) {
        blocks.push((wi.max(0.0), ci, 1));
        while blocks.len() > 1 {
            let (w2, c2, n2) = blocks[blocks.len() - 1];
            let (w1, c1, n1) = blocks[blocks.len() - 2];
            if w2 / c2 > w1 / c1 {
                blocks.truncate(blocks.len() - 2);
                blocks.push((w1 + w2, c1 + c2, n1 + n2));
            } else {
                break;
            }
        }
    }
    let s: f64 = blocks.iter().map(|(w, c, _)| (w * c).sqrt()).sum();
    let mut out = Vec::with_capacity(w.len());
    for (bw, bc, len) in blocks {
        let n = if s > 0.0 {
            budget / s * (bw / bc).sqrt()
        } else {
            budget / c.iter().sum::<f64>()
        };
        out.extend(std::iter::repeat_n(n, len));
    }
    out
}

fn spent(n: &[usize], c: &[f64]) -> f64 {
    n.iter().zip(c).map(|(&n, c)| n as f64 * c).sum()
}

fn variance_of(w: &[f64], n: &[usize]) -> f64 {
    w.iter().zip(n).map(|(w, &n)| w / n as f64).sum()
}

/// Levels that must also grow when level `i` is incremented.
fn raise_chain(n: &[usize], i: usize) -> Vec<usize> {
    let target = n[i] + 1;
    (0..i).filter(|&j| n[j] < target).chain(std::iter::once(i)).collect()
}

/// Levels that must also shrink when level `i` is decremented.
fn lower_chain(n: &[usize], i: usize) -> Option<Vec<usize>> {
    if n[i] <= 1 {
        return None;
    }
    let target = n[i] - 1;
    Some(
        std::iter::once(i)
            .chain((i + 1..n.len()).filter(|&j| n[j] > target))
            .collect(),
    )
}

/// Integer counts minimizing `Σ W_l/N_l` within budget, monotone and ≥ 1.
///
/// A rounded continuous solution repaired by greedy moves seeds an exact
/// branch-and-bound search.
pub fn allocate_counts(weights: &[f64], costs: &[f64], budget: f64) -> Result<Vec<usize>> {
    let l = weights.len();
    if l == 0 || costs.len() != l {
        return Err(Error::CostWeights(
            "weights and costs must have the same non-zero length".into(),
        ));
    }
    if costs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::CostWeights("costs must be positive and finite".into()));
    }
    let minimum: f64 = costs.iter().sum();
    if !(budget >= minimum) {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let w: Vec<f64> = weights.iter().map(|v| v.max(0.0)).collect();
    let mut n: Vec<usize> = monotone_continuous(&w, costs, budget)
        .iter()
        .map(|&x| (x.floor() as usize).max(1))
        .collect();
    for i in 1..l {
        n[i] = n[i].min(n[i - 1]);
    }

    // Enforcing N ≥ 1 can overspend: shed the cheapest variance per unit cost.
    while spent(&n, costs) > budget {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for i in 0..l {
            if let Some(chain) = lower_chain(&n, i) {
                let loss: f64 = chain
                    .iter()
                    .map(|&j| w[j] / (n[j] - 1) as f64 - w[j] / n[j] as f64)
                    .sum();
                let freed: f64 = chain.iter().map(|&j| costs[j]).sum();
                let score = loss / freed;
                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                    best = Some((score, chain));
                }
            }
        }
        let (_, chain) = best.expect("a feasible budget always leaves a level to shed");
        for j in chain {
            n[j] -= 1;
        }
    }

    // Re-spend leftover budget on the best marginal variance reduction per unit cost.
    loop {
        let left = budget - spent(&n, costs);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for i in 0..l {
            let chain = raise_chain(&n, i);
            let price: f64 = chain.iter().map(|&j| costs[j]).sum();
            if price > left {
                continue;
            }
            let gain: f64 = chain.iter().map(|&j| w[j] / (n[j] as f64 * (n[j] + 1) as f64)).sum();
            let score = gain / price;
            if score > 0.0 && best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, chain));
            }
        }
        match best {
            Some((_, chain)) => chain.into_iter().for_each(|j| n[j] += 1),
            None => break,
        }
    }

    // Local search: trade one unit of a level for another when it helps.
    let mut current = variance_of(&w, &n);
    for _ in 0..10 * l * l {
        let mut improved = false;
        'outer: for down in 0..l {
            let Some(lower) = lower_chain(&n, down) else { continue };
            let mut trial = n.clone();
            for &j in &lower {
                trial[j] -= 1;
            }
            for up in 0..l {
                if up == down {
                    continue;
                }
                let mut cand = trial.clone();
                for j in raise_chain(&cand, up) {
                    cand[j] += 1;
                }
                if spent(&cand, costs) <= budget {
                    let v = variance_of(&w, &cand);
                    if v < current * (1.0 - 1e-12) {
                        n = cand;
                        current = v;
                        improved = true;
                        break 'outer;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(branch_and_bound(&w, costs, budget, n))
}

/// Nodes visited by [`branch_and_bound`] before it settles for the best
/// allocation found so far.
const NODE_LIMIT: usize = 1_000_000;

/// Exact search seeded with an incumbent. Levels are fixed from the top
/// down and level 1 takes whatever budget remains. A partial assignment is
/// bounded below by the continuous optimum of its free levels.
fn branch_and_bound(w: &[f64], c: &[f64], budget: f64, incumbent: Vec<usize>) -> Vec<usize> {
    let l = w.len();
    let mut search = Search {
        w,
        c,
        best: variance_of(w, &incumbent),
        best_n: incumbent,
        n: vec![0; l],
        nodes: 0,
    };
    search.descend(l - 1, budget, 0.0);
    search.best_n
}

struct Search<'a> {
    w: &'a [f64],
    c: &'a [f64],
    best: f64,
    best_n: Vec<usize>,
    n: Vec<usize>,
    nodes: usize,
}

impl Search<'_> {
    fn descend(&mut self, level: usize, left: f64, fixed: f64) {
        if self.nodes >= NODE_LIMIT {
            return;
        }
        self.nodes += 1;
        let (w, c) = (self.w[level], self.c[level]);
        let lo = if level + 1 < self.w.len() { self.n[level + 1] } else { 1 };
        let below: f64 = self.c[..level].iter().sum();
        let hi = (left / (c + below)).floor();
        if hi < lo as f64 {
            return;
        }
        let hi = hi as usize;
        if level == 0 {
            let n0 = if w > 0.0 { hi } else { lo };
            let v = fixed + w / n0 as f64;
            if v < self.best {
                self.best = v;
                self.n[0] = n0;
                self.best_n.clone_from(&self.n);
            }
            return;
        }
        if w <= 0.0 {
            self.n[level] = lo;
            self.descend(level - 1, left - lo as f64 * c, fixed);
            return;
        }
        let s: f64 = (0..level).map(|j| (self.w[j] * self.c[j]).sqrt()).sum();
        let bound = |k: usize| fixed + w / k as f64 + s * s / (left - k as f64 * c);
        let peak = left / (c + s * (c / w).sqrt());
        let start = (peak.floor().max(0.0) as usize).clamp(lo, hi);

        let mut k = start;
        loop {
            let b = bound(k);
            if b < self.best {
                self.n[level] = k;
                self.descend(level - 1, left - k as f64 * c, fixed + w / k as f64);
            } else if k as f64 > peak {
                break;
            }
            if k == hi || self.nodes >= NODE_LIMIT {
                break;
            }
            k += 1;
        }
        let mut k = start;
        while k > lo && self.nodes < NODE_LIMIT {
            k -= 1;
            if bound(k) >= self.best {
                break;
            }
            self.n[level] = k;
            self.descend(level - 1, left - k as f64 * c, fixed + w / k as f64);
        }
    }
}
