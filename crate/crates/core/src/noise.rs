//! Wiener increments shared by every level of an estimator.
//!
//! Each (seed, channel, path) triple owns its own generator, seeded from a
//! hash of the channel key and the path index. A path's
//! increments therefore never depend on how many other paths are generated,
//! on evaluation order, or on the thread schedule.

use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix two words into a derived seed.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut s = seed ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93);
    splitmix64(&mut s);
    splitmix64(&mut s)
}

/// Generator for substream `(key, stream)`.
pub(crate) fn stream_rng(key: u64, stream: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(key, stream))
}

/// Number of whole steps of size `dt` in `span`, if it divides exactly.
pub(crate) fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    if !(dt > 0.0) || !(span > 0.0) || !dt.is_finite() || !span.is_finite() {
        return None;
    }
    let ratio = span / dt;
    let n = ratio.round();
    if n >= 1.0 && (ratio - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

/// Lazily evaluated finest-resolution noise: `m` channels over `n_steps`
/// steps of size `dt`, for an unbounded number of paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSource {
    seed: u64,
    m: usize,
    dt: f64,
    n_steps: usize,
}

impl NoiseSource {
    pub fn new(seed: u64, m: usize, dt_fine: f64, horizon: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("noise dimension must be at least 1"));
        }
        let n_steps = whole_steps(horizon, dt_fine).ok_or_else(|| {
            Error::config(format!(
                "horizon {horizon} is not a positive integer multiple of dt {dt_fine}"
            ))
        })?;
        Ok(Self {
            seed,
            m,
            dt: dt_fine,
            n_steps,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn channel_key(&self, channel: usize) -> u64 {
        derive_seed(self.seed, channel as u64 + 1)
    }

    /// Fill `out` (length `n_steps`) with the increments of one channel.
    pub fn fill_channel(&self, path: u64, channel: usize, out: &mut [f64]) {
        debug_assert!(channel < self.m);
        debug_assert_eq!(out.len(), self.n_steps);
        let mut rng = stream_rng(self.channel_key(channel), path);
        let scale = self.dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }

    /// Step-major increments (`n_steps × m`) for one path.
    pub fn fill_path(&self, path: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_steps * self.m);
        let mut column = vec![0.0; self.n_steps];
        for c in 0..self.m {
            self.fill_channel(path, c, &mut column);
            for (k, v) in column.iter().enumerate() {
                out[k * self.m + c] = *v;
            }
        }
    }

    /// Increments for a subset of channels, block-summed by `factor`.
    ///
    /// `fine` receives the raw channel columns (channel-major) and `out` the
    /// coarse step-major result, `(n_steps / factor) × channels.len()`.
    pub fn level_increments(
        &self,
        path: u64,
        channels: &[usize],
        factor: usize,
        fine: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        let n = self.n_steps;
        let coarse = n / factor;
        let width = channels.len();
        fine.resize(n * width, 0.0);
        for (j, &c) in channels.iter().enumerate() {
            self.fill_channel(path, c, &mut fine[j * n..(j + 1) * n]);
        }
        out.clear();
        out.resize(coarse * width, 0.0);
        for (j, col) in fine.chunks_exact(n).enumerate() {
            if factor == 1 {
                for (k, v) in col.iter().enumerate() {
                    out[k * width + j] = *v;
                }
            } else {
                for (k, block) in col.chunks_exact(factor).enumerate() {
                    out[k * width + j] = block_sum(block);
                }
            }
        }
    }
}

#[inline]
fn block_sum(block: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in block {
        acc += *v;
    }
    acc
}

/// A materialized `n_paths × n_steps × m` array of Wiener increments.
///
/// Coarsened grids keep a handle to the finest increments and always sum
/// from them, so coarsening by `k1` then `k2` is bit-identical to coarsening
/// by `k1 * k2`.
#[derive(Debug, Clone)]
pub struct NoiseGrid {
    seed: u64,
    n_paths: usize,
    m: usize,
    dt_fine: f64,
    fine_steps: usize,
    factor: usize,
    fine: Arc<[f64]>,
    increments: Vec<f64>,
}

impl NoiseGrid {
    pub fn generate(seed: u64, n_paths: usize, m: usize, dt_fine: f64, horizon: f64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::config("a noise grid needs at least one path"));
        }
        let source = NoiseSource::new(seed, m, dt_fine, horizon)?;
        let stride = source.n_steps() * m;
        let mut data = vec![0.0; n_paths * stride];
        data.par_chunks_mut(stride)
            .enumerate()
            .for_each(|(p, chunk)| source.fill_path(p as u64, chunk));
        let fine: Arc<[f64]> = data.into();
        Ok(Self {
            seed,
            n_paths,
            m,
            dt_fine,
            fine_steps: source.n_steps(),
            factor: 1,
            increments: fine.to_vec(),
            fine,
        })
    }

    /// Wrap explicit finest-level increments (`n_paths × n_steps × m`).
    pub fn from_increments(increments: Vec<f64>, n_paths: usize, m: usize, dt: f64) -> Result<Self> {
        if n_paths == 0 || m == 0 {
            return Err(Error::config("a noise grid needs at least one path and channel"));
        }
        if !(dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        if increments.is_empty() || increments.len() % (n_paths * m) != 0 {
            return Err(Error::config(format!(
                "{} increments do not fill {n_paths} paths of {m} channels",
                increments.len()
            )));
        }
        let fine_steps = increments.len() / (n_paths * m);
        let fine: Arc<[f64]> = increments.into();
        Ok(Self {
            seed: 0,
            n_paths,
            m,
            dt_fine: dt,
            fine_steps,
            factor: 1,
            increments: fine.to_vec(),
            fine,
        })
    }

    /// Block-sum `k` consecutive increments per channel.
    pub fn coarsen(&self, k: usize) -> Result<NoiseGrid> {
        if k == 0 || self.n_steps() % k != 0 {
            return Err(Error::config(format!(
                "coarsening factor {k} does not divide {} steps",
                self.n_steps()
            )));
        }
        let factor = self.factor * k;
        let coarse_steps = self.fine_steps / factor;
        let m = self.m;
        let fine_stride = self.fine_steps * m;
        let mut increments = vec![0.0; self.n_paths * coarse_steps * m];
        increments
            .par_chunks_mut(coarse_steps * m)
            .enumerate()
            .for_each(|(p, out)| {
                let path = &self.fine[p * fine_stride..(p + 1) * fine_stride];
                for s in 0..coarse_steps {
                    for c in 0..m {
                        let mut acc = 0.0;
                        for f in s * factor..(s + 1) * factor {
                            acc += path[f * m + c];
                        }
                        out[s * m + c] = acc;
                    }
                }
            });
        Ok(NoiseGrid {
            factor,
            increments,
            fine: Arc::clone(&self.fine),
            ..*self
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n_steps(&self) -> usize {
        self.fine_steps / self.factor
    }
    pub fn dt(&self) -> f64 {
        self.dt_fine * self.factor as f64
    }
    pub fn dt_fine(&self) -> f64 {
        self.dt_fine
    }
    pub fn horizon(&self) -> f64 {
        self.dt_fine * self.fine_steps as f64
    }
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Step-major increments of one path.
    pub fn path(&self, index: usize) -> &[f64] {
        let stride = self.n_steps() * self.m;
        &self.increments[index * stride..(index + 1) * stride]
    }

    pub fn get(&self, path: usize, step: usize, channel: usize) -> f64 {
        self.path(path)[step * self.m + channel]
    }
}
