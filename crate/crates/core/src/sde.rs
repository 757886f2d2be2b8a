//! Euler–Maruyama simulation of diagonal-noise SDEs with first-exit detection.
//!
//! Every path owns a `ChaCha8Rng` stream seeded with `seed ^ path_index`, so a
//! batch of paths is independent of the order (or thread) in which it is
//! produced.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{KanoError, Result};

/// `x ↦ v(x)` written into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type Membership = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct SdeSpec {
    pub d: usize,
    pub drift: VectorField,
    /// Diagonal entries `σ_{i,i}(x)`.
    pub diffusion: VectorField,
    /// Domain `D` for the exit time; `None` is the whole space.
    pub domain: Option<Membership>,
    pub horizon: f64,
    pub dt: f64,
}

impl std::fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeSpec")
            .field("d", &self.d)
            .field("bounded_domain", &self.domain.is_some())
            .field("horizon", &self.horizon)
            .field("dt", &self.dt)
            .finish()
    }
}

impl SdeSpec {
    pub fn new(d: usize, drift: VectorField, diffusion: VectorField, horizon: f64, dt: f64) -> Result<Self> {
        let spec = SdeSpec {
            d,
            drift,
            diffusion,
            domain: None,
            horizon,
            dt,
        };
        spec.steps()?;
        Ok(spec)
    }

    pub fn with_domain(mut self, domain: Membership) -> Self {
        self.domain = Some(domain);
        self
    }

    /// `N = T/Δt`, which must be an integer.
    pub fn steps(&self) -> Result<usize> {
        if self.d == 0 {
            return Err(KanoError::config("SDE dimension must be positive"));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(KanoError::config(format!(
                "need Δt > 0 and T > 0, got Δt = {}, T = {}",
                self.dt, self.horizon
            )));
        }
        let n = self.horizon / self.dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(KanoError::config(format!("T/Δt = {n} is not an integer")));
        }
        Ok(n.round() as usize)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.domain.as_ref().is_none_or(|m| m(x))
    }
}

/// One simulated trajectory. `states` and `increments` are row-major
/// `[N+1, d]` and `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub d: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
    /// First `n` with `X_n ∉ D`.
    pub exit: Option<usize>,
    pub seed: u64,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.d..(n + 1) * self.d]
    }

    pub fn xi(&self, n: usize) -> &[f64] {
        &self.increments[n * self.d..(n + 1) * self.d]
    }

    /// Last index that is still inside the domain (or `N`).
    pub fn last_inside(&self) -> usize {
        self.exit.map_or(self.steps(), |e| e.saturating_sub(1))
    }
}

/// One Euler–Maruyama step from `x` with standard normal draws `xi`.
pub fn em_step(spec: &SdeSpec, x: &[f64], xi: &[f64], out: &mut [f64]) {
    let d = spec.d;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d];
    (spec.drift)(x, &mut b);
    (spec.diffusion)(x, &mut s);
    let sq = spec.dt.sqrt();
    for i in 0..d {
        out[i] = x[i] + b[i] * spec.dt + s[i] * sq * xi[i];
    }
}

/// Simulates one path with its own stream seeded by `seed`.
pub fn simulate(spec: &SdeSpec, x0: &[f64], seed: u64) -> Result<PathBundle> {
    let n = spec.steps()?;
    let d = spec.d;
    if x0.len() != d {
        return Err(KanoError::contract(format!("x₀ has {} coordinates, SDE has {d}", x0.len())));
    }
    if !spec.contains(x0) {
        return Err(KanoError::contract(format!("x₀ = {x0:?} is outside the domain")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity((n + 1) * d);
    states.extend_from_slice(x0);
    let mut increments = Vec::with_capacity(n * d);
    let mut exit = None;
    let mut next = vec![0.0; d];
    for k in 0..n {
        let xi: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        em_step(spec, &states[k * d..(k + 1) * d], &xi, &mut next);
        increments.extend_from_slice(&xi);
        states.extend_from_slice(&next);
        if exit.is_none() && !spec.contains(&next) {
            exit = Some(k + 1);
        }
    }
    let times = (0..=n).map(|k| k as f64 * spec.dt).collect();
    Ok(PathBundle {
        d,
        times,
        states,
        increments,
        exit,
        seed,
    })
}

/// `count` paths, path `i` seeded with `seed ^ i`.
pub fn simulate_paths(spec: &SdeSpec, x0: &[f64], seed: u64, count: usize) -> Result<Vec<PathBundle>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| simulate(spec, x0, seed ^ i))
        .collect()
}

pub fn periodic_drift(xi: f64) -> f64 {
    0.2 * (2.0 * PI * xi).sin()
}

pub fn periodic_sigma(d: usize, xi: f64) -> f64 {
    (0.25 + 0.1 * (2.0 * PI * xi).cos()) / ((d as f64).sqrt() * PI)
}

/// `b_i = 0.2 sin(2πx_i)`, `σ_{i,i} = (0.25 + 0.1 cos(2πx_i))/(√d π)`, no exit.
pub fn periodic_coeffs(d: usize, horizon: f64, dt: f64) -> Result<SdeSpec> {
    SdeSpec::new(
        d,
        Arc::new(|x, out| x.iter().zip(out).for_each(|(x, o)| *o = periodic_drift(*x))),
        Arc::new(move |x, out| x.iter().zip(out).for_each(|(x, o)| *o = periodic_sigma(d, *x))),
        horizon,
        dt,
    )
}

/// Drift `x`, diffusion `I/√d`.
pub fn lq_coeffs(d: usize, horizon: f64, dt: f64) -> Result<SdeSpec> {
    let s = 1.0 / (d as f64).sqrt();
    SdeSpec::new(
        d,
        Arc::new(|x, out| out.copy_from_slice(x)),
        Arc::new(move |_, out| out.fill(s)),
        horizon,
        dt,
    )
}

/// The open unit cube `(0, 1)^d` as a membership predicate.
pub fn unit_cube() -> Membership {
    Arc::new(|x| x.iter().all(|v| *v > 0.0 && *v < 1.0))
}
