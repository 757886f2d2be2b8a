//! Closed-form solutions of the periodic semilinear and linear–quadratic
//! benchmarks, their generators, and the RK4 Riccati integrator.

use std::f64::consts::PI;

use crate::error::{KanoError, Result};
use crate::sde::{lq_coeffs, periodic_coeffs, periodic_drift, periodic_sigma, SdeSpec};

/// `u`, `∇u` and the row-major Hessian at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivatives {
    pub u: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicSolution {
    pub d: usize,
    pub horizon: f64,
}

impl PeriodicSolution {
    pub fn new(d: usize, horizon: f64) -> Self {
        PeriodicSolution { d, horizon }
    }

    /// `θ = 2π(Σx_i + (T − t))`.
    pub fn theta(&self, t: f64, x: &[f64]) -> f64 {
        2.0 * PI * (x.iter().sum::<f64>() + (self.horizon - t))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let th = self.theta(t, x);
        (th.sin() + th.cos()) / PI
    }

    pub fn solution(&self, t: f64, x: &[f64]) -> Derivatives {
        let th = self.theta(t, x);
        let (s, c) = th.sin_cos();
        let d = x.len();
        Derivatives {
            u: (s + c) / PI,
            grad: vec![2.0 * (c - s); d],
            hess: vec![-4.0 * PI * (s + c); d * d],
        }
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        let a = 2.0 * PI * x.iter().sum::<f64>();
        (a.sin() + a.cos()) / PI
    }

    /// `h(t,x) = 2(cos θ̃ − sin θ̃)`, `θ̃ = 2π(Σx_i + (T − t))`.
    pub fn forcing(&self, t: f64, x: &[f64]) -> f64 {
        let th = self.theta(t, x);
        2.0 * (th.cos() - th.sin())
    }

    /// `f(t,x,y,z) = 2π²y Σσ_{i,i}² − Σ(b_i/σ_{i,i}) z_i + h(t,x)` with the
    /// backward-equation convention `dY = −f dt + z·dW`.
    pub fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let mut s2 = 0.0;
        let mut bz = 0.0;
        for (xi, zi) in x.iter().zip(z) {
            let s = periodic_sigma(self.d, *xi);
            s2 += s * s;
            bz += periodic_drift(*xi) / s * zi;
        }
        2.0 * PI * PI * y * s2 - bz + self.forcing(t, x)
    }

    /// Generator in gradient form: `F(t,x,y,∇u,Υ) = −∂_t u` along the exact
    /// solution, i.e. `f(t,x,y,σ∇u) + b·∇u + ½Tr[σσᵀΥ]`.
    pub fn generator(&self, t: f64, x: &[f64], y: f64, grad: &[f64], hess: &[f64]) -> f64 {
        let d = x.len();
        let mut z = vec![0.0; d];
        let mut extra = 0.0;
        for i in 0..d {
            let s = periodic_sigma(self.d, x[i]);
            z[i] = s * grad[i];
            extra += periodic_drift(x[i]) * grad[i] + 0.5 * s * s * hess[i * d + i];
        }
        self.driver(t, x, y, &z) + extra
    }
}

/// `k̇ = −2k − 1/d + k²/(d + k)`.
pub fn riccati_rhs(d: usize, k: f64) -> f64 {
    let d = d as f64;
    -2.0 * k - 1.0 / d + k * k / (d + k)
}

/// Scalar Riccati curve `K(t) = k(t)·I` sampled on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiCurve {
    pub d: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub k: Vec<f64>,
    pub kdot: Vec<f64>,
}

/// Integrates the isotropic Riccati equation backward from `k(T) = 1/d` with
/// `steps` RK4 steps.
pub fn riccati_solve(d: usize, horizon: f64, steps: usize) -> Result<RiccatiCurve> {
    if steps < 2 {
        return Err(KanoError::contract(format!("Riccati solve needs at least 2 steps, got {steps}")));
    }
    if d == 0 || !(horizon > 0.0) {
        return Err(KanoError::config("Riccati solve needs d ≥ 1 and T > 0"));
    }
    let h = horizon / steps as f64;
    let f = |k: f64| riccati_rhs(d, k);
    let mut k = vec![0.0; steps + 1];
    k[steps] = 1.0 / d as f64;
    for n in (0..steps).rev() {
        // backward in time: step −h
        let y = k[n + 1];
        let k1 = f(y);
        let k2 = f(y - 0.5 * h * k1);
        let k3 = f(y - 0.5 * h * k2);
        let k4 = f(y - h * k3);
        k[n] = y - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let times = (0..=steps).map(|n| n as f64 * h).collect();
    let kdot = k.iter().map(|&v| f(v)).collect();
    Ok(RiccatiCurve {
        d,
        horizon,
        times,
        k,
        kdot,
    })
}

impl RiccatiCurve {
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(KanoError::Domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let n = self.times.len() - 1;
        let h = self.horizon / n as f64;
        let i = ((t / h).floor() as usize).min(n - 1);
        Ok((i, (t - self.times[i]) / h))
    }

    /// `k(t)` by cubic Hermite interpolation with the ODE slopes.
    pub fn k_at(&self, t: f64) -> Result<f64> {
        let (i, s) = self.locate(t)?;
        if s == 0.0 {
            return Ok(self.k[i]);
        }
        if s == 1.0 {
            return Ok(self.k[i + 1]);
        }
        let h = self.times[i + 1] - self.times[i];
        let (s2, s3) = (s * s, s * s * s);
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * self.k[i]
            + (s3 - 2.0 * s2 + s) * h * self.kdot[i]
            + (-2.0 * s3 + 3.0 * s2) * self.k[i + 1]
            + (s3 - s2) * h * self.kdot[i + 1])
    }

    pub fn kdot_at(&self, t: f64) -> Result<f64> {
        Ok(riccati_rhs(self.d, self.k_at(t)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqSolution {
    pub curve: RiccatiCurve,
}

/// Default RK4 resolution of the Riccati curve.
pub const RICCATI_STEPS: usize = 10_000;

impl LqSolution {
    pub fn new(d: usize, horizon: f64) -> Result<Self> {
        Ok(LqSolution {
            curve: riccati_solve(d, horizon, RICCATI_STEPS)?,
        })
    }

    pub fn d(&self) -> usize {
        self.curve.d
    }

    /// `u = k‖x‖²`, `∇u = 2kx`, `D²u = 2kI`.
    pub fn solution(&self, t: f64, x: &[f64]) -> Result<Derivatives> {
        let k = self.curve.k_at(t)?;
        let d = x.len();
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            hess[i * d + i] = 2.0 * k;
        }
        Ok(Derivatives {
            u: k * x.iter().map(|v| v * v).sum::<f64>(),
            grad: x.iter().map(|v| 2.0 * k * v).collect(),
            hess,
        })
    }

    /// `xᵀPx` with `P = I/d`.
    pub fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / self.d() as f64
    }

    /// Generator in gradient form, `−∂_t u` along the exact solution:
    /// `x·∇u + xᵀQx − |∇u|²/(4(N + k̂))` with `k̂ = Tr Υ/(2d)`.
    pub fn generator(&self, _t: f64, x: &[f64], _y: f64, grad: &[f64], hess: &[f64]) -> f64 {
        let d = x.len();
        let dn = self.d() as f64;
        let khat = (0..d).map(|i| hess[i * d + i]).sum::<f64>() / (2.0 * d as f64);
        let xz: f64 = x.iter().zip(grad).map(|(a, b)| a * b).sum();
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let zz: f64 = grad.iter().map(|v| v * v).sum();
        xz + xx / dn - zz / (4.0 * (dn + khat))
    }
}

/// Which benchmark a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchmarkKind {
    Periodic,
    Lq,
}

impl BenchmarkKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(BenchmarkKind::Periodic),
            "lq" => Ok(BenchmarkKind::Lq),
            _ => Err(KanoError::config(format!("unknown benchmark {s:?} (periodic | lq)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Periodic => "periodic",
            BenchmarkKind::Lq => "lq",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Benchmark {
    Periodic(PeriodicSolution),
    Lq(LqSolution),
}

impl Benchmark {
    pub fn new(kind: BenchmarkKind, d: usize, horizon: f64) -> Result<Self> {
        Ok(match kind {
            BenchmarkKind::Periodic => Benchmark::Periodic(PeriodicSolution::new(d, horizon)),
            BenchmarkKind::Lq => Benchmark::Lq(LqSolution::new(d, horizon)?),
        })
    }

    pub fn kind(&self) -> BenchmarkKind {
        match self {
            Benchmark::Periodic(_) => BenchmarkKind::Periodic,
            Benchmark::Lq(_) => BenchmarkKind::Lq,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Benchmark::Periodic(p) => p.d,
            Benchmark::Lq(l) => l.d(),
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Benchmark::Periodic(p) => p.horizon,
            Benchmark::Lq(l) => l.curve.horizon,
        }
    }

    pub fn sde(&self, dt: f64) -> Result<SdeSpec> {
        match self {
            Benchmark::Periodic(p) => periodic_coeffs(p.d, p.horizon, dt),
            Benchmark::Lq(l) => lq_coeffs(l.d(), l.curve.horizon, dt),
        }
    }

    pub fn solution(&self, t: f64, x: &[f64]) -> Result<Derivatives> {
        match self {
            Benchmark::Periodic(p) => Ok(p.solution(t, x)),
            Benchmark::Lq(l) => l.solution(t, x),
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            Benchmark::Periodic(p) => Ok(p.value(t, x)),
            Benchmark::Lq(l) => Ok(l.curve.k_at(t)? * x.iter().map(|v| v * v).sum::<f64>()),
        }
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        match self {
            Benchmark::Periodic(p) => p.terminal(x),
            Benchmark::Lq(l) => l.terminal(x),
        }
    }

    pub fn generator(&self, t: f64, x: &[f64], y: f64, grad: &[f64], hess: &[f64]) -> f64 {
        match self {
            Benchmark::Periodic(p) => p.generator(t, x, y, grad, hess),
            Benchmark::Lq(l) => l.generator(t, x, y, grad, hess),
        }
    }

    /// Whether `u` is 1-periodic in every coordinate.
    pub fn is_periodic(&self) -> bool {
        matches!(self, Benchmark::Periodic(_))
    }
}
