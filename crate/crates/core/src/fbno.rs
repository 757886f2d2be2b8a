//! Feynman–Kac readout: turns a solution surface `u(t, x)` into the sampled
//! tuple `(Y, Z, Υ, A)` along a path and measures the discrete BSDE residual.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::benchmarks::{Benchmark, Derivatives};
use crate::error::{KanoError, Result};
use crate::kano::{bilinear, kano_field, KanoModel, OperatorInput};
use crate::sde::{PathBundle, SdeSpec};

/// Anything that can be evaluated at `(t, x)`. Surfaces with closed-form
/// derivatives override `derivatives`.
pub trait Surface {
    fn value(&self, t: f64, x: &[f64]) -> Result<f64>;

    fn derivatives(&self, _t: f64, _x: &[f64]) -> Option<Result<Derivatives>> {
        None
    }
}

impl Surface for Benchmark {
    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Benchmark::value(self, t, x)
    }

    fn derivatives(&self, t: f64, x: &[f64]) -> Option<Result<Derivatives>> {
        Some(self.solution(t, x))
    }
}

/// A constant surface.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Surface for Constant {
    fn value(&self, _t: f64, _x: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
}

/// A trained model queried through bilinear interpolation of its grid
/// output. Fields are cached per `(t, x₃, …, x_d)`, so stencils that only move
/// `(x₁, x₂)` reuse one forward pass.
pub struct ModelSurface<'a> {
    model: &'a KanoModel,
    /// Fold every coordinate into `[0, 1)` first (1-periodic targets).
    fold: bool,
    cache: RefCell<HashMap<Vec<u64>, Vec<f64>>>,
}

impl<'a> ModelSurface<'a> {
    pub fn new(model: &'a KanoModel, fold: bool) -> Self {
        ModelSurface {
            model,
            fold,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn clear(&self) {
        self.cache.borrow_mut().clear();
    }

    pub fn cached_fields(&self) -> usize {
        self.cache.borrow().len()
    }
}

impl Surface for ModelSurface<'_> {
    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        let spec = self.model.spec();
        if x.len() != spec.d {
            return Err(KanoError::contract(format!("query point must have {} coordinates", spec.d)));
        }
        let p: Vec<f64> = if self.fold { x.iter().map(|v| v.rem_euclid(1.0)).collect() } else { x.to_vec() };
        let key: Vec<u64> = std::iter::once(t).chain(p[2..].iter().copied()).map(f64::to_bits).collect();
        if !self.cache.borrow().contains_key(&key) {
            let field = kano_field(self.model, &OperatorInput::new(t, p[2..].to_vec()))?;
            self.cache.borrow_mut().insert(key.clone(), field);
        }
        let cache = self.cache.borrow();
        bilinear(&cache[&key], spec.s, p[0], p[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DerivativeScheme {
    /// Closed-form `∇u`, `D²u` from the surface; `A` still uses nested
    /// central stencils of step `h` on `∇u`.
    Analytic { h: f64 },
    Forward { h: f64 },
    Central { h: f64 },
}

impl DerivativeScheme {
    pub fn step(&self) -> f64 {
        match *self {
            DerivativeScheme::Analytic { h } | DerivativeScheme::Forward { h } | DerivativeScheme::Central { h } => h,
        }
    }

    pub fn parse(name: &str, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(KanoError::config(format!("stencil step must be positive, got {h}")));
        }
        match name {
            "analytic" => Ok(DerivativeScheme::Analytic { h }),
            "forward" => Ok(DerivativeScheme::Forward { h }),
            "central" => Ok(DerivativeScheme::Central { h }),
            _ => Err(KanoError::config(format!("unknown derivative scheme {name:?}"))),
        }
    }
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut p = x.to_vec();
    for &(i, v) in moves {
        p[i] += v;
    }
    p
}

/// `∇u` by the scheme's first-derivative stencil.
fn stencil_grad(u: &dyn Surface, scheme: DerivativeScheme, t: f64, x: &[f64], u0: f64) -> Result<Vec<f64>> {
    let h = scheme.step();
    (0..x.len())
        .map(|i| match scheme {
            DerivativeScheme::Forward { .. } => Ok((u.value(t, &shifted(x, &[(i, h)]))? - u0) / h),
            _ => Ok((u.value(t, &shifted(x, &[(i, h)]))? - u.value(t, &shifted(x, &[(i, -h)]))?) / (2.0 * h)),
        })
        .collect()
}

fn stencil_hess(u: &dyn Surface, scheme: DerivativeScheme, t: f64, x: &[f64], u0: f64) -> Result<Vec<f64>> {
    let h = scheme.step();
    let d = x.len();
    let mut hess = vec![0.0; d * d];
    let v = |m: &[(usize, f64)]| u.value(t, &shifted(x, m));
    for i in 0..d {
        for j in i..d {
            let e = match scheme {
                DerivativeScheme::Forward { .. } => {
                    if i == j {
                        (v(&[(i, 2.0 * h)])? - 2.0 * v(&[(i, h)])? + u0) / (h * h)
                    } else {
                        (v(&[(i, h), (j, h)])? - v(&[(i, h)])? - v(&[(j, h)])? + u0) / (h * h)
                    }
                }
                _ => {
                    if i == j {
                        (v(&[(i, h)])? - 2.0 * u0 + v(&[(i, -h)])?) / (h * h)
                    } else {
                        (v(&[(i, h), (j, h)])? - v(&[(i, h), (j, -h)])? - v(&[(i, -h), (j, h)])?
                            + v(&[(i, -h), (j, -h)])?)
                            / (4.0 * h * h)
                    }
                }
            };
            hess[i * d + j] = e;
            hess[j * d + i] = e;
        }
    }
    Ok(hess)
}

fn gradient_at(u: &dyn Surface, scheme: DerivativeScheme, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if let DerivativeScheme::Analytic { .. } = scheme {
        if let Some(d) = u.derivatives(t, x) {
            return Ok(d?.grad);
        }
    }
    let u0 = u.value(t, x)?;
    stencil_grad(u, scheme, t, x, u0)
}

/// `A_i = ½ Σ_j σ_{j,j}² ∂_j²(∂_i u)` by second differences of the scheme's
/// gradient.
fn ito_drift(u: &dyn Surface, scheme: DerivativeScheme, t: f64, x: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    let h = scheme.step();
    let d = x.len();
    let g0 = gradient_at(u, scheme, t, x)?;
    let mut a = vec![0.0; d];
    for j in 0..d {
        let w = 0.5 * sigma[j] * sigma[j];
        if w == 0.0 {
            continue;
        }
        let second: Vec<f64> = match scheme {
            DerivativeScheme::Forward { .. } => {
                let g1 = gradient_at(u, scheme, t, &shifted(x, &[(j, h)]))?;
                let g2 = gradient_at(u, scheme, t, &shifted(x, &[(j, 2.0 * h)]))?;
                (0..d).map(|i| (g2[i] - 2.0 * g1[i] + g0[i]) / (h * h)).collect()
            }
            _ => {
                let gp = gradient_at(u, scheme, t, &shifted(x, &[(j, h)]))?;
                let gm = gradient_at(u, scheme, t, &shifted(x, &[(j, -h)]))?;
                (0..d).map(|i| (gp[i] - 2.0 * g0[i] + gm[i]) / (h * h)).collect()
            }
        };
        for i in 0..d {
            a[i] += w * second[i];
        }
    }
    Ok(a)
}

/// Per-time-index samples along one path, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BsdeTuple {
    pub d: usize,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub a: Vec<f64>,
}

impl BsdeTuple {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn z_at(&self, n: usize) -> &[f64] {
        &self.z[n * self.d..(n + 1) * self.d]
    }

    pub fn upsilon_at(&self, n: usize) -> &[f64] {
        &self.upsilon[n * self.d * self.d..(n + 1) * self.d * self.d]
    }

    pub fn a_at(&self, n: usize) -> &[f64] {
        &self.a[n * self.d..(n + 1) * self.d]
    }
}

/// Samples `Y = u`, `Z = ∇u`, `Υ = D²u` and `A = ½Tr[σσᵀD²]∇u` at the path's
/// states `0..=last_inside`.
pub fn adapt(u: &dyn Surface, scheme: DerivativeScheme, bundle: &PathBundle, spec: &SdeSpec) -> Result<BsdeTuple> {
    if spec.d != bundle.d {
        return Err(KanoError::contract("SDE and path dimensions differ"));
    }
    let d = bundle.d;
    let last = bundle.last_inside();
    let mut out = BsdeTuple {
        d,
        times: bundle.times[..=last].to_vec(),
        y: Vec::with_capacity(last + 1),
        z: Vec::with_capacity((last + 1) * d),
        upsilon: Vec::with_capacity((last + 1) * d * d),
        a: Vec::with_capacity((last + 1) * d),
    };
    let mut sigma = vec![0.0; d];
    for n in 0..=last {
        let t = bundle.times[n];
        let x = bundle.state(n);
        (spec.diffusion)(x, &mut sigma);
        let closed = match scheme {
            DerivativeScheme::Analytic { .. } => u.derivatives(t, x).transpose()?,
            _ => None,
        };
        let (y, grad, hess) = match closed {
            Some(dv) => (dv.u, dv.grad, dv.hess),
            None => {
                let u0 = u.value(t, x)?;
                (u0, stencil_grad(u, scheme, t, x, u0)?, stencil_hess(u, scheme, t, x, u0)?)
            }
        };
        out.y.push(y);
        out.z.extend(grad);
        out.upsilon.extend(hess);
        out.a.extend(ito_drift(u, scheme, t, x, &sigma)?);
    }
    Ok(out)
}

/// Generator `F(t, x, y, ∇u, Υ)` of the gradient-form backward equation.
pub type Generator<'a> = &'a dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    /// `r_n = Y_{n+1} − Y_n + (F − ½Tr[σσᵀΥ_n])Δt − Z_n·ΔX_n`.
    pub per_step: Vec<f64>,
    pub summed: f64,
    /// `|Y_N − g(X_N)|` when the tuple reaches the horizon.
    pub terminal_gap: Option<f64>,
}

fn half_trace(sigma: &[f64], ups: &[f64]) -> f64 {
    let d = sigma.len();
    (0..d).map(|i| 0.5 * sigma[i] * sigma[i] * ups[i * d + i]).sum()
}

/// Pathwise discrete residual of the backward equation.
pub fn bsde_residual(
    tuple: &BsdeTuple,
    bundle: &PathBundle,
    spec: &SdeSpec,
    generator: Generator,
    terminal: &dyn Fn(&[f64]) -> f64,
) -> Result<ResidualReport> {
    if tuple.len() > bundle.times.len() || tuple.d != bundle.d {
        return Err(KanoError::contract("tuple and path do not match"));
    }
    if tuple.times.iter().zip(&bundle.times).any(|(a, b)| a != b) {
        return Err(KanoError::contract("tuple and path times differ"));
    }
    let d = tuple.d;
    let mut sigma = vec![0.0; d];
    let mut per_step = Vec::with_capacity(tuple.len().saturating_sub(1));
    for n in 0..tuple.len().saturating_sub(1) {
        let x = bundle.state(n);
        let dx: Vec<f64> = bundle.state(n + 1).iter().zip(x).map(|(a, b)| a - b).collect();
        (spec.diffusion)(x, &mut sigma);
        let (z, ups) = (tuple.z_at(n), tuple.upsilon_at(n));
        let f = generator(tuple.times[n], x, tuple.y[n], z, ups);
        let zdx: f64 = z.iter().zip(&dx).map(|(a, b)| a * b).sum();
        per_step.push(tuple.y[n + 1] - tuple.y[n] + (f - half_trace(&sigma, ups)) * spec.dt - zdx);
    }
    let summed = per_step.iter().map(|r| r.abs()).sum();
    let terminal_gap = (tuple.len() == bundle.times.len()).then(|| {
        let n = tuple.len() - 1;
        (tuple.y[n] - terminal(bundle.state(n))).abs()
    });
    Ok(ResidualReport {
        per_step,
        summed,
        terminal_gap,
    })
}

/// Probabilists' Gauss–Hermite rule with three nodes (exact to degree 5).
const GH_NODES: [f64; 3] = [-1.732_050_807_568_877_2, 0.0, 1.732_050_807_568_877_2];
const GH_WEIGHTS: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];

/// `E[u(t+Δt, X_{n+1}) | X_n = x]` under one Euler–Maruyama step, by tensor
/// Gauss–Hermite quadrature.
pub fn one_step_expectation(u: &dyn Surface, spec: &SdeSpec, t: f64, x: &[f64]) -> Result<f64> {
    let d = spec.d;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d];
    (spec.drift)(x, &mut b);
    (spec.diffusion)(x, &mut s);
    let sq = spec.dt.sqrt();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    let mut p = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for i in 0..d {
            p[i] = x[i] + b[i] * spec.dt + s[i] * sq * GH_NODES[idx[i]];
            w *= GH_WEIGHTS[idx[i]];
        }
        total += w * u.value(t + spec.dt, &p)?;
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < 3 {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    Ok(total)
}

/// `Σ_n |E[r_n | X_n]|`: the residual with the martingale part averaged out by
/// the one-step conditional expectation. For a consistent tuple each term is
/// `O(Δt²)`, so the sum is `O(Δt)`.
pub fn conditional_residual(
    u: &dyn Surface,
    tuple: &BsdeTuple,
    bundle: &PathBundle,
    spec: &SdeSpec,
    generator: Generator,
) -> Result<f64> {
    let d = tuple.d;
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    let mut total = 0.0;
    for n in 0..tuple.len().saturating_sub(1) {
        let t = tuple.times[n];
        let x = bundle.state(n);
        (spec.drift)(x, &mut b);
        (spec.diffusion)(x, &mut sigma);
        let (z, ups) = (tuple.z_at(n), tuple.upsilon_at(n));
        let ey = one_step_expectation(u, spec, t, x)?;
        let f = generator(t, x, tuple.y[n], z, ups);
        let zb: f64 = z.iter().zip(&b).map(|(a, b)| a * b).sum::<f64>() * spec.dt;
        total += (ey - tuple.y[n] + (f - half_trace(&sigma, ups)) * spec.dt - zb).abs();
    }
    Ok(total)
}
