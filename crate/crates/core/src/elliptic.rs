//! Green-kernel fixed-point solver for `−∇·γ∇u + μ·∇u + λu = f̃(x,u) − f₀` with
//! Dirichlet data `g`, written as `u = T(u) := ∫G(·,y)(f̃(y,u(y)) − f₀(y))dy + w_g`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{KanoError, Result};

/// `∫_{[−½,½]³} |r|⁻¹ dr`; the cube of side `h` contributes `h²` times this.
pub const CUBE_INVERSE_DISTANCE: f64 = 2.380077363979557;

/// Solution domain together with its uniform quadrature grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    /// `[0, 1]` with `nodes` equispaced nodes including both ends.
    Interval { nodes: usize },
    /// Ball of radius `radius` centred at the origin, sampled by the nodes of
    /// a uniform `[−R, R]³` grid with `nodes_per_axis` points per axis that lie
    /// strictly inside.
    Ball { radius: f64, nodes_per_axis: usize },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Ball { .. } => 3,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Interval { .. } => x[0] > 0.0 && x[0] < 1.0,
            Domain::Ball { radius, .. } => x.iter().map(|v| v * v).sum::<f64>() < radius * radius,
        }
    }
}

/// Quadrature nodes and weights on a uniform grid.
#[derive(Clone, Debug)]
pub struct Quadrature {
    dim: usize,
    spacing: f64,
    /// Flat `[n, dim]` node coordinates.
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Integer grid coordinates of every node.
    cells: Vec<[i64; 3]>,
    /// Grid extent per axis and node lookup (`usize::MAX` = not a node).
    axis: usize,
    lookup: Vec<usize>,
    origin: f64,
}

impl Quadrature {
    pub fn new(domain: &Domain) -> Result<Self> {
        match *domain {
            Domain::Interval { nodes } => {
                if nodes < 3 {
                    return Err(KanoError::config(format!("interval needs >= 3 nodes, got {nodes}")));
                }
                let h = 1.0 / (nodes - 1) as f64;
                let points: Vec<f64> = (0..nodes).map(|i| i as f64 * h).collect();
                let weights = (0..nodes)
                    .map(|i| if i == 0 || i == nodes - 1 { h / 2.0 } else { h })
                    .collect();
                Ok(Quadrature {
                    dim: 1,
                    spacing: h,
                    points,
                    weights,
                    cells: (0..nodes as i64).map(|i| [i, 0, 0]).collect(),
                    axis: nodes,
                    lookup: (0..nodes).collect(),
                    origin: 0.0,
                })
            }
            Domain::Ball {
                radius,
                nodes_per_axis: n,
            } => {
                if n < 5 || !(radius > 0.0) {
                    return Err(KanoError::config("ball needs radius > 0 and >= 5 nodes per axis"));
                }
                let h = 2.0 * radius / (n - 1) as f64;
                let mut points = Vec::new();
                let mut cells = Vec::new();
                let mut lookup = vec![usize::MAX; n * n * n];
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let p = [
                                -radius + i as f64 * h,
                                -radius + j as f64 * h,
                                -radius + k as f64 * h,
                            ];
                            if domain.contains(&p) {
                                lookup[(i * n + j) * n + k] = cells.len();
                                cells.push([i as i64, j as i64, k as i64]);
                                points.extend_from_slice(&p);
                            }
                        }
                    }
                }
                let weights = vec![h * h * h; cells.len()];
                Ok(Quadrature {
                    dim: 3,
                    spacing: h,
                    points,
                    weights,
                    cells,
                    axis: n,
                    lookup,
                    origin: -radius,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Evaluates `f` at every node.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
        (0..self.len()).into_par_iter().map(|i| f(self.point(i))).collect()
    }

    /// Node index of integer grid cell `c`, if it is a node.
    fn node_at(&self, c: [i64; 3]) -> Option<usize> {
        let n = self.axis as i64;
        let in_range = |v: i64| (0..n).contains(&v);
        match self.dim {
            1 => (in_range(c[0])).then(|| c[0] as usize),
            _ => {
                if !(in_range(c[0]) && in_range(c[1]) && in_range(c[2])) {
                    return None;
                }
                let id = self.lookup[((c[0] * n + c[1]) * n + c[2]) as usize];
                (id != usize::MAX).then_some(id)
            }
        }
    }

    fn coords(&self, c: [i64; 3]) -> [f64; 3] {
        let h = self.spacing;
        [
            self.origin + c[0] as f64 * h,
            self.origin + c[1] as f64 * h,
            self.origin + c[2] as f64 * h,
        ]
    }

    /// `max |u| + max |∇_h u|`, with forward differences between neighbouring
    /// nodes standing in for the gradient.
    pub fn grid_norm(&self, u: &[f64]) -> f64 {
        let sup = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = self.spacing;
        let grad = (0..self.len())
            .map(|i| {
                let c = self.cells[i];
                let mut sq = 0.0;
                let mut any = false;
                for axis in 0..self.dim {
                    let mut n = c;
                    n[axis] += 1;
                    if let Some(j) = self.node_at(n) {
                        sq += ((u[j] - u[i]) / h).powi(2);
                        any = true;
                    }
                }
                if any {
                    sq.sqrt()
                } else {
                    0.0
                }
            })
            .fold(0.0f64, f64::max);
        sup + grad
    }
}

/// Dirichlet Green kernel of `−Δ` on a configured domain.
#[derive(Clone, Debug, PartialEq)]
pub enum GreenKernel {
    /// `G(x,y) = x(1−y)` for `x ≤ y`, `y(1−x)` otherwise.
    Interval,
    /// Newtonian potential with the Kelvin image,
    /// `G = (1/4π)(1/|x−y| − R/(|y|·|x−y*|))`, `y* = R²y/|y|²`.
    Ball { radius: f64 },
}

impl GreenKernel {
    pub fn for_domain(domain: &Domain) -> Self {
        match *domain {
            Domain::Interval { .. } => GreenKernel::Interval,
            Domain::Ball { radius, .. } => GreenKernel::Ball { radius },
        }
    }

    /// Exponent `p` of the leading singular factor `|x−y|^p` (`2 − d` in 3D;
    /// the 1D kernel is bounded).
    pub fn singular_exponent(&self) -> i32 {
        match self {
            GreenKernel::Interval => 0,
            GreenKernel::Ball { .. } => -1,
        }
    }

    /// Constant `C₀` in `|∂^β G(x,y)| ≤ C₀ |x−y|^{1−d}` for `|β| ≤ 1`.
    pub fn bound_constant(&self) -> f64 {
        match *self {
            GreenKernel::Interval => 1.0,
            GreenKernel::Ball { radius } => (1.0 / (2.0 * PI)).max(2.0 * radius / (4.0 * PI)),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            GreenKernel::Interval => {
                let (x, y) = (x[0], y[0]);
                if x <= y {
                    x * (1.0 - y)
                } else {
                    y * (1.0 - x)
                }
            }
            GreenKernel::Ball { .. } => {
                let r = dist(x, y);
                (1.0 / r - self.image(x, y)) / (4.0 * PI)
            }
        }
    }

    /// Regular image term `R/(|y|·|x−y*|)` (ball only).
    fn image(&self, x: &[f64], y: &[f64]) -> f64 {
        let GreenKernel::Ball { radius } = *self else {
            return 0.0;
        };
        let ny = norm(y);
        if ny < 1e-300 {
            return 1.0 / radius;
        }
        // |y|·|x − y*| = | |y|x − R² y/|y| |
        let d: f64 = x
            .iter()
            .zip(y)
            .map(|(xi, yi)| (ny * xi - radius * radius * yi / ny).powi(2))
            .sum::<f64>()
            .sqrt();
        radius / d
    }

    /// Assembles the discrete integral operator `(K v)_i = Σ_j G(x_i, y_j) w_j v_j`.
    /// The singular diagonal cell of the ball kernel is integrated
    /// analytically for the `1/|x−y|` factor and by the midpoint rule for the
    /// regular image factor.
    pub fn assemble(&self, quad: &Quadrature) -> KernelOperator {
        let n = quad.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = quad.point(i);
                (0..n)
                    .map(|j| {
                        if i != j {
                            return self.eval(x, quad.point(j)) * quad.weights[j];
                        }
                        match self {
                            GreenKernel::Interval => self.eval(x, x) * quad.weights[j],
                            GreenKernel::Ball { .. } => {
                                let h = quad.spacing;
                                (h * h * CUBE_INVERSE_DISTANCE - self.image(x, x) * quad.weights[j])
                                    / (4.0 * PI)
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        KernelOperator {
            n,
            matrix: rows.concat(),
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Dense quadrature matrix of an integral operator on a node set.
#[derive(Clone, Debug)]
pub struct KernelOperator {
    n: usize,
    matrix: Vec<f64>,
}

impl KernelOperator {
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(KanoError::contract("kernel operator matrix must be n x n"));
        }
        Ok(KernelOperator { n, matrix })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix
            .par_chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A semilinear Dirichlet problem with analytic nonlinearity
/// `f̃(x, z) = Σ_{h≥2} (∂_z^h f̃(·,0)/h!) z^h` (independent of `x`).
#[derive(Clone)]
pub struct SemilinearProblem {
    pub domain: Domain,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub lambda: f64,
    /// `∂_z^h f̃(·, 0)` for `h = 2, …, H`.
    pub taylor: Vec<f64>,
    pub source: ScalarField,
    pub boundary: ScalarField,
    pub delta: f64,
    /// Contraction factor; measured when absent.
    pub rho: Option<f64>,
}

impl std::fmt::Debug for SemilinearProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemilinearProblem")
            .field("domain", &self.domain)
            .field("gamma", &self.gamma)
            .field("mu", &self.mu)
            .field("lambda", &self.lambda)
            .field("taylor", &self.taylor)
            .field("delta", &self.delta)
            .field("rho", &self.rho)
            .finish()
    }
}

impl SemilinearProblem {
    /// Poisson-type problem on `domain` (`γ = 1`, `μ = 0`, `λ = 0`).
    pub fn poisson(domain: Domain, source: ScalarField, boundary: ScalarField, delta: f64) -> Self {
        let d = domain.dim();
        SemilinearProblem {
            domain,
            gamma: 1.0,
            mu: vec![0.0; d],
            lambda: 0.0,
            taylor: Vec::new(),
            source,
            boundary,
            delta,
            rho: None,
        }
    }

    /// The interval instance `−u'' = c·u² − f₀` with `f₀ = −a sin(πx)`,
    /// `g(0) = 0`, `g(1) = b`.
    pub fn toy(nodes: usize, c: f64, a: f64, b: f64, delta: f64) -> Self {
        let mut p = Self::poisson(
            Domain::Interval { nodes },
            Arc::new(move |x: &[f64]| -a * (PI * x[0]).sin()),
            Arc::new(move |x: &[f64]| b * x[0]),
            delta,
        );
        p.taylor = vec![2.0 * c];
        p
    }

    /// Polynomial coefficients `c_h = ∂_z^h f̃(·,0)/h!`, indexed from `h = 2`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut fact = 1.0;
        self.taylor
            .iter()
            .enumerate()
            .map(|(i, d)| {
                fact *= (i + 2) as f64;
                d / fact
            })
            .collect()
    }

    pub fn nonlinearity(&self, z: f64) -> f64 {
        self.coefficients()
            .iter()
            .enumerate()
            .map(|(i, c)| c * z.powi(i as i32 + 2))
            .sum()
    }

    /// Checks the smallness conditions `‖f₀‖ ≤ δ²`, `‖g‖ ≤ δ²` on the grid.
    pub fn validate(&self, quad: &Quadrature) -> Result<()> {
        if !(self.delta > 0.0) || !(self.gamma > 0.0) {
            return Err(KanoError::config("δ and γ must be positive"));
        }
        let f0 = quad.sample(|x| (self.source)(x));
        let nf = quad.grid_norm(&f0);
        let d2 = self.delta * self.delta;
        if nf > d2 {
            return Err(KanoError::config(format!("source norm {nf} exceeds δ² = {d2}")));
        }
        let g = quad.sample(|x| (self.boundary)(x));
        let ng = quad.grid_norm(&g);
        if ng > d2 {
            return Err(KanoError::config(format!("boundary data norm {ng} exceeds δ² = {d2}")));
        }
        Ok(())
    }
}

/// Solves the linear homogeneous problem with Dirichlet data `g` by finite
/// differences and returns `w_g` on the quadrature nodes.
pub fn boundary_extension(problem: &SemilinearProblem, quad: &Quadrature) -> Result<Vec<f64>> {
    match problem.domain {
        Domain::Interval { .. } => extension_interval(problem, quad),
        Domain::Ball { radius, .. } => extension_ball(problem, quad, radius),
    }
}

fn extension_interval(p: &SemilinearProblem, quad: &Quadrature) -> Result<Vec<f64>> {
    let n = quad.len();
    let h = quad.spacing();
    let (g0, g1) = ((p.boundary)(&[0.0]), (p.boundary)(&[1.0]));
    let mu = p.mu.first().copied().unwrap_or(0.0);
    // −γ(w_{i−1} − 2w_i + w_{i+1})/h² + μ(w_{i+1} − w_{i−1})/(2h) + λw_i = 0
    let lo = -p.gamma / (h * h) - mu / (2.0 * h);
    let di = 2.0 * p.gamma / (h * h) + p.lambda;
    let up = -p.gamma / (h * h) + mu / (2.0 * h);
    let m = n - 2;
    let mut rhs = vec![0.0; m];
    rhs[0] -= lo * g0;
    rhs[m - 1] -= up * g1;
    let mut w = thomas(lo, di, up, &rhs)?;
    w.insert(0, g0);
    w.push(g1);
    Ok(w)
}

/// Constant-coefficient tridiagonal solve.
fn thomas(lo: f64, di: f64, up: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let m = rhs.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = di;
    if denom.abs() < 1e-300 {
        return Err(KanoError::Solver("singular tridiagonal system".into()));
    }
    c[0] = up / denom;
    d[0] = rhs[0] / denom;
    for i in 1..m {
        denom = di - lo * c[i - 1];
        if denom.abs() < 1e-300 {
            return Err(KanoError::Solver("singular tridiagonal system".into()));
        }
        c[i] = up / denom;
        d[i] = (rhs[i] - lo * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

fn extension_ball(p: &SemilinearProblem, quad: &Quadrature, radius: f64) -> Result<Vec<f64>> {
    let n = quad.len();
    let h = quad.spacing();
    let diag = 6.0 * p.gamma / (h * h) + p.lambda;
    if diag.abs() < 1e-300 {
        return Err(KanoError::Solver("singular finite-difference operator".into()));
    }
    // neighbours: (node index | Dirichlet value, coefficient)
    let stencil: Vec<Vec<(Option<usize>, f64, f64)>> = (0..n)
        .map(|i| {
            let c = quad.cells[i];
            let mut s = Vec::with_capacity(6);
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let mut nc = c;
                    nc[axis] += dir;
                    let mu = p.mu.get(axis).copied().unwrap_or(0.0);
                    let coef = -p.gamma / (h * h) + dir as f64 * mu / (2.0 * h);
                    match quad.node_at(nc) {
                        Some(j) => s.push((Some(j), coef, 0.0)),
                        None => {
                            let x = quad.coords(nc);
                            let r = norm(&x);
                            let proj: Vec<f64> = x.iter().map(|v| v * radius / r).collect();
                            s.push((None, coef, (p.boundary)(&proj)));
                        }
                    }
                }
            }
            s
        })
        .collect();
    let mut w = vec![0.0; n];
    let omega = 2.0 / (1.0 + (PI * h / (2.0 * radius)).sin());
    for _sweep in 0..20_000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for &(j, coef, g) in &stencil[i] {
                acc += coef * j.map_or(g, |j| w[j]);
            }
            let gs = -acc / diag;
            let new = w[i] + omega * (gs - w[i]);
            change = change.max((new - w[i]).abs());
            w[i] = new;
        }
        if change < 1e-14 {
            return Ok(w);
        }
    }
    Err(KanoError::Solver("boundary extension did not converge".into()))
}

/// Everything `apply_T` needs, assembled once per problem and grid.
#[derive(Clone, Debug)]
pub struct PicardSetup {
    pub problem: SemilinearProblem,
    pub quad: Quadrature,
    pub kernel: GreenKernel,
    pub operator: KernelOperator,
    pub w_g: Vec<f64>,
    pub f0: Vec<f64>,
    /// `−K f₀ + w_g`, the affine part of `T`.
    pub affine: Vec<f64>,
}

impl PicardSetup {
    pub fn new(problem: SemilinearProblem) -> Result<Self> {
        let quad = Quadrature::new(&problem.domain)?;
        let kernel = GreenKernel::for_domain(&problem.domain);
        let operator = kernel.assemble(&quad);
        let w_g = boundary_extension(&problem, &quad)?;
        let f0 = quad.sample(|x| (problem.source)(x));
        let kf = operator.apply(&f0);
        let affine = w_g.iter().zip(&kf).map(|(w, k)| w - k).collect();
        Ok(PicardSetup {
            problem,
            quad,
            kernel,
            operator,
            w_g,
            f0,
            affine,
        })
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.quad.grid_norm(u)
    }
}

/// `T(u) = ∫G(f̃(y,u) − f₀)dy + w_g` on the quadrature nodes.
pub fn apply_t(setup: &PicardSetup, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != setup.quad.len() {
        return Err(KanoError::contract(format!(
            "field has {} values, grid has {} nodes",
            u.len(),
            setup.quad.len()
        )));
    }
    let nu = setup.norm(u);
    if nu > setup.problem.delta * (1.0 + 1e-12) {
        return Err(KanoError::contract(format!(
            "iterate norm {nu} outside the contraction ball δ = {}",
            setup.problem.delta
        )));
    }
    Ok(apply_t_unchecked(setup, u))
}

fn apply_t_unchecked(setup: &PicardSetup, u: &[f64]) -> Vec<f64> {
    if setup.problem.taylor.iter().all(|&c| c == 0.0) {
        return setup.affine.clone();
    }
    let coeffs = setup.problem.coefficients();
    let nl: Vec<f64> = u
        .iter()
        .map(|&z| coeffs.iter().enumerate().map(|(i, c)| c * z.powi(i as i32 + 2)).sum())
        .collect();
    let k = setup.operator.apply(&nl);
    k.iter().zip(&setup.affine).map(|(a, b)| a + b).collect()
}

/// Largest sampled Lipschitz ratio `‖T(w₁) − T(w₂)‖ / ‖w₁ − w₂‖` over random
/// smooth admissible pairs.
pub fn measure_contraction(setup: &PicardSetup, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = setup.problem.delta;
    let quad = &setup.quad;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let w1 = random_admissible(quad, delta, &mut rng);
        let w2 = random_admissible(quad, delta, &mut rng);
        let diff: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - b).collect();
        let nd = quad.grid_norm(&diff);
        if nd < 1e-14 {
            continue;
        }
        let t1 = apply_t(setup, &w1)?;
        let t2 = apply_t(setup, &w2)?;
        let dt: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a - b).collect();
        worst = worst.max(quad.grid_norm(&dt) / nd);
    }
    Ok(worst)
}

/// A random low-frequency field scaled to a random fraction of the ball.
fn random_admissible(quad: &Quadrature, delta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let modes: Vec<(f64, [f64; 3], f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                ],
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let offset = rng.random_range(-1.0..1.0);
    let raw = quad.sample(|x| {
        offset
            + modes
                .iter()
                .map(|(a, k, ph)| {
                    let arg: f64 = x.iter().zip(k).map(|(xi, ki)| xi * ki * PI).sum();
                    a * (arg + ph).sin()
                })
                .sum::<f64>()
    });
    let n = quad.grid_norm(&raw).max(1e-300);
    let scale = delta * rng.random_range(0.05..1.0) / n;
    raw.into_iter().map(|v| v * scale).collect()
}

/// One line of the Picard convergence log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardLogRow {
    pub j: usize,
    pub step_norm: f64,
    /// `step_j / step_{j−1}`; NaN for the first step or below the round-off
    /// floor.
    pub ratio: f64,
    /// `‖T(u_j) − u_j‖`.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct PicardOutcome {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub rho: f64,
    pub residual: f64,
    pub log: Vec<PicardLogRow>,
}

/// Steps below this norm are round-off; their ratios carry no information.
const STEP_FLOOR: f64 = 1e-12;

/// `J = ⌈log(1/ε) / log(1/ρ)⌉`, at least 1.
pub fn iteration_count(eps: f64, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(KanoError::config(format!("contraction factor must lie in (0,1), got {rho}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(KanoError::config(format!("target accuracy must lie in (0,1), got {eps}")));
    }
    Ok(((1.0 / eps).ln() / (1.0 / rho).ln()).ceil().max(1.0) as usize)
}

/// Picard iteration `u₀ = 0, u_{j+1} = T(u_j)` for `J = ⌈log(1/ε)/log(1/ρ)⌉`
/// steps.
pub fn picard_solve(setup: &PicardSetup, eps: f64, rho_seed: u64) -> Result<PicardOutcome> {
    let rho = match setup.problem.rho {
        Some(r) => r,
        None => measure_contraction(setup, 100, rho_seed)?,
    };
    // Affine maps contract arbitrarily fast; keep J well defined.
    let rho_eff = rho.max(f64::EPSILON);
    let iterations = iteration_count(eps, rho_eff)?;
    let mut u = vec![0.0; setup.quad.len()];
    let mut next = apply_t(setup, &u)?;
    let mut log = Vec::with_capacity(iterations);
    let mut prev_step = f64::NAN;
    let mut above_one = 0;
    for j in 1..=iterations {
        let diff: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
        let step = setup.norm(&diff);
        u = next;
        next = apply_t(setup, &u)?;
        let res: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
        let residual = setup.norm(&res);
        let ratio = if prev_step.is_finite() && prev_step > STEP_FLOOR {
            step / prev_step
        } else {
            f64::NAN
        };
        log.push(PicardLogRow {
            j,
            step_norm: step,
            ratio,
            residual,
        });
        if ratio > 1.0 {
            above_one += 1;
            if above_one >= 3 {
                return Err(KanoError::Divergence {
                    step: j,
                    ratios: log.iter().map(|r| r.ratio).collect(),
                });
            }
        } else {
            above_one = 0;
        }
        prev_step = step;
    }
    let residual = log.last().map_or(0.0, |r| r.residual);
    Ok(PicardOutcome {
        u,
        iterations,
        rho,
        residual,
        log,
    })
}
