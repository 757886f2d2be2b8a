//! Residual KAN layers `f ↦ σ_β(A f + b) + G f`, networks of them, and the
//! ReQU multiplication gadget.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KanoError, Result};
use crate::spline::ActivationBasis;
use crate::tensor::{DiffTensor, Param, Tape};

/// Binds a parameter to `tape`, or wraps it as a detached tensor.
pub(crate) fn bind(tape: Option<&Tape>, p: &Param) -> DiffTensor {
    match tape {
        Some(t) => t.param(p),
        None => DiffTensor::detached(p.data.clone(), &p.shape),
    }
}

/// One residual KAN layer.
#[derive(Clone, Debug)]
pub struct ResKanLayer {
    /// `[d_out, d_in]`
    pub a: Param,
    /// `[d_out]`
    pub b: Param,
    /// `[I+2, d_out]`
    pub beta: Param,
    /// Diagonal of the `d_out × d_in` gate, `[min(d_in, d_out)]`.
    pub gate: Param,
}

impl ResKanLayer {
    pub fn d_in(&self) -> usize {
        self.a.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape[0]
    }

    /// Dense gate matrix `G` (`d_out × d_in`).
    pub fn gate_matrix(&self) -> Vec<f64> {
        let (m, k) = (self.d_out(), self.d_in());
        let mut g = vec![0.0; m * k];
        for (i, v) in self.gate.data.iter().enumerate() {
            g[i * k + i] = *v;
        }
        g
    }

    fn forward(&self, tape: Option<&Tape>, x: &DiffTensor, basis: &ActivationBasis) -> Result<DiffTensor> {
        let pre = x.linear(&bind(tape, &self.a), Some(&bind(tape, &self.b)))?;
        let act = crate::spline::apply_activation(&pre, &bind(tape, &self.beta), basis)?;
        let skip = x.diag_gate(&bind(tape, &self.gate), self.d_out())?;
        act.add(&skip)
    }

    fn eval_row(&self, x: &[f64], basis: &ActivationBasis) -> Vec<f64> {
        let (m, k) = (self.d_out(), self.d_in());
        let beta = &self.beta.data;
        (0..m)
            .map(|o| {
                let pre: f64 = self.b.data[o]
                    + self.a.data[o * k..(o + 1) * k]
                        .iter()
                        .zip(x)
                        .map(|(a, x)| a * x)
                        .sum::<f64>();
                let skip = if o < k && o < self.gate.data.len() {
                    self.gate.data[o] * x[o]
                } else {
                    0.0
                };
                basis.combine(|r| beta[r * m + o], pre) + skip
            })
            .collect()
    }
}

/// A residual KAN: hidden layers followed by a final affine map.
#[derive(Clone, Debug)]
pub struct ResKanNet {
    layers: Vec<ResKanLayer>,
    final_a: Param,
    final_b: Param,
    basis: ActivationBasis,
}

impl ResKanNet {
    /// Assembles a network from explicit parts, checking that dimensions chain
    /// and that every coefficient matrix honours the sparsity floor.
    pub fn from_parts(
        layers: Vec<ResKanLayer>,
        final_a: Param,
        final_b: Param,
        basis: ActivationBasis,
    ) -> Result<Self> {
        let mut d = match layers.first() {
            Some(l) => l.d_in(),
            None => final_a.shape.get(1).copied().unwrap_or(0),
        };
        for (i, l) in layers.iter().enumerate() {
            let (m, k) = (l.d_out(), l.d_in());
            if l.a.shape.len() != 2 || k != d {
                return Err(KanoError::contract(format!(
                    "layer {i}: input width {k}, expected {d}"
                )));
            }
            if l.b.shape != [m] || l.gate.shape != [m.min(k)] || l.beta.shape != [basis.rows(), m] {
                return Err(KanoError::contract(format!("layer {i}: inconsistent parameter shapes")));
            }
            basis.check_sparsity(&l.beta.data, m)?;
            d = m;
        }
        if final_a.shape.len() != 2 || final_a.shape[1] != d || final_b.shape != [final_a.shape[0]] {
            return Err(KanoError::contract(format!(
                "final affine {:?}/{:?} does not accept width {d}",
                final_a.shape, final_b.shape
            )));
        }
        Ok(ResKanNet {
            layers,
            final_a,
            final_b,
            basis,
        })
    }

    /// Random initialisation: `A ~ N(0, 2/d_in)`, `b = 0`, `G = I`,
    /// `β₋₁, β₀ ~ N(0, 0.1²)`, B-spline coefficients zero.
    pub fn init<R: Rng + ?Sized>(
        name: &str,
        widths: &[usize],
        basis: ActivationBasis,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(KanoError::config(format!(
                "network widths need at least input and output and no zeros, got {widths:?}"
            )));
        }
        let coeff = Normal::new(0.0, 0.1).expect("valid normal");
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).take(widths.len() - 2).enumerate() {
            let (k, m) = (w[0], w[1]);
            let a_dist = Normal::new(0.0, (2.0 / k as f64).sqrt()).expect("valid normal");
            let a: Vec<f64> = (0..m * k).map(|_| a_dist.sample(rng)).collect();
            let mut beta = vec![0.0; basis.rows() * m];
            for v in beta.iter_mut().take(2 * m) {
                *v = coeff.sample(rng);
            }
            layers.push(ResKanLayer {
                a: Param::new(format!("{name}.layer{i}.A"), &[m, k], a),
                b: Param::zeros(format!("{name}.layer{i}.b"), &[m]),
                beta: Param::new(format!("{name}.layer{i}.beta"), &[basis.rows(), m], beta),
                gate: Param::new(format!("{name}.layer{i}.G"), &[m.min(k)], vec![1.0; m.min(k)]),
            });
        }
        let (k, m) = (widths[widths.len() - 2], widths[widths.len() - 1]);
        let a_dist = Normal::new(0.0, (2.0 / k as f64).sqrt()).expect("valid normal");
        let final_a = Param::new(
            format!("{name}.final.A"),
            &[m, k],
            (0..m * k).map(|_| a_dist.sample(rng)).collect(),
        );
        let final_b = Param::zeros(format!("{name}.final.b"), &[m]);
        Self::from_parts(layers, final_a, final_b, basis)
    }

    pub fn layers(&self) -> &[ResKanLayer] {
        &self.layers
    }

    pub fn basis(&self) -> &ActivationBasis {
        &self.basis
    }

    pub fn final_affine(&self) -> (&Param, &Param) {
        (&self.final_a, &self.final_b)
    }

    pub fn final_affine_mut(&mut self) -> (&mut Param, &mut Param) {
        (&mut self.final_a, &mut self.final_b)
    }

    pub fn layers_mut(&mut self) -> &mut [ResKanLayer] {
        &mut self.layers
    }

    /// Widths `d₀, …, d_{L+1}`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.d_in()).collect();
        w.push(self.final_a.shape[1]);
        w.push(self.final_a.shape[0]);
        w
    }

    pub fn d_in(&self) -> usize {
        self.widths()[0]
    }

    pub fn d_out(&self) -> usize {
        self.final_a.shape[0]
    }

    pub fn width(&self) -> usize {
        self.widths().into_iter().max().unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.a, &l.b, &l.beta, &l.gate]);
        }
        out.push(&self.final_a);
        out.push(&self.final_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([&mut l.a, &mut l.b, &mut l.beta, &mut l.gate]);
        }
        out.push(&mut self.final_a);
        out.push(&mut self.final_b);
        out
    }

    /// Re-validates the sparsity floor after an external parameter update.
    pub fn check(&self) -> Result<()> {
        for l in &self.layers {
            self.basis.check_sparsity(&l.beta.data, l.d_out())?;
        }
        Ok(())
    }

    /// Row-wise forward pass on `x: [n, d₀]`. With a tape, every parameter is
    /// bound to it; without one the result is detached.
    pub fn forward(&self, tape: Option<&Tape>, x: &DiffTensor) -> Result<DiffTensor> {
        match *x.shape() {
            [_, d] if d == self.d_in() => {}
            _ => {
                return Err(KanoError::contract(format!(
                    "network expects [n, {}] input, got {:?}",
                    self.d_in(),
                    x.shape()
                )))
            }
        }
        let mut f = x.clone();
        for l in &self.layers {
            f = l.forward(tape, &f, &self.basis)?;
        }
        f.linear(&bind(tape, &self.final_a), Some(&bind(tape, &self.final_b)))
    }
}

/// Evaluates the network on one input vector without a tape.
pub fn reskan_forward(net: &ResKanNet, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != net.d_in() {
        return Err(KanoError::contract(format!(
            "network expects {} inputs, got {}",
            net.d_in(),
            x.len()
        )));
    }
    let mut f = x.to_vec();
    for l in &net.layers {
        f = l.eval_row(&f, &net.basis);
    }
    let (a, b) = (&net.final_a, &net.final_b);
    let k = a.shape[1];
    Ok((0..a.shape[0])
        .map(|o| b.data[o] + a.data[o * k..(o + 1) * k].iter().zip(&f).map(|(a, x)| a * x).sum::<f64>())
        .collect())
}

fn relu(u: f64) -> f64 {
    u.max(0.0)
}

/// `u² = ReLU(u)² + ReLU(−u)²`.
pub fn requ_square(u: f64) -> f64 {
    relu(u).powi(2) + relu(-u).powi(2)
}

fn pow2_near(v: f64) -> f64 {
    if v <= 0.0 || !v.is_finite() {
        1.0
    } else {
        2f64.powi(v.log2().round() as i32)
    }
}

/// `xy = ((x+y)² − x² − y²)/2` with both factors first rescaled by powers of
/// two (exact in binary floating point) to the same magnitude class, given
/// their a-priori bounds.
fn pair_gadget(x: f64, bx: f64, y: f64, by: f64) -> f64 {
    let (sx, sy) = (pow2_near(bx), pow2_near(by));
    let (u, v) = (x / sx, y / sy);
    0.5 * (requ_square(u + v) - requ_square(u) - requ_square(v)) * (sx * sy)
}

/// Product of `xs` through a cascade of pairwise ReQU gadgets on the cube
/// `[−M, M]^d`; the running product after `i` factors is bounded by `M^i`.
pub fn exact_multiply(xs: &[f64], bound: f64) -> Result<f64> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(KanoError::Domain(format!("cube bound must be positive, got {bound}")));
    }
    let Some((&first, rest)) = xs.split_first() else {
        return Err(KanoError::contract("exact_multiply of an empty tuple"));
    };
    if let Some(x) = xs.iter().find(|x| !(x.abs() <= bound)) {
        return Err(KanoError::Domain(format!("factor {x} outside the cube [-{bound}, {bound}]")));
    }
    let mut acc = first;
    let mut acc_bound = bound;
    for &x in rest {
        acc = pair_gadget(acc, acc_bound, x, bound);
        acc_bound *= bound;
        if !(acc.abs() <= acc_bound * (1.0 + 1e-12)) {
            return Err(KanoError::Domain(format!(
                "running product {acc} left the exactness region {acc_bound}"
            )));
        }
    }
    Ok(acc)
}

/// `(u, u², …, u^H)` by repeated exact multiplication.
pub fn requ_powers(u: f64, h_max: usize, bound: f64) -> Result<Vec<f64>> {
    if h_max < 2 {
        return Err(KanoError::contract(format!("requ_powers needs H >= 2, got {h_max}")));
    }
    if !(u.abs() <= bound) {
        return Err(KanoError::Domain(format!("{u} outside the cube [-{bound}, {bound}]")));
    }
    let mut out = Vec::with_capacity(h_max);
    out.push(u);
    let mut b = bound;
    for _ in 1..h_max {
        let prev = *out.last().expect("nonempty");
        out.push(pair_gadget(prev, b, u, bound));
        b *= bound;
    }
    Ok(out)
}
