//! Cardinal B-splines, scale/wavelet pairs and the trainable activation
//! `σ_β = β₋₁ σ_S + β₀ σ_W + Σ_{i ≥ ⌈α⌉} β_i 𝒩_i`.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{KanoError, Result};
use crate::tensor::ops::record;
use crate::tensor::DiffTensor;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Cardinal B-spline of order `i`, supported on `[0, i+1]`, via the signed
/// sum of shifted ReLU powers. Order 0 is the indicator of `[0, 1)`.
pub fn bspline_eval(order: usize, x: f64) -> f64 {
    if order == 0 {
        return if (0.0..1.0).contains(&x) { 1.0 } else { 0.0 };
    }
    if !(x > 0.0 && x < (order + 1) as f64) {
        return 0.0;
    }
    let inv_fact = 1.0 / factorial(order);
    let mut acc = 0.0;
    for j in 0..=order + 1 {
        let r = x - j as f64;
        if r <= 0.0 {
            break;
        }
        let term = binomial(order + 1, j) * r.powi(order as i32);
        acc += if j % 2 == 0 { term } else { -term };
    }
    acc * inv_fact
}

/// `d/dx 𝒩_i(x) = 𝒩_{i−1}(x) − 𝒩_{i−1}(x−1)`; zero for order 0.
pub fn bspline_deriv(order: usize, x: f64) -> f64 {
    if order == 0 {
        return 0.0;
    }
    bspline_eval(order - 1, x) - bspline_eval(order - 1, x - 1.0)
}

/// A cardinal B-spline of fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BSplineBasis {
    pub order: usize,
}

impl BSplineBasis {
    pub fn new(order: usize) -> Self {
        BSplineBasis { order }
    }

    /// Knot positions `0, 1, …, order+1`.
    pub fn knots(&self) -> impl Iterator<Item = f64> {
        (0..=self.order + 1).map(|k| k as f64)
    }

    pub fn support(&self) -> (f64, f64) {
        (0.0, (self.order + 1) as f64)
    }

    pub fn eval(&self, x: f64) -> f64 {
        bspline_eval(self.order, x)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        bspline_deriv(self.order, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletKind {
    Haar,
    /// Daubechies wavelet with the given number of vanishing moments (2..=6).
    Daubechies(usize),
}

const DB2: [f64; 4] = [
    0.48296291314453416,
    0.8365163037378079,
    0.2241438680420134,
    -0.12940952255126037,
];
const DB3: [f64; 6] = [
    0.33267055295008263,
    0.8068915093110925,
    0.45987750211849154,
    -0.13501102001025458,
    -0.08544127388202666,
    0.03522629188570953,
];
const DB4: [f64; 8] = [
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560764,
    0.0328830116668852,
    -0.010597401785069032,
];
const DB5: [f64; 10] = [
    0.16010239797419293,
    0.6038292697971896,
    0.7243085284377729,
    0.13842814590132074,
    -0.24229488706638203,
    -0.032244869584638375,
    0.07757149384004572,
    -0.006241490212798274,
    -0.012580751999081999,
    0.0033357252854737712,
];
const DB6: [f64; 12] = [
    0.11154074335010947,
    0.49462389039845306,
    0.7511339080210954,
    0.31525035170919763,
    -0.22626469396543983,
    -0.12976686756726194,
    0.09750160558732304,
    0.027522865530305727,
    -0.03158203931748603,
    0.0005538422011614961,
    0.004777257510945511,
    -0.0010773010853084796,
];

/// Dyadic table of a function on `[x0, x0 + span]`, linearly interpolated.
#[derive(Clone, Debug)]
struct DyadicTable {
    x0: f64,
    depth: u32,
    values: Vec<f64>,
}

impl DyadicTable {
    fn scale(&self) -> f64 {
        (1u64 << self.depth) as f64
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let p = (x - self.x0) * self.scale();
        if !(p >= 0.0) || p >= (self.values.len() - 1) as f64 {
            return None;
        }
        let i = p.floor() as usize;
        Some((i, p - i as f64))
    }

    fn eval(&self, x: f64) -> f64 {
        match self.locate(x) {
            Some((i, 0.0)) => self.values[i],
            Some((i, f)) => self.values[i] + f * (self.values[i + 1] - self.values[i]),
            None => 0.0,
        }
    }

    fn deriv(&self, x: f64) -> f64 {
        match self.locate(x) {
            Some((i, _)) => (self.values[i + 1] - self.values[i]) * self.scale(),
            None => 0.0,
        }
    }
}

const SCALE_DEPTH: u32 = 13;
const WAVELET_DEPTH: u32 = 12;

/// A father/mother wavelet pair `(σ_S, σ_W)` with its low-pass filter.
#[derive(Clone, Debug)]
pub struct WaveletPair {
    kind: WaveletKind,
    filters: Vec<f64>,
    tables: Option<(DyadicTable, DyadicTable)>,
}

impl WaveletPair {
    pub fn haar() -> Self {
        WaveletPair {
            kind: WaveletKind::Haar,
            filters: vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            tables: None,
        }
    }

    /// Daubechies pair with `moments` vanishing moments, tabulated by the
    /// refinement cascade.
    pub fn daubechies(moments: usize) -> Result<Self> {
        let filters: Vec<f64> = match moments {
            1 => return Ok(Self::haar()),
            2 => DB2.to_vec(),
            3 => DB3.to_vec(),
            4 => DB4.to_vec(),
            5 => DB5.to_vec(),
            6 => DB6.to_vec(),
            _ => {
                return Err(KanoError::config(format!(
                    "Daubechies pairs are available for 1..=6 vanishing moments, got {moments}"
                )))
            }
        };
        let scale = cascade(&filters, SCALE_DEPTH)?;
        let wavelet = mother_from_father(&filters, &scale, WAVELET_DEPTH);
        Ok(WaveletPair {
            kind: WaveletKind::Daubechies(moments),
            filters,
            tables: Some((scale, wavelet)),
        })
    }

    pub fn from_kind(kind: WaveletKind) -> Result<Self> {
        match kind {
            WaveletKind::Haar => Ok(Self::haar()),
            WaveletKind::Daubechies(n) => Self::daubechies(n),
        }
    }

    pub fn kind(&self) -> WaveletKind {
        self.kind
    }

    /// Low-pass filter `h_0, …, h_{L−1}`.
    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    /// Filter tap `h_k`, zero outside the stored range.
    pub fn h(&self, k: i64) -> f64 {
        usize::try_from(k)
            .ok()
            .and_then(|k| self.filters.get(k).copied())
            .unwrap_or(0.0)
    }

    /// `√2·h_k`, evaluated as `h_k / (1/√2)` so the Haar taps are exactly 1.
    pub fn scaled_tap(&self, k: i64) -> f64 {
        self.h(k) / FRAC_1_SQRT_2
    }

    /// Support of σ_S.
    pub fn scale_support(&self) -> (f64, f64) {
        (0.0, (self.filters.len() - 1) as f64)
    }

    /// Support of σ_W.
    pub fn wavelet_support(&self) -> (f64, f64) {
        let n = (self.filters.len() / 2) as f64;
        (1.0 - n, n)
    }

    pub fn scale(&self, x: f64) -> f64 {
        match &self.tables {
            None => {
                if (0.0..1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Some((s, _)) => s.eval(x),
        }
    }

    pub fn wavelet(&self, x: f64) -> f64 {
        match &self.tables {
            None => {
                if (0.0..0.5).contains(&x) {
                    1.0
                } else if (0.5..1.0).contains(&x) {
                    -1.0
                } else {
                    0.0
                }
            }
            Some((_, w)) => w.eval(x),
        }
    }

    /// Derivative of σ_S (piecewise-linear slope for tabulated pairs, zero
    /// almost everywhere for Haar).
    pub fn scale_deriv(&self, x: f64) -> f64 {
        self.tables.as_ref().map_or(0.0, |(s, _)| s.deriv(x))
    }

    pub fn wavelet_deriv(&self, x: f64) -> f64 {
        self.tables.as_ref().map_or(0.0, |(_, w)| w.deriv(x))
    }

    /// Right-hand side of the refinement equation, `√2 Σ_k h_k σ_S(2x − k)`.
    pub fn refine(&self, x: f64) -> f64 {
        (0..self.filters.len() as i64)
            .map(|k| self.scaled_tap(k) * self.scale(2.0 * x - k as f64))
            .sum()
    }

    /// `√2 Σ_k (−1)^k h_{1−k} σ_S(2x − k)`.
    pub fn wavelet_from_scale(&self, x: f64) -> f64 {
        let l = self.filters.len() as i64;
        (2 - l..=1)
            .map(|k| {
                let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                sign * self.scaled_tap(1 - k) * self.scale(2.0 * x - k as f64)
            })
            .sum()
    }
}

/// Tabulates σ_S at the dyadic points of `[0, L−1]` down to `depth`.
fn cascade(h: &[f64], depth: u32) -> Result<DyadicTable> {
    let l = h.len();
    let last = l - 1;
    let hk = |k: i64| usize::try_from(k).ok().and_then(|k| h.get(k)).copied().unwrap_or(0.0);
    // φ(i) = Σ_j √2 h_{2i−j} φ(j), normalised by Σ φ(j) = 1.
    let n = last + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().take(n).enumerate() {
            *v = SQRT_2 * hk(2 * i as i64 - j as i64) - if i == j { 1.0 } else { 0.0 };
        }
    }
    a[n - 1] = vec![1.0; n + 1];
    let mut values = solve_dense(a)
        .ok_or_else(|| KanoError::Solver("singular cascade eigen-system".into()))?;
    for level in 1..=depth {
        let prev = &values;
        let step = 1usize << (level - 1);
        let count = last * (1usize << level) + 1;
        let mut next = vec![0.0; count];
        for (j, slot) in next.iter_mut().enumerate() {
            *slot = if j % 2 == 0 {
                prev[j / 2]
            } else {
                SQRT_2
                    * (0..l)
                        .map(|k| {
                            let idx = j as i64 - (k * step) as i64;
                            usize::try_from(idx)
                                .ok()
                                .and_then(|i| prev.get(i))
                                .map_or(0.0, |v| h[k] * v)
                        })
                        .sum::<f64>()
            };
        }
        values = next;
    }
    Ok(DyadicTable {
        x0: 0.0,
        depth,
        values,
    })
}

/// Gaussian elimination with partial pivoting on an augmented `n × (n+1)`
/// system.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}

/// Tabulates σ_W on `[1−N, N]` at `depth` from a σ_S table of greater depth.
fn mother_from_father(h: &[f64], scale: &DyadicTable, depth: u32) -> DyadicTable {
    let l = h.len() as i64;
    let n = l / 2;
    let x0 = (1 - n) as f64;
    let count = ((2 * n - 1) as usize) * (1usize << depth) + 1;
    // 2x − k lands on the depth-1 lattice; stride into the finer σ_S table.
    let stride = 1i64 << (scale.depth - (depth - 1));
    let per_unit = 1i64 << (depth - 1);
    let values = (0..count as i64)
        .map(|j| {
            SQRT_2
                * (2 - l..=1)
                    .map(|k| {
                        let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                        // 2x − k = 2x0 − k + j / 2^{depth−1}
                        let coarse = (2 * (1 - n) - k) * per_unit + j;
                        let idx = coarse * stride;
                        let v = usize::try_from(idx)
                            .ok()
                            .and_then(|i| scale.values.get(i))
                            .copied()
                            .unwrap_or(0.0);
                        sign * h[(1 - k) as usize] * v
                    })
                    .sum::<f64>()
        })
        .collect();
    DyadicTable { x0, depth, values }
}

/// The basis `(σ_S, σ_W, 𝒩_1, …, 𝒩_I)` shared by every neuron of a layer,
/// with the smoothness floor α masking `𝒩_i` for `1 ≤ i < ⌈α⌉`.
#[derive(Clone, Debug)]
pub struct ActivationBasis {
    order: usize,
    alpha: f64,
    floor: usize,
    pair: Arc<WaveletPair>,
}

impl ActivationBasis {
    pub fn new(order: usize, alpha: f64, pair: Arc<WaveletPair>) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(KanoError::config(format!(
                "smoothness floor must be finite and non-negative, got {alpha}"
            )));
        }
        Ok(ActivationBasis {
            order,
            alpha,
            floor: alpha.ceil() as usize,
            pair,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pair(&self) -> &Arc<WaveletPair> {
        &self.pair
    }

    /// Number of coefficient rows, `I + 2`.
    pub fn rows(&self) -> usize {
        self.order + 2
    }

    /// Whether coefficient row `r` may be nonzero.
    pub fn is_active(&self, row: usize) -> bool {
        row < 2 || (row <= self.order + 1 && row > self.floor)
    }

    /// Value of basis row `r` at `x`; zero for masked rows.
    pub fn value(&self, row: usize, x: f64) -> f64 {
        match row {
            0 => self.pair.scale(x),
            1 => self.pair.wavelet(x),
            r if self.is_active(r) => bspline_eval(r - 1, x),
            _ => 0.0,
        }
    }

    pub fn deriv(&self, row: usize, x: f64) -> f64 {
        match row {
            0 => self.pair.scale_deriv(x),
            1 => self.pair.wavelet_deriv(x),
            r if self.is_active(r) => bspline_deriv(r - 1, x),
            _ => 0.0,
        }
    }

    /// Checks a `[I+2, m]` coefficient matrix against the sparsity floor.
    pub fn check_sparsity(&self, beta: &[f64], m: usize) -> Result<()> {
        if beta.len() != self.rows() * m {
            return Err(KanoError::contract(format!(
                "activation coefficients: expected {}x{m}, got {} values",
                self.rows(),
                beta.len()
            )));
        }
        for r in (0..self.rows()).filter(|&r| !self.is_active(r)) {
            if let Some(j) = (0..m).find(|&j| beta[r * m + j] != 0.0) {
                return Err(KanoError::config(format!(
                    "B-spline coefficient of order {} (neuron {j}) must vanish below the smoothness floor {}",
                    r - 1,
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    /// `Σ_r β_r φ_r(x)` for one neuron whose coefficients are `beta(r)`.
    pub fn combine(&self, beta: impl Fn(usize) -> f64, x: f64) -> f64 {
        (0..self.rows())
            .filter(|&r| self.is_active(r))
            .map(|r| {
                let b = beta(r);
                if b == 0.0 {
                    0.0
                } else {
                    b * self.value(r, x)
                }
            })
            .sum()
    }

    fn combine_deriv(&self, beta: impl Fn(usize) -> f64, x: f64) -> f64 {
        (0..self.rows())
            .filter(|&r| self.is_active(r))
            .map(|r| {
                let b = beta(r);
                if b == 0.0 {
                    0.0
                } else {
                    b * self.deriv(r, x)
                }
            })
            .sum()
    }
}

/// Coefficients of a single neuron's activation.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineActivation {
    beta: Vec<f64>,
    order: usize,
    alpha: f64,
}

impl SplineActivation {
    /// `beta = (β₋₁, β₀, β₁, …, β_I)`.
    pub fn new(beta: Vec<f64>, order: usize, alpha: f64) -> Result<Self> {
        if beta.len() != order + 2 {
            return Err(KanoError::config(format!(
                "activation of order {order} needs {} coefficients, got {}",
                order + 2,
                beta.len()
            )));
        }
        let floor = alpha.ceil().max(0.0) as usize;
        if let Some(i) = (1..floor.min(order + 1)).find(|&i| beta[1 + i] != 0.0) {
            return Err(KanoError::config(format!(
                "β_{i} must vanish below the smoothness floor {alpha}"
            )));
        }
        Ok(SplineActivation { beta, order, alpha })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `β₋₁σ_S(x) + β₀σ_W(x) + Σ_{i≥⌈α⌉} β_i 𝒩_i(x)`.
pub fn activation_eval(act: &SplineActivation, pair: &WaveletPair, x: f64) -> f64 {
    let floor = act.alpha.ceil().max(1.0) as usize;
    let mut y = act.beta[0] * pair.scale(x) + act.beta[1] * pair.wavelet(x);
    for i in floor..=act.order {
        y += act.beta[1 + i] * bspline_eval(i, x);
    }
    y
}

/// Applies per-neuron activations to `pre: [n, m]` with coefficients
/// `beta: [I+2, m]`. Masked rows receive neither signal nor gradient.
pub fn apply_activation(
    pre: &DiffTensor,
    beta: &DiffTensor,
    basis: &ActivationBasis,
) -> Result<DiffTensor> {
    let (n, m) = match *pre.shape() {
        [n, m] => (n, m),
        _ => return Err(KanoError::contract("activation input must be [n, m]")),
    };
    if beta.shape() != [basis.rows(), m] {
        return Err(KanoError::contract(format!(
            "activation coefficients must be [{}, {m}], got {:?}",
            basis.rows(),
            beta.shape()
        )));
    }
    let x = pre.to_vec();
    let b = beta.to_vec();
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        for (j, y) in row.iter_mut().enumerate() {
            *y = basis.combine(|k| b[k * m + j], x[r * m + j]);
        }
    });
    let basis = basis.clone();
    record(&[pre, beta], out, &[n, m], move |g, needs| {
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; n * m];
            gx.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    let go = g[r * m + j];
                    if go != 0.0 {
                        *v = go * basis.combine_deriv(|k| b[k * m + j], x[r * m + j]);
                    }
                }
            });
            gx
        });
        let gb = needs[1].then(|| {
            let rows = basis.rows();
            let mut gb = vec![0.0; rows * m];
            gb.par_chunks_mut(m).enumerate().for_each(|(k, grow)| {
                if !basis.is_active(k) {
                    return;
                }
                for r in 0..n {
                    for (j, acc) in grow.iter_mut().enumerate() {
                        let go = g[r * m + j];
                        if go != 0.0 {
                            *acc += go * basis.value(k, x[r * m + j]);
                        }
                    }
                }
            });
            gb
        });
        vec![gx, gb]
    })
}
