//! Power-of-two FFTs and the tape-differentiable 2D spectral primitives.
//!
//! Fields are stored as `[batch, s, s, channels]` (channels fastest); their
//! spectra as `[batch, 2, s, s, channels]` with the real block first.
//! Transforms are unnormalised forward and `1/s²`-normalised inverse, so
//! `fft2_inverse(fft2_forward(v)) == v`.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::ops::record;
use super::DiffTensor;
use crate::error::{KanoError, Result};

/// Power-of-two 1D transform plan (forward and inverse, both unnormalised).
#[derive(Clone)]
pub struct FftPlan {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("n", &self.n).finish()
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(KanoError::config(format!(
                "FFT size must be a power of two, got {n}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(FftPlan {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalised transform; `inverse` flips the exponent sign.
    pub fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        debug_assert_eq!(re.len(), self.n);
        debug_assert_eq!(im.len(), self.n);
        let mut buf: Vec<Complex<f64>> =
            re.iter().zip(im.iter()).map(|(&r, &i)| Complex::new(r, i)).collect();
        if inverse {
            self.inverse.process(&mut buf);
        } else {
            self.forward.process(&mut buf);
        }
        for (k, c) in buf.into_iter().enumerate() {
            re[k] = c.re;
            im[k] = c.im;
        }
    }

    /// Unnormalised 2D transform of one contiguous `n × n` plane.
    pub fn transform_2d(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        for r in 0..n {
            self.transform(&mut re[r * n..(r + 1) * n], &mut im[r * n..(r + 1) * n], inverse);
        }
        let mut cr = vec![0.0; n];
        let mut ci = vec![0.0; n];
        for c in 0..n {
            for r in 0..n {
                cr[r] = re[r * n + c];
                ci[r] = im[r * n + c];
            }
            self.transform(&mut cr, &mut ci, inverse);
            for r in 0..n {
                re[r * n + c] = cr[r];
                im[r * n + c] = ci[r];
            }
        }
    }
}

/// Applies a 2D transform to every `(batch, channel)` plane.
///
/// `input_re`/`input_im` use the field layout `[batch, s, s, c]`; the result
/// is returned as separate real and imaginary blocks in the same layout.
fn planes_2d(
    plan: &FftPlan,
    batch: usize,
    channels: usize,
    input_re: &[f64],
    input_im: Option<&[f64]>,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    let s = plan.len();
    let plane = s * s;
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..batch * channels)
        .into_par_iter()
        .map(|bc| {
            let (b, c) = (bc / channels, bc % channels);
            let base = b * plane * channels;
            let mut re = vec![0.0; plane];
            let mut im = vec![0.0; plane];
            for p in 0..plane {
                re[p] = input_re[base + p * channels + c];
                if let Some(src) = input_im {
                    im[p] = src[base + p * channels + c];
                }
            }
            plan.transform_2d(&mut re, &mut im, inverse);
            (re, im)
        })
        .collect();
    let mut out_re = vec![0.0; batch * plane * channels];
    let mut out_im = vec![0.0; batch * plane * channels];
    for (bc, (re, im)) in results.into_iter().enumerate() {
        let (b, c) = (bc / channels, bc % channels);
        let base = b * plane * channels;
        for p in 0..plane {
            out_re[base + p * channels + c] = re[p];
            out_im[base + p * channels + c] = im[p];
        }
    }
    (out_re, out_im)
}

/// A batch of complex `nx × ny × channels` grids backed by one tensor of shape
/// `[batch, 2, nx, ny, channels]`.
#[derive(Clone, Debug)]
pub struct ComplexGrid {
    tensor: DiffTensor,
    batch: usize,
    nx: usize,
    ny: usize,
    channels: usize,
    batched: bool,
}

impl ComplexGrid {
    /// Wraps a `[batch, 2, nx, ny, channels]` or `[2, nx, ny, channels]` tensor.
    pub fn from_tensor(tensor: DiffTensor) -> Result<Self> {
        let (batch, nx, ny, channels, batched) = match *tensor.shape() {
            [b, 2, nx, ny, c] => (b, nx, ny, c, true),
            [2, nx, ny, c] => (1, nx, ny, c, false),
            _ => {
                return Err(KanoError::contract(format!(
                    "complex grid needs shape [batch,2,nx,ny,c] or [2,nx,ny,c], got {:?}",
                    tensor.shape()
                )))
            }
        };
        Ok(ComplexGrid {
            tensor,
            batch,
            nx,
            ny,
            channels,
            batched,
        })
    }

    pub fn from_parts(re: Vec<f64>, im: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        if re.len() != im.len() || re.len() != shape.0 * shape.1 * shape.2 {
            return Err(KanoError::contract("complex grid: re/im lengths must match the shape"));
        }
        let mut data = re;
        data.extend(im);
        Self::from_tensor(DiffTensor::detached(data, &[2, shape.0, shape.1, shape.2]))
    }

    pub fn tensor(&self) -> &DiffTensor {
        &self.tensor
    }

    /// `(nx, ny, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.channels)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn block(&self) -> usize {
        self.nx * self.ny * self.channels
    }

    /// Real part of grid `b`.
    pub fn re(&self, b: usize) -> &[f64] {
        let blk = self.block();
        &self.tensor.data()[2 * b * blk..(2 * b + 1) * blk]
    }

    /// Imaginary part of grid `b`.
    pub fn im(&self, b: usize) -> &[f64] {
        let blk = self.block();
        &self.tensor.data()[(2 * b + 1) * blk..(2 * b + 2) * blk]
    }

    /// Value at `(b, kx, ky, c)` as `(re, im)`.
    pub fn at(&self, b: usize, kx: usize, ky: usize, c: usize) -> (f64, f64) {
        let i = (kx * self.ny + ky) * self.channels + c;
        (self.re(b)[i], self.im(b)[i])
    }
}

fn field_dims(field: &DiffTensor) -> Result<(usize, usize, usize, bool)> {
    let (b, s, s2, c, batched) = match *field.shape() {
        [b, s, s2, c] => (b, s, s2, c, true),
        [s, s2, c] => (1, s, s2, c, false),
        _ => {
            return Err(KanoError::contract(format!(
                "field must be [s,s,c] or [batch,s,s,c], got {:?}",
                field.shape()
            )))
        }
    };
    if s != s2 {
        return Err(KanoError::contract(format!("field grid must be square, got {s}x{s2}")));
    }
    Ok((b, s, c, batched))
}

fn split_blocks(data: &[f64], batch: usize, blk: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = Vec::with_capacity(batch * blk);
    let mut im = Vec::with_capacity(batch * blk);
    for b in 0..batch {
        re.extend_from_slice(&data[2 * b * blk..(2 * b + 1) * blk]);
        im.extend_from_slice(&data[(2 * b + 1) * blk..(2 * b + 2) * blk]);
    }
    (re, im)
}

fn join_blocks(re: &[f64], im: &[f64], batch: usize, blk: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * batch * blk);
    for b in 0..batch {
        out.extend_from_slice(&re[b * blk..(b + 1) * blk]);
        out.extend_from_slice(&im[b * blk..(b + 1) * blk]);
    }
    out
}

/// Unnormalised 2D FFT of a real field over its two grid axes.
pub fn fft2_forward(field: &DiffTensor) -> Result<ComplexGrid> {
    let (batch, s, c, batched) = field_dims(field)?;
    let plan = Arc::new(FftPlan::new(s)?);
    let (re, im) = planes_2d(&plan, batch, c, field.data(), None, false);
    let blk = s * s * c;
    let data = join_blocks(&re, &im, batch, blk);
    let shape = [batch, 2, s, s, c];
    let bw_plan = plan.clone();
    let tensor = record(&[field], data, &shape, move |g, _| {
        // d/dx of Σ G·conj-free F x is Re(s² · ifft2(G)).
        let (gre, gim) = split_blocks(g, batch, blk);
        let (xr, _) = planes_2d(&bw_plan, batch, c, &gre, Some(&gim), true);
        vec![Some(xr)]
    })?;
    let mut grid = ComplexGrid::from_tensor(tensor)?;
    grid.batched = batched;
    Ok(grid)
}

/// Real part of the normalised inverse 2D FFT.
pub fn fft2_inverse(grid: &ComplexGrid) -> Result<DiffTensor> {
    let (nx, ny, c) = grid.shape();
    if nx != ny {
        return Err(KanoError::contract("inverse FFT needs a square spectrum"));
    }
    let s = nx;
    let batch = grid.batch;
    let plan = Arc::new(FftPlan::new(s)?);
    let blk = s * s * c;
    let (re, im) = split_blocks(grid.tensor.data(), batch, blk);
    let (mut out, _) = planes_2d(&plan, batch, c, &re, Some(&im), true);
    let norm = 1.0 / (s * s) as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    let shape: Vec<usize> = if grid.batched {
        vec![batch, s, s, c]
    } else {
        vec![s, s, c]
    };
    let bw_plan = plan.clone();
    record(&[&grid.tensor], out, &shape, move |g, _| {
        let (gr, gi) = planes_2d(&bw_plan, batch, c, g, None, false);
        let mut data = join_blocks(&gr, &gi, batch, blk);
        data.iter_mut().for_each(|v| *v *= norm);
        vec![Some(data)]
    })
}

/// The retained low-frequency index set of one grid axis: `|k| < modes`,
/// i.e. indices `0..modes` and `s-modes+1..s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectralModes {
    s: usize,
    modes: usize,
    indices: Vec<usize>,
}

impl SpectralModes {
    pub fn new(s: usize, modes: usize) -> Result<Self> {
        if modes == 0 || modes > s / 2 {
            return Err(KanoError::config(format!(
                "retained modes must be in 1..={} for grid size {s}, got {modes}",
                s / 2
            )));
        }
        let indices = (0..modes).chain(s - modes + 1..s).collect();
        Ok(SpectralModes { s, modes, indices })
    }

    pub fn grid_size(&self) -> usize {
        self.s
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Number of retained indices per axis, `2·modes − 1`.
    pub fn width(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-mode complex channel mixing `ŷ(k)[o] = Σ_i Ŵ(k)[i,o] x̂(k)[i]` on the
/// retained modes; every other mode of the output is zero.
///
/// `weights` is a `[2, w, w, c_in·c_out]` grid (`w = modes.width()`), indexed
/// `i·c_out + o` in its channel axis.
pub fn spectral_mix(
    x: &ComplexGrid,
    weights: &ComplexGrid,
    modes: &SpectralModes,
    c_out: usize,
) -> Result<ComplexGrid> {
    let (s, s2, c_in) = x.shape();
    let w = modes.width();
    if s != s2 || s != modes.grid_size() {
        return Err(KanoError::contract(format!(
            "spectral_mix: spectrum {s}x{s2} vs mode set for s={}",
            modes.grid_size()
        )));
    }
    if weights.shape() != (w, w, c_in * c_out) || weights.batch() != 1 {
        return Err(KanoError::contract(format!(
            "spectral_mix: weights shape {:?}, expected ({w}, {w}, {})",
            weights.shape(),
            c_in * c_out
        )));
    }
    let batch = x.batch();
    let idx = modes.indices().to_vec();
    let xin = x.tensor.data().to_vec();
    let wd = weights.tensor.data().to_vec();
    let xblk = s * s * c_in;
    let yblk = s * s * c_out;
    let wblk = w * w * c_in * c_out;
    let mut out = vec![0.0; 2 * batch * yblk];
    for b in 0..batch {
        let (xr, xi) = (2 * b * xblk, (2 * b + 1) * xblk);
        let (yr, yi) = (2 * b * yblk, (2 * b + 1) * yblk);
        for (px, &kx) in idx.iter().enumerate() {
            for (py, &ky) in idx.iter().enumerate() {
                let xo = (kx * s + ky) * c_in;
                let yo = (kx * s + ky) * c_out;
                let wo = (px * w + py) * c_in * c_out;
                for i in 0..c_in {
                    let (ar, ai) = (xin[xr + xo + i], xin[xi + xo + i]);
                    for o in 0..c_out {
                        let (wr, wi) = (wd[wo + i * c_out + o], wd[wblk + wo + i * c_out + o]);
                        out[yr + yo + o] += wr * ar - wi * ai;
                        out[yi + yo + o] += wr * ai + wi * ar;
                    }
                }
            }
        }
    }
    let shape = [batch, 2, s, s, c_out];
    let tensor = record(&[&x.tensor, &weights.tensor], out, &shape, move |g, needs| {
        let mut gx = needs[0].then(|| vec![0.0; 2 * batch * xblk]);
        let mut gw = needs[1].then(|| vec![0.0; 2 * wblk]);
        for b in 0..batch {
            let (xr, xi) = (2 * b * xblk, (2 * b + 1) * xblk);
            let (yr, yi) = (2 * b * yblk, (2 * b + 1) * yblk);
            for (px, &kx) in idx.iter().enumerate() {
                for (py, &ky) in idx.iter().enumerate() {
                    let xo = (kx * s + ky) * c_in;
                    let yo = (kx * s + ky) * c_out;
                    let wo = (px * w + py) * c_in * c_out;
                    for i in 0..c_in {
                        let (ar, ai) = (xin[xr + xo + i], xin[xi + xo + i]);
                        for o in 0..c_out {
                            let (gr, gi) = (g[yr + yo + o], g[yi + yo + o]);
                            let wk = wo + i * c_out + o;
                            let (wr, wi) = (wd[wk], wd[wblk + wk]);
                            if let Some(gx) = gx.as_mut() {
                                gx[xr + xo + i] += gr * wr + gi * wi;
                                gx[xi + xo + i] += gi * wr - gr * wi;
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wk] += gr * ar + gi * ai;
                                gw[wblk + wk] += gi * ar - gr * ai;
                            }
                        }
                    }
                }
            }
        }
        vec![gx, gw]
    })?;
    let mut grid = ComplexGrid::from_tensor(tensor)?;
    grid.batched = x.batched;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                (0..n).fold((0.0, 0.0), |(ar, ai), j| {
                    let a = sign * 2.0 * PI * (k * j) as f64 / n as f64;
                    (
                        ar + re[j] * a.cos() - im[j] * a.sin(),
                        ai + re[j] * a.sin() + im[j] * a.cos(),
                    )
                })
            })
            .unzip()
    }

    #[test]
    fn plan_matches_naive_dft() {
        for n in [1, 2, 4, 8, 32] {
            let re: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let im: Vec<f64> = (0..n).map(|i| ((i * 5 + 1) % 7) as f64 * 0.5).collect();
            for inverse in [false, true] {
                let (er, ei) = naive_dft(&re, &im, inverse);
                let (mut r, mut i) = (re.clone(), im.clone());
                FftPlan::new(n).unwrap().transform(&mut r, &mut i, inverse);
                for k in 0..n {
                    assert!((r[k] - er[k]).abs() < 1e-10 && (i[k] - ei[k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn non_power_of_two_is_a_configuration_error() {
        assert!(matches!(FftPlan::new(12), Err(KanoError::Config(_))));
        let field = DiffTensor::detached(vec![0.0; 36], &[6, 6, 1]);
        assert!(matches!(fft2_forward(&field), Err(KanoError::Config(_))));
    }

    #[test]
    fn constant_field_concentrates_at_dc() {
        let field = DiffTensor::detached(vec![1.0; 64], &[8, 8, 1]);
        let spec = fft2_forward(&field).unwrap();
        for kx in 0..8 {
            for ky in 0..8 {
                let (r, i) = spec.at(0, kx, ky, 0);
                if kx == 0 && ky == 0 {
                    assert!((r - 64.0).abs() < 1e-12 && i.abs() < 1e-12);
                } else {
                    assert!(r.abs() < 1e-12 && i.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode_set_layout() {
        let m = SpectralModes::new(8, 3).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2, 6, 7]);
        assert!(SpectralModes::new(8, 5).is_err());
        assert!(SpectralModes::new(8, 0).is_err());
    }
}
