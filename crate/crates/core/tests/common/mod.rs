#![allow(dead_code)]

use std::sync::Arc;

use kano_core::kano::{kano_forward, KanoModel, KanoSpec, OperatorInput};
use kano_core::spline::{ActivationBasis, WaveletKind, WaveletPair};
use kano_core::tensor::{DiffTensor, Param, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL: f64 = 1e-5;
pub const FD_ABS: f64 = 1e-8;

/// Largest violation of `|a − f| ≤ rel·max(|a|,|f|) + abs`, reported as the
/// ratio of the error to its allowance (≤ 1 passes).
pub fn compare(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / (FD_REL * a.abs().max(f.abs()) + FD_ABS))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + FD_STEP;
            let up = f(&xp);
            xp[i] = orig - FD_STEP;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Checks `d f / d x` for a scalar function built on the tape from one leaf.
pub fn check_leaf(x: &[f64], shape: &[usize], f: impl Fn(&DiffTensor) -> DiffTensor) -> f64 {
    let tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), shape);
    let root = f(&leaf);
    let analytic = tape.backward(&root).unwrap().wrt(&leaf);
    let numeric = numeric_grad(x, |v| f(&DiffTensor::detached(v.to_vec(), shape)).item());
    compare(&analytic, &numeric)
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn small_spec() -> KanoSpec {
    KanoSpec {
        d: 3,
        s: 8,
        width: 4,
        blocks: 2,
        modes: 3,
        order: 4,
        alpha: 3.0,
        wavelet: WaveletKind::Haar,
    }
}

/// A random model whose B-spline coefficients are nonzero and whose
/// scale/wavelet coefficients vanish, so the network is C² in every
/// parameter and central differences are meaningful.
pub fn smooth_random_model(spec: KanoSpec, seed: u64) -> KanoModel {
    let mut model = KanoModel::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params_mut() {
        if p.name.ends_with(".beta") {
            let m = p.shape[1];
            for (k, v) in p.data.iter_mut().enumerate() {
                let row = k / m;
                *v = if row >= 4 { rng.random_range(-1.0..1.0) } else { 0.0 };
            }
        } else if p.name.ends_with(".b") {
            for v in &mut p.data {
                *v = rng.random_range(0.5..2.5);
            }
        }
    }
    model.check().unwrap();
    model
}

pub fn model_inputs(d: usize, seed: u64, n: usize) -> Vec<OperatorInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| OperatorInput::new(rng.random_range(0.0..1.0), random_vec(&mut rng, d - 2, 1.0)))
        .collect()
}

pub fn model_loss(model: &KanoModel, inputs: &[OperatorInput], tape: Option<&Tape>) -> DiffTensor {
    kano_forward(model, inputs, tape).unwrap().square().mean()
}

/// Worst FD violation over every parameter of `model`.
pub fn check_model_params(model: &mut KanoModel, inputs: &[OperatorInput]) -> f64 {
    let tape = Tape::new();
    let loss = model_loss(model, inputs, Some(&tape));
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| grads.param(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    let count = model.params().len();
    for pi in 0..count {
        let n = model.params()[pi].len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = model.params()[pi].data[k];
            model.params_mut()[pi].data[k] = orig + FD_STEP;
            let up = model_loss(model, inputs, None).item();
            model.params_mut()[pi].data[k] = orig - FD_STEP;
            let down = model_loss(model, inputs, None).item();
            model.params_mut()[pi].data[k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(compare(&analytic[pi], &numeric));
    }
    worst
}

pub fn bspline_basis(order: usize, alpha: f64) -> ActivationBasis {
    ActivationBasis::new(order, alpha, Arc::new(WaveletPair::haar())).unwrap()
}

pub fn param_tensor(tape: &Tape, p: &Param) -> DiffTensor {
    tape.param(p)
}
