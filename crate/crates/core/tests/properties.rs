use std::sync::Arc;

use kano_core::reskan::{exact_multiply, requ_powers, reskan_forward, ResKanNet};
use kano_core::spline::{bspline_deriv, bspline_eval, ActivationBasis, WaveletPair};
use kano_core::tensor::{fft2_forward, fft2_inverse, DiffTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partition_of_unity(order in 1usize..=4, x in 0.0f64..10.0) {
        let lo = -(order as i64 + 1);
        let hi = x.ceil() as i64;
        let total: f64 = (lo..=hi).map(|m| bspline_eval(order, x - m as f64)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn bspline_nonnegative_with_exact_support(order in 0usize..=5, x in -3.0f64..9.0) {
        let v = bspline_eval(order, x);
        prop_assert!(v >= -1e-15);
        if x <= 0.0 || x >= order as f64 + 1.0 {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn bspline_derivative_recursion(order in 1usize..=5, x in -0.5f64..6.5) {
        // the first-order spline has kinks at the integers
        prop_assume!(order > 1 || (x - x.round()).abs() > 1e-3);
        let h = 1e-6;
        let fd = (bspline_eval(order, x + h) - bspline_eval(order, x - h)) / (2.0 * h);
        let rec = bspline_eval(order - 1, x) - bspline_eval(order - 1, x - 1.0);
        prop_assert!((bspline_deriv(order, x) - rec).abs() < 1e-12);
        prop_assert!((fd - rec).abs() < 1e-6, "{fd} {rec}");
    }

    #[test]
    fn haar_refinement_is_exact_on_dyadics(k in -2048i64..4096) {
        let p = WaveletPair::haar();
        let x = k as f64 / 1024.0;
        prop_assert_eq!(p.scale(x), p.refine(x));
        prop_assert_eq!(p.wavelet(x), p.wavelet_from_scale(x));
    }

    #[test]
    fn exact_multiply_matches_product(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let d = rng.random_range(1..=4);
            let xs: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let direct: f64 = xs.iter().product();
            let got = exact_multiply(&xs, 10.0).unwrap();
            prop_assert!((got - direct).abs() < 1e-10, "{xs:?}: {got} vs {direct}");
        }
    }

    #[test]
    fn requ_powers_match_powi(u in -2.0f64..2.0, h in 2usize..6) {
        let p = requ_powers(u, h, 2.0).unwrap();
        for (i, v) in p.iter().enumerate() {
            prop_assert!((v - u.powi(i as i32 + 1)).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_multiply_rejects_leaving_the_cube() {
    assert!(exact_multiply(&[11.0, 1.0], 10.0).is_err());
    assert!(exact_multiply(&[-3.0, 4.0], 2.0).is_err());
    assert!(exact_multiply(&[], 2.0).is_err());
}

fn random_field(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn fft_round_trip_on_random_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v = random_field(&mut rng, 16 * 16 * 3);
    let t = DiffTensor::detached(v.clone(), &[16, 16, 3]);
    let back = fft2_inverse(&fft2_forward(&t).unwrap()).unwrap();
    let err = back.data().iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn fft_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for s in [4usize, 8, 32] {
        let v = random_field(&mut rng, s * s * 2);
        let spec = fft2_forward(&DiffTensor::detached(v.clone(), &[s, s, 2])).unwrap();
        let space: f64 = v.iter().map(|x| x * x).sum();
        let freq: f64 = spec.re(0).iter().zip(spec.im(0)).map(|(a, b)| a * a + b * b).sum::<f64>() / (s * s) as f64;
        assert!((space - freq).abs() <= 1e-9 * space, "{space} {freq}");
    }
}

#[test]
fn fft_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = random_field(&mut rng, 64);
    let b = random_field(&mut rng, 64);
    let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
    let f = |v: &[f64]| fft2_forward(&DiffTensor::detached(v.to_vec(), &[8, 8, 1])).unwrap();
    let (fa, fb, fc) = (f(&a), f(&b), f(&comb));
    for k in 0..64 {
        assert!((fc.re(0)[k] - (2.0 * fa.re(0)[k] - 0.5 * fb.re(0)[k])).abs() < 1e-12);
        assert!((fc.im(0)[k] - (2.0 * fa.im(0)[k] - 0.5 * fb.im(0)[k])).abs() < 1e-12);
    }
}

#[test]
fn residual_identity_composes_to_final_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let basis = ActivationBasis::new(4, 3.0, Arc::new(WaveletPair::daubechies(3).unwrap())).unwrap();
    let mut net = ResKanNet::init("id", &[3, 3, 3, 2], basis, &mut rng).unwrap();
    for l in net.layers_mut() {
        l.beta.data.iter_mut().for_each(|v| *v = 0.0);
        l.gate.data.iter_mut().for_each(|v| *v = 1.0);
    }
    let (fa, fb) = net.final_affine();
    let (a, b) = (fa.data.clone(), fb.data.clone());
    for _ in 0..20 {
        let x = random_field(&mut rng, 3);
        let y = reskan_forward(&net, &x).unwrap();
        for o in 0..2 {
            let expect: f64 = (0..3).map(|i| a[o * 3 + i] * x[i]).sum::<f64>() + b[o];
            assert!((y[o] - expect).abs() < 1e-13);
        }
    }
}

/// Second difference quotient of a scalar network `x ↦ net(x)`.
fn second_difference(net: &ResKanNet, x: f64, h: f64) -> f64 {
    let f = |t: f64| reskan_forward(net, &[t]).unwrap()[0];
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

#[test]
fn second_derivative_is_continuous_across_knots() {
    // B-spline terms only: the tabulated wavelet terms are piecewise linear
    // between table nodes and carry kinks of their own.
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let basis = ActivationBasis::new(4, 3.0, Arc::new(WaveletPair::daubechies(4).unwrap())).unwrap();
    let mut net = ResKanNet::init("smooth", &[1, 3, 1], basis, &mut rng).unwrap();
    let layer = &mut net.layers_mut()[0];
    layer.a.data = vec![0.8, -1.1, 1.3];
    layer.b.data = vec![1.7, 2.9, 0.4];
    let m = 3;
    for (k, v) in layer.beta.data.iter_mut().enumerate() {
        *v = if k / m >= 4 { rng.random_range(-1.0..1.0) } else { 0.0 };
    }
    let h = 1e-4;
    let (a, b) = (layer.a.data.clone(), layer.b.data.clone());
    let mut checked = 0;
    for n in 0..3 {
        for knot in 0..=5 {
            let x = (knot as f64 - b[n]) / a[n];
            if x.abs() > 3.0 {
                continue;
            }
            let left = second_difference(&net, x - h, h);
            let right = second_difference(&net, x + h, h);
            assert!((left - right).abs() < 1e-3, "neuron {n} knot {knot}: {left} vs {right}");
            checked += 1;
        }
    }
    assert!(checked >= 6);
}

#[test]
fn second_difference_probe_detects_a_first_order_kink() {
    // control: with α = 2 the N₂ term is only C¹ and the probe must see it
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let basis = ActivationBasis::new(2, 2.0, Arc::new(WaveletPair::haar())).unwrap();
    let mut net = ResKanNet::init("kink", &[1, 1, 1], basis, &mut rng).unwrap();
    let layer = &mut net.layers_mut()[0];
    layer.a.data = vec![1.0];
    layer.b.data = vec![0.5];
    layer.beta.data = vec![0.0, 0.0, 0.0, 1.0];
    let (fa, _) = net.final_affine_mut();
    fa.data = vec![1.0];
    let h = 1e-4;
    let jump = (second_difference(&net, 0.5 - h, h) - second_difference(&net, 0.5 + h, h)).abs();
    assert!(jump > 0.5, "{jump}");
}
