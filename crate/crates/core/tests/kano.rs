mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::*;
use kano_core::elliptic::{picard_solve, PicardSetup, SemilinearProblem};
use kano_core::kano::*;
use kano_core::tensor::DiffTensor;
use kano_core::KanoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_spectral_weights_and_passthrough_mixer() {
    let spec = small_spec();
    let w = spec.width;
    let mut model = KanoModel::new(spec.clone(), 3).unwrap();
    for block in &mut model.blocks {
        block.spectral_weights.data.iter_mut().for_each(|v| *v = 0.0);
        let mixer = &mut block.mixer;
        for layer in mixer.layers_mut() {
            layer.beta.data.iter_mut().for_each(|v| *v = 0.0);
            layer.gate.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let (fa, fb) = mixer.final_affine_mut();
        fa.data.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..w {
            fa.data[o * 3 * w + 2 * w + o] = 1.0;
        }
        fb.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let inp = OperatorInput::new(0.4, vec![0.3]);
    let s = spec.s;
    let phi = DiffTensor::detached(inp.channels(s), &[s * s, spec.d + 1]);
    let direct = model.projection.forward(None, &model.lift.forward(None, &phi).unwrap()).unwrap();
    let out = kano_field(&model, &inp).unwrap();
    assert!(max_abs_diff(&out, direct.data()) < 1e-12);
}

/// A latent field `[s², W]` whose spectrum lies in the retained modes.
fn band_limited(s: usize, w: usize, kmax: i64, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = vec![0.0; s * s * w];
    for c in 0..w {
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                let (a, phase) = (rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI));
                for i in 0..s {
                    for j in 0..s {
                        let arg = 2.0 * PI * (k1 * i as i64 + k2 * j as i64) as f64 / s as f64 + phase;
                        v[(i * s + j) * w + c] += a * arg.cos();
                    }
                }
            }
        }
    }
    v
}

#[test]
fn unit_multipliers_reproduce_band_limited_fields() {
    let spec = small_spec();
    let (s, w) = (spec.s, spec.width);
    let mut model = KanoModel::new(spec.clone(), 4).unwrap();
    let width = model.modes().width();
    let sw = &mut model.blocks[0].spectral_weights;
    sw.data.iter_mut().for_each(|v| *v = 0.0);
    for kx in 0..width {
        for ky in 0..width {
            for c in 0..w {
                sw.data[((kx * width) + ky) * w * w + c * w + c] = 1.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = band_limited(s, w, spec.modes as i64 - 1, &mut rng);
    let kf = model.spectral_path(0, None, &DiffTensor::detached(v.clone(), &[s * s, w])).unwrap();
    assert!(max_abs_diff(kf.data(), &v) < 1e-9);
}

#[test]
fn spectral_path_is_translation_equivariant() {
    let spec = small_spec();
    let (s, w) = (spec.s, spec.width);
    let model = KanoModel::new(spec, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v: Vec<f64> = (0..s * s * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shift = |f: &[f64], di: usize, dj: usize| {
        let mut out = vec![0.0; f.len()];
        for i in 0..s {
            for j in 0..s {
                let (ti, tj) = ((i + di) % s, (j + dj) % s);
                out[(ti * s + tj) * w..(ti * s + tj + 1) * w].copy_from_slice(&f[(i * s + j) * w..(i * s + j + 1) * w]);
            }
        }
        out
    };
    let path = |f: Vec<f64>| model.spectral_path(1, None, &DiffTensor::detached(f, &[s * s, w])).unwrap().to_vec();
    let base = path(v.clone());
    for (di, dj) in [(1, 0), (0, 3), (5, 2)] {
        let moved = path(shift(&v, di, dj));
        assert!(max_abs_diff(&moved, &shift(&base, di, dj)) < 1e-9);
    }
}

#[test]
fn outputs_are_finite_on_the_training_box() {
    let model = KanoModel::new(small_spec(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs: Vec<OperatorInput> = (0..1000)
        .map(|_| OperatorInput::new(rng.random_range(0.0..1.0), vec![rng.random_range(0.0..1.0)]))
        .collect();
    for chunk in inputs.chunks(100) {
        let out = kano_forward(&model, chunk, None).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn grid_and_coordinate_mismatches_are_contract_errors() {
    let model = KanoModel::new(small_spec(), 1).unwrap();
    let bad = OperatorInput::new(0.1, vec![]);
    assert!(matches!(kano_forward(&model, &[bad], None), Err(KanoError::Contract(_))));
    assert!(matches!(
        model.spectral_path(0, None, &DiffTensor::detached(vec![0.0; 60], &[15, 4])),
        Err(KanoError::Contract(_))
    ));
}

#[test]
fn query_matches_node_and_bilinear_oracle() {
    let model = KanoModel::new(small_spec(), 10).unwrap();
    let s = 8;
    let field = kano_field(&model, &OperatorInput::new(0.2, vec![0.7])).unwrap();
    let h = 1.0 / (s - 1) as f64;
    assert_eq!(kano_query(&model, 0.2, &[3.0 * h, 5.0 * h, 0.7]).unwrap(), field[3 * s + 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (x1, x2): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (i, j) = (((x1 / h).floor() as usize).min(s - 2), ((x2 / h).floor() as usize).min(s - 2));
        let (tx, ty) = (x1 / h - i as f64, x2 / h - j as f64);
        let f = |a: usize, b: usize| field[a * s + b];
        let oracle = f(i, j) * (1.0 - tx) * (1.0 - ty) + f(i + 1, j) * tx * (1.0 - ty) + f(i, j + 1) * (1.0 - tx) * ty + f(i + 1, j + 1) * tx * ty;
        assert!((bilinear(&field, s, x1, x2).unwrap() - oracle).abs() < 1e-12);
    }
    assert!(matches!(kano_query(&model, 0.2, &[1.2, 0.5, 0.0]), Err(KanoError::Extrapolation(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec();
    spec.wavelet = kano_core::spline::WaveletKind::Daubechies(3);
    let model = KanoModel::new(spec, 12).unwrap();
    let (manifest, payload) = save_checkpoint(&model, &dir.path().join("m")).unwrap();
    let back = load_checkpoint(&manifest).unwrap();
    assert_eq!(back.spec(), model.spec());
    for (a, b) in model.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert_eq!(a.data, b.data);
    }
    let inp = OperatorInput::new(0.5, vec![0.5]);
    assert_eq!(kano_field(&model, &inp).unwrap(), kano_field(&back, &inp).unwrap());

    // a truncated payload is rejected
    let bytes = std::fs::read(&payload).unwrap();
    std::fs::write(&payload, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&manifest), Err(KanoError::Checkpoint(_))));
    std::fs::write(&payload, &bytes).unwrap();

    // a shape that disagrees with the architecture is rejected
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken = text.replacen("array lift.layer0.b 4", "array lift.layer0.b 5", 1);
    assert_ne!(broken, text);
    std::fs::write(&manifest, broken).unwrap();
    assert!(load_checkpoint(&manifest).is_err());
}

fn toy_setup(nodes: usize) -> PicardSetup {
    PicardSetup::new(SemilinearProblem::toy(nodes, 1.0, 0.05, 0.05, 0.5)).unwrap()
}

#[test]
fn single_unrolled_step_without_source_is_the_boundary_extension() {
    let setup = toy_setup(33);
    let green = interval_green_net(1.0).unwrap();
    let f0 = vec![0.0; 33];
    let v = picard_unrolled_operator(std::slice::from_ref(&green), &green, 1, &f0, &setup.w_g, &setup.quad, 1.0).unwrap();
    assert_eq!(v, setup.w_g);
    assert!(matches!(
        picard_unrolled_operator(&[], &green, 0, &f0, &setup.w_g, &setup.quad, 1.0),
        Err(KanoError::Contract(_))
    ));
}

#[test]
fn unrolled_linear_operator_matches_oracle_solve() {
    let nodes = 129;
    let p = SemilinearProblem::poisson(
        kano_core::elliptic::Domain::Interval { nodes },
        Arc::new(|x: &[f64]| -(PI * x[0]).cos()),
        Arc::new(|x: &[f64]| 0.1 * x[0]),
        2.0,
    );
    let setup = PicardSetup::new(p).unwrap();
    let oracle = picard_solve(&setup, 1e-10, 1).unwrap();
    let green = interval_green_net(1.0).unwrap();
    let v = picard_unrolled_operator(&[], &green, 1, &setup.f0, &setup.w_g, &setup.quad, 1.0).unwrap();
    assert!(max_abs_diff(&v, &oracle.u) < 1e-12);
}

#[test]
fn unrolled_error_decays_geometrically_and_monotonically() {
    let setup = toy_setup(129);
    let oracle = picard_solve(&setup, 1e-14, 3).unwrap();
    let green = interval_green_net(1.0).unwrap();
    let errors: Vec<f64> = (1..=8)
        .map(|j| {
            let v = picard_unrolled_operator(std::slice::from_ref(&green), &green, j, &setup.f0, &setup.w_g, &setup.quad, 1.0).unwrap();
            let diff: Vec<f64> = v.iter().zip(&oracle.u).map(|(a, b)| a - b).collect();
            setup.norm(&diff)
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0], "{errors:?}");
        if w[0] > 1e-11 {
            assert!(w[1] / w[0] <= oracle.rho + 0.05, "{errors:?} rho {}", oracle.rho);
        }
    }
    assert!(errors[7] < 1e-8, "{errors:?}");
}
