use std::f64::consts::PI;
use std::sync::Arc;

use kano_core::elliptic::*;

fn toy(nodes: usize) -> PicardSetup {
    let p = SemilinearProblem::toy(nodes, 1.0, 0.05, 0.05, 0.5);
    PicardSetup::new(p).unwrap()
}

#[test]
fn toy_instance_satisfies_smallness() {
    let s = toy(129);
    s.problem.validate(&s.quad).unwrap();
}

#[test]
fn linear_solve_matches_closed_form() {
    let p = SemilinearProblem::poisson(
        Domain::Interval { nodes: 257 },
        Arc::new(|_: &[f64]| -1.0),
        Arc::new(|_: &[f64]| 0.0),
        2.0,
    );
    let s = PicardSetup::new(p).unwrap();
    let out = picard_solve(&s, 1e-8, 1).unwrap();
    assert_eq!(out.iterations, 1);
    let err = (0..s.quad.len())
        .map(|i| {
            let x = s.quad.point(i)[0];
            (out.u[i] - x * (1.0 - x) / 2.0).abs()
        })
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn no_forcing_returns_boundary_extension() {
    let p = SemilinearProblem::poisson(
        Domain::Interval { nodes: 65 },
        Arc::new(|_: &[f64]| 0.0),
        Arc::new(|x: &[f64]| 0.1 * x[0]),
        1.0,
    );
    let s = PicardSetup::new(p).unwrap();
    let u: Vec<f64> = (0..65).map(|i| 0.01 * (i as f64 * 0.3).sin()).collect();
    assert_eq!(apply_t(&s, &u).unwrap(), s.w_g);
}

#[test]
fn quadrature_refinement_is_second_order() {
    let err = |nodes: usize| {
        let p = SemilinearProblem::poisson(
            Domain::Interval { nodes },
            Arc::new(|y: &[f64]| -PI * PI * (PI * y[0]).sin()),
            Arc::new(|_: &[f64]| 0.0),
            20.0,
        );
        let s = PicardSetup::new(p).unwrap();
        let u = apply_t(&s, &vec![0.0; nodes]).unwrap();
        (0..nodes)
            .map(|i| (u[i] - (PI * s.quad.point(i)[0]).sin()).abs())
            .fold(0.0, f64::max)
    };
    let (e1, e2, e3) = (err(33), err(65), err(129));
    assert!(e1 / e2 >= 3.5 && e2 / e3 >= 3.5, "{e1} {e2} {e3}");
}

#[test]
fn measured_contraction_bounds_random_pairs() {
    let s = toy(129);
    let rho = measure_contraction(&s, 100, 7).unwrap();
    assert!(rho > 0.0 && rho < 1.0, "{rho}");
    let again = measure_contraction(&s, 100, 8).unwrap();
    assert!(again <= rho + 0.05, "{rho} {again}");
}

#[test]
fn toy_picard_converges_geometrically() {
    let s = toy(129);
    let out = picard_solve(&s, 1e-6, 7).unwrap();
    assert!(out.residual < 1e-6, "{}", out.residual);
    for row in &out.log {
        if row.ratio.is_finite() {
            assert!(row.ratio <= out.rho + 0.02, "{row:?} rho {}", out.rho);
        }
    }
    for w in out.log.windows(2) {
        if w[0].step_norm > 1e-12 {
            assert!(w[1].step_norm <= (out.rho + 0.05) * w[0].step_norm);
        }
    }
}

#[test]
fn ball_kernel_respects_sampled_bound() {
    let k = GreenKernel::Ball { radius: 1.0 };
    let c0 = k.bound_constant();
    let pts = [
        [0.1, 0.2, -0.3],
        [0.5, -0.5, 0.1],
        [-0.2, 0.0, 0.7],
        [0.05, 0.05, 0.05],
        [0.0, -0.8, 0.3],
    ];
    for x in &pts {
        for y in &pts {
            if x == y {
                continue;
            }
            let r: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(k.eval(x, y).abs() <= c0 * r.powi(-2));
            assert!((k.eval(x, y) - k.eval(y, x)).abs() < 1e-10);
            // gradient in x by central differences
            let h = 1e-6;
            let grad: f64 = (0..3)
                .map(|i| {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[i] += h;
                    xm[i] -= h;
                    ((k.eval(&xp, y) - k.eval(&xm, y)) / (2.0 * h)).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!(grad <= c0 * r.powi(-2) * (1.0 + 1e-6));
        }
    }
}

#[test]
fn ball_poisson_solution_is_close_to_closed_form() {
    // −Δu = 1, u = 0 on |x| = 1  ⇒  u = (1 − |x|²)/6
    let p = SemilinearProblem::poisson(
        Domain::Ball { radius: 1.0, nodes_per_axis: 17 },
        Arc::new(|_: &[f64]| -1.0),
        Arc::new(|_: &[f64]| 0.0),
        2.0,
    );
    let s = PicardSetup::new(p).unwrap();
    let u = apply_t(&s, &vec![0.0; s.quad.len()]).unwrap();
    let err = (0..s.quad.len())
        .map(|i| {
            let r2: f64 = s.quad.point(i).iter().map(|v| v * v).sum();
            (u[i] - (1.0 - r2) / 6.0).abs()
        })
        .fold(0.0, f64::max);
    assert!(err < 0.02, "{err}");
}

#[test]
fn interval_kernel_is_symmetric_and_bounded() {
    let k = GreenKernel::Interval;
    for i in 0..20 {
        for j in 0..20 {
            let (x, y) = ([i as f64 / 19.0], [j as f64 / 19.0]);
            assert!((k.eval(&x, &y) - k.eval(&y, &x)).abs() < 1e-15);
            assert!(k.eval(&x, &y).abs() <= k.bound_constant());
        }
    }
}
