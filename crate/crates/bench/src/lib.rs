//! Deterministic fixtures shared by the kernel benchmarks in `benches/`.

use kano_core::elliptic::{PicardSetup, SemilinearProblem};
use kano_core::kano::{KanoModel, KanoSpec, OperatorInput};
use kano_core::spline::WaveletKind;
use kano_core::DiffTensor;

/// `[1, s, s, c]` field of low-frequency sines.
pub fn smooth_field(s: usize, channels: usize) -> DiffTensor {
    let data = (0..s * s * channels)
        .map(|k| {
            let (i, j, c) = (k / (s * channels), (k / channels) % s, k % channels);
            (0.3 * i as f64 + 0.7 * j as f64 + c as f64).sin()
        })
        .collect();
    DiffTensor::detached(data, &[1, s, s, channels])
}

/// Model of the size used by the desk-scale experiments.
pub fn desk_model(d: usize, s: usize, width: usize, blocks: usize) -> KanoModel {
    let spec = KanoSpec {
        d,
        s,
        width,
        blocks,
        modes: (s / 4).max(2),
        order: 4,
        alpha: 3.0,
        wavelet: WaveletKind::Daubechies(4),
    };
    KanoModel::new(spec, 0).expect("valid benchmark spec")
}

/// `n` inputs spread over `t ∈ [0, 1)` with fixed extra coordinates.
pub fn inputs(d: usize, n: usize) -> Vec<OperatorInput> {
    (0..n)
        .map(|k| OperatorInput::new(k as f64 / n as f64, vec![0.25; d - 2]))
        .collect()
}

/// The interval toy instance `−u'' = u² + 0.05 sin(πx)`, `g = 0.05x`.
pub fn toy_setup(nodes: usize) -> PicardSetup {
    PicardSetup::new(SemilinearProblem::toy(nodes, 1.0, 0.05, 0.05, 0.5)).expect("toy instance is valid")
}
