//! Kolmogorov–Arnold neural operators: lift → spectral blocks → projection on
//! an `s × s` grid, plus the Picard-unrolled kernel operator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::elliptic::Quadrature;
use crate::error::{KanoError, Result};
use crate::reskan::{bind, requ_powers, ResKanLayer, ResKanNet};
use crate::spline::{ActivationBasis, WaveletKind, WaveletPair};
use crate::tensor::{fft2_forward, fft2_inverse, spectral_mix, ComplexGrid, DiffTensor, Param, SpectralModes, Tape};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KanoSpec {
    /// Spatial dimension `d ≥ 2`; the model sees `d + 1` input channels.
    pub d: usize,
    /// Grid size (power of two).
    pub s: usize,
    /// Latent width `W`.
    pub width: usize,
    /// Number of blocks `L`.
    pub blocks: usize,
    /// Retained Fourier modes per axis.
    pub modes: usize,
    /// B-spline order `I`.
    pub order: usize,
    /// Smoothness floor `α`.
    pub alpha: f64,
    pub wavelet: WaveletKind,
}

impl KanoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(KanoError::config(format!("dimension must be >= 2, got {}", self.d)));
        }
        if self.s < 2 || !self.s.is_power_of_two() {
            return Err(KanoError::config(format!("grid size must be a power of two >= 2, got {}", self.s)));
        }
        if self.width == 0 || self.blocks == 0 {
            return Err(KanoError::config("width and block count must be positive"));
        }
        SpectralModes::new(self.s, self.modes)?;
        if self.alpha < 3.0 || self.alpha > self.order as f64 {
            return Err(KanoError::config(format!(
                "smoothness floor must satisfy 3 <= α <= I, got α = {}, I = {}",
                self.alpha, self.order
            )));
        }
        Ok(())
    }

    /// Grid spacing `1/(s−1)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.s - 1) as f64
    }
}

/// One processing block.
#[derive(Clone, Debug)]
pub struct KanoBlock {
    pub positional_encoder: ResKanNet,
    /// `[2, 2m−1, 2m−1, W·W]`, channel index `i·W + o`.
    pub spectral_weights: Param,
    pub mixer: ResKanNet,
}

#[derive(Clone, Debug)]
pub struct KanoModel {
    spec: KanoSpec,
    modes: SpectralModes,
    pub lift: ResKanNet,
    pub blocks: Vec<KanoBlock>,
    pub projection: ResKanNet,
}

/// A single operator query: time, the extra coordinates `(x₃, …, x_d)` and the
/// implied `s × s` grid over `(x₁, x₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorInput {
    pub t: f64,
    pub extra: Vec<f64>,
}

impl OperatorInput {
    pub fn new(t: f64, extra: Vec<f64>) -> Self {
        OperatorInput { t, extra }
    }

    /// Per-node channels `(t, x₁, x₂, x₃, …, x_d)`, rows ordered `i·s + j` with
    /// `x₁ = i/(s−1)`, `x₂ = j/(s−1)`.
    pub fn channels(&self, s: usize) -> Vec<f64> {
        let h = 1.0 / (s - 1) as f64;
        let c = 3 + self.extra.len();
        let mut out = Vec::with_capacity(s * s * c);
        for i in 0..s {
            for j in 0..s {
                out.push(self.t);
                out.push(i as f64 * h);
                out.push(j as f64 * h);
                out.extend_from_slice(&self.extra);
            }
        }
        out
    }
}

fn grid_coords(s: usize) -> Vec<f64> {
    let h = 1.0 / (s - 1) as f64;
    (0..s * s)
        .flat_map(|r| [(r / s) as f64 * h, (r % s) as f64 * h])
        .collect()
}

impl KanoModel {
    /// Randomly initialised model.
    pub fn new(spec: KanoSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let modes = SpectralModes::new(spec.s, spec.modes)?;
        let pair = Arc::new(WaveletPair::from_kind(spec.wavelet)?);
        let basis = ActivationBasis::new(spec.order, spec.alpha, pair)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = spec.width;
        let lift = ResKanNet::init("lift", &[spec.d + 1, w, w], basis.clone(), &mut rng)?;
        let mw = modes.width();
        let spectral = Normal::new(0.0, 1.0 / w as f64).expect("valid normal");
        let mut blocks = Vec::with_capacity(spec.blocks);
        for l in 0..spec.blocks {
            let positional_encoder =
                ResKanNet::init(&format!("block{l}.pos"), &[2, w, w], basis.clone(), &mut rng)?;
            let data = (0..2 * mw * mw * w * w).map(|_| spectral.sample(&mut rng)).collect();
            let spectral_weights = Param::new(format!("block{l}.spectral"), &[2, mw, mw, w * w], data);
            let mixer = ResKanNet::init(
                &format!("block{l}.mix"),
                &[3 * w, 3 * w, w],
                basis.clone(),
                &mut rng,
            )?;
            blocks.push(KanoBlock {
                positional_encoder,
                spectral_weights,
                mixer,
            });
        }
        let projection = ResKanNet::init("proj", &[w, w, 1], basis, &mut rng)?;
        Ok(KanoModel {
            spec,
            modes,
            lift,
            blocks,
            projection,
        })
    }

    pub fn spec(&self) -> &KanoSpec {
        &self.spec
    }

    pub fn modes(&self) -> &SpectralModes {
        &self.modes
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.lift.params();
        for b in &self.blocks {
            out.extend(b.positional_encoder.params());
            out.push(&b.spectral_weights);
            out.extend(b.mixer.params());
        }
        out.extend(self.projection.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.lift.params_mut();
        for b in &mut self.blocks {
            out.extend(b.positional_encoder.params_mut());
            out.push(&mut b.spectral_weights);
            out.extend(b.mixer.params_mut());
        }
        out.extend(self.projection.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Checks shapes chain and every activation honours the sparsity floor.
    pub fn check(&self) -> Result<()> {
        self.lift.check()?;
        self.projection.check()?;
        for b in &self.blocks {
            b.positional_encoder.check()?;
            b.mixer.check()?;
        }
        Ok(())
    }

    /// The spectral path `ifft(Ŵ · fft(v))` of block `l` on `v: [B·s², W]`.
    pub fn spectral_path(&self, l: usize, tape: Option<&Tape>, v: &DiffTensor) -> Result<DiffTensor> {
        let s = self.spec.s;
        let w = self.spec.width;
        let rows = v.shape()[0];
        if !rows.is_multiple_of(s * s) || v.shape()[1] != w {
            return Err(KanoError::contract(format!(
                "latent field {:?} does not match grid {s}x{s} with width {w}",
                v.shape()
            )));
        }
        let batch = rows / (s * s);
        let field = v.reshape(&[batch, s, s, w])?;
        let spec = fft2_forward(&field)?;
        let weights = ComplexGrid::from_tensor(bind(tape, &self.blocks[l].spectral_weights))?;
        let mixed = spectral_mix(&spec, &weights, &self.modes, w)?;
        fft2_inverse(&mixed)?.reshape(&[rows, w])
    }
}

/// Batched forward pass; returns `[B·s², 1]` with rows ordered
/// `b·s² + i·s + j`.
pub fn kano_forward(model: &KanoModel, inputs: &[OperatorInput], tape: Option<&Tape>) -> Result<DiffTensor> {
    let spec = &model.spec;
    let s = spec.s;
    if inputs.is_empty() {
        return Err(KanoError::contract("empty input batch"));
    }
    let channels = spec.d + 1;
    let mut phi = Vec::with_capacity(inputs.len() * s * s * channels);
    for inp in inputs {
        if inp.extra.len() != spec.d - 2 {
            return Err(KanoError::contract(format!(
                "expected {} extra coordinates, got {}",
                spec.d - 2,
                inp.extra.len()
            )));
        }
        phi.extend(inp.channels(s));
    }
    let batch = inputs.len();
    let phi = DiffTensor::detached(phi, &[batch * s * s, channels]);
    let coords = DiffTensor::detached(grid_coords(s), &[s * s, 2]);
    let mut v = model.lift.forward(tape, &phi)?;
    for (l, block) in model.blocks.iter().enumerate() {
        let pos = block.positional_encoder.forward(tape, &coords)?.tile_rows(batch)?;
        let kf = model.spectral_path(l, tape, &v)?;
        let cat = DiffTensor::concat_cols(&[&pos, &kf, &v])?;
        v = block.mixer.forward(tape, &cat)?;
    }
    model.projection.forward(tape, &v)
}

/// The `s × s` output field for one input, without a tape.
pub fn kano_field(model: &KanoModel, input: &OperatorInput) -> Result<Vec<f64>> {
    Ok(kano_forward(model, std::slice::from_ref(input), None)?.to_vec())
}

/// Bilinear interpolation of a node field (rows `i·s + j`) on `[0,1]²`.
pub fn bilinear(field: &[f64], s: usize, x1: f64, x2: f64) -> Result<f64> {
    if field.len() != s * s {
        return Err(KanoError::contract("field size does not match the grid"));
    }
    if !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&x2) {
        return Err(KanoError::Extrapolation(format!("({x1}, {x2}) outside [0,1]²")));
    }
    let scale = (s - 1) as f64;
    let locate = |x: f64| {
        let mut p = x * scale;
        // snap round-off so that node queries return the node value exactly
        if (p - p.round()).abs() < 1e-9 {
            p = p.round();
        }
        let i = (p.floor() as usize).min(s - 2);
        (i, p - i as f64)
    };
    let (i, fx) = locate(x1);
    let (j, fy) = locate(x2);
    let v = |a: usize, b: usize| field[a * s + b];
    if fx == 0.0 && fy == 0.0 {
        return Ok(v(i, j));
    }
    Ok((1.0 - fx) * (1.0 - fy) * v(i, j)
        + fx * (1.0 - fy) * v(i + 1, j)
        + (1.0 - fx) * fy * v(i, j + 1)
        + fx * fy * v(i + 1, j + 1))
}

/// `u(t, x)` from the model: evaluates the grid field for `(t, x₃, …, x_d)`
/// and interpolates bilinearly in `(x₁, x₂)`.
pub fn kano_query(model: &KanoModel, t: f64, x: &[f64]) -> Result<f64> {
    let d = model.spec.d;
    if x.len() != d {
        return Err(KanoError::contract(format!("query point must have {d} coordinates")));
    }
    let field = kano_field(model, &OperatorInput::new(t, x[2..].to_vec()))?;
    bilinear(&field, model.spec.s, x[0], x[1])
}

/// Evaluates a scalar kernel network `k(x, y)` on every node pair.
fn kernel_matrix(net: &ResKanNet, quad: &Quadrature) -> Result<Vec<f64>> {
    let n = quad.len();
    let dim = quad.dim();
    if net.d_in() != 2 * dim || net.d_out() != 1 {
        return Err(KanoError::contract(format!(
            "kernel network must map {} inputs to 1 output",
            2 * dim
        )));
    }
    let mut pairs = Vec::with_capacity(n * n * 2 * dim);
    for i in 0..n {
        for j in 0..n {
            pairs.extend_from_slice(quad.point(i));
            pairs.extend_from_slice(quad.point(j));
        }
    }
    Ok(net.forward(None, &DiffTensor::detached(pairs, &[n * n, 2 * dim]))?.to_vec())
}

/// `v_J` of `v_{j+1}(x) = Σ_h ∫k^h(x,y) v_j(y)^h dy − ∫k'(x,y) f₀(y) dy + w_g(x)`,
/// `v_0 = 0`. `kernels[h−2]` is `k^h`; powers use the ReQU gadget on the cube
/// `[−bound, bound]`.
pub fn picard_unrolled_operator(
    kernels: &[ResKanNet],
    k_prime: &ResKanNet,
    iterations: usize,
    f0: &[f64],
    w_g: &[f64],
    quad: &Quadrature,
    bound: f64,
) -> Result<Vec<f64>> {
    if iterations < 1 {
        return Err(KanoError::contract("the unrolled operator needs J >= 1"));
    }
    let n = quad.len();
    if f0.len() != n || w_g.len() != n {
        return Err(KanoError::contract("source and boundary fields must live on the quadrature nodes"));
    }
    let w = quad.weights();
    let weighted = |m: Vec<f64>| -> Vec<f64> {
        m.chunks(n).flat_map(|row| row.iter().zip(w).map(|(k, w)| k * w).collect::<Vec<_>>()).collect()
    };
    let kp = weighted(kernel_matrix(k_prime, quad)?);
    let ks = kernels
        .iter()
        .map(|k| kernel_matrix(k, quad).map(weighted))
        .collect::<Result<Vec<_>>>()?;
    let apply = |m: &[f64], v: &[f64]| -> Vec<f64> {
        m.chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let kf = apply(&kp, f0);
    let affine: Vec<f64> = w_g.iter().zip(&kf).map(|(g, k)| g - k).collect();
    let h_max = kernels.len() + 1;
    let mut v = vec![0.0; n];
    for _ in 0..iterations {
        let mut next = affine.clone();
        if !ks.is_empty() {
            let powers = v
                .iter()
                .map(|&x| requ_powers(x, h_max.max(2), bound))
                .collect::<Result<Vec<_>>>()?;
            for (hi, k) in ks.iter().enumerate() {
                let vh: Vec<f64> = powers.iter().map(|p| p[hi + 1]).collect();
                next.iter_mut().zip(apply(k, &vh)).for_each(|(a, b)| *a += b);
            }
        }
        v = next;
    }
    Ok(v)
}

/// The interval Green kernel `G(x,y)` realised exactly on `[0,1]²` by a
/// one-layer network with B-spline activations:
/// `G = x − ReLU(x−y) − ((x+y)² − x² − y²)/2`, each piece a scaled `𝒩₁`/`𝒩₂`.
pub fn interval_green_net(scale: f64) -> Result<ResKanNet> {
    let basis = ActivationBasis::new(2, 1.0, Arc::new(WaveletPair::haar()))?;
    // neurons: 2𝒩₁((x−y)/2), 8𝒩₂((x+y)/2), 2𝒩₂(x), 2𝒩₂(y), 𝒩₁(x)
    let a = vec![0.5, -0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let mut beta = vec![0.0; 4 * 5];
    let m = 5;
    beta[2 * m] = 2.0; // 𝒩₁ row
    beta[3 * m + 1] = 8.0; // 𝒩₂ row
    beta[3 * m + 2] = 2.0;
    beta[3 * m + 3] = 2.0;
    beta[2 * m + 4] = 1.0;
    let layer = ResKanLayer {
        a: Param::new("green.layer0.A", &[5, 2], a),
        b: Param::zeros("green.layer0.b", &[5]),
        beta: Param::new("green.layer0.beta", &[4, 5], beta),
        gate: Param::zeros("green.layer0.G", &[2]),
    };
    let fa = Param::new(
        "green.final.A",
        &[1, 5],
        [-1.0, -0.5, 0.5, 0.5, 1.0].iter().map(|v| v * scale).collect(),
    );
    ResKanNet::from_parts(vec![layer], fa, Param::zeros("green.final.b", &[1]), basis)
}

const CHECKPOINT_MAGIC: &str = "kano-checkpoint 1";

fn wavelet_name(kind: WaveletKind) -> String {
    match kind {
        WaveletKind::Haar => "haar".into(),
        WaveletKind::Daubechies(n) => format!("db{n}"),
    }
}

pub fn parse_wavelet(name: &str) -> Result<WaveletKind> {
    match name {
        "haar" | "db1" => Ok(WaveletKind::Haar),
        _ => name
            .strip_prefix("db")
            .and_then(|n| n.parse().ok())
            .filter(|n| (2..=6).contains(n))
            .map(WaveletKind::Daubechies)
            .ok_or_else(|| KanoError::config(format!("unknown wavelet {name:?}"))),
    }
}

/// Writes `<stem>.manifest` (text) and `<stem>.bin` (little-endian f64).
pub fn save_checkpoint(model: &KanoModel, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let manifest = stem.with_extension("manifest");
    let payload = stem.with_extension("bin");
    let spec = &model.spec;
    let mut text = String::new();
    text.push_str(CHECKPOINT_MAGIC);
    text.push('\n');
    let payload_name = payload.file_name().and_then(|n| n.to_str()).unwrap_or("model.bin");
    text.push_str(&format!("payload {payload_name}\n"));
    for (k, v) in [
        ("d", spec.d.to_string()),
        ("s", spec.s.to_string()),
        ("width", spec.width.to_string()),
        ("blocks", spec.blocks.to_string()),
        ("modes", spec.modes.to_string()),
        ("order", spec.order.to_string()),
        ("alpha", format!("{:?}", spec.alpha)),
        ("wavelet", wavelet_name(spec.wavelet)),
    ] {
        text.push_str(&format!("meta {k} {v}\n"));
    }
    let mut bytes = Vec::new();
    for p in model.params() {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        text.push_str(&format!("array {} {}\n", p.name, dims.join(" ")));
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&manifest, text).map_err(|e| KanoError::io(&manifest, e))?;
    let mut f = fs::File::create(&payload).map_err(|e| KanoError::io(&payload, e))?;
    f.write_all(&bytes).map_err(|e| KanoError::io(&payload, e))?;
    Ok((manifest, payload))
}

/// Loads a checkpoint written by [`save_checkpoint`], validating every array
/// against the architecture and the payload length against the shapes.
pub fn load_checkpoint(manifest: &Path) -> Result<KanoModel> {
    let text = fs::read_to_string(manifest).map_err(|e| KanoError::io(manifest, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(KanoError::Checkpoint(format!("{manifest:?} is not a checkpoint manifest")));
    }
    let mut payload_name = None;
    let mut meta = BTreeMap::new();
    let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("payload") => payload_name = parts.next().map(str::to_owned),
            Some("meta") => {
                let (Some(k), Some(v)) = (parts.next(), parts.next()) else {
                    return Err(KanoError::Checkpoint(format!("bad meta line {line:?}")));
                };
                meta.insert(k.to_owned(), v.to_owned());
            }
            Some("array") => {
                let name = parts
                    .next()
                    .ok_or_else(|| KanoError::Checkpoint(format!("bad array line {line:?}")))?;
                let dims = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| KanoError::Checkpoint(format!("bad shape in {line:?}")))?;
                arrays.push((name.to_owned(), dims));
            }
            _ => return Err(KanoError::Checkpoint(format!("unrecognised line {line:?}"))),
        }
    }
    let get = |k: &str| -> Result<&String> {
        meta.get(k).ok_or_else(|| KanoError::Checkpoint(format!("missing meta {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| KanoError::Checkpoint(format!("bad meta {k}")))
    };
    let spec = KanoSpec {
        d: num("d")?,
        s: num("s")?,
        width: num("width")?,
        blocks: num("blocks")?,
        modes: num("modes")?,
        order: num("order")?,
        alpha: get("alpha")?
            .parse()
            .map_err(|_| KanoError::Checkpoint("bad meta alpha".into()))?,
        wavelet: parse_wavelet(get("wavelet")?)?,
    };
    let payload = manifest.with_file_name(
        payload_name.ok_or_else(|| KanoError::Checkpoint("manifest names no payload".into()))?,
    );
    let bytes = fs::read(&payload).map_err(|e| KanoError::io(&payload, e))?;
    let expected: usize = arrays.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(KanoError::Checkpoint(format!(
            "payload holds {} values, shapes require {expected}",
            bytes.len() / 8
        )));
    }
    let mut model = KanoModel::new(spec, 0)?;
    let mut params = model.params_mut();
    if params.len() != arrays.len() {
        return Err(KanoError::Checkpoint(format!(
            "manifest lists {} arrays, architecture has {}",
            arrays.len(),
            params.len()
        )));
    }
    let mut offset = 0;
    for (p, (name, dims)) in params.iter_mut().zip(&arrays) {
        if &p.name != name || &p.shape != dims {
            return Err(KanoError::Checkpoint(format!(
                "array {name} {dims:?} does not match {} {:?}",
                p.name, p.shape
            )));
        }
        let count: usize = dims.iter().product();
        p.data = bytes[offset * 8..(offset + count) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += count;
    }
    model.check()?;
    Ok(model)
}
