//! Experiment pipeline: configuration, dataset generation, training,
//! path-wise evaluation and the reproducible artifacts written by the CLI.
//!
//! Every CSV starts with `# config_hash=<sha256>` and `# seed=<seed>` lines,
//! floats are printed with Rust's shortest round-trip formatting, and no
//! output depends on wall-clock time, so identical configs give identical
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::{riccati_solve, Benchmark, BenchmarkKind};
use crate::elliptic::{picard_solve, Domain, PicardOutcome, PicardSetup, SemilinearProblem};
use crate::error::{KanoError, Result};
use crate::fbno::{adapt, bsde_residual, DerivativeScheme, ModelSurface, Surface};
use crate::kano::{kano_forward, load_checkpoint, parse_wavelet, save_checkpoint, KanoModel, KanoSpec, OperatorInput};
use crate::sde::{simulate_paths, unit_cube, PathBundle, SdeSpec};
use crate::tensor::Tape;

/// Flat key-value run configuration. Every key has a default; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `periodic` or `lq`.
    pub benchmark: String,
    pub d: usize,
    pub horizon: f64,
    /// Grid size over `(x₁, x₂)`; a power of two.
    pub s: usize,
    pub samples: usize,
    pub batch: usize,
    /// Optimizer steps; ignored when `epochs > 0`.
    pub steps: usize,
    /// Passes over the dataset; `steps = epochs · ⌈samples / batch⌉`.
    pub epochs: usize,
    pub seed: u64,
    /// Where artifacts go. Not part of the config hash.
    pub out_dir: String,

    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Training samples whose loss is logged and picks the best checkpoint.
    pub probe: usize,
    pub log_every: usize,

    pub blocks: usize,
    pub width: usize,
    pub modes: usize,
    pub order: usize,
    pub alpha: f64,
    pub wavelet: String,

    /// `checkpoint`, `untrained` or `oracle` (the closed form itself).
    pub eval_model: String,
    /// Manifest to evaluate; empty means `<out_dir>/model.manifest`. Not part
    /// of the config hash.
    pub checkpoint: String,
    pub eval_paths: usize,
    pub eval_dt: f64,
    pub path_seed: u64,
    /// `analytic`, `central` or `forward`.
    pub scheme: String,
    /// Stencil step; `0` means one grid cell `1/(s−1)`.
    pub fd_step: f64,
    /// Start point; empty means the benchmark default.
    pub x0: Vec<f64>,
    /// "Near t = 0" is `t ≤ near_zero · T`.
    pub near_zero: f64,

    pub sim_paths: usize,
    pub sim_dt: f64,
    /// Stop recording exit on the open unit cube.
    pub exit_domain: bool,

    /// `interval` or `ball`.
    pub picard_domain: String,
    pub picard_nodes: usize,
    pub picard_radius: f64,
    pub picard_delta: f64,
    pub picard_eps: f64,
    pub picard_c: f64,
    pub picard_a: f64,
    pub picard_b: f64,

    pub riccati_steps: usize,
    pub riccati_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: "periodic".into(),
            d: 5,
            horizon: 1.0,
            s: 32,
            samples: 4096,
            batch: 8,
            steps: 1000,
            epochs: 0,
            seed: 0,
            out_dir: "runs/default".into(),
            lr: 1e-3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            probe: 64,
            log_every: 25,
            blocks: 2,
            width: 8,
            modes: 6,
            order: 4,
            alpha: 3.0,
            wavelet: "db4".into(),
            eval_model: "checkpoint".into(),
            checkpoint: String::new(),
            eval_paths: 4,
            eval_dt: 0.02,
            path_seed: 1000,
            scheme: "central".into(),
            fd_step: 0.0,
            x0: Vec::new(),
            near_zero: 0.1,
            sim_paths: 4,
            sim_dt: 0.01,
            exit_domain: false,
            picard_domain: "interval".into(),
            picard_nodes: 257,
            picard_radius: 1.0,
            picard_delta: 0.5,
            picard_eps: 1e-6,
            picard_c: 1.0,
            picard_a: 0.05,
            picard_b: 0.05,
            riccati_steps: crate::benchmarks::RICCATI_STEPS,
            riccati_stride: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| KanoError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KanoError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key = value` overrides. Values are read as TOML literals and
    /// fall back to plain strings (`wavelet=db4`).
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<Self> {
        let toml::Value::Table(mut table) = toml::Value::try_from(self).map_err(|e| KanoError::config(e.to_string()))?
        else {
            unreachable!("a struct serialises to a table")
        };
        for (k, v) in pairs {
            let (k, v) = (k.as_ref(), v.as_ref());
            let Some(old) = table.get(k) else {
                return Err(KanoError::config(format!("unknown key {k:?}")));
            };
            let parsed = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_owned()));
            let value = match (old, parsed) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (toml::Value::String(_), p) if !p.is_str() => toml::Value::String(v.to_owned()),
                (_, p) => p,
            };
            table.insert(k.to_owned(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| KanoError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        BenchmarkKind::parse(&self.benchmark)?;
        if self.d < 2 {
            return Err(KanoError::config("d must be at least 2"));
        }
        if self.samples == 0 || self.batch == 0 || self.samples < self.batch {
            return Err(KanoError::config(format!(
                "need samples ≥ batch ≥ 1, got {} and {}",
                self.samples, self.batch
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return Err(KanoError::config("optimizer needs lr > 0, 0 ≤ decay < 1, eps > 0"));
        }
        if self.log_every == 0 || self.probe == 0 {
            return Err(KanoError::config("log_every and probe must be positive"));
        }
        self.model_spec()?.validate()?;
        if !["checkpoint", "untrained", "oracle"].contains(&self.eval_model.as_str()) {
            return Err(KanoError::config(format!("unknown eval_model {:?}", self.eval_model)));
        }
        self.scheme()?;
        if !self.x0.is_empty() && self.x0.len() != self.d {
            return Err(KanoError::config(format!("x0 needs {} coordinates", self.d)));
        }
        if !["interval", "ball"].contains(&self.picard_domain.as_str()) {
            return Err(KanoError::config(format!("unknown picard_domain {:?}", self.picard_domain)));
        }
        if self.riccati_stride == 0 {
            return Err(KanoError::config("riccati_stride must be positive"));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<BenchmarkKind> {
        BenchmarkKind::parse(&self.benchmark)
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::new(self.kind()?, self.d, self.horizon)
    }

    pub fn model_spec(&self) -> Result<KanoSpec> {
        Ok(KanoSpec {
            d: self.d,
            s: self.s,
            width: self.width,
            blocks: self.blocks,
            modes: self.modes,
            order: self.order,
            alpha: self.alpha,
            wavelet: parse_wavelet(&self.wavelet)?,
        })
    }

    pub fn total_steps(&self) -> usize {
        if self.epochs > 0 {
            self.epochs * self.samples.div_ceil(self.batch)
        } else {
            self.steps
        }
    }

    pub fn fd_step(&self) -> f64 {
        if self.fd_step > 0.0 {
            self.fd_step
        } else {
            1.0 / (self.s - 1) as f64
        }
    }

    pub fn scheme(&self) -> Result<DerivativeScheme> {
        DerivativeScheme::parse(&self.scheme, self.fd_step())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn checkpoint_manifest(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out_dir().join("model.manifest")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    /// SHA-256 of the canonical TOML with the location keys blanked, so the
    /// same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        c.checkpoint.clear();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// One supervised example: the exact solution on the `s × s` grid at
/// `(t, x₃, …, x_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub t: f64,
    pub extra: Vec<f64>,
    /// Rows `i·s + j`, `x₁ = i/(s−1)`, `x₂ = j/(s−1)`.
    pub target: Vec<f64>,
}

impl TrainingSample {
    pub fn input(&self) -> OperatorInput {
        OperatorInput::new(self.t, self.extra.clone())
    }
}

/// Closed-form `u(t, ·)` on the grid.
pub fn target_field(bench: &Benchmark, s: usize, t: f64, extra: &[f64]) -> Result<Vec<f64>> {
    let h = 1.0 / (s - 1) as f64;
    let mut x = vec![0.0; 2 + extra.len()];
    x[2..].copy_from_slice(extra);
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            x[0] = i as f64 * h;
            x[1] = j as f64 * h;
            out.push(bench.value(t, &x)?);
        }
    }
    Ok(out)
}

/// `samples` draws of `t ~ U[0,T]`, `x₃..x_d ~ U[0,1)` with exact targets.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let bench = cfg.benchmark()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<(f64, Vec<f64>)> = (0..cfg.samples)
        .map(|_| {
            let t = rng.random_range(0.0..=cfg.horizon);
            (t, (0..cfg.d - 2).map(|_| rng.random_range(0.0..1.0)).collect())
        })
        .collect();
    coords
        .into_par_iter()
        .map(|(t, extra)| {
            let target = target_field(&bench, cfg.s, t, &extra)?;
            Ok(TrainingSample { t, extra, target })
        })
        .collect()
}

/// SHA-256 over the little-endian bytes of every sample.
pub fn dataset_hash(data: &[TrainingSample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update(s.t.to_le_bytes());
        for v in s.extra.iter().chain(&s.target) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// RMSProp without momentum.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    square: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(decay: f64, eps: f64) -> Self {
        RmsProp {
            decay,
            eps,
            square: Vec::new(),
        }
    }

    /// `v ← ρv + (1−ρ)g²`, `p ← p − lr·g/(√v + ε)`. `grads[k]` belongs to
    /// `params[k]`; `None` means no gradient reached it.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Option<Vec<f64>>], lr: f64) {
        if self.square.is_empty() {
            self.square = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.square) {
            let Some(g) = g else { continue };
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.decay * *v + (1.0 - self.decay) * g * g;
                *p -= lr * g / (v.sqrt() + self.eps);
            }
        }
    }
}

/// Base rate halved after each third of training.
pub fn learning_rate(base: f64, step: usize, total: usize) -> f64 {
    let third = (3 * step) / total.max(1);
    base * 0.5f64.powi(third.min(2) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss since the previous row (the probe loss at step 0).
    pub batch_loss: f64,
    pub probe_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The best model by probe loss.
    pub model: KanoModel,
    pub log: Vec<LossRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    pub dataset_hash: String,
}

/// Mean squared grid error over `data`, in chunks of `batch`.
pub fn dataset_loss(model: &KanoModel, data: &[TrainingSample], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch.max(1)) {
        let inputs: Vec<_> = chunk.iter().map(TrainingSample::input).collect();
        let out = kano_forward(model, &inputs, None)?;
        for (p, t) in out.data().iter().zip(chunk.iter().flat_map(|s| &s.target)) {
            sum += (p - t) * (p - t);
        }
        count += out.len();
    }
    Ok(sum / count as f64)
}

fn dump_batch(cfg: &ExperimentConfig, step: usize, batch: &[&TrainingSample]) -> Option<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).ok()?;
    let path = dir.join(format!("nonfinite_step{step}.csv"));
    let mut csv = Csv::new(cfg, &["t", "extra"]);
    for s in batch {
        let extra: Vec<String> = s.extra.iter().map(|v| v.to_string()).collect();
        csv.row_strings(&[s.t.to_string(), extra.join(" ")]);
    }
    fs::write(&path, csv.finish()).ok()?;
    Some(path)
}

/// Trains on `data` with RMSProp on the grid MSE.
pub fn train_on(cfg: &ExperimentConfig, data: &[TrainingSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(KanoError::config("dataset smaller than one batch"));
    }
    let mut model = KanoModel::new(cfg.model_spec()?, cfg.seed)?;
    let probe = &data[..cfg.probe.min(data.len())];
    let total = cfg.total_steps();
    let mut opt = RmsProp::new(cfg.rms_decay, cfg.rms_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len() / cfg.batch;
    let initial_loss = dataset_loss(&model, probe, cfg.batch)?;
    let mut log = vec![LossRow {
        step: 0,
        epoch: 0,
        lr: cfg.lr,
        batch_loss: initial_loss,
        probe_loss: initial_loss,
    }];
    let mut best = (initial_loss, 0usize, snapshot(&model));
    let mut window = (0.0, 0usize);
    for step in 0..total {
        let slot = step % per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let batch: Vec<&TrainingSample> = order[slot * cfg.batch..(slot + 1) * cfg.batch]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let inputs: Vec<_> = batch.iter().map(|s| s.input()).collect();
        let target: Vec<f64> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
        let tape = Tape::new();
        let loss = kano_forward(&model, &inputs, Some(&tape))?.mse(&target)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(KanoError::NonFiniteLoss {
                step,
                dump: dump_batch(cfg, step, &batch),
            });
        }
        let grads = tape.backward(&loss)?;
        let g: Vec<Option<Vec<f64>>> = model
            .params()
            .iter()
            .map(|p| grads.param(p).map(<[f64]>::to_vec))
            .collect();
        drop(grads);
        let lr = learning_rate(cfg.lr, step, total);
        let mut params: Vec<&mut Vec<f64>> = model.params_mut().into_iter().map(|p| &mut p.data).collect();
        opt.step(&mut params, &g, lr);
        window.0 += value;
        window.1 += 1;
        let done = step + 1;
        if done % cfg.log_every == 0 || done == total {
            let probe_loss = dataset_loss(&model, probe, cfg.batch)?;
            if !probe_loss.is_finite() {
                return Err(KanoError::NonFiniteLoss {
                    step,
                    dump: dump_batch(cfg, step, &batch),
                });
            }
            log.push(LossRow {
                step: done,
                epoch: step / per_epoch,
                lr,
                batch_loss: window.0 / window.1 as f64,
                probe_loss,
            });
            window = (0.0, 0);
            if probe_loss < best.0 {
                best = (probe_loss, done, snapshot(&model));
            }
        }
    }
    let final_loss = log.last().map_or(initial_loss, |r| r.probe_loss);
    restore(&mut model, &best.2);
    Ok(TrainOutcome {
        model,
        log,
        initial_loss,
        final_loss,
        best_loss: best.0,
        best_step: best.1,
        dataset_hash: dataset_hash(data),
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = generate_dataset(cfg)?;
    train_on(cfg, &data)
}

fn snapshot(model: &KanoModel) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.data.clone()).collect()
}

fn restore(model: &mut KanoModel, data: &[Vec<f64>]) {
    for (p, d) in model.params_mut().into_iter().zip(data) {
        p.data.clone_from(d);
    }
}

/// What `u` is evaluated from.
#[derive(Clone, Copy, Debug)]
pub enum Subject<'a> {
    Model(&'a KanoModel),
    Oracle(&'a Benchmark),
}

impl Subject<'_> {
    fn with_surface<T>(&self, fold: bool, f: impl FnOnce(&dyn Surface) -> T) -> T {
        match *self {
            Subject::Model(m) => f(&ModelSurface::new(m, fold)),
            Subject::Oracle(b) => f(b),
        }
    }
}

/// The evaluation SDE. On the LQ benchmark paths stop at the first exit from
/// the unit cube shrunk by `margin`, so every stencil stays on the grid.
pub fn evaluation_sde(cfg: &ExperimentConfig, bench: &Benchmark, margin: f64) -> Result<SdeSpec> {
    let spec = bench.sde(cfg.eval_dt)?;
    Ok(if bench.is_periodic() {
        spec
    } else {
        spec.with_domain(Arc::new(move |x: &[f64]| x.iter().all(|v| *v > margin && *v < 1.0 - margin)))
    })
}

pub fn default_x0(cfg: &ExperimentConfig, bench: &Benchmark) -> Vec<f64> {
    if !cfg.x0.is_empty() {
        cfg.x0.clone()
    } else if bench.is_periodic() {
        vec![0.0; cfg.d]
    } else {
        vec![0.5; cfg.d]
    }
}

/// Relative L² error accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RelErr {
    pub diff: f64,
    pub norm: f64,
}

impl RelErr {
    pub fn push(&mut self, pred: &[f64], exact: &[f64]) {
        for (p, e) in pred.iter().zip(exact) {
            self.diff += (p - e) * (p - e);
            self.norm += e * e;
        }
    }

    pub fn merge(&mut self, other: RelErr) {
        self.diff += other.diff;
        self.norm += other.norm;
    }

    pub fn value(&self) -> f64 {
        if self.norm == 0.0 {
            self.diff.sqrt()
        } else {
            (self.diff / self.norm).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub paths: usize,
    pub points: usize,
    pub u: f64,
    pub z: f64,
    pub upsilon: f64,
    /// `u` error restricted to `t ≤ near_zero · T`.
    pub u_near_zero: f64,
    /// Mean over paths of the mean `|r_n|` with the exact generator.
    pub residual: f64,
}

/// Per-path table: `n, t, X, Y, Z, diag Υ, A` predicted and exact plus the
/// residual.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTable {
    pub seed: u64,
    pub rows: Vec<Vec<f64>>,
}

pub fn path_columns(d: usize) -> Vec<String> {
    let mut cols = vec!["n".to_string(), "t".into()];
    let ix = |p: &'static str| (1..=d).map(move |i| format!("{p}{i}"));
    cols.extend(ix("X"));
    cols.push("Y_pred".into());
    cols.push("Y_true".into());
    cols.extend(ix("Z_pred"));
    cols.extend(ix("Z_true"));
    cols.extend(ix("Upsilon_diag_pred"));
    cols.extend(ix("Upsilon_diag_true"));
    cols.extend(ix("A_pred"));
    cols.push("residual".into());
    cols
}

fn stencil_margin(cfg: &ExperimentConfig) -> Result<f64> {
    Ok(2.0 * cfg.scheme()?.step())
}

pub fn evaluation_paths(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<(SdeSpec, Vec<PathBundle>)> {
    let spec = evaluation_sde(cfg, bench, stencil_margin(cfg)?)?;
    let paths = simulate_paths(&spec, &default_x0(cfg, bench), cfg.path_seed, cfg.eval_paths)?;
    Ok((spec, paths))
}

/// Full readout along `eval_paths` paths: `u`, `∇u`, `D²u` errors against the
/// closed form and per-path tables.
pub fn evaluate_along_paths(cfg: &ExperimentConfig, subject: Subject) -> Result<(EvalReport, Vec<PathTable>)> {
    cfg.validate()?;
    let bench = cfg.benchmark()?;
    let (spec, paths) = evaluation_paths(cfg, &bench)?;
    let scheme = cfg.scheme()?;
    let d = cfg.d;
    let cut = cfg.near_zero * cfg.horizon;
    let gen = |t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]| bench.generator(t, x, y, z, u);
    let per_path: Vec<Result<_>> = paths
        .par_iter()
        .map(|path| {
            let tup = subject.with_surface(bench.is_periodic(), |u| adapt(u, scheme, path, &spec))?;
            let res = bsde_residual(&tup, path, &spec, &gen, &|x| bench.terminal(x))?;
            let (mut eu, mut ez, mut eh, mut e0) = Default::default();
            let mut rows = Vec::with_capacity(tup.len());
            for n in 0..tup.len() {
                let (t, x) = (tup.times[n], path.state(n));
                let exact = bench.solution(t, x)?;
                RelErr::push(&mut eu, &[tup.y[n]], &[exact.u]);
                RelErr::push(&mut ez, tup.z_at(n), &exact.grad);
                RelErr::push(&mut eh, tup.upsilon_at(n), &exact.hess);
                if t <= cut {
                    RelErr::push(&mut e0, &[tup.y[n]], &[exact.u]);
                }
                let diag = |h: &[f64]| (0..d).map(|i| h[i * d + i]).collect::<Vec<_>>();
                let mut row = vec![n as f64, t];
                row.extend_from_slice(x);
                row.push(tup.y[n]);
                row.push(exact.u);
                row.extend_from_slice(tup.z_at(n));
                row.extend_from_slice(&exact.grad);
                row.extend(diag(tup.upsilon_at(n)));
                row.extend(diag(&exact.hess));
                row.extend_from_slice(tup.a_at(n));
                row.push(res.per_step.get(n).copied().unwrap_or(f64::NAN));
                rows.push(row);
            }
            let mean_res = res.summed / res.per_step.len().max(1) as f64;
            Ok(([eu, ez, eh, e0], mean_res, PathTable { seed: path.seed, rows }))
        })
        .collect();
    let mut acc = [RelErr::default(); 4];
    let mut residual = 0.0;
    let mut tables = Vec::with_capacity(paths.len());
    for r in per_path {
        let (errs, res, table) = r?;
        for (a, e) in acc.iter_mut().zip(errs) {
            a.merge(e);
        }
        residual += res;
        tables.push(table);
    }
    let report = EvalReport {
        paths: paths.len(),
        points: tables.iter().map(|t| t.rows.len()).sum(),
        u: acc[0].value(),
        z: acc[1].value(),
        upsilon: acc[2].value(),
        u_near_zero: acc[3].value(),
        residual: residual / paths.len().max(1) as f64,
    };
    Ok((report, tables))
}

/// Value-only comparison along the evaluation paths: `(u error, u error near
/// t = 0)`. One forward pass per path point.
pub fn path_u_errors(cfg: &ExperimentConfig, subject: Subject) -> Result<(f64, f64)> {
    cfg.validate()?;
    let bench = cfg.benchmark()?;
    let (_, paths) = evaluation_paths(cfg, &bench)?;
    let cut = cfg.near_zero * cfg.horizon;
    let per_path: Vec<Result<(RelErr, RelErr)>> = paths
        .par_iter()
        .map(|path| {
            subject.with_surface(bench.is_periodic(), |u| {
                let (mut all, mut early) = (RelErr::default(), RelErr::default());
                for n in 0..=path.last_inside() {
                    let (t, x) = (path.times[n], path.state(n));
                    let (p, e) = (u.value(t, x)?, bench.value(t, x)?);
                    all.push(&[p], &[e]);
                    if t <= cut {
                        early.push(&[p], &[e]);
                    }
                }
                Ok((all, early))
            })
        })
        .collect();
    let (mut all, mut early) = (RelErr::default(), RelErr::default());
    for r in per_path {
        let (a, e) = r?;
        all.merge(a);
        early.merge(e);
    }
    Ok((all.value(), early.value()))
}

/// CSV text with the reproducibility header.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(cfg: &ExperimentConfig, columns: &[&str]) -> Self {
        Self::with_header(&cfg.hash(), cfg.seed, columns)
    }

    pub fn with_header(hash: &str, seed: u64, columns: &[&str]) -> Self {
        Csv {
            text: format!("# config_hash={hash}\n# seed={seed}\n{}\n", columns.join(",")),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.row_strings(&cells);
    }

    pub fn row_strings(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| KanoError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| KanoError::io(path, e))
}

/// `run.manifest` for `command`: config hash, seed, versions and any extra
/// `key value` lines.
pub fn write_run_manifest(cfg: &ExperimentConfig, command: &str, extra: &[(&str, String)]) -> Result<PathBuf> {
    let mut text = format!(
        "command {command}\nconfig_hash {}\nseed {}\nkano_core {}\ncheckpoint_format kano-checkpoint-v1\n",
        cfg.hash(),
        cfg.seed,
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in extra {
        text.push_str(&format!("{k} {v}\n"));
    }
    let path = cfg.out_dir().join(format!("{command}.manifest"));
    write_file(&path, &text)?;
    write_file(&cfg.out_dir().join("config.toml"), &cfg.to_toml())?;
    Ok(path)
}

/// Trains and writes `loss.csv`, the checkpoint and the run manifest.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let out = train(cfg)?;
    let dir = cfg.out_dir();
    let mut csv = Csv::new(cfg, &["step", "epoch", "lr", "batch_loss", "probe_loss"]);
    for r in &out.log {
        csv.row(&[r.step as f64, r.epoch as f64, r.lr, r.batch_loss, r.probe_loss]);
    }
    write_file(&dir.join("loss.csv"), &csv.finish())?;
    fs::create_dir_all(&dir).map_err(|e| KanoError::io(&dir, e))?;
    save_checkpoint(&out.model, &cfg.checkpoint_manifest().with_extension(""))?;
    write_run_manifest(
        cfg,
        "train",
        &[
            ("dataset_hash", out.dataset_hash.clone()),
            ("steps", cfg.total_steps().to_string()),
            ("initial_loss", out.initial_loss.to_string()),
            ("final_loss", out.final_loss.to_string()),
            ("best_step", out.best_step.to_string()),
        ],
    )?;
    Ok(out)
}

/// Evaluates the configured subject and writes `path_<k>.csv`, `report.csv`
/// and the run manifest.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let bench = cfg.benchmark()?;
    let model;
    let subject = match cfg.eval_model.as_str() {
        "oracle" => Subject::Oracle(&bench),
        "untrained" => {
            model = KanoModel::new(cfg.model_spec()?, cfg.seed)?;
            Subject::Model(&model)
        }
        _ => {
            model = load_checkpoint(&cfg.checkpoint_manifest())?;
            if model.spec().d != cfg.d {
                return Err(KanoError::config("checkpoint dimension differs from the config"));
            }
            Subject::Model(&model)
        }
    };
    let (report, tables) = evaluate_along_paths(cfg, subject)?;
    let dir = cfg.out_dir();
    let cols = path_columns(cfg.d);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    for (k, table) in tables.iter().enumerate() {
        let mut csv = Csv::new(cfg, &cols);
        for row in &table.rows {
            csv.row(row);
        }
        write_file(&dir.join(format!("path_{k}.csv")), &csv.finish())?;
    }
    let mut csv = Csv::new(cfg, &["paths", "points", "u_rel", "z_rel", "upsilon_rel", "u_rel_near_zero", "residual"]);
    csv.row(&[
        report.paths as f64,
        report.points as f64,
        report.u,
        report.z,
        report.upsilon,
        report.u_near_zero,
        report.residual,
    ]);
    write_file(&dir.join("report.csv"), &csv.finish())?;
    write_run_manifest(cfg, "evaluate", &[("eval_model", cfg.eval_model.clone())])?;
    Ok(report)
}

/// Simulates `sim_paths` paths of the benchmark SDE into `paths.csv`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBundle>> {
    cfg.validate()?;
    let bench = cfg.benchmark()?;
    let mut spec = bench.sde(cfg.sim_dt)?;
    if cfg.exit_domain {
        spec = spec.with_domain(unit_cube());
    }
    let x0 = if cfg.exit_domain && cfg.x0.is_empty() { vec![0.5; cfg.d] } else { default_x0(cfg, &bench) };
    let paths = simulate_paths(&spec, &x0, cfg.seed, cfg.sim_paths)?;
    let mut cols = vec!["path_id".to_string(), "n".into(), "t".into()];
    cols.extend((1..=cfg.d).map(|i| format!("X{i}")));
    cols.push("exit_flag".into());
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut csv = Csv::new(cfg, &cols);
    for (k, p) in paths.iter().enumerate() {
        for n in 0..=p.steps() {
            let mut row = vec![k as f64, n as f64, p.times[n]];
            row.extend_from_slice(p.state(n));
            row.push(if p.exit.is_some_and(|e| n >= e) { 1.0 } else { 0.0 });
            csv.row(&row);
        }
    }
    write_file(&cfg.out_dir().join("paths.csv"), &csv.finish())?;
    write_run_manifest(cfg, "simulate", &[])?;
    Ok(paths)
}

/// The configured semilinear instance.
pub fn picard_problem(cfg: &ExperimentConfig) -> SemilinearProblem {
    let (c, a, b) = (cfg.picard_c, cfg.picard_a, cfg.picard_b);
    match cfg.picard_domain.as_str() {
        "ball" => {
            let mut p = SemilinearProblem::poisson(
                Domain::Ball {
                    radius: cfg.picard_radius,
                    nodes_per_axis: cfg.picard_nodes,
                },
                Arc::new(move |_: &[f64]| -a),
                Arc::new(move |_: &[f64]| b),
                cfg.picard_delta,
            );
            p.taylor = vec![2.0 * c];
            p
        }
        _ => SemilinearProblem::toy(cfg.picard_nodes, c, a, b, cfg.picard_delta),
    }
}

/// Runs the fixed-point iteration and writes `picard.csv`.
pub fn run_picard(cfg: &ExperimentConfig) -> Result<PicardOutcome> {
    cfg.validate()?;
    let setup = PicardSetup::new(picard_problem(cfg))?;
    let out = picard_solve(&setup, cfg.picard_eps, cfg.seed)?;
    let mut csv = Csv::new(cfg, &["j", "step_norm", "ratio", "residual"]);
    for r in &out.log {
        csv.row(&[r.j as f64, r.step_norm, r.ratio, r.residual]);
    }
    write_file(&cfg.out_dir().join("picard.csv"), &csv.finish())?;
    write_run_manifest(
        cfg,
        "picard",
        &[
            ("rho", out.rho.to_string()),
            ("iterations", out.iterations.to_string()),
            ("residual", out.residual.to_string()),
        ],
    )?;
    Ok(out)
}

/// Integrates the scalar Riccati equation and writes `riccati.csv`.
pub fn run_riccati(cfg: &ExperimentConfig) -> Result<crate::benchmarks::RiccatiCurve> {
    cfg.validate()?;
    let curve = riccati_solve(cfg.d, cfg.horizon, cfg.riccati_steps)?;
    let mut csv = Csv::new(cfg, &["t", "k", "kdot"]);
    let n = curve.times.len();
    for i in (0..n).step_by(cfg.riccati_stride) {
        csv.row(&[curve.times[i], curve.k[i], curve.kdot[i]]);
    }
    if (n - 1) % cfg.riccati_stride != 0 {
        csv.row(&[curve.times[n - 1], curve.k[n - 1], curve.kdot[n - 1]]);
    }
    write_file(&cfg.out_dir().join("riccati.csv"), &csv.finish())?;
    write_run_manifest(cfg, "riccati", &[("k0", curve.k[0].to_string())])?;
    Ok(curve)
}
