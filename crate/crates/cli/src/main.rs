use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kano_core::experiment::{run_evaluate, run_picard, run_riccati, run_simulate, run_train, ExperimentConfig};

#[derive(Parser)]
#[command(name = "kano", version, about = "Train and evaluate Kolmogorov-Arnold neural operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to closed-form grid targets; writes loss.csv and model.{manifest,bin}
    Train(Common),
    /// Read a model out along simulated paths; writes path_<k>.csv and report.csv
    Evaluate(Common),
    /// Simulate the benchmark SDE; writes paths.csv
    Simulate(Common),
    /// Fixed-point iteration on the semilinear toy problem; writes picard.csv
    Picard(Common),
    /// Integrate the LQ Riccati equation; writes riccati.csv
    Riccati(Common),
    /// Print the effective configuration as TOML
    Config(Common),
}

/// Declares one optional `--kebab-case` flag per config key.
macro_rules! overrides {
    ($($key:ident),* $(,)?) => {
        #[derive(Args, Default)]
        struct Overrides {
            $(
                #[arg(long, value_name = "VALUE")]
                $key: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key).to_string(), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

overrides!(
    benchmark, d, horizon, s, samples, batch, steps, epochs, seed, out_dir, lr, rms_decay, rms_eps, probe,
    log_every, blocks, width, modes, order, alpha, wavelet, eval_model, checkpoint, eval_paths, eval_dt,
    path_seed, scheme, fd_step, x0, near_zero, sim_paths, sim_dt, exit_domain, picard_domain, picard_nodes,
    picard_radius, picard_delta, picard_eps, picard_c, picard_a, picard_b, riccati_steps, riccati_stride,
);

#[derive(Args)]
struct Common {
    /// TOML file with `key = value` lines; missing keys take their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Generic override, repeatable: `--set key=value`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects key=value, got {s:?}"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(self.overrides.pairs());
        Ok(base.with_overrides(&pairs)?)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let out = run_train(&cfg)?;
            println!(
                "trained {} steps: probe loss {} -> {} (best {} at step {}); artifacts in {}",
                cfg.total_steps(),
                out.initial_loss,
                out.final_loss,
                out.best_loss,
                out.best_step,
                cfg.out_dir
            );
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            let r = run_evaluate(&cfg)?;
            println!(
                "{} paths, {} points: u {} Z {} Upsilon {} u(t<={}T) {} residual {}",
                r.paths, r.points, r.u, r.z, r.upsilon, cfg.near_zero, r.u_near_zero, r.residual
            );
        }
        Command::Simulate(c) => {
            let cfg = c.resolve()?;
            let paths = run_simulate(&cfg)?;
            let exited = paths.iter().filter(|p| p.exit.is_some()).count();
            println!("{} paths simulated, {exited} exited; {}/paths.csv", paths.len(), cfg.out_dir);
        }
        Command::Picard(c) => {
            let cfg = c.resolve()?;
            let out = run_picard(&cfg)?;
            println!("rho {} J {} residual {}; {}/picard.csv", out.rho, out.iterations, out.residual, cfg.out_dir);
        }
        Command::Riccati(c) => {
            let cfg = c.resolve()?;
            let curve = run_riccati(&cfg)?;
            println!("k(0) = {} k(T) = {}; {}/riccati.csv", curve.k[0], curve.k[curve.k.len() - 1], cfg.out_dir);
        }
        Command::Config(c) => print!("{}", c.resolve()?.to_toml()),
    }
    Ok(())
}
