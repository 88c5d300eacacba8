use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vlpl_cli::{exit_code, ConfigError, ExperimentConfig, SynthOptions};
use vlpl_core::{LossVariant, SyntheticSpec};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Sweep worker count when `--workers` is not given.
const WORKERS_ENV: &str = "VLPL_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "vlpl", version, about = "Single-positive multi-label learning with vision-language pseudo-labels")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write planted-prototype embeddings and ground truth.
    Synth(SynthArgs),
    /// Hold out a validation split and reduce the rest to one positive per row.
    Simulate {
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Assign pseudo-labels to the training rows.
    Pseudolabel {
        #[command(flatten)]
        pseudo: PseudoArgs,
        /// Include per-label probabilities in the dump.
        #[arg(long)]
        probs: bool,
    },
    /// Train a probe and write checkpoint, history and report.
    Train {
        #[command(flatten)]
        pseudo: PseudoArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint.
    Eval {
        /// Defaults to model.vlmdl in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-class AP as CSV.
        #[arg(long)]
        per_class: bool,
    },
    /// Run the configured (tau, theta, delta, smoothing) grid.
    Sweep {
        #[arg(long)]
        repeats: Option<usize>,
        /// Concurrent cells; falls back to VLPL_WORKERS, then one per core.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    labels: usize,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 2.5)]
    avg_positives: f64,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Additional rows written as a test split.
    #[arg(long, default_value_t = 0)]
    test_samples: usize,
    /// Exactly one positive per sample.
    #[arg(long)]
    exclusive: bool,
}

#[derive(Args, Debug)]
struct PseudoArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Pseudo-negative percentage; enables negatives.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    loss: Option<LossVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Hard pseudo-label targets.
    #[arg(long)]
    no_smoothing: bool,
}

impl PseudoArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(t) = self.tau {
            cfg.pseudo.tau = t;
        }
        if let Some(t) = self.theta {
            cfg.pseudo.theta = t;
        }
        if let Some(d) = self.delta {
            cfg.pseudo.delta_pct = d;
            cfg.pseudo.use_negatives = true;
        }
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.loss {
            cfg.loss.variant = v;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if self.hidden.is_some() {
            cfg.train.hidden = self.hidden;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if self.no_smoothing {
            cfg.loss.smoothing_enabled = false;
        }
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ConfigError(format!("{WORKERS_ENV}={v:?} is not a count")).into()),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    match &cli.command {
        Command::Simulate { fraction: Some(f) } => cfg.dataset.fraction = *f,
        Command::Pseudolabel { pseudo, .. } => pseudo.apply(&mut cfg),
        Command::Train { pseudo, train } => {
            pseudo.apply(&mut cfg);
            train.apply(&mut cfg);
        }
        Command::Sweep { repeats: Some(r), .. } => {
            cfg.sweep.get_or_insert_with(Default::default).repeats = *r;
        }
        _ => {}
    }
    cfg.validate()?;
    if cli.dump_config {
        out!("{}", cfg.to_toml().trim_end());
        return Ok(());
    }

    match cli.command {
        Command::Synth(a) => {
            let opts = SynthOptions {
                spec: SyntheticSpec {
                    n_samples: a.samples,
                    n_labels: a.labels,
                    dim: a.dim,
                    avg_positives: a.avg_positives,
                    noise_sigma: a.noise,
                    seed: cli.seed.unwrap_or(0),
                    exclusive: a.exclusive,
                },
                test_samples: a.test_samples,
            };
            let out = vlpl_cli::cmd_synth(&opts, &cfg.paths.out_dir)?;
            out!("mean positives per sample: {:.3}", out.avg_positives);
            for f in out.files {
                out!("wrote {}", f.display());
            }
        }
        Command::Simulate { .. } => {
            let out = vlpl_cli::cmd_simulate(&cfg)?;
            out!("train rows: {}, validation rows: {}", out.n_train, out.n_val);
            for f in out.files {
                out!("wrote {}", f.display());
            }
        }
        Command::Pseudolabel { probs, .. } => {
            let out = vlpl_cli::cmd_pseudolabel(&cfg, probs)?;
            let q = out.quality;
            out!("pseudo positives: {}", q.n_pseudo_positive);
            out!("pseudo negatives: {}", q.n_pseudo_negative);
            out!("pseudo-positive precision: {:.4}", q.precision);
            out!("pseudo-positive recall: {:.4}", q.recall);
            out!("pseudo-negative false rate: {:.4}", q.negative_false_rate);
            out!("wrote {}", out.file.display());
        }
        Command::Train { .. } => {
            let r = vlpl_cli::cmd_train(&cfg)?;
            out!("loss: {}", r.loss.name());
            out!("best epoch: {}", r.best_epoch);
            out!("validation mAP: {:.2}", r.val_map);
            if r.test.is_some() {
                out!("test mAP: {:.2}", r.map);
            }
        }
        Command::Eval { checkpoint, per_class } => {
            let out = vlpl_cli::cmd_eval(&cfg, checkpoint.as_deref(), per_class)?;
            out!("{} mAP: {:.2}", out.split, out.report.map);
            for f in out.files {
                out!("wrote {}", f.display());
            }
        }
        Command::Sweep { workers: w, .. } => {
            let r = vlpl_cli::cmd_sweep(&cfg, workers(w)?)?;
            out!(
                "cells: {} computed, {} reused, {} ok, {} failed",
                r.computed, r.reused, r.succeeded, r.failed
            );
            let b = &r.best;
            out!(
                "best: tau={} theta={} delta={} smoothing={} val mAP {:.2} test mAP {:.2}",
                b.tau, b.theta, b.delta, b.smoothing, b.median_val_map, b.median_test_map
            );
            for f in r.files {
                out!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
