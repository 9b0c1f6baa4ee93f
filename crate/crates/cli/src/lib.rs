//! Experiment pipeline behind the `nle` binary.

pub mod config;
pub mod dataset;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod store;
pub mod training;

use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::denoise::DenoiseSource;
use crate::error::{CliError, Result};
use crate::eval::EvalSource;
use crate::training::TrainRequest;

#[derive(Debug, Parser)]
#[command(
    name = "nle",
    version,
    about = "Noise-level-aware PET denoising experiments"
)]
pub struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location (directory, or file for single-volume denoise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate phantoms and write the paired dataset.
    Simulate,
    /// Extract training patches with noise descriptors.
    Patches {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train a checkpoint on a patch store.
    Train(TrainArgs),
    /// Denoise a volume (or a dataset's test split) with a checkpoint.
    Denoise(DenoiseArgs),
    /// Compute the metrics report and paired statistics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("nle").args(["use_nle", "no_nle"])))]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Condition the attention blocks on the noise embedding (default).
    #[arg(long)]
    pub use_nle: bool,
    /// Ablation: train without the noise embedding.
    #[arg(long)]
    pub no_nle: bool,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    pub stop_at: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "dataset"])))]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["pairs", "from_csv", "dataset"])))]
pub struct EvalArgs {
    /// Pairing file listing input, a, b and reference volumes per image.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Import precomputed metric rows instead of volumes.
    #[arg(long)]
    pub from_csv: Option<PathBuf>,
    /// Pair a dataset's test split with two prediction directories.
    #[arg(long, requires_all = ["pred_a", "pred_b"])]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub pred_a: Option<PathBuf>,
    #[arg(long)]
    pub pred_b: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| CliError::Config("no output location; pass --out or set \"out\"".into()))
}

/// Runs one subcommand, inside a dedicated thread pool when `--threads` is given.
pub fn run(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(CliError::Config("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cli)),
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate => {
            let out = out_dir(&cfg)?;
            let m = dataset::cmd_simulate(&cfg, out)?;
            println!("wrote {} phantoms to {}", m.phantoms.len(), out.display());
        }
        Command::Patches { dataset } => {
            let out = out_dir(&cfg)?;
            let s = store::cmd_patches(dataset, &cfg, out)?;
            let bins: Vec<String> = s
                .manifest
                .bin_counts
                .iter()
                .map(|b| format!("{:?}={}", b.bin, b.count))
                .collect();
            println!(
                "{} patches ({}), {} excluded, written to {}",
                s.manifest.total,
                bins.join(" "),
                s.manifest.excluded.len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let out = out_dir(&cfg)?;
            let req = TrainRequest {
                store: &a.store,
                out,
                use_nle: !a.no_nle,
                resume: a.resume.as_deref(),
                stop_at: a.stop_at,
            };
            let ck = training::cmd_train(&cfg, &req)?;
            println!(
                "checkpoint at step {} written to {}",
                ck.iteration,
                out.display()
            );
        }
        Command::Denoise(a) => {
            let out = out_dir(&cfg)?;
            let source = match (&a.input, &a.dataset) {
                (Some(p), _) => DenoiseSource::Volume(p),
                (None, Some(d)) => DenoiseSource::Dataset(d),
                (None, None) => unreachable!("clap requires a source"),
            };
            let written = denoise::cmd_denoise(&cfg, &a.checkpoint, source, a.stride, out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            let source = if let Some(p) = &a.pairs {
                EvalSource::Pairing(p)
            } else if let Some(p) = &a.from_csv {
                EvalSource::Csv(p)
            } else {
                EvalSource::Dataset {
                    dataset: a.dataset.as_deref().expect("clap requires a source"),
                    pred_a: a.pred_a.as_deref().expect("required with --dataset"),
                    pred_b: a.pred_b.as_deref().expect("required with --dataset"),
                }
            };
            let rep = eval::cmd_eval(&cfg, source, cfg.out.as_deref())?;
            print!("{}", rep.to_csv());
            for (name, d) in [("PSNR", &rep.psnr), ("SSIM", &rep.ssim)] {
                match d.as_ref().and_then(|d| d.test.map(|t| (t, d.ci95))) {
                    Some((t, ci)) => {
                        print!(
                            "{name} b-a: mean {:.4}, t {:.4}, df {}, p {:.3e}",
                            t.mean_diff, t.t_stat, t.df, t.p_two_sided
                        );
                        if let Some((lo, hi)) = ci {
                            print!(", 95% CI [{lo:.4}, {hi:.4}]");
                        }
                        println!();
                    }
                    None => println!("{name} b-a: paired test undefined"),
                }
            }
        }
    }
    Ok(())
}
