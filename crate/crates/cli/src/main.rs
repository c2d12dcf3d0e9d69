//! `negtune`: calibrate, fine-tune, evaluate, rank and probe from a TOML
//! run configuration. Flags override the matching config keys.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{config_err, ConfigError, RunConfig, ScalingSetting};
use negtune_core::codec::FreezeSpec;
use negtune_core::TiePolicy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "negtune",
    version,
    about = "Fine-tune learned image codecs against MSE, MS-SSIM and VMAF NEG"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration (TOML). Flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, relative to $NEGTUNE_OUTPUT_ROOT (default `runs`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Corpus root holding train/, validation/ and test/.
    #[arg(long, global = true)]
    corpus_root: Option<PathBuf>,
    #[arg(long, global = true)]
    train_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    validation_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    test_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Centre-crop evaluation images to this side.
    #[arg(long, global = true)]
    center_crop: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the scaling factors beta' and gamma' on the validation split.
    Calibrate,
    /// Fine-tune a checkpoint and evaluate the result on the test split.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on the test split.
    Evaluate,
    /// Rank experiment rows per column and accumulate per row.
    Rank(RankArgs),
    /// Sweep hand-crafted attacks over the test split.
    ProbeAttack,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Distortion weights alpha beta gamma; must sum to 1.
    #[arg(long, num_args = 3, value_names = ["ALPHA", "BETA", "GAMMA"], allow_negative_numbers = true)]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    lambda: Option<f64>,
    /// `calibrate`, a scaling JSON path, or `BETA_PRIME,GAMMA_PRIME`.
    #[arg(long)]
    scaling: Option<ScalingSetting>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    validation_crop: Option<usize>,
    /// `none`, `encoder`, `decoder` or `block:N`.
    #[arg(long)]
    freeze: Option<String>,
    /// Search lambda so the mean test bpp matches the target.
    #[arg(long)]
    match_rate: bool,
    /// Defaults to the starting checkpoint's mean test bpp.
    #[arg(long)]
    target_bpp: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    rate_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    max_expansions: Option<usize>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Grid CSVs (`label,col,...`) or per-image metric reports.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    tie_policy: Option<TiePolicy>,
    /// Column where smaller is better; repeatable.
    #[arg(long)]
    lower_better: Vec<String>,
    /// Accumulated ranks to reproduce, comma separated; runs the tie sweep.
    #[arg(long, value_delimiter = ',')]
    expect: Option<Vec<f64>>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: Cli) -> anyhow::Result<(RunConfig, Command)> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, c.seed);
    if c.output_dir.is_some() {
        cfg.output_dir = c.output_dir;
    }
    let k = &mut cfg.corpus;
    for (slot, v) in [
        (&mut k.root, c.corpus_root),
        (&mut k.train, c.train_dir),
        (&mut k.validation, c.validation_dir),
        (&mut k.test, c.test_dir),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    if c.checkpoint.is_some() {
        cfg.codec.checkpoint = c.checkpoint;
    }
    if c.center_crop.is_some() {
        cfg.eval.center_crop = c.center_crop;
    }

    match &cli.command {
        Command::Finetune(a) => {
            if let Some(w) = &a.weights {
                cfg.loss.weights = [w[0], w[1], w[2]];
            }
            if a.lambda.is_some() {
                cfg.loss.lambda = a.lambda;
            }
            set(&mut cfg.loss.scaling, a.scaling.clone());
            let t = &mut cfg.train;
            set(&mut t.epochs, a.epochs);
            set(&mut t.learning_rate, a.learning_rate);
            set(&mut t.crop, a.crop);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.clip_norm, a.clip_norm);
            if a.validation_crop.is_some() {
                t.validation_crop = a.validation_crop;
            }
            if let Some(f) = &a.freeze {
                t.freeze = f.parse::<FreezeSpec>().map_err(|e| config_err(e.to_string()))?;
            }
            let r = &mut cfg.rate_match;
            r.enabled |= a.match_rate;
            if a.target_bpp.is_some() {
                r.target_bpp = a.target_bpp;
            }
            if a.lambda0.is_some() {
                r.lambda0 = a.lambda0;
            }
            set(&mut r.tol, a.rate_tol);
            set(&mut r.max_iter, a.max_iter);
            set(&mut r.max_expansions, a.max_expansions);
        }
        Command::Rank(a) => {
            if !a.inputs.is_empty() {
                cfg.rank.inputs = a.inputs.clone();
            }
            set(&mut cfg.rank.tie_policy, a.tie_policy);
            cfg.rank.lower_better.extend(a.lower_better.iter().cloned());
            if a.expect.is_some() {
                cfg.rank.expect = a.expect.clone();
            }
        }
        Command::Calibrate | Command::Evaluate | Command::ProbeAttack => {}
    }
    Ok((cfg, cli.command))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let (cfg, command) = resolve(cli)?;
    match command {
        Command::Calibrate => commands::calibrate(cfg),
        Command::Finetune(_) => commands::finetune_cmd(cfg),
        Command::Evaluate => commands::evaluate_cmd(cfg),
        Command::Rank(_) => commands::rank(cfg),
        Command::ProbeAttack => commands::probe(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
