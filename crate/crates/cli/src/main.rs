mod attn;
mod bench;
mod config;
mod layout;
mod mask;
mod offload;
mod output;
mod sim;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use output::Report;

/// Exit status for configuration and input errors; assertion failures use 1.
const EXIT_BAD_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "tiled-attn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). The shipped defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Hardware profile for every experiment: a builtin name
    /// (npu_default, v100_like) or a TOML file.
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Worker threads for parallel kernels and host decode.
    #[arg(long, global = true, env = "TILED_ATTN_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Blocked attention against the dense reference on random configs.
    AttnCheck,
    /// Causal block classification, reconstruction and mask memory.
    MaskDemo,
    /// Unified vs two-level tiling on the simulated pipeline.
    PipelineSim,
    /// Tiled vs monolithic allreduce after the attention projection.
    AllreduceSim,
    /// KV-cache placement and decode latency with host offload.
    OffloadPlan,
    /// Fragment ownership and back-to-back compatibility.
    LayoutCheck,
    /// Every experiment, one CSV each.
    Bench,
}

struct Prepared {
    cfg: ExperimentConfig,
    workers: usize,
}

fn prepare(cli: &Cli) -> Result<Prepared> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.profile {
        // Paths on the command line are relative to the working directory.
        let profile = if tiled_attn::HardwareModel::builtin(p).is_some() {
            p.clone()
        } else {
            std::path::absolute(Path::new(p))?.display().to_string()
        };
        cfg.override_profile(&profile)?;
    }
    let workers = match cli.workers {
        Some(0) => anyhow::bail!("worker count must be positive"),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("cannot size the worker pool")?;
            n
        }
        None => rayon::current_num_threads(),
    };
    Ok(Prepared { cfg, workers })
}

fn execute(cmd: Command, p: &Prepared) -> Result<Report> {
    let cfg = &p.cfg;
    match cmd {
        Command::AttnCheck => attn::run(&cfg.attn_check, cfg.seed),
        Command::MaskDemo => mask::run(&cfg.mask_demo),
        Command::PipelineSim => {
            sim::run_pipeline(&cfg.pipeline, &cfg.hardware(&cfg.pipeline.profile)?)
        }
        Command::AllreduceSim => sim::run_allreduce(
            &cfg.allreduce,
            &cfg.hardware(&cfg.allreduce.profile)?,
            cfg.seed,
        ),
        Command::OffloadPlan => offload::run(
            &cfg.offload,
            &cfg.hardware(&cfg.offload.profile)?,
            cfg.seed,
            p.workers,
        ),
        Command::LayoutCheck => layout::run(cfg),
        Command::Bench => bench::run(cfg, p.workers),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = prepare(&cli).and_then(|p| execute(cli.command, &p));
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    };
    for c in report.checks() {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        if c.detail.is_empty() {
            println!("[{tag}] {}", c.name);
        } else {
            println!("[{tag}] {} ({})", c.name, c.detail);
        }
    }
    if let Err(e) = report.write_to(&cli.out) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    for name in report.file_names() {
        println!("wrote {}", cli.out.join(name).display());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
