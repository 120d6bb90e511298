use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bidedpo::commands::{self, CommandError};
use bidedpo::config::RunConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bidedpo", version, about = "Decoupled preference optimization on a toy conditional diffusion model")]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set dpo.steps=400`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RoundArgs {
    /// Round index used to derive stage seeds.
    #[arg(long, default_value_t = 1)]
    round: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the biased base generator.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a preference dataset with a generator checkpoint.
    GenerateData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of records to build.
        #[arg(long)]
        records: Option<usize>,
        /// Draws per retry loop.
        #[arg(long)]
        retries: Option<usize>,
        /// Skip records whose negative cannot be verified as failing.
        #[arg(long)]
        strict_negatives: bool,
        #[command(flatten)]
        round: RoundArgs,
    },
    /// Fine-tune a checkpoint on a dataset.
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preference steps (same as `--set dpo.steps=N`).
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        round: RoundArgs,
    },
    /// Score a checkpoint on the benchmark.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        round: RoundArgs,
    },
    /// Alternate data generation and fine-tuning.
    Iterate {
        /// Base checkpoint; pretrained into `<out_dir>/base` when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Output directory (same as `--set out_dir=PATH`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient geometry of coupled and decoupled losses on constructed cases.
    Diagnose {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::GenerateData {
            records,
            retries,
            strict_negatives,
            ..
        } => {
            if let Some(n) = records {
                overrides.push(format!("pipeline.records={n}"));
            }
            if let Some(k) = retries {
                overrides.push(format!("pipeline.retries={k}"));
            }
            if *strict_negatives {
                overrides.push("pipeline.strict_negatives=true".into());
            }
        }
        Command::Train { steps: Some(n), .. } => overrides.push(format!("dpo.steps={n}")),
        Command::Iterate { rounds, out, .. } => {
            if let Some(r) = rounds {
                overrides.push(format!("rounds={r}"));
            }
            if let Some(o) = out {
                overrides.push(format!("out_dir={}", json_string(o)));
            }
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(CommandError::from)?;
    log::info!("config hash {}", cfg.hash());

    match cli.command {
        Command::Pretrain { out } => {
            let report = commands::cmd_pretrain(&cfg, &out)?;
            println!(
                "pretrained {} steps: shape accuracy {:.3}, checkpoint {}",
                report.steps, report.stats.shape_accuracy, report.checkpoint_hash
            );
        }
        Command::GenerateData {
            checkpoint, out, round, ..
        } => {
            let stats = commands::cmd_generate_data(&cfg, &checkpoint, round.round, &out)?;
            println!("{} records from {} attempts", stats.records, stats.attempts);
        }
        Command::Train {
            checkpoint,
            dataset,
            out,
            round,
            ..
        } => {
            let hash = commands::cmd_train(&cfg, &checkpoint, &dataset, round.round, &out)?;
            println!("checkpoint {hash}");
        }
        Command::Evaluate { checkpoint, out, round } => {
            let r = commands::cmd_evaluate(&cfg, &checkpoint, round.round, &out)?;
            println!(
                "sr {:.3}  mse {:.1}  f1 {:.3}  ssim {:.3}  sg_mse {:.1}  sg_f1 {:.3}  sg_ssim {:.3}  semantic {:.3}",
                r.sr, r.mse, r.f1, r.ssim, r.sg_mse, r.sg_f1, r.sg_ssim, r.semantic_score
            );
        }
        Command::Iterate { base, .. } => {
            let rounds = commands::cmd_iterate(&cfg, base.as_deref())?;
            for r in rounds {
                println!("iter{}: sr {:.3}  sg_mse {:.1}", r.round, r.report.sr, r.report.sg_mse);
            }
        }
        Command::Diagnose { cases, out } => {
            let s = commands::cmd_diagnose(&cfg, cases, &out)?;
            println!(
                "decoupled gradient closer to the text gradient in {}/{} cases ({} degenerate)",
                s.decoupled_wins,
                s.cases.len(),
                s.degenerate
            );
        }
    }
    Ok(())
}

fn json_string(p: &std::path::Path) -> String {
    format!("{:?}", p.to_string_lossy())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("bidedpo failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CommandError>().map_or(1, CommandError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
