use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use specblock::harness::run::{self, DecodeLine};
use specblock::harness::{Checkpoint, Preset, Report, RunConfig, ServeSummary};
use specblock::adapt::ServeRecord;

#[derive(Parser)]
#[command(name = "specblock", version, about = "Block-parallel speculative decoding at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete configuration file.
    DefaultConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the target model on the synthetic corpus.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss records, one JSON object per line.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the drafter against a trained target.
    TrainDrafter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Speculative decoding over held-out prompts.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        drafter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured prompt count.
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Stream queries through the adaptation loop and write the event log.
    ServeSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        drafter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Serve with the drafter frozen.
        #[arg(long)]
        frozen: bool,
    },
    /// Summarize decode metrics and serving event logs as tables.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::DefaultConfig { preset, out } => {
            let preset = match preset {
                PresetArg::Full => Preset::Full,
                PresetArg::Desk => Preset::Desk,
            };
            emit(out.as_deref(), &RunConfig::preset(preset).to_toml()?)?;
        }
        Command::TrainTarget { config, out, log } => {
            let cfg = load_config(&config)?;
            let (target, records) = run::fit_target(&cfg, |_| {})?;
            let last = records.last().map_or(f64::NAN, |r| r.loss);
            Checkpoint::from_target(&target, cfg.seeds.target_init, records.len() as u64)?.save(&out)?;
            if let Some(log) = log {
                run::write_jsonl(log, &records)?;
            }
            eprintln!("target: {} steps, final loss {last:.4}, saved {}", records.len(), out.display());
        }
        Command::TrainDrafter { config, target, out, log } => {
            let cfg = load_config(&config)?;
            let target = load_checkpoint(&target)?.to_target()?;
            if target.config != cfg.target {
                bail!("target checkpoint does not match the configured target");
            }
            let rollouts = run::make_rollouts(&cfg, &target)?;
            let (drafter, records) = run::fit_drafter(&cfg, &target, &rollouts, |_| {})?;
            Checkpoint::from_drafter(&drafter, cfg.train.train_blocks, cfg.seeds.drafter_init, records.len() as u64)?
                .save(&out)?;
            if let Some(log) = log {
                run::write_jsonl(log, &records)?;
            }
            let last = records.last().map_or(f64::NAN, |r| r.total);
            eprintln!("drafter: {} steps, final loss {last:.4}, saved {}", records.len(), out.display());
        }
        Command::Decode { config, target, drafter, out, prompts } => {
            let cfg = load_config(&config)?;
            let target = load_checkpoint(&target)?.to_target()?;
            let drafter = load_checkpoint(&drafter)?.to_drafter()?;
            let n = prompts.unwrap_or(cfg.data.eval_prompts);
            let ps = run::eval_prompts(&cfg, cfg.data.eval_source, n)?;
            let result = run::decode_prompts(&target, &drafter, &cfg.decode, &ps, cfg.data.max_new, cfg.seeds.decode)?;
            run::write_jsonl(&out, result.lines())?;
            eprintln!("decode: {n} prompts, tau {:.3}", result.metrics.tau());
        }
        Command::ServeSim { config, target, drafter, out, frozen } => {
            let cfg = load_config(&config)?;
            let target = load_checkpoint(&target)?.to_target()?;
            let drafter = load_checkpoint(&drafter)?.to_drafter()?;
            let outcome = run::serve(&cfg, &target, &drafter, !frozen)?;
            run::write_jsonl(&out, &outcome.records)?;
            let s = ServeSummary::new(&outcome.records, cfg.corpus.shift_at);
            eprintln!("serve-sim: tau pre {:.3}, post {:.3}", s.tau_pre, s.tau_post);
        }
        Command::Report { config, metrics, events, out } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            if metrics.is_none() && events.is_none() {
                bail!("nothing to report: pass --metrics and/or --events");
            }
            let mut text = String::new();
            if let Some(p) = metrics {
                let lines: Vec<DecodeLine> = run::read_jsonl(&p).with_context(|| format!("reading {}", p.display()))?;
                let Some(DecodeLine::Summary { metrics, .. }) = lines.into_iter().last() else {
                    bail!("{} has no summary line", p.display());
                };
                text.push_str(&Report::from_metrics(&metrics, &cfg.serve.adapt.costs).to_table());
            }
            if let Some(p) = events {
                let records: Vec<ServeRecord> = run::read_jsonl(&p).with_context(|| format!("reading {}", p.display()))?;
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str(&ServeSummary::new(&records, cfg.corpus.shift_at).to_table());
            }
            emit(out.as_deref(), &text)?;
        }
    }
    Ok(())
}
