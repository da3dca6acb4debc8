use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fedsim_cli::config::ExperimentConfig;
use fedsim_cli::presets::{preset, PRESETS};
use fedsim_cli::runner;

/// Desk-scale federated learning backdoor simulator.
#[derive(Parser)]
#[command(name = "fedsim", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (line-oriented key=value; see README for the key list).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a shipped preset instead of the defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Extra key=value overrides applied after the file/preset.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seeds; replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Total federation rounds override.
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory override.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => bail!("pass either --config or --preset, not both"),
            (Some(path), None) => ExperimentConfig::parse_file(path)
                .with_context(|| format!("reading {}", path.display()))?,
            (None, Some(name)) => {
                preset(name).with_context(|| format!("unknown preset '{name}'; run `fedsim presets`"))?
            }
            (None, None) => ExperimentConfig::default(),
        };
        for assignment in &self.set {
            let (key, value) = assignment
                .split_once('=')
                .with_context(|| format!("--set needs KEY=VALUE, got '{assignment}'"))?;
            cfg.apply(key.trim(), value)?;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(rounds) = self.rounds {
            cfg.fed.total_rounds = rounds;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: every seed, CSVs, SVG plots, lifespan table.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the resolved config and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Run several attacks over the same base config and overlay the results.
    Compare {
        /// Config files; all must agree outside the attack stanza.
        #[arg(long)]
        config: Vec<PathBuf>,
        /// Base preset to derive attack variants from.
        #[arg(long)]
        preset: Option<String>,
        /// Attack kinds to compare when using --preset.
        #[arg(long, value_delimiter = ',', default_values = ["baseline", "neurotoxin", "sdba"])]
        attacks: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// List the shipped presets.
    Presets,
    /// Print the resolved config for a preset/config/overrides and exit.
    DryRun {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, dry_run, quiet } => {
            let cfg = config.resolve()?;
            if dry_run {
                print!("{}", cfg.serialize());
                return Ok(());
            }
            runner::run_experiment(&cfg, quiet)?;
            Ok(())
        }
        Command::Compare {
            config,
            preset: preset_name,
            attacks,
            set,
            seeds,
            rounds,
            output_dir,
            quiet,
        } => {
            let cfgs: Vec<ExperimentConfig> = if !config.is_empty() {
                if preset_name.is_some() {
                    bail!("pass either --config files or --preset, not both");
                }
                config
                    .iter()
                    .map(|path| {
                        let args = ConfigArgs {
                            config: Some(path.clone()),
                            preset: None,
                            set: set.clone(),
                            seeds: seeds.clone(),
                            rounds,
                            output_dir: output_dir.clone(),
                        };
                        args.resolve()
                    })
                    .collect::<anyhow::Result<_>>()?
            } else {
                let args = ConfigArgs {
                    config: None,
                    preset: preset_name,
                    set,
                    seeds,
                    rounds,
                    output_dir,
                };
                let base = args.resolve()?;
                attacks
                    .iter()
                    .map(|name| {
                        let kind = name.parse()?;
                        let mut cfg = base.attack_variant(kind);
                        cfg.validate()?;
                        Ok(cfg)
                    })
                    .collect::<anyhow::Result<_>>()?
            };
            runner::compare_attacks(&cfgs, quiet)?;
            Ok(())
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{:<22} {}", p.name, p.describe);
            }
            Ok(())
        }
        Command::DryRun { config } => {
            let cfg = config.resolve()?;
            print!("{}", cfg.serialize());
            Ok(())
        }
    }
}
