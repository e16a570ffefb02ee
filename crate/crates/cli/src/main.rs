// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use egfr_forecast::backend::NetworkMode;
use egfr_forecast::pipeline::{example_config, parse_seed_override, Pipeline, RunConfig, Stage, StageStatus};
use egfr_forecast::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "egfr-forecast", version, about = "Staged eGFR forecasting evaluation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or every stage in order.
    Run(RunArgs),
    /// Parse and check a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the preprocessing and extraction audits of a run.
    ShowAudit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print an example config.
    ExampleConfig,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    stage: Option<String>,
    #[arg(long)]
    all: bool,
    /// Mocks and cached responses only; no network.
    #[arg(long)]
    offline: bool,
    /// Cached responses only; any cache miss fails the run.
    #[arg(long, conflicts_with = "offline")]
    replay: bool,
    #[arg(long)]
    run_id: Option<String>,
    /// Seed override, e.g. `--seed split=3`. Repeatable.
    #[arg(long = "seed", value_name = "KEY=VALUE")]
    seeds: Vec<String>,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
}

fn load(config: &Path, seeds: &[String], run_id: Option<&str>) -> Result<RunConfig> {
    let overrides = seeds.iter().map(|s| parse_seed_override(s)).collect::<Result<Vec<_>>>()?;
    let mut c = RunConfig::from_file_with_seeds(config, &overrides)?;
    if let Some(id) = run_id {
        c.set_run_id(id)?;
    }
    Ok(c)
}

fn run(args: RunArgs) -> Result<()> {
    let config = load(&args.config, &args.seeds, args.run_id.as_deref())?;
    let mode = if args.replay {
        NetworkMode::Replay
    } else if args.offline {
        NetworkMode::Offline
    } else {
        NetworkMode::Online
    };
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let stages: Vec<Stage> = match &args.stage {
        Some(s) => vec![s.parse()?],
        None => Stage::ALL.to_vec(),
    };
    let pipeline = Pipeline::new(config, mode, exec)?;
    println!("run directory: {}", pipeline.run_dir().display());
    let mut result = Ok(());
    for stage in stages {
        match pipeline.run_stage(stage) {
            Ok(o) => {
                let status = match o.status {
                    StageStatus::Executed => "executed",
                    StageStatus::UpToDate => "up to date",
                };
                println!("{:<10} {:<11} {}", stage.name(), status, &o.key[..12]);
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    println!("remote calls: {}", pipeline.remote_calls());
    result?;
    if pipeline.is_current(Stage::Report) {
        let path = pipeline.stage_dir(Stage::Report).join("report.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
        println!();
        print!("{text}");
    }
    Ok(())
}

fn validate(config: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let base = config.parent().unwrap_or(Path::new("."));
    match RunConfig::parse(&text, base) {
        Ok(c) => {
            println!(
                "{}: ok ({} backend(s), templates {:?}, {} repeat(s), digest {})",
                config.display(),
                c.backends.len(),
                c.template_ids(),
                c.repeats,
                &c.digest()[..12]
            );
            Ok(true)
        }
        Err(diags) => {
            for d in diags {
                match (d.line, d.column) {
                    (Some(l), Some(col)) => eprintln!("{}:{l}:{col}: {}", config.display(), d.message),
                    (Some(l), None) => eprintln!("{}:{l}: {}", config.display(), d.message),
                    _ => eprintln!("{}: {}", config.display(), d.message),
                }
            }
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::ValidateConfig { config } => validate(&config),
        Command::ShowAudit { config, run_id } => load(&config, &[], run_id.as_deref()).and_then(|c| {
            let p = Pipeline::new(c, NetworkMode::Offline, Execution::Sequential)?;
            print!("{}", p.audit_summary()?);
            Ok(true)
        }),
        Command::ExampleConfig => {
            print!("{}", example_config());
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
