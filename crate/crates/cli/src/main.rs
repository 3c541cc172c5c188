use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlcharge_cli::commands::{self, PolicySource, Status};
use rlcharge_cli::config::{parse_scenario, parse_seeds, ObsChoice, Overrides, Resolved, PARAMS_PATH_VAR};
use rlcharge_cli::exit;

#[derive(Parser, Debug)]
#[command(name = "rlcharge", version, about = "Fast-charging simulator and DDPG trainer")]
#[command(after_help = format!("Relative parameter files are also searched for in ${PARAMS_PATH_VAR}."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Observation mode: full, simplified, or both (train only).
    #[arg(long, global = true)]
    obs: Option<ObsChoice>,
    /// Seed count N (seeds 0..N) or a comma-separated list.
    #[arg(long, global = true, value_parser = parse_seeds)]
    seeds: Option<::std::vec::Vec<u64>>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one agent per seed (and per mode with --obs both).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Greedy rollout of a checkpoint, or of the CC-CV baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "cccv")]
        checkpoint: Option<PathBuf>,
        /// Roll out the CC-CV baseline instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        cccv: bool,
    },
    /// Evaluate a checkpoint on an aged cell, then keep training it there.
    Age {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `aged`, `identity`, `film=F,heat=H`, or a TOML file.
        #[arg(long)]
        scenario: Option<String>,
        /// Phase-two training episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Open-loop run of a current profile (CSV rows `time_s,current_A`; negative current charges).
    Sim {
        #[command(flatten)]
        common: Common,
        profile: PathBuf,
    },
    /// Aggregate a run directory into per-episode mean and 95% band CSVs.
    Export {
        run: PathBuf,
        /// Defaults to <run>/export.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, episodes: Option<usize>, scenario: Option<&str>) -> anyhow::Result<Resolved> {
    let overrides = Overrides {
        obs: common.obs,
        seeds: common.seeds.clone(),
        episodes,
        scenario: scenario.map(parse_scenario).transpose()?,
    };
    Resolved::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Train { common, episodes } => {
            let r = resolve(&common, episodes, None)?;
            commands::cmd_train(&r, &common.out)
        }
        Command::Eval {
            common,
            checkpoint,
            cccv,
        } => {
            if common.obs == Some(ObsChoice::Both) {
                anyhow::bail!("eval takes a single observation mode");
            }
            let r = resolve(&common, None, None)?;
            let policy = match checkpoint {
                Some(p) if !cccv => PolicySource::Checkpoint(p),
                _ => PolicySource::CcCv,
            };
            commands::cmd_eval(&r, &policy, r.config.seeds[0], &common.out)?;
            Ok(Status::Ok)
        }
        Command::Age {
            common,
            checkpoint,
            scenario,
            episodes,
        } => {
            if common.obs == Some(ObsChoice::Both) {
                anyhow::bail!("age takes a single observation mode");
            }
            let r = resolve(&common, episodes, scenario.as_deref())?;
            Ok(commands::cmd_age(&r, &checkpoint, &common.out)?.status)
        }
        Command::Sim { common, profile } => {
            let r = resolve(&common, None, None)?;
            commands::cmd_sim(&r, &profile, &common.out)?;
            Ok(Status::Ok)
        }
        Command::Export { run, out } => {
            let out = out.unwrap_or_else(|| run.join("export"));
            for path in commands::cmd_export(&run, &out)? {
                println!("{}", path.display());
            }
            Ok(Status::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(Status::Ok) => exit::OK,
        Ok(Status::Diverged) => exit::DIVERGED,
        Err(e) => {
            eprintln!("error: {e:#}");
            rlcharge_cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
