//! Batch-oriented CLI for the block pruning toolkit.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 usage/config error,
//! 3 runtime error. stdout carries exactly one JSON document per command;
//! all logs go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use blockprune::config::{PruneMethod, RunConfig};
use blockprune::error::Error;
use blockprune::runner;
use blockprune::verify::FaultInjection;

#[derive(Parser)]
#[command(name = "blockprune", version, about = "Block pruning experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Smart,
    Awg,
    Magnitude,
}

impl From<MethodArg> for PruneMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Smart => PruneMethod::Smart,
            MethodArg::Awg => PruneMethod::Awg,
            MethodArg::Magnitude => PruneMethod::Magnitude,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense model and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pruner from a pretrained (or mid-run) checkpoint.
    Prune {
        /// Overrides the method in the config's [prune] section.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every numerical oracle suite; exit 0 iff all pass.
    Validate {
        /// Testing hook: inject a known defect and confirm detection.
        #[arg(long)]
        inject: Option<String>,
    },
    /// Aggregate run metrics JSONs into a CSV table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArg(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Pretrain { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let doc = runner::cmd_pretrain(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
            Ok(0)
        }
        Cmd::Prune { method, config, init, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = method {
                match cfg.prune.as_mut() {
                    Some(p) => p.method = m.into(),
                    None => {
                        return Err(Error::Config(
                            "config has no [prune] section to apply --method to".into(),
                        ))
                    }
                }
            }
            let doc = runner::cmd_prune(&cfg, &init, &out)?;
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
            Ok(0)
        }
        Cmd::Validate { inject } => {
            let fault = inject.as_deref().map(FaultInjection::parse).transpose()?;
            let (doc, all_passed) = runner::cmd_validate(fault);
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
            Ok(if all_passed { 0 } else { 1 })
        }
        Cmd::Report { runs, out } => {
            let doc = runner::cmd_report(&runs, &out)?;
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
