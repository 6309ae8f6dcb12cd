use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use alignins::attacks::AttackKind;
use alignins::defenses::Defense;
use alignins::kappa_check::{run_kappa_check, KappaCheckConfig};
use alignins::sim::{run_to_dir, sweep, ExperimentConfig, SweepConfig};
use alignins::Error;

#[derive(Parser)]
#[command(name = "alignins", version, about = "Federated backdoor defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        defense: Option<String>,
        #[arg(long)]
        attack: Option<String>,
    },
    /// Run a grid of (attack, defense, beta, r) cells into one CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Randomized robustness-bound check of the filter-and-clip rule.
    KappaCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Write the per-trial report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Idx { .. } => 3,
        _ => 2,
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Idx { .. } | Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout(), $($arg)*);
    };
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            defense,
            attack,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = defense {
                cfg.defense = Defense::from_name(&d).map_err(config_error)?;
            }
            if let Some(a) = attack {
                cfg.attack.kind = AttackKind::from_name(&a).map_err(config_error)?;
            }
            cfg.validate()?;
            let record = run_to_dir(&cfg, &out)?;
            if let Some(s) = record.summary {
                say!("ma={:.2} ba={:.2} ra={:.2}", s.ma, s.ba, s.ra);
            }
            say!("wrote {}", out.display());
        }
        Command::Sweep { config, out } => {
            let cfg = SweepConfig::from_file(&config)?;
            let records = sweep(&cfg, &out)?;
            say!("{} runs written to {}", records.len(), out.join("sweep.csv").display());
        }
        Command::KappaCheck {
            trials,
            seed,
            lambda,
            epsilon,
            out,
        } => {
            let cfg = KappaCheckConfig {
                trials,
                seed,
                lambda,
                epsilon,
                ..Default::default()
            };
            let report = run_kappa_check(&cfg).map_err(config_error)?;
            say!(
                "trials={} violations={} precondition_failures={} ({:.1}%)",
                report.trials.len(),
                report.violations,
                report.precondition_failures,
                100.0 * report.precondition_failure_rate()
            );
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
            if report.violations > 0 {
                return Err(Error::Degenerate(format!("{} bound violations", report.violations)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
