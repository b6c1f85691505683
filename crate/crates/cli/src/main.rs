use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enscontrol_cli::commands::EXIT_ERROR;
use enscontrol_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "enscontrol", version, about = "Train state-space models by ensemble optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Successive approximations; writes the convergence log, final control and certificate.
    Train(Common),
    /// Projected adjoint-gradient descent with the same outputs.
    Baseline(Common),
    /// Compute constants and thresholds only; exit 0 iff beta > beta0.
    Certify(Common),
    /// Train, then run the finite-difference and definiteness checks.
    Check {
        #[command(flatten)]
        common: Common,
        /// Scale the adjoint gradient by 2 before the finite-difference comparison.
        #[arg(long)]
        corrupt_gradient: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to a fresh directory under `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, common, corrupt_gradient) = match cli.command {
        Sub::Train(c) => (Command::Train, c, false),
        Sub::Baseline(c) => (Command::Baseline, c, false),
        Sub::Certify(c) => (Command::Certify, c, false),
        Sub::Check { common, corrupt_gradient } => (Command::Check, common, corrupt_gradient),
    };
    let opts = RunOptions {
        config: common.config,
        out: common.out,
        workers: common.workers,
        corrupt_gradient,
    };
    match run(cmd, &opts) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
