use clap::{Parser, Subcommand};
use qpbt_cli::{execute, CliError, Command, Outcome, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Quasi-periodic ballistic transport experiments.
///
/// Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
#[derive(Parser)]
#[command(name = "qpbt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun even when an identical configuration already completed.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Rotation numbers, Lyapunov exponents and gap labels over an energy grid.
    Rotation,
    /// KAM reduction at every grid energy.
    Reduce,
    /// Packet evolution, spectral frame and the ballistic constant.
    Transport,
    /// Decay of oscillatory spectral integrals in M.
    Integrals,
    /// Summarize and audit an output directory.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("validation error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: {e}");
        }
    }
    let cmd = match cli.cmd {
        Cmd::Rotation => Command::Rotation,
        Cmd::Reduce => Command::Reduce,
        Cmd::Transport => Command::Transport,
        Cmd::Integrals => Command::Integrals,
        Cmd::Report => Command::Report,
    };
    let opts = RunOptions { config: cli.config, out: cli.out, force: cli.force, seed: cli.seed };
    match execute(cmd, &opts) {
        Ok(o) => {
            let (verb, m) = match &o {
                Outcome::Ran(m) => ("done", m),
                Outcome::Skipped(m) => ("up to date", m),
            };
            println!("{} {verb}: hash {} ({} outputs)", m.command, &m.config_hash[..12], m.outputs.len());
            for (k, v) in &m.metrics {
                println!("  {k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(e.exit_code() as u8)
}
