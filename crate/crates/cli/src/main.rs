use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epabc_cli::{compare, load_config, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "epabc", version, about = "EP-ABC experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config (or a previous run's run_meta.json).
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate two or more finished runs as CSV on stdout.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Simulate the config's synthetic dataset.
    GenData {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of observations; defaults to the config's.
        #[arg(long)]
        n: Option<usize>,
        /// Destination CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            seed,
            threads,
            out,
        } => {
            let loaded = load_config(&config)?;
            let s = run(&loaded, &RunOptions { seed, threads, out })?;
            eprintln!(
                "{}: {} sites, {} draws, {} skips -> {}",
                s.posterior.name,
                s.posterior.n_sites,
                s.posterior.draws,
                s.posterior.skips,
                s.out_dir.display()
            );
            Ok(())
        }
        Command::Compare { dirs } => {
            let rows = compare::compare(&dirs)?;
            compare::write_table(&rows, std::io::stdout().lock()).map_err(|e| {
                CliError::io(std::path::Path::new("<stdout>"), std::io::Error::other(e))
            })
        }
        Command::GenData {
            config,
            seed,
            n,
            out,
        } => {
            let loaded = load_config(&config)?;
            match out {
                Some(path) => {
                    let mut buf = Vec::new();
                    epabc_cli::run::gen_data(&loaded, seed, n, &mut buf)?;
                    std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))
                }
                None => {
                    epabc_cli::run::gen_data(&loaded, seed, n, std::io::stdout().lock()).map(|_| ())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epabc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
