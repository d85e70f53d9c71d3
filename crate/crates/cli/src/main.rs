use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmflow::commands;

#[derive(Parser)]
#[command(name = "mmflow", version, about = "Minimizing-movement solver for fourth-order cross-diffusion systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trajectory artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replace the step size, keeping the final time.
        #[arg(long)]
        tau_override: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Check the a-priori estimates on a finished run.
    Verify {
        run_dir: PathBuf,
        /// Comma-separated check names; defaults to every applicable check.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
        /// Run directory of the same scenario at four times the step size.
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Transport distance between two snapshot files.
    Distance {
        #[arg(long)]
        config: PathBuf,
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Interpolation inequalities on a Gaussian and random bumps.
    Inequalities {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn configure_threads() {
    if let Some(threads) = std::env::var("MMFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("warning: MMFLOW_THREADS ignored: {e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::ARGUMENT_ERROR as u8),
            };
        }
    };
    configure_threads();
    let code = match cli.command {
        Command::Run {
            config,
            out_dir,
            tau_override,
            quiet,
        } => commands::cmd_run(&config, &out_dir, tau_override, quiet),
        Command::Verify {
            run_dir,
            checks,
            coarse,
            quiet,
        } => commands::cmd_verify(&run_dir, &checks, coarse.as_deref(), quiet),
        Command::Distance {
            config,
            a,
            b,
            out_dir,
            quiet,
        } => commands::cmd_distance(&config, &a, &b, &out_dir, quiet),
        Command::Inequalities {
            samples,
            seed,
            out_dir,
            quiet,
        } => commands::cmd_inequalities(samples, seed, &out_dir, quiet),
    };
    ExitCode::from(code as u8)
}
