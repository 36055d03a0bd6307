use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use memlq_cli::{parse_config, run, Command};

/// Linear-quadratic control with input memory: solve, synthesize feedback,
/// integrate the Riccati system and verify the results.
#[derive(Debug, Parser)]
#[command(name = "memlq", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON problem configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the output files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = parse_config(&args.config).and_then(|mut plan| {
        plan.command = args.command;
        plan.out_dir = args.out;
        plan.threads = args.threads;
        run(&plan)
    });
    match outcome {
        Ok(outcome) => {
            if let Some(digest) = &outcome.digest {
                print!("{digest}");
            }
            for path in &outcome.files {
                eprintln!("wrote {}", path.display());
            }
            for (name, check) in outcome.checks.iter().filter(|(_, c)| !c.pass) {
                eprintln!(
                    "check failed: {name} = {:e} (tolerance {:e})",
                    check.value, check.tolerance
                );
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
