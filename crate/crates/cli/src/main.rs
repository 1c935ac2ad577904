use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use oraclebench::config::Kind;
use oraclebench::run::{run, RunOptions};

/// Oracle-world benchmark runner.
#[derive(Parser, Debug)]
#[command(name = "oraclebench", version)]
struct Cli {
    #[arg(value_enum)]
    command: Kind,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config `out`, then $ORACLEBENCH_OUT/<config name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Added to every seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs == Some(0) {
        eprintln!("--jobs must be at least 1");
        return ExitCode::from(2);
    }
    let opts = RunOptions {
        config: cli.config,
        out: cli.out,
        jobs: cli.jobs,
        seed_offset: cli.seed_offset,
    };
    match run(cli.command, &opts) {
        Ok(summary) => {
            println!("{}", summary.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
