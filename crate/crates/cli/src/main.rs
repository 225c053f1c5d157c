use std::path::PathBuf;
use std::process::ExitCode;

use bishadow_cli::{exit, run, Command, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bishadow", version, about = "Bi-shadowing certification and shadowing runs")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Certify semi-hyperbolicity along the configured pseudo-orbit
    Certify(Common),
    /// Finite or infinite-window shadowing with the l^p bound
    Shadow(Common),
    /// Limit-mode shadowing of vanishing defects
    Limit(Common),
    /// Asymptotic-mode shadowing of geometric defects
    Asym(Common),
    /// Constant-tightness sweep over a parameter grid
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Certify(a) => (Command::Certify, a),
        Sub::Shadow(a) => (Command::Shadow, a),
        Sub::Limit(a) => (Command::Limit, a),
        Sub::Asym(a) => (Command::Asym, a),
        Sub::Bench(a) => (Command::Bench, a),
    };
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let outcome = run(command, &config, &out);
    for f in &outcome.files {
        log::info!("wrote {}", f.display());
    }
    if outcome.code == exit::OK {
        println!("{}", outcome.summary);
    } else {
        eprintln!("error: {}", outcome.summary);
    }
    ExitCode::from(outcome.code as u8)
}
