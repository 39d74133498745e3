use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod plot;

use commands::Axis;
use config::RunConfig;
use error::{usage, CliResult};

#[derive(Parser)]
#[command(name = "sl4d", version, about = "Adaptive 4D structured-light scanning in simulation")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene at every resolution level.
    SceneGen,
    /// Run the adaptive acquisition loop against the simulated rig.
    Acquire,
    /// Initial reconstruction from the histograms, then fine-tuning.
    Finetune,
    /// Depth and held-out relighting metrics.
    Eval,
    /// Sweep one setting and record depth accuracy per value.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(anyhow::Error::from)?;
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    match cli.command {
        Command::SceneGen => commands::cmd_scene_gen(&cfg),
        Command::Acquire => commands::cmd_acquire(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::Eval => commands::cmd_eval(&cfg).map(|_| ()),
        Command::Ablate { axis, values, seeds } => commands::cmd_ablate(&cfg, axis, &values, &seeds).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
