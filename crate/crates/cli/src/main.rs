use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use w2rf_cli::config::Value;
use w2rf_cli::{commands, CliError, Config, Invocation};

/// Train stochastic networks with a local W2 loss and run the theory studies.
#[derive(Parser)]
#[command(name = "w2rf", version)]
struct Cli {
    /// Config file (flat TOML; see README for the schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `w2rf-out`; replay defaults to `replay/`
    /// next to the manifest).
    #[arg(long, global = true, env = "W2RF_OUT")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "W2RF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an Example 3.1 dataset or an oscillator truth ensemble.
    GenData,
    /// Train on `<data>/train.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint against `<data>/test.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predicted samples per test input (default 20).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fit a stochastic surrogate ODE to oscillator trajectories.
    OdeRecon,
    /// Two-sample W2 convergence study, homogeneous vs heterogeneous scales.
    RateLab,
    /// Output sensitivity to parameter perturbations.
    Robustness,
    /// Rerun a manifest and compare artifact hashes.
    Replay { manifest: PathBuf },
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

fn load_config(path: Option<&Path>, required: bool) -> Result<Config, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Config::parse(&text)
        }
        None if required => Err(CliError::Config("this command needs --config <path>".into())),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (inv, mut config) = match cli.command {
        Command::Replay { manifest } => {
            let out = cli
                .out
                .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let report = commands::replay(&manifest, &out, threads)?;
            for a in &report.original.artifacts {
                let status = if report.mismatched.contains(&a.path) { "MISMATCH" } else { "ok" };
                println!("{status:8} {}", a.path);
            }
            if !report.mismatched.is_empty() {
                return Err(CliError::ReplayMismatch(report.mismatched.join(", ")));
            }
            println!("replay reproduced {} artifacts in {}", report.original.artifacts.len(), out.display());
            return Ok(());
        }
        Command::GenData => (Invocation::GenData, load_config(cli.config.as_deref(), true)?),
        Command::Train { data } => (
            Invocation::Train { data: absolute(&data)? },
            load_config(cli.config.as_deref(), true)?,
        ),
        Command::Eval { checkpoint, data, k } => {
            let mut c = load_config(cli.config.as_deref(), false)?;
            if let Some(k) = k {
                c.set("eval.k", Value::Int(k as i64));
            }
            let inv = Invocation::Eval {
                checkpoint: absolute(&checkpoint)?,
                data: absolute(&data)?,
            };
            (inv, c)
        }
        Command::OdeRecon => (Invocation::OdeRecon, load_config(cli.config.as_deref(), true)?),
        Command::RateLab => (Invocation::RateLab, load_config(cli.config.as_deref(), true)?),
        Command::Robustness => (Invocation::Robustness, load_config(cli.config.as_deref(), true)?),
    };
    if let Some(seed) = cli.seed {
        config.set("seed", Value::Int(seed as i64));
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from("w2rf-out"));
    let manifest = commands::execute(&inv, &config, &out, threads)?;
    for a in &manifest.artifacts {
        println!("{}", out.join(&a.path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
