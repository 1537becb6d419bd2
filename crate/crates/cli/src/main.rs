use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use hawkes_lob::cli_io::{parse_config, run, Command, RunError, RunRequest, SeedManifest, SEED_ENV, THREADS_ENV};

/// Hawkes-driven limit order books: micro simulation, limit solves,
/// convergence experiments and oracle checks.
#[derive(Debug, Parser)]
#[command(name = "hawkes-lob", version)]
struct Cli {
    /// simulate-micro | solve-limit | converge | oracle-check | resolvent
    command: Option<Command>,
    /// TOML run configuration.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Rerun from a manifest.json written by an earlier run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides the config and the environment.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Refinement level for simulate-micro.
    #[arg(long, default_value_t = 0)]
    level: u32,
}

fn request(cli: &Cli) -> Result<RunRequest> {
    if let Some(path) = &cli.manifest {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: SeedManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cli.command.is_some_and(|c| c != manifest.command) {
            bail!("command {} does not match the manifest's {}", cli.command.unwrap(), manifest.command);
        }
        return Ok(manifest.request());
    }
    let Some(command) = cli.command else {
        bail!("a command is required unless --manifest is given");
    };
    let Some(path) = &cli.config else {
        bail!("--config or --manifest is required");
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = parse_config(&text).map_err(RunError::from)?;
    let seed = cli.seed.unwrap_or(config.seed);
    Ok(RunRequest { command, config, seed, level: cli.level })
}

fn write_error(cli: &Cli, err: &anyhow::Error) {
    let report = match err.downcast_ref::<RunError>() {
        Some(e) => serde_json::to_value(e.report()),
        None => serde_json::to_value(serde_json::json!({ "kind": "usage", "message": format!("{err:#}"), "issues": [] })),
    }
    .expect("error report serializes");
    let text = serde_json::to_string_pretty(&report).expect("json");
    eprintln!("{text}");
    if fs::create_dir_all(&cli.out).is_ok() {
        let _ = fs::write(cli.out.join("error.json"), text + "\n");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = request(&cli).and_then(|req| {
        log::info!("{} seed {} level {}", req.command, req.seed, req.level);
        Ok(run(&req, &cli.out)?)
    });
    match result {
        Ok(outcome) => {
            for a in &outcome.artifacts {
                println!("{}", a.display());
            }
            match outcome.pass {
                Some(false) => {
                    eprintln!("FAIL");
                    ExitCode::from(2)
                }
                Some(true) => {
                    eprintln!("PASS");
                    ExitCode::SUCCESS
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            write_error(&cli, &e);
            ExitCode::from(1)
        }
    }
}
