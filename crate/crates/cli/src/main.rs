use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metriplectic_cli::commands::{self, Algorithm, IdentifyOverrides};
use metriplectic_cli::config::RunConfig;
use metriplectic_cli::{files, CliError};

/// Simulation and identification of polynomial metriplectic systems.
///
/// Exit codes: 0 success, 2 validation error, 3 solver failure, 4 divergence.
/// The conic backend is chosen by METRIPLECTIC_CONIC_BACKEND (default ipm);
/// log verbosity by METRIPLECTIC_LOG (env_logger syntax, default warn).
#[derive(Parser)]
#[command(name = "metriplectic", version)]
struct Cli {
    /// Conic backend; overrides METRIPLECTIC_CONIC_BACKEND.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write CSVs plus a diagnostics summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to [output].dir of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a state/derivative dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Identify the entropy and metric from a dataset.
    Identify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "bilevel")]
        algorithm: AlgorithmArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a system's structure or an identification report; prints JSON.
    Verify {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the result to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AlgorithmArg {
    Bilevel,
    Stochastic,
}

fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.output.as_ref().map(|o| o.dir.clone()))
        .ok_or_else(|| CliError::Validation("no output directory: pass --out or set [output].dir".into()))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    if let Some(b) = cli.backend {
        if conic::backend(&b).is_none() {
            return Err(CliError::Validation(format!("unknown conic backend {b:?}")));
        }
        std::env::set_var(conic::BACKEND_ENV, b);
    }
    let start = Instant::now();
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let (Some(s), Some(sim)) = (seed, cfg.simulate.as_mut()) {
                sim.seed = s;
            }
            let out = out_dir(&cfg, out)?;
            let summary = commands::simulate(&cfg, &out)?;
            files::write_metadata(&out, "simulate", start.elapsed().as_secs_f64())?;
            println!(
                "{} trajectories: {} diverged, {} with monotone E, {} with final |E| < {}",
                summary.trajectories.len(),
                summary.n_diverged,
                summary.n_monotone,
                summary.n_converged,
                commands::LEVEL_SET_TOL
            );
            if summary.n_diverged > 0 {
                return Err(CliError::Divergence(format!(
                    "{} trajectories exceeded the divergence bound",
                    summary.n_diverged
                )));
            }
            Ok(0)
        }
        Command::GenData { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let (Some(s), Some(d)) = (seed, cfg.data.as_mut()) {
                d.seed = s;
            }
            let ds = commands::gen_data(&cfg)?;
            files::write_dataset(&out, &ds)?;
            println!("wrote {} records to {}", ds.len(), out.display());
            Ok(0)
        }
        Command::Identify {
            data,
            config,
            algorithm,
            out,
            batch_size,
            max_iters,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cfg, out)?;
            let ds = files::read_dataset(&data)?;
            let algorithm = match algorithm {
                AlgorithmArg::Bilevel => Algorithm::Bilevel,
                AlgorithmArg::Stochastic => Algorithm::Stochastic,
            };
            let over = IdentifyOverrides {
                batch_size,
                max_iters,
                seed,
            };
            let result = commands::identify(&cfg, &ds, algorithm, &over, &out);
            if out.join(files::REPORT_FILE).exists() {
                files::write_metadata(&out, "identify", start.elapsed().as_secs_f64())?;
            }
            let report = result?;
            println!(
                "{:?} after {} iterations: cost per sample {:e}",
                report.status, report.iterations, report.final_cost_per_sample
            );
            Ok(commands::identify_exit_code(&report))
        }
        Command::Verify { report, config, out } => {
            let result = match (report, config) {
                (Some(dir), _) => commands::verify_report(&files::read_report(&dir)?)?,
                (None, Some(cfg)) => commands::verify_system(&RunConfig::load(&cfg)?)?,
                (None, None) => unreachable!("clap requires one of --report/--config"),
            };
            let text = serde_json::to_string_pretty(&result).expect("serializable");
            println!("{text}");
            if let Some(path) = out {
                files::write_text(Path::new(&path), &(text + "\n"))?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("METRIPLECTIC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
