use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use mosaic_core::config::{ExperimentConfig, SpectralConfig, SweepCell, SweepConfig};
use mosaic_core::engine;
use mosaic_core::linalg::largest_eigenvalue_symmetric;
use mosaic_core::metrics::{fmt_real, write_comment, write_trace, MetricsRow};
use mosaic_core::spectral::{self, SpectralSetup};
use mosaic_core::tasks::make_correlation_matrix;
use mosaic_core::Error;

/// Fragment-wise decentralized learning simulator.
#[derive(Parser)]
#[command(name = "mosaic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv and final_state.csv.
    Train(Common),
    /// Contraction factors and consensus-error traces across fragment counts.
    Spectral(Common),
    /// Cartesian sweep of experiments, one directory per cell plus summary.csv.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Replace the seed(s) of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep cells run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Csv { .. } => 4,
        _ => 1,
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(args: &Common) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    create_dir(&args.out)?;
    run_experiment(&cfg, &args.out).map(|_| ())
}

fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Option<MetricsRow>, Error> {
    let header = cfg.to_toml();
    let result = engine::run(cfg)?;
    write_trace(&result.trace, &out.join("trace.csv"), Some(&header))?;
    result.final_state.write_csv(&out.join("final_state.csv"), Some(&header))?;
    Ok(result.trace.last().copied())
}

fn spectral_cmd(args: &Common) -> Result<(), Error> {
    let mut cfg = SpectralConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    create_dir(&args.out)?;
    let nested = cfg.correlations.len() > 1;
    for &corr in &cfg.correlations {
        let a = make_correlation_matrix(corr, cfg.dim)?;
        let lmax = largest_eigenvalue_symmetric(&a, 1e-12)?;
        let eta = cfg.step_size.resolve(lmax);
        let setup = SpectralSetup {
            nodes: cfg.nodes,
            a,
            eta,
            topology: cfg.topology,
            scheme: cfg.fragment_scheme,
            correlation: corr.label(),
        };
        let dir = if nested {
            args.out.join(corr.label())
        } else {
            args.out.clone()
        };
        create_dir(&dir)?;
        let header = format!(
            "{}\n[resolved]\ncorrelation = \"{}\"\neta = {}",
            cfg.to_toml().trim_end(),
            corr.label(),
            fmt_real(eta)
        );
        let reports = spectral::sweep_k(&setup, &cfg.fragment_counts, &cfg.seeds)?;
        spectral::write_rho_csv(&reports, &dir.join("rho_vs_K.csv"), Some(&header))?;
        let rows = spectral::consensus_sweep(&setup, &cfg.fragment_counts, &cfg.seeds, cfg.rounds)?;
        spectral::write_consensus_csv(&rows, &dir.join("consensus_vs_round.csv"), Some(&header))?;
    }
    Ok(())
}

fn quote(text: &str) -> String {
    format!("\"{}\"", text.replace('"', "\"\""))
}

fn run_cell(cell: &SweepCell, root: &Path) -> Result<Option<MetricsRow>, Error> {
    let dir = root.join(cell.name());
    create_dir(&dir)?;
    run_experiment(&cell.config, &dir)
}

/// Runs every cell, records failures in the summary, and returns the most
/// severe exit code among failed cells.
fn sweep(args: &Common) -> Result<u8, Error> {
    let mut cfg = SweepConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    create_dir(&args.out)?;
    let cells = cfg.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", args.parallel)))?;
    let results: Vec<Result<Option<MetricsRow>, Error>> =
        pool.install(|| cells.par_iter().map(|c| run_cell(c, &args.out)).collect());

    let path = args.out.join("summary.csv");
    let io = |e| Error::Io {
        path: path.clone(),
        source: e,
    };
    let mut text = Vec::new();
    write_comment(&mut text, &cfg.to_toml()).map_err(io)?;
    writeln!(
        text,
        "cell,fragments,degree,alpha,status,round,node_avg,model_avg,consensus_dist,node_stddev,global_loss"
    )
    .map_err(io)?;
    let mut code = 0;
    for (cell, result) in cells.iter().zip(&results) {
        let degree = cell.degree.map(|d| d.to_string()).unwrap_or_default();
        let alpha = cell.alpha.map(|a| a.label()).unwrap_or_default();
        let prefix = format!("{},{},{degree},{alpha}", cell.name(), cell.fragments);
        match result {
            Ok(Some(r)) => writeln!(
                text,
                "{prefix},ok,{},{},{},{},{},{}",
                r.round,
                fmt_real(r.node_avg),
                fmt_real(r.model_avg),
                fmt_real(r.consensus_dist),
                fmt_real(r.node_stddev),
                fmt_real(r.global_loss)
            ),
            Ok(None) => writeln!(text, "{prefix},ok,,,,,,"),
            Err(e) => {
                code = code.max(exit_code(e));
                eprintln!("{}: {e}", cell.name());
                writeln!(text, "{prefix},{},,,,,,", quote(&format!("error: {e}")))
            }
        }
        .map_err(io)?;
    }
    fs::write(&path, text).map_err(io)?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args).map(|_| 0),
        Command::Spectral(args) => spectral_cmd(args).map(|_| 0),
        Command::Sweep(args) => sweep(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
