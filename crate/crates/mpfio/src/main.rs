use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mpfio::config::LoadedConfig;
use mpfio::experiments::KINDS;
use mpfio::runner::{self, RunOptions};
use mpfio_core::lattice::write_container;
use mpfio_core::region::{influence_region, DEFAULT_C};

#[derive(Parser)]
#[command(name = "mpfio", version, about = "Experiments for multi-parameter Fourier integral operators")]
struct Cli {
    /// Worker threads for parallel kernels (default: config, then all cores).
    #[arg(long, global = true, env = "MPFIO_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments listed in a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Glob over experiment ids.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Print the registered experiment kinds.
    ListExperiments,
    /// Parse and validate a config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the configured atom as a field container.
    ExportAtom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the region-of-influence mask of one factor as a field container.
    ExportMask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        factor: usize,
        #[arg(long, default_value_t = DEFAULT_C)]
        influence_c: f64,
        /// Highest dyadic level; the grid maximum when absent.
        #[arg(long)]
        top: Option<u32>,
    },
}

fn load(path: &Path) -> Result<LoadedConfig> {
    LoadedConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn set_workers(flag: Option<usize>, cfg: Option<&LoadedConfig>) {
    let n = runner::workers(flag, cfg);
    // Fails only if the pool already exists, which keeps the first setting.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn write_field(path: &Path, f: &mpfio_core::lattice::SampledField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_container(&mut w, f)?;
    w.flush()?;
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, seed, filter } => {
            let cfg = load(&config)?;
            set_workers(cli.workers, Some(&cfg));
            let opts = RunOptions { out, seed, filter };
            let outcome = runner::run(&cfg, &opts, io::stderr())?;
            let failed = outcome.reports.iter().filter(|r| !r.pass).count();
            println!("{} experiments, {} failed, reports in {}", outcome.reports.len(), failed, outcome.out.display());
            Ok(if outcome.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::ListExperiments => {
            for (kind, desc) in KINDS {
                println!("{kind:<28}{desc}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateConfig { config } => {
            let cfg = load(&config)?;
            let planned = runner::select(&cfg, None)?;
            println!("ok: {} experiments", planned.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportAtom { config, out } => {
            let cfg = load(&config)?;
            let grid = cfg.grid()?;
            let atom = cfg.atom(&grid)?;
            write_field(&out, &atom.field)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportMask { config, out, factor, influence_c, top } => {
            let cfg = load(&config)?;
            set_workers(cli.workers, Some(&cfg));
            let grid = cfg.grid()?;
            let d = grid.space().d();
            anyhow::ensure!(factor < d, "--factor {factor} out of range for d = {d}");
            let atom = cfg.atom(&grid)?;
            let top = match top {
                Some(t) => t,
                None => mpfio_core::evaluator::max_level(&grid, factor)?,
            };
            let region = influence_region(&cfg.phase()?, &atom, factor, influence_c, top)?;
            write_field(&out, &region.mask.to_field()?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
