//! `herdsim` — runs configured experiments, reports on finished runs and
//! converts trajectory files.

mod config;
mod manifest;
mod run;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::manifest::{summary_text, write_atomic, ArtifactDir, RunManifest, SeedEntry, MANIFEST_FILE, SUMMARY_FILE};

/// Exit code of a run that finished but failed one of its checks.
const EXIT_CHECKS_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "herdsim", version, about = "Mean-field herding experiments")]
struct Cli {
    /// Log progress at info level (debug with RUST_LOG).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Base seed; overrides `seed` in the config.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long, value_name = "N", env = "HERDSIM_THREADS")]
        threads: Option<usize>,
    },
    /// Summarize a finished run from its manifest.
    Report {
        #[arg(value_name = "MANIFEST")]
        manifest: PathBuf,
    },
    /// Convert a trajectory between CSV and the HERD1 binary format.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Target format; inferred from the output extension when omitted.
        #[arg(long, value_enum)]
        to: Option<Format>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Herd1,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => run(&config, out, seed, threads),
        Command::Report { manifest } => {
            let report = manifest::report(&manifest)?;
            print!("{}", report.text);
            Ok(if report.passed && report.complete {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECKS_FAILED)
            })
        }
        Command::Convert { input, output, to } => {
            convert(&input, &output, to)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run(path: &Path, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        bail!(
            "{} configuration error(s) in {}:\n  {}",
            errors.len(),
            path.display(),
            errors.join("\n  ")
        );
    }
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }

    let started = Instant::now();
    let mut artifacts = ArtifactDir::create(&dir)?;
    log::info!("running {} into {}", cfg.experiment.name(), dir.display());
    // The resolved config (defaults filled in, overrides applied) travels with the run.
    let resolved = cfg.to_toml()?;
    artifacts.write("config.toml", |w| Ok(w.write_all(resolved.as_bytes())?))?;
    let checks = run::dispatch(&cfg, &mut artifacts)?;
    let mut seeds = vec![SeedEntry {
        role: "base".into(),
        seed: cfg.seed,
    }];
    seeds.extend(cfg.replica_seeds().into_iter().enumerate().map(|(r, s)| SeedEntry {
        role: format!("replica {r}"),
        seed: s,
    }));
    let manifest = RunManifest {
        experiment: cfg.experiment.name().to_string(),
        config_hash: cfg.content_hash(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        seeds,
        artifacts: artifacts.into_artifacts(),
        checks,
    };
    let summary = summary_text(&manifest);
    write_atomic(&dir.join(SUMMARY_FILE), |w| Ok(w.write_all(summary.as_bytes())?))?;
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        Ok(w.write_all(b"\n")?)
    })?;
    print!("{summary}");
    Ok(if manifest.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECKS_FAILED)
    })
}

fn infer_format(path: &Path) -> Option<Format> {
    match path.extension()?.to_str()? {
        "csv" => Some(Format::Csv),
        "herd1" | "bin" => Some(Format::Herd1),
        _ => None,
    }
}

fn convert(input: &Path, output: &Path, to: Option<Format>) -> anyhow::Result<()> {
    let to = to
        .or_else(|| infer_format(output))
        .context("cannot infer the target format; pass --to csv|herd1")?;
    let reader = BufReader::new(File::open(input).with_context(|| format!("cannot open {}", input.display()))?);
    match to {
        Format::Csv => {
            write_atomic(output, |w| {
                herdsim::io::herd1_to_csv(reader, BufWriter::new(w))?;
                Ok(())
            })?;
        }
        Format::Herd1 => {
            let states = herdsim::io::read_trajectory_csv(reader)?;
            write_atomic(output, |w| Ok(herdsim::io::write_herd1(&states, w)?))?;
        }
    }
    Ok(())
}
