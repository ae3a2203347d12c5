use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use flashlab::config::RunConfig;
use flashlab::experiment::{self, render_report, DemoConfig, ExperimentError, ReportRow};
use flashlab::{Geometry, Medium};

/// Secure-deletion experiments on a simulated flash file system.
#[derive(Debug, Parser)]
#[command(name = "flashlab", version)]
struct Cli {
    /// Override the seed from the config (or the demo's junk seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print only what the command must print.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every experiment in a config and write logs plus report.csv.
    Simulate {
        config: PathBuf,
    },
    /// Write a secret, delete it and purge, scanning the raw medium each time.
    PurgeDemo(PurgeDemoArgs),
    /// Search a medium image for a byte pattern. Exit 0 with hits, 1 without,
    /// 2 if the image cannot be read.
    Scan {
        image: PathBuf,
        pattern: String,
    },
    /// Rebuild report.csv from the raw logs of a simulate run.
    Report {
        /// Run directory (defaults to --out-dir).
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PurgeDemoArgs {
    #[arg(value_parser = non_empty)]
    secret: String,
    /// Save the four snapshots as <IMAGE>-<n>-<stage>.img.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Zero deleted chunks in place, so deletion alone removes the secret.
    #[arg(long)]
    zero_overwrite: bool,
    #[arg(long, default_value_t = 64)]
    blocks: usize,
    #[arg(long, default_value_t = 64)]
    chunks_per_block: usize,
    #[arg(long, default_value_t = 2048)]
    chunk_size: usize,
}

fn non_empty(s: &str) -> Result<String, String> {
    if s.is_empty() {
        Err("secret must not be empty".into())
    } else {
        Ok(s.to_string())
    }
}

fn print_report(rows: &[ReportRow]) {
    print!("{}", render_report(rows));
}

fn simulate(cli: &Cli, config: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let base = config.parent().unwrap_or(Path::new("."));
    let quiet = cli.quiet;
    let progress = move |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    let rows = experiment::simulate(&cfg, base, &out_dir, &progress)?;
    if !quiet {
        print_report(&rows);
        eprintln!("wrote {}", out_dir.join(experiment::REPORT_FILE).display());
    }
    Ok(())
}

fn purge_demo(cli: &Cli, args: &PurgeDemoArgs) -> anyhow::Result<bool> {
    let geometry = Geometry {
        chunk_size_bytes: args.chunk_size,
        chunks_per_block: args.chunks_per_block,
        block_count: args.blocks,
        ..Geometry::default()
    };
    let snapshot_prefix = args.image.clone().or_else(|| cli.out_dir.as_ref().map(|d| d.join("purge-demo")));
    if let Some(dir) = snapshot_prefix.as_ref().and_then(|p| p.parent()).filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let cfg = DemoConfig { geometry, zero_overwrite: args.zero_overwrite, seed: cli.seed.unwrap_or(0), snapshot_prefix };
    let outcome = experiment::purge_demo(args.secret.as_bytes(), &cfg)?;
    for stage in &outcome.stages {
        let found = if stage.hits > 0 { "found" } else { "not found" };
        let mark = if stage.as_expected() { "ok" } else { "UNEXPECTED" };
        print!("{:<13} {found:<9} ({} hits) {mark}", stage.name, stage.hits);
        match &stage.snapshot {
            Some(p) => println!("  {}", p.display()),
            None => println!(),
        }
    }
    if !cli.quiet {
        println!(
            "purge wrote {} junk chunks and erased {} blocks",
            outcome.purge.chunks_written, outcome.purge.blocks_erased
        );
    }
    Ok(outcome.passed())
}

fn scan(image: &Path, pattern: &str) -> ExitCode {
    let medium = match Medium::load(image) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("flashlab: {}: {e}", image.display());
            return ExitCode::from(2);
        }
    };
    match medium.raw_scan(pattern.as_bytes()) {
        Ok(hits) => {
            for h in &hits {
                println!("{} {} {}", h.block, h.chunk, h.offset);
            }
            ExitCode::from(if hits.is_empty() { 1 } else { 0 })
        }
        Err(e) => {
            eprintln!("flashlab: {e}");
            ExitCode::from(2)
        }
    }
}

fn report(cli: &Cli, run_dir: Option<&Path>) -> anyhow::Result<()> {
    let dir = run_dir
        .map(Path::to_path_buf)
        .or_else(|| cli.out_dir.clone())
        .context("report needs a run directory or --out-dir")?;
    let rows = experiment::report(&dir)?;
    if !cli.quiet {
        print_report(&rows);
    }
    Ok(())
}

fn fail(e: anyhow::Error) -> ExitCode {
    eprintln!("flashlab: {e:#}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { config } => simulate(&cli, config).map_or_else(fail, |()| ExitCode::SUCCESS),
        Command::PurgeDemo(args) => match purge_demo(&cli, args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::FAILURE,
            Err(e) if matches!(e.downcast_ref(), Some(ExperimentError::InvalidSecret(_))) => {
                eprintln!("flashlab: {e}");
                ExitCode::from(2)
            }
            Err(e) => fail(e),
        },
        Command::Scan { image, pattern } => scan(image, pattern),
        Command::Report { run_dir } => report(&cli, run_dir.as_deref()).map_or_else(fail, |()| ExitCode::SUCCESS),
    }
}
