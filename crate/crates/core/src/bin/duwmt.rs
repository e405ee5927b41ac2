use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duwmt::config::RunConfig;
use duwmt::data::{generate_synthetic, split, Dataset};
use duwmt::error::{Error, Result};
use duwmt::export;
use duwmt::segnet::{Model, NoiseSpec};
use duwmt::trainer;

/// Double-uncertainty weighted Mean Teacher on synthetic 2-D segmentation.
#[derive(Parser)]
#[command(name = "duwmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a labeled/unlabeled/test split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        labeled: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
    },
    /// Train a student/teacher pair and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate weights on the test split.
    Eval {
        /// Weights file, or a run directory.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use the teacher weights of a run directory.
        #[arg(long)]
        teacher: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export voxel and feature uncertainty maps for the test split.
    UncertaintyMaps {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        teacher: bool,
        /// Teacher-style input noise as `SIGMA,CLIP`; off by default.
        #[arg(long, value_name = "SIGMA,CLIP")]
        noise: Option<String>,
    },
}

fn parse_noise(s: &str) -> Result<NoiseSpec> {
    let bad = || Error::Config(format!("--noise expects SIGMA,CLIP, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok(NoiseSpec { sigma: a.trim().parse().map_err(|_| bad())?, clip: b.trim().parse().map_err(|_| bad())? })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n, size, seed, labeled, test } => {
            let samples = generate_synthetic(n, size, seed)?;
            let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "synthetic".into());
            let manifest = split(&samples, labeled, test, seed, &name)?;
            let ds = Dataset::assemble(samples, manifest)?;
            ds.save(&out)?;
            let m = &ds.manifest;
            println!(
                "wrote {} samples to {}: {} labeled, {} unlabeled, {} test",
                ds.len(),
                out.display(),
                m.train_labeled.len(),
                m.train_unlabeled.len(),
                m.test.len()
            );
        }
        Command::Train { config, data, out, mode, seed, set } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            for kv in &set {
                let (k, v) =
                    kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k, v)?;
            }
            let report = export::run_training(&cfg)?;
            println!(
                "{} run finished after {} steps: student dice {:.4}, teacher dice {:.4}",
                report.mode.as_str(),
                report.steps,
                report.student.dice,
                report.teacher.dice
            );
        }
        Command::Eval { weights, data, teacher, out } => {
            let path = export::resolve_weights(&weights, teacher)?;
            let model = Model::load(&path)?;
            let ds = Dataset::load(&data)?;
            let report = trainer::with_threads(0, || trainer::evaluate(&model, &ds))??;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(o) = out {
                duwmt::format::write_file(&o, json.as_bytes())?;
            }
            print!("{json}");
        }
        Command::UncertaintyMaps { weights, data, out, t, seed, teacher, noise } => {
            let path = export::resolve_weights(&weights, teacher)?;
            let model = Model::load(&path)?;
            let ds = Dataset::load(&data)?;
            let noise = match noise {
                Some(s) => parse_noise(&s)?,
                None => NoiseSpec::none(),
            };
            let maps =
                trainer::with_threads(0, || export::export_uncertainty_maps(&model, &ds, &out, t, seed, noise))??;
            println!("wrote uncertainty maps for {} samples to {}", maps.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Json(_) => 3,
        Error::NumericDivergence { .. } | Error::NonFinite { .. } | Error::LogDomain { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
