//! Command-line entry point. Thin: argument parsing and exit-code mapping
//! only; all work lives in the library.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mechex::config::{preset, ExperimentConfig};
use mechex::error::{Error, Result};

#[derive(Parser)]
#[command(name = "mechex", version, about = "Competitive experts that learn to invert image transformations")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Path to a config JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a built-in preset (paper-main, reduced, too-many, too-few,
    /// tiny-canonical, no-identity-init, single-net-{32,64,128}, wide-{64,128},
    /// d-lr-tenth, toy).
    #[arg(long)]
    preset: Option<String>,
    /// Run seed (presets only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (presets only).
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Data root holding the IDX files (default: $MECHEX_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Omniglot-style PNG directory for generalization evaluation.
    #[arg(long)]
    omniglot: Option<PathBuf>,
    /// Use the synthetic glyph corpus of this many examples instead of IDX
    /// files.
    #[arg(long)]
    synthetic: Option<usize>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name, self.seed, self.out.clone())?,
            (None, None) => {
                return Err(Error::Config("pass --config PATH or --preset NAME".into()))
            }
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        if let Some(data) = &self.data {
            cfg.data.root = Some(data.clone());
        }
        if let Some(dir) = &self.omniglot {
            cfg.data.omniglot_dir = Some(dir.clone());
        }
        if let Some(n) = self.synthetic {
            cfg.data.synthetic = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate data files, build the split manifest, cache Omniglot.
    Ingest(ConfigSource),
    /// Train (or reuse) the reference classifier and report its accuracy.
    PretrainClassifier(ConfigSource),
    /// Run one configured experiment end to end.
    Train(ConfigSource),
    /// Run presets across seeds and aggregate.
    Suite {
        /// Comma-separated preset names.
        #[arg(long, value_delimiter = ',')]
        preset: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/suite")]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        omniglot: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Re-run the evaluation battery on a finished run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Regenerate the SVG figures of a finished run directory.
    Figures {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(source) => {
            let cfg = source.resolve()?;
            let manifest = mechex::experiment::ingest(&cfg)?;
            println!(
                "ingested: {} canonical / {} transformed examples, manifest at {}",
                manifest.canonical_indices.len(),
                manifest.transformed_indices.len(),
                cfg.out_dir.join("manifest.json").display()
            );
            Ok(())
        }
        Command::PretrainClassifier(source) => {
            let cfg = source.resolve()?;
            let data = mechex::experiment::build_data(&cfg)?;
            let classifier = mechex::experiment::obtain_classifier(&cfg, &data.train, &data.test)?;
            let acc = mechex::models::classifier_accuracy(&classifier, &data.test, usize::MAX)?;
            println!("classifier test accuracy: {acc:.4}");
            Ok(())
        }
        Command::Train(source) => {
            let cfg = source.resolve()?;
            let report = mechex::experiment::run_experiment(&cfg)?;
            println!(
                "run complete: specialization {:.3} ({}), accuracy on expert outputs {}",
                report.specialization_score,
                if report.injective { "injective" } else { "non-injective" },
                report
                    .accuracy
                    .map(|a| format!("{:.4}", a.acc_expert_output))
                    .unwrap_or_else(|| "n/a".into()),
            );
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Suite {
            preset,
            seeds,
            out,
            data,
            omniglot,
            synthetic,
        } => {
            if preset.is_empty() {
                return Err(Error::Config("suite needs at least one --preset".into()));
            }
            let report = mechex::experiment::run_preset_suite(&preset, &seeds, &out, |cfg| {
                if let Some(d) = &data {
                    cfg.data.root = Some(d.clone());
                }
                if let Some(o) = &omniglot {
                    cfg.data.omniglot_dir = Some(o.clone());
                }
                if let Some(n) = synthetic {
                    cfg.data.synthetic = Some(n);
                }
            })?;
            println!(
                "suite complete: {} runs, {} injective, {} failed",
                report.runs.len(),
                report.injective_runs,
                report.failed_runs
            );
            Ok(())
        }
        Command::Evaluate { run } => {
            let report = mechex::experiment::evaluate_run(&run)?;
            println!(
                "evaluation complete: specialization {:.3} ({})",
                report.specialization_score,
                if report.injective { "injective" } else { "non-injective" }
            );
            Ok(())
        }
        Command::Figures { run } => {
            mechex::experiment::emit_figures(&run)?;
            println!("figures written to {}", run.join("figures").display());
            Ok(())
        }
    }
}
