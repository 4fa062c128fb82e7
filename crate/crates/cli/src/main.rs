use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relclip::harness::{self, AnalysisToggles, ExperimentConfig, RunOptions, RunStatus, OUT_ENV};
use relclip::Error;

#[derive(Parser)]
#[command(name = "relclip", version, about = "Train and analyze left-right relational CLIP models")]
struct Cli {
    /// Output root for runs and sweeps.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and analyze one config.
    Run {
        config: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run every cell of a config's `[sweep]` grid.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Analyze a saved checkpoint.
    Analyze {
        checkpoint: PathBuf,
        /// Comma-separated analyses, e.g. `head_bias,ablation,rotation`.
        #[arg(long, value_delimiter = ',', required = true)]
        toggles: Vec<String>,
        /// Run config supplying the dataset; defaults to the checkpoint's run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `analyze_<checkpoint stem>` beside the checkpoint.
        #[arg(long = "dest")]
        dest: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write the tidy data bundle of one figure.
    Export {
        /// `manifest.json` of a run or `sweep_manifest.json` of a sweep.
        manifest: PathBuf,
        #[arg(long)]
        figure: String,
        /// Output directory; defaults to `figures/<id>` beside the manifest.
        #[arg(long = "dest")]
        dest: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        // A missing analysis is fixed by rerunning with a toggle, like a config error.
        if e.is_config() || matches!(e, Error::MissingAnalysis { .. }) {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn check(status: RunStatus, error: Option<String>, dir: &Path) -> Result<(), Failure> {
    match status {
        RunStatus::Complete => {
            println!("{}", dir.display());
            Ok(())
        }
        RunStatus::Partial => Err(Failure::Runtime(format!(
            "run in {} is partial: {}",
            dir.display(),
            error.unwrap_or_default()
        ))),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.output_dir(&cli.out);
            let m = harness::run_config(&cfg, &dir, RunOptions { force })?;
            check(m.status, m.error, &dir)
        }
        Command::Sweep { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.output_dir(&cli.out);
            let m = harness::sweep_config(&cfg, &dir, RunOptions { force })?;
            let failed: Vec<_> =
                m.cells.iter().filter(|c| c.status != harness::CellStatus::Complete).map(|c| c.cell.as_str()).collect();
            println!("{}", dir.join(harness::SWEEP_MANIFEST_FILE).display());
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("{} of {} cells did not complete: {}", failed.len(), m.cells.len(), failed.join(", "))))
            }
        }
        Command::Analyze { checkpoint, toggles, config, dest, force } => {
            let names: Vec<&str> = toggles.iter().map(String::as_str).collect();
            let toggles = AnalysisToggles::from_names(&names)?;
            let cfg_path = match config {
                Some(p) => p,
                None => harness::config_for_checkpoint(&checkpoint)?,
            };
            let cfg = ExperimentConfig::load(&cfg_path)?;
            let dir = dest.unwrap_or_else(|| {
                let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                checkpoint.parent().unwrap_or(Path::new(".")).join(format!("analyze_{stem}"))
            });
            let m = harness::analyze(&checkpoint, &cfg, toggles, &dir, RunOptions { force })?;
            check(m.status, m.error, &dir)
        }
        Command::Export { manifest, figure, dest } => {
            let b = harness::export(&manifest, &figure, dest.as_deref())?;
            for f in &b.files {
                println!("{} ({} rows)", f.name, f.rows);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
