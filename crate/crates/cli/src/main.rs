use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protood_core::bank::load_bank;
use protood_core::detector::NormScope;
use protood_core::pipeline::{self, ConfigOverrides, Failure, Mode, RunConfig, SweepAxis};
use protood_core::{synthetic, Error, Result};

/// Zero-shot OOD segmentation by matching dense features against a prototype bank.
#[derive(Parser)]
#[command(name = "protood", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect a prototype bank.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Write INCS maps, OOD masks and label maps per image.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Image ids to process (default: all).
        ids: Vec<String>,
    },
    /// Evaluate against ground truth; writes report.json and curves.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-evaluate over a grid of one hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// incs, detector or prototypes.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Blend inferred OOD pixels red over the input image.
    Render {
        #[command(flatten)]
        run: RunArgs,
        id: String,
    },
    /// Write the synthetic fixture dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BankCommand {
    Build {
        #[command(flatten)]
        run: RunArgs,
    },
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest to build the bank from (default: --manifest).
    #[arg(long)]
    bank_manifest: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// "file" or "mock:<seed>".
    #[arg(long)]
    backend: Option<String>,
    /// pixel or masked.
    #[arg(long)]
    mode: Option<Mode>,
    /// INCS threshold [default: 0.55].
    #[arg(long)]
    threshold: Option<f64>,
    /// Minimum proposal score [default: 0.2].
    #[arg(long)]
    proposal_threshold: Option<f64>,
    /// per-image or per-dataset.
    #[arg(long)]
    norm_scope: Option<NormScope>,
    /// Prototypes kept per class when building a bank [default: 20].
    #[arg(long)]
    per_class_limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Result<ConfigOverrides> {
        let file = match &self.config {
            Some(path) => ConfigOverrides::load(path)?,
            None => ConfigOverrides::default(),
        };
        let flags = ConfigOverrides {
            manifest: self.manifest.clone(),
            bank_manifest: self.bank_manifest.clone(),
            bank: self.bank.clone(),
            backend: self.backend.clone(),
            mode: self.mode,
            incs_threshold: self.threshold,
            detector_threshold: self.proposal_threshold,
            normalization_scope: self.norm_scope,
            per_class_limit: self.per_class_limit,
            out: self.out.clone(),
            jobs: self.jobs,
        };
        Ok(flags.over(file))
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.overrides()?)
    }
}

fn report_failures(failures: &[Failure]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{} image(s) failed:", failures.len());
    for f in failures {
        eprintln!("  {}: {}", f.image_id, f.error);
    }
    ExitCode::from(1)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Bank(BankCommand::Build { run }) => {
            let cfg = run.resolve()?;
            let bank = pipeline::bank_build(&cfg)?;
            println!("wrote {}", cfg.bank_path()?.display());
            print!("{}", pipeline::bank_summary(&bank));
        }
        Command::Bank(BankCommand::Inspect { config, bank }) => {
            let file = match config {
                Some(path) => ConfigOverrides::load(path)?,
                None => ConfigOverrides::default(),
            };
            let path = bank
                .or(file.bank)
                .ok_or_else(|| Error::InvalidConfig("no bank path given".into()))?;
            print!("{}", pipeline::bank_summary(&load_bank(path)?));
        }
        Command::Infer { run, ids } => {
            let cfg = run.resolve()?;
            let outcome = pipeline::infer(&cfg, &ids)?;
            println!(
                "wrote {} image(s) to {}",
                outcome.written.len(),
                cfg.out_dir()?.display()
            );
            return Ok(report_failures(&outcome.failures));
        }
        Command::Eval { run } => {
            let cfg = run.resolve()?;
            let report = pipeline::eval(&cfg)?;
            let s = &report.summary;
            println!(
                "{} mode, {} image(s): aupr {:.4}  fpr@95tpr {:.4}{}  iou {:.4}  f1 {:.4}",
                cfg.mode,
                report.per_image.len(),
                s.aupr,
                s.fpr_at_95tpr,
                if s.fpr_fallback { " (best tpr)" } else { "" },
                s.iou,
                s.f1
            );
            return Ok(report_failures(&report.failures));
        }
        Command::Sweep { run, axis, grid } => {
            let cfg = run.resolve()?;
            let outcome = pipeline::sweep(&cfg, axis, &grid)?;
            print!("{}", pipeline::sweep_csv(&outcome.rows));
            println!("wrote {}", outcome.csv_path.display());
            return Ok(report_failures(&outcome.failures));
        }
        Command::Render { run, id } => {
            let cfg = run.resolve()?;
            println!("wrote {}", pipeline::render(&cfg, &id)?.display());
        }
        Command::Synth { out } => {
            let fixture = synthetic::write_fixture(&out)?;
            println!("wrote fixture to {}", fixture.root.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
