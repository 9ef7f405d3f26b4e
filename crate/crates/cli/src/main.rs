//! `dfx`: batch driver for the two-phase detector (three frozen base models,
//! then a fusion head), plus evaluation, JPEG robustness and generalization
//! benches. Every subcommand reads and writes under `--workdir`.

mod commands;
mod config;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deepfeaturex::basemodel::BaseModelError;
use deepfeaturex::data::{ClassLabel, DataError};
use deepfeaturex::eval::{EvalError, ReportFormat};
use deepfeaturex::fusion::FusionError;

/// An input or configuration problem (exit status 3).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(
    name = "dfx",
    version,
    about = "Deepfake attribution with frozen per-class base models and a fusion head"
)]
#[command(after_help = "Typical run:
  dfx toy-corpus --out corpus
  dfx --workdir run ingest --corpus corpus
  dfx --workdir run split
  dfx --workdir run make-subsets
  dfx --workdir run train-base --class dm   (likewise gan, real)
  dfx --workdir run train-head
  dfx --workdir run --format markdown eval")]
pub struct Cli {
    /// Directory holding manifests, models and reports.
    #[arg(long, global = true, default_value = "dfx-work")]
    pub workdir: PathBuf,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Config override, e.g. `--set base.optim.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    pub fn report_format(self) -> ReportFormat {
        match self {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Real,
    Gan,
    Dm,
}

impl From<ClassArg> for ClassLabel {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Real => ClassLabel::Real,
            ClassArg::Gan => ClassLabel::Gan,
            ClassArg::Dm => ClassLabel::Dm,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural three-class corpus (for smoke runs).
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        per_tag: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Scan a corpus tree (`real/<source>/…`, `gan/<generator>/…`,
    /// `dm/<generator>/…`) into the corpus manifest.
    Ingest {
        /// Overrides `corpus` from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Stratified BASE_TRAIN / HEAD_TRAIN / TEST split, with validation
    /// carved from both training parts.
    Split,
    /// The three unbalanced subsets, one per predominant class.
    MakeSubsets,
    /// Train, freeze and strip one base model.
    TrainBase {
        #[arg(long, value_enum)]
        class: ClassArg,
    },
    /// Train the fusion head over the three frozen base models.
    TrainHead,
    /// Score the TEST manifest.
    Eval,
    /// Score TEST raw and re-encoded at every configured JPEG quality.
    Robustness,
    /// Assemble generalization benches from a pool and score them.
    Genbench {
        /// JSON bench spec or list of specs; defaults to `benches` in the config.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Pool manifest; defaults to the corpus manifest.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Only write the bench manifests.
        #[arg(long)]
        assemble_only: bool,
    },
    /// Re-render a JSON report in `--format`.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn is_validation(err: &anyhow::Error) -> bool {
    let data = |d: &DataError| {
        !matches!(
            d,
            DataError::Io(_) | DataError::UnreadableImage { .. } | DataError::EncodeFailure { .. }
        )
    };
    if err.downcast_ref::<Invalid>().is_some() {
        return true;
    }
    if let Some(d) = err.downcast_ref::<DataError>() {
        return data(d);
    }
    if let Some(e) = err.downcast_ref::<EvalError>() {
        return match e {
            EvalError::Data(d) => data(d),
            EvalError::EmptyBench(_) | EvalError::EmptyTestSet | EvalError::BadFormat(_) => true,
            _ => false,
        };
    }
    if let Some(e) = err.downcast_ref::<BaseModelError>() {
        return match e {
            BaseModelError::Data(d) => data(d),
            BaseModelError::MissingOtherClass(..) => true,
            _ => false,
        };
    }
    if let Some(e) = err.downcast_ref::<FusionError>() {
        return match e {
            FusionError::Data(d) => data(d),
            FusionError::BadConfig(_) | FusionError::InputTooShort(_) => true,
            _ => false,
        };
    }
    false
}

fn error_record(kind: &str, code: u8, message: &str) {
    let rec =
        serde_json::json!({ "error": { "kind": kind, "exit_code": code, "message": message } });
    eprintln!("{rec}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            error_record("usage", 2, e.kind().as_str().unwrap_or("invalid usage"));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = if is_validation(&err) {
                ("validation", 3)
            } else {
                ("runtime", 1)
            };
            error_record(kind, code, &format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}
