//! The `wsod` command line: synthetic data generation, training, evaluation,
//! activation-map export and embedding diagnostics.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

mod commands;
pub mod config;

pub use commands::{EvalTask, ExportCamArgs, EvalArgs, GenDataArgs, InspectArgs, TrainArgs};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "WSOD_LOG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] wsod_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage, configuration and input problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use wsod_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(E::Config(_) | E::Io { .. } | E::Parse { .. } | E::Invalid { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wsod", version, about = "Weakly supervised detection on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write per-class probability maps and masks of one image.
    ExportCam(ExportCamArgs),
    /// Print label co-occurrence statistics and the fitted embedding.
    InspectEmbedding(InspectArgs),
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{}", e.render()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::ExportCam(a) => commands::export_cam(&a, out),
        Command::InspectEmbedding(a) => commands::inspect_embedding(&a, out),
    }
}

/// `<checkpoint>.embedding.txt`, where training stores the label embedding.
pub fn embedding_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".embedding.txt")
}

/// `<checkpoint>.log`, the per-iteration loss log.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".log")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
