mod args;
mod commands;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::Cli;

/// Usage and input problems exit 1; failures while doing the work exit 2.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn validation(message: impl std::fmt::Display) -> Self {
        Self::Validation(anyhow::anyhow!("{message}"))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_failure {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self::Runtime(e.into())
            }
        })*
    };
}

runtime_failure!(
    anyhow::Error,
    std::io::Error,
    serde_json::Error,
    leafscan_core::checkpoint::CheckpointError,
    leafscan_core::metrics::MetricsError,
    leafscan_core::tensor::TensorError,
    leafscan_api::StartupError,
);

impl From<leafscan_core::dataset::DatasetError> for Failure {
    fn from(e: leafscan_core::dataset::DatasetError) -> Self {
        use leafscan_core::dataset::DatasetError as E;
        match e {
            E::Validation(_) | E::Parse { .. } => Self::Validation(e.into()),
            _ => Self::Runtime(e.into()),
        }
    }
}

impl From<leafscan_core::train::TrainError> for Failure {
    fn from(e: leafscan_core::train::TrainError) -> Self {
        match e {
            leafscan_core::train::TrainError::Config(_) => Self::Validation(e.into()),
            _ => Self::Runtime(e.into()),
        }
    }
}

impl From<leafscan_core::kb::KbError> for Failure {
    fn from(e: leafscan_core::kb::KbError) -> Self {
        match e {
            leafscan_core::kb::KbError::Io { .. } => Self::Runtime(e.into()),
            _ => Self::Validation(e.into()),
        }
    }
}

impl From<leafscan_core::image::ImageError> for Failure {
    fn from(e: leafscan_core::image::ImageError) -> Self {
        match e {
            leafscan_core::image::ImageError::Io { .. } => Self::Runtime(e.into()),
            _ => Self::Validation(e.into()),
        }
    }
}

impl From<leafscan_core::pipeline::PipelineError> for Failure {
    fn from(e: leafscan_core::pipeline::PipelineError) -> Self {
        match e {
            leafscan_core::pipeline::PipelineError::InvalidK { .. } => Self::Validation(e.into()),
            _ => Self::Runtime(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.exit_code())
        }
    }
}
