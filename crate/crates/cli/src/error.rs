use std::fmt;
use std::path::Path;

use fidelity_lab::analysis::AnalysisError;
use fidelity_lab::diagnostics::DiagnosticsError;
use fidelity_lab::model::checkpoint::CheckpointError;
use fidelity_lab::model::ModelError;
use fidelity_lab::tasks::TasksError;
use fidelity_lab::training::TrainError;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Config = 2,
    Io = 3,
    Numeric = 4,
    Schema = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
    pub failing_step: Option<u64>,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            failing_step: None,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Config, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Schema, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(ExitCode::Io, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn model_code(e: &ModelError) -> ExitCode {
    match e {
        ModelError::NonFiniteMemory => ExitCode::Numeric,
        ModelError::InvalidConfig(_) => ExitCode::Config,
        _ => ExitCode::Schema,
    }
}

pub fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    let code = match &e {
        CheckpointError::Io { .. } => ExitCode::Io,
        CheckpointError::Model(m) => model_code(m),
        _ => ExitCode::Schema,
    };
    CliError::new(code, format!("{}: {e}", path.display()))
}

pub fn diagnostics_error(e: DiagnosticsError) -> CliError {
    let code = match &e {
        DiagnosticsError::Checkpoint {
            source: CheckpointError::Io { .. },
            ..
        } => ExitCode::Io,
        DiagnosticsError::Checkpoint { .. } => ExitCode::Schema,
        DiagnosticsError::Model(m) => model_code(m),
        DiagnosticsError::EmptyProbeSet => ExitCode::Config,
        _ => ExitCode::Numeric,
    };
    CliError::new(code, e.to_string())
}

pub fn train_error(e: TrainError) -> CliError {
    let code = match e.root() {
        TrainError::NonFiniteGradient => ExitCode::Numeric,
        TrainError::InvalidConfig(_) | TrainError::InvalidSplit { .. } | TrainError::EmptyBatch => {
            ExitCode::Config
        }
        TrainError::Io(_) => ExitCode::Io,
        TrainError::Model(m) => model_code(m),
        TrainError::Checkpoint(CheckpointError::Io { .. }) => ExitCode::Io,
        TrainError::Checkpoint(_) => ExitCode::Schema,
        TrainError::Diagnostics(_) => ExitCode::Numeric,
        TrainError::AtStep { .. } => unreachable!("root looks through AtStep"),
    };
    CliError {
        code,
        failing_step: e.failing_step(),
        message: e.to_string(),
    }
}

pub fn tasks_error(e: TasksError) -> CliError {
    let code = match &e {
        TasksError::InvalidConfig(_) | TasksError::InsufficientValueSpace { .. } => {
            ExitCode::Config
        }
        _ => ExitCode::Schema,
    };
    CliError::new(code, e.to_string())
}

pub fn analysis_error(e: AnalysisError) -> CliError {
    let code = match e {
        AnalysisError::LengthMismatch(..) => ExitCode::Schema,
        _ => ExitCode::Numeric,
    };
    CliError::new(code, e.to_string())
}
