use std::fmt;

/// Pipeline stage an error is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Fit,
    Analysis,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Fit => "fit",
            Stage::Analysis => "analysis",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("error[{stage}]: {message}")]
pub struct CliError {
    pub stage: Stage,
    pub message: String,
}

impl CliError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, message: message.to_string() }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Stage::Config, message)
    }

    /// Process exit status: 2 config, 3 fit, 4 analysis.
    pub fn exit_code(&self) -> i32 {
        match self.stage {
            Stage::Config => 2,
            Stage::Fit => 3,
            Stage::Analysis => 4,
        }
    }
}

/// Attaches a stage to any displayable error.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, e))
    }
}
