use spatiocal::io::IoError;
use spatiocal::pipeline::PipelineError;
use spatiocal::sim::SimError;
use spatiocal::solver::SolverError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("not identifiable: {0}")]
    NotIdentifiable(String),
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        CliError::Pipeline(PipelineError::Solver(e))
    }
}

impl CliError {
    /// 2 input/config, 3 identifiability, 4 solver.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Sim(SimError::ConfigDegenerate { .. }) => 3,
            CliError::Sim(_) => 2,
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::NotIdentifiable(_) => 3,
        }
    }
}
