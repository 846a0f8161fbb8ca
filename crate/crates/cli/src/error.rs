use geomlens::GeomError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config invalid: {0}")]
    Config(String),
    #[error("[{}] {}", .0.module(), .0)]
    Geom(#[from] GeomError),
    #[error("acceptance gate failed: {0}")]
    Gate(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    /// 2 config invalid, 3 gate failed, 4 numerical error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Gate(_) => 3,
            CliError::Geom(e) => match e {
                GeomError::InvalidDistribution(_)
                | GeomError::DegenerateDirection
                | GeomError::EpsilonTooLarge { .. }
                | GeomError::RankTooLarge { .. }
                | GeomError::DimensionMismatch(_)
                | GeomError::Parse(_) => 2,
                _ => 4,
            },
        }
    }
}
