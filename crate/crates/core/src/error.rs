use thiserror::Error;

pub type Result<T> = std::result::Result<T, RankError>;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("tie at row {row}: {home} {score}-{score} {away} (ties are settled in overtime)")]
    Tie {
        row: usize,
        home: String,
        away: String,
        score: i64,
    },

    #[error("contradictory duplicate records for {team_a} vs {team_b} on {date}")]
    DataIntegrity {
        team_a: String,
        team_b: String,
        date: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("not enough teams: need at least 2 FBS teams, found {0}")]
    TooFewTeams(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular mixed-model system in the {block} block")]
    Singular { block: String },

    #[error("mode search did not converge after {iterations} iterations (|grad|_inf = {grad_norm:.3e})")]
    ModeNotFound { iterations: usize, grad_norm: f64 },

    #[error("FCS effect is not estimable: {0}")]
    Separation(String),

    #[error("quadrature oracle limited to {max} dimensions, got {dims}")]
    OracleDimension { dims: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
