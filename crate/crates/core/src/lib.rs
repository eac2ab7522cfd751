//! Paired-comparison ratings from binary win/loss records via multiple-membership
//! generalized linear mixed models.

pub mod em;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod pql;
pub mod report;
pub mod schedule;
pub mod verify;

pub use error::{RankError, Result};
pub use fit::{fit, fit_from, FitResult};
