use thiserror::Error;

use crate::metrics::MetricKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("group column `{column}` has {levels} distinct levels after cleaning, expected exactly 2")]
    Cardinality { column: String, levels: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate model for coalition {coalition}: {reason}")]
    DegenerateModel { coalition: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("completeness error: {0}")]
    Completeness(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("{kind} is undefined for {context}: zero denominator")]
    UndefinedMetric { kind: MetricKind, context: String },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("numerical consistency error: {0}")]
    NumericalConsistency(String),

    #[error("incomplete criterion: {0}")]
    IncompleteCriterion(String),

    #[error("incomplete vote: {0}")]
    IncompleteVote(String),

    #[error("stratum error: {0}")]
    Stratum(String),

    #[error("unstable bootstrap: {failures} of {replicates} replicates failed")]
    Unstable { failures: usize, replicates: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("audit failed in stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// True for errors that void a single hypothesis rather than the audit.
    pub fn is_hypothesis_level(&self) -> bool {
        matches!(
            self,
            Error::UndefinedMetric { .. }
                | Error::DegenerateVariance(_)
                | Error::UndefinedTest(_)
                | Error::NumericalConsistency(_)
        )
    }
}
