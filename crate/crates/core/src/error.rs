use thiserror::Error;

pub type Result<T> = std::result::Result<T, AlqrError>;

/// Every failure the library can report.
///
/// Variants split into two families (see [`AlqrError::is_numeric`]): input or
/// configuration problems that the caller can fix by changing the request,
/// and numerical breakdowns of an otherwise valid request.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlqrError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFiniteValue { column: String, row: usize },

    #[error("exposure declared binary but row {row} has value {value}")]
    NonBinaryExposure { row: usize, value: f64 },

    #[error("degenerate sampling weights: {0}")]
    DegenerateWeights(String),

    #[error("need at least {required} rows, got {n}")]
    TooFewRows { n: usize, required: usize },

    #[error("fold count {k} exceeds number of rows {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("solver hit its iteration cap ({iterations}) before reaching optimality")]
    NotConverged { iterations: usize },

    #[error("forest has no trees")]
    EmptyForest,

    #[error("singular design in {0}")]
    SingularDesign(String),

    #[error("every candidate mean learner failed: {0}")]
    AllLearnersFailed(String),

    #[error("residuals are all identical; density bandwidth would be zero")]
    DegenerateResiduals,

    #[error("exposure residual variance {value:e} below guard {threshold:e}")]
    DegenerateExposureVariance { value: f64, threshold: f64 },

    #[error("log link requires positive quantiles, row {row} has {value}")]
    NonPositiveQuantile { row: usize, value: f64 },

    #[error("all propensity weights π(1−π) are zero")]
    DegeneratePropensity,

    #[error("all clever covariates are zero")]
    AllZeroCleverCovariates,

    #[error("{0} is not supported with the log link")]
    UnsupportedLink(String),

    #[error("experiment does not have a binary exposure")]
    NotBinary,

    #[error("all {reps} replications failed")]
    AllReplicationsFailed { reps: usize },
}

impl AlqrError {
    /// True for failures of the numerical machinery on a well-formed request.
    pub fn is_numeric(&self) -> bool {
        use AlqrError::*;
        matches!(
            self,
            RankDeficient
                | NotConverged { .. }
                | EmptyForest
                | SingularDesign(_)
                | AllLearnersFailed(_)
                | DegenerateResiduals
                | DegenerateExposureVariance { .. }
                | NonPositiveQuantile { .. }
                | DegeneratePropensity
                | AllZeroCleverCovariates
                | AllReplicationsFailed { .. }
        )
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        use AlqrError::*;
        match self {
            LengthMismatch(_) => "LengthMismatch",
            NonFiniteValue { .. } => "NonFiniteValue",
            NonBinaryExposure { .. } => "NonBinaryExposure",
            DegenerateWeights(_) => "DegenerateWeights",
            TooFewRows { .. } => "TooFewRows",
            KTooLarge { .. } => "KTooLarge",
            InvalidConfig(_) => "InvalidConfig",
            RankDeficient => "RankDeficient",
            NotConverged { .. } => "NotConverged",
            EmptyForest => "EmptyForest",
            SingularDesign(_) => "SingularDesign",
            AllLearnersFailed(_) => "AllLearnersFailed",
            DegenerateResiduals => "DegenerateResiduals",
            DegenerateExposureVariance { .. } => "DegenerateExposureVariance",
            NonPositiveQuantile { .. } => "NonPositiveQuantile",
            DegeneratePropensity => "DegeneratePropensity",
            AllZeroCleverCovariates => "AllZeroCleverCovariates",
            UnsupportedLink(_) => "UnsupportedLink",
            NotBinary => "NotBinary",
            AllReplicationsFailed { .. } => "AllReplicationsFailed",
        }
    }
}
