use thiserror::Error;

/// Errors raised anywhere in the homogenization pipeline.
#[derive(Debug, Error)]
pub enum HomogError {
    #[error("invalid drift field: {0}")]
    InvalidField(String),

    #[error("unknown builtin field `{0}` (expected one of: zero, paper_shear, torus_shear, gradient1d, two_sided)")]
    UnknownBuiltin(String),

    #[error("malformed parameters: {0}")]
    MalformedParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("drift is not centered with respect to its invariant density (|∫ b dμ| = {residual:.3e})")]
    NotCentered { residual: f64 },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("solver residual {residual:.3e} exceeds tolerance {tolerance:.3e} ({context})")]
    Residual {
        context: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("discretization error: {0}")]
    Discretization(String),

    #[error("strip too narrow: {0}; increase strip_half_width")]
    StripTooNarrow(String),

    #[error("cell-mass fit failed: {0}")]
    FitFailed(String),

    #[error("time step {dt:.3e} too large for eps = {eps}; use dt <= {suggested:.3e}")]
    StepTooLarge { dt: f64, eps: f64, suggested: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("test function violates the gluing condition (residual {residual:.3e})")]
    GluingViolated { residual: f64 },

    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HomogError>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HomogError {
    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        HomogError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, HomogError>;
