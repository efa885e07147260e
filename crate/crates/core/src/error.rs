use thiserror::Error;

/// Errors raised by the numerical routines and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Hoermander condition fails at sample {sample:?} for brackets up to step {max_step}")]
    HoermanderFailure { sample: Vec<f64>, max_step: u32 },

    #[error("every frame determinant vanishes at {0:?}")]
    DegenerateBasis(Vec<f64>),

    #[error("volume bracket too wide: lower {lower}, upper {upper}")]
    InconclusiveVolume { lower: f64, upper: f64 },

    #[error("scaling inequality violated at x={x:?}, r={r}, t={t}: defect {defect}")]
    ComparabilityViolation {
        x: Vec<f64>,
        r: f64,
        t: f64,
        defect: f64,
    },

    #[error("no sub-unit path found within the step budget ({0})")]
    NoPathFound(String),

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: &'static str, detail: String },

    #[error("singular evaluation at the pole")]
    Singularity,

    #[error("exponent p={p} must be below the homogeneous dimension {q}")]
    ExponentViolation { p: f64, q: f64 },

    #[error("domain is empty")]
    EmptyDomain,

    #[error("domain is disconnected ({components} components)")]
    DisconnectedDomain { components: usize },

    #[error("non-finite weight at cell {0}")]
    NonFiniteWeight(usize),

    #[error("test function has zero horizontal gradient energy")]
    ZeroGradient,

    #[error("ratio {ratio} exceeds the bound {bound} by more than {tolerance}")]
    AnomalousExcess {
        ratio: f64,
        bound: f64,
        tolerance: f64,
    },

    #[error("Whitney property ({clause}) violated: {detail}")]
    PropertyViolation { clause: char, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// `.context(..)` on results.
pub trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}
