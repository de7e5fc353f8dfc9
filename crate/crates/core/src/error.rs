use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("scaling function is not superlinear (lower index {beta_lower}); supremum is unbounded")]
    NonSuperlinearScaling { beta_lower: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("envelope branch undefined at t={t}, r={r}")]
    UnsupportedRegime { t: f64, r: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate estimate: all kernel values are zero")]
    DegenerateEstimate,
    #[error("invalid time step {0}")]
    InvalidStep(f64),
    #[error("dimension {0} is not supported for this process")]
    UnsupportedDim(usize),
    #[error("no closed-form density for this process; use Monte Carlo")]
    NoClosedForm,
    #[error("resolvent diverges (recurrent process at alpha = 0)")]
    DivergentResolvent,
    #[error("requested time {t} exceeds path horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("quadrature failed to reach tolerance (estimate {value}, error {error})")]
    QuadratureFailure { value: f64, error: f64 },
    #[error("potential sup {sup} exceeds cap {cap}")]
    UnboundedPotential { sup: f64, cap: f64 },
    #[error("path is not a one-dimensional Brownian path")]
    NonBrownianPath,
    #[error("resolvent potential diverges")]
    DivergentPotential,
    #[error("process is recurrent")]
    RecurrentProcess,
    #[error("mesh too coarse: {0}")]
    MeshTooCoarse(String),
    #[error("unsupported process for this operation: {0}")]
    UnsupportedProcess(String),
    #[error("singular pencil: the constraint measure has no mass on the mesh")]
    SingularPencil,
    #[error("eigensolver did not converge (residual {residual})")]
    NonConvergence { residual: f64 },
    #[error("bandwidth too small: relative CI {0} at the kernel peak")]
    BandwidthTooSmall(f64),
    #[error("tail bias bound {bound} exceeds 5% of estimate {estimate}")]
    TailBiasTooLarge { bound: f64, estimate: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
