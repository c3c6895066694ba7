use alloc::boxed::Box;
use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension {0}: only 1-D and 2-D domains are supported")]
    InvalidDimension(usize),
    #[error("axis {axis}: length must be positive, got {value}")]
    NonpositiveLength { axis: usize, value: f64 },
    #[error("axis {axis}: need at least 2 cells, got {cells}")]
    CellCountTooSmall { axis: usize, cells: usize },
    #[error("fields live on different domains")]
    DomainMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("potential argument {value} lies outside the effective domain")]
    DomainViolation { value: f64 },
    #[error("derivative of order {order} is not available for the {variant} potential")]
    UnsupportedDerivative { order: u8, variant: &'static str },
    #[error("singular matrix: zero pivot in column {column}")]
    SingularMatrix { column: usize },
    #[error("Newton did not converge in step {step} after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { step: usize, iterations: usize, residual: f64 },
    #[error("separation lost in step {step}: phi = {value} in cell {cell}")]
    SeparationViolation { step: usize, cell: usize, value: f64 },
    #[error("adjoint was computed from a different state trajectory")]
    MismatchedTrajectory,
    #[error("clamp residual requested for a zero control weight ({0})")]
    ZeroWeightRequested(&'static str),
    #[error("line search stalled in iteration {iteration} (step {step:e})")]
    LineSearchStall { iteration: usize, step: f64 },
    #[error("forward solve failed at optimizer iteration {iteration}: {source}")]
    ForwardSolve {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("identical control pair: the Lipschitz ratio is undefined")]
    IdenticalPair,
}
