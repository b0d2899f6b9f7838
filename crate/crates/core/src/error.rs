use thiserror::Error;

/// Why a mesh failed topological validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyFault {
    /// A directed edge without a matching opposite half-edge.
    BoundaryEdge { from: usize, to: usize },
    /// An undirected edge used by more than two faces.
    NonManifoldEdge { from: usize, to: usize },
    /// Two faces traverse a shared edge in the same direction.
    InconsistentOrientation { from: usize, to: usize },
    /// More than one connected component (or an unreferenced vertex).
    Disconnected { components: usize },
    /// A face repeats a vertex.
    DegenerateFace { face: usize },
}

impl std::fmt::Display for TopologyFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BoundaryEdge { from, to } => write!(f, "boundary edge {from}-{to}"),
            Self::NonManifoldEdge { from, to } => write!(f, "non-manifold edge {from}-{to}"),
            Self::InconsistentOrientation { from, to } => {
                write!(f, "inconsistent orientation across edge {from}-{to}")
            }
            Self::Disconnected { components } => {
                write!(f, "mesh has {components} connected components")
            }
            Self::DegenerateFace { face } => write!(f, "face {face} repeats a vertex"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension too small: {nx}x{ny} (each side needs at least 4 nodes)")]
    DimensionTooSmall { nx: usize, ny: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("topology error: {0}")]
    Topology(TopologyFault),

    #[error("unsupported expression: {0}")]
    UnsupportedExpression(String),

    #[error("field has {got} values but the surface has {expected} nodes")]
    FieldLength { expected: usize, got: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("degenerate triangle {triangle}: area {area:e} below {threshold:e}")]
    DegenerateTriangle {
        triangle: usize,
        area: f64,
        threshold: f64,
    },

    #[error("operands live on different surfaces")]
    SurfaceMismatch,

    #[error("conformal factor {value:e} is not positive at node {node}")]
    PositivityViolation { node: usize, value: f64 },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("mode count mismatch: expected {expected}, got {got}")]
    ModeCountMismatch { expected: usize, got: usize },

    #[error(
        "eigenvalue gap {gap:e} between modes {mode} and {other} is below the division guard; \
         the degeneracy tolerance is too small"
    )]
    DivisionGuard { mode: usize, other: usize, gap: f64 },

    #[error(
        "operator is not symmetric with respect to the mass inner product (defect {defect:e})"
    )]
    SymmetryViolation { defect: f64 },

    #[error("field basis is rank deficient (Gram condition number {condition:e})")]
    RankDeficientBasis { condition: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("insufficient modes: need at least {needed}, got {got}")]
    InsufficientModes { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
