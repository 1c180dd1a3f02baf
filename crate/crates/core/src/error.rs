use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid bounding box ({x}, {y}, {w}, {h})")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("box ({x}, {y}, {w}, {h}) lies outside a {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
    #[error("embedding dimension mismatch for {id}: expected {expected}, found {found}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("zero-norm embedding for {0}")]
    ZeroNorm(String),
    #[error("detections bound to different images: {0} and {1}")]
    MixedImages(String, String),
    #[error("payload kinds are mixed within one request")]
    MixedPayload,
    #[error("expected a {expected} payload")]
    PayloadKind { expected: &'static str },
    #[error("duplicate candidate label {0}")]
    DuplicateLabel(String),
    #[error("unknown candidate label {0}")]
    UnknownLabel(String),
    #[error("verdict parse error: {0}")]
    Parse(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown toggle {0}")]
    UnknownToggle(String),
    #[error("no toggles")]
    NoToggles,
    #[error("no categories")]
    NoCategories,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    /// Failure reported by a caller-supplied callback such as an embedder.
    #[error("{0}")]
    External(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
