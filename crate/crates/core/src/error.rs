use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward through node {node} ({op}) which has no saved activations")]
    MissingActivation { node: usize, op: &'static str },

    #[error("degenerate embedding: norm {norm:e} below 1e-12")]
    DegenerateEmbedding { norm: f64 },

    #[error("singular covariance for component {component}")]
    SingularCovariance { component: usize },

    #[error("bad magic: expected CRTF, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported CRTF version {0}")]
    BadVersion(u8),

    #[error("dtype mismatch: expected 0x01 (f32 LE), found {0:#04x}")]
    DtypeMismatch(u8),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("refusing to overwrite existing {0} (pass --force)")]
    AlreadyExists(PathBuf),

    #[error("missing artifacts:\n{}", .0.iter().map(|p| format!("  {}", p.display())).collect::<Vec<_>>().join("\n"))]
    MissingArtifacts(Vec<PathBuf>),

    #[error("config snapshot at {0} disagrees with the invoked config")]
    ConfigMismatch(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
