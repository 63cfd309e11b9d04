use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NPY file {path}: {reason}")]
    MalformedNpy { path: PathBuf, reason: String },

    #[error("unsupported NPY version {major}.{minor} in {path}; only v1.0 is accepted")]
    UnsupportedNpyVersion { path: PathBuf, major: u8, minor: u8 },

    #[error("shape mismatch for layer {layer_id}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer_id: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in layer {layer_id}, sample {sample_id} at flat index {index}")]
    NonFinite {
        layer_id: String,
        sample_id: usize,
        index: usize,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("channel {channel} out of range for {rows} rows")]
    ChannelOutOfRange { channel: usize, rows: usize },

    #[error("invalid row mask: {0}")]
    InvalidMask(String),

    #[error("SVD failed to converge for layer {layer_id}")]
    SvdNonConvergence { layer_id: String },

    #[error("negative CI {value:e} for layer {layer_id} exceeds tolerance {tolerance:e}")]
    NegativeCi {
        layer_id: String,
        value: f64,
        tolerance: f64,
    },

    #[error("brute-force search refused: {0}")]
    CombinatorialGuard(String),

    #[error("kappa {kappa} out of range 1..={channels} for layer {layer_id}")]
    KappaOutOfRange {
        layer_id: String,
        kappa: usize,
        channels: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schedule has {found} entries but architecture {arch} has {expected} prunable layers")]
    ScheduleLength {
        arch: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid architecture {arch}: {reason}")]
    InvalidArch { arch: String, reason: String },

    #[error("training diverged (loss {loss}) with lr={lr}, momentum={momentum}, weight_decay={weight_decay}")]
    Divergence {
        loss: f64,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("layer {layer_id}: {source}")]
    InLayer {
        layer_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by a caller violating a documented contract
    /// (bad arguments, mismatched files), as opposed to runtime failures.
    pub fn is_contract_violation(&self) -> bool {
        if let Error::InLayer { source, .. } = self {
            return source.is_contract_violation();
        }
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidManifest(_)
                | Error::UnknownLayer(_)
                | Error::ChannelOutOfRange { .. }
                | Error::InvalidMask(_)
                | Error::CombinatorialGuard(_)
                | Error::KappaOutOfRange { .. }
                | Error::InvalidInput(_)
                | Error::ScheduleLength { .. }
                | Error::InvalidArch { .. }
        )
    }

    pub(crate) fn in_layer(layer_id: &str, source: Error) -> Self {
        match source {
            e @ Error::InLayer { .. } => e,
            e => Error::InLayer {
                layer_id: layer_id.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
