use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid mixing coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("no projection head registered for cbr {cbr}; available: {available:?}")]
    UnregisteredCbr { cbr: f64, available: Vec<f64> },

    #[error("cbr {requested} exceeds the trained cbr {trained}; upsampling is unsupported")]
    CbrExceedsTrained { requested: f64, trained: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension overflow in header: {0:?}")]
    DimOverflow(Vec<u32>),

    #[error("record length error: {len} bytes is not a multiple of {record}")]
    RecordLength { len: usize, record: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss {loss} at step {step} (t = {t}, snr = {snr_db} dB)")]
    NonFinite {
        loss: f64,
        step: usize,
        t: usize,
        snr_db: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("linear algebra: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// True for errors caused by malformed or missing input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::DimOverflow(_)
                | Error::RecordLength { .. }
                | Error::Dataset(_)
                | Error::Io(_)
        )
    }
}
