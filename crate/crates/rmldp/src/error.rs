use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor does not belong to the active tape")]
    DetachedFromTape,
    #[error("optimizer state does not match parameter {0}")]
    OptimizerState(String),
    #[error("empty batch for {0}")]
    EmptyBatch(&'static str),
    #[error("series too short: need index range [{need_lo}, {need_hi}] but length is {len}")]
    SeriesTooShort { need_lo: usize, need_hi: usize, len: usize },
    #[error("unknown segment id {0}")]
    UnknownSegment(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{stage} failed for segment {segment}: {source}")]
    Episode {
        stage: &'static str,
        segment: String,
        #[source]
        source: Box<Error>,
    },
    #[error("stage {stage} failed: {detail}")]
    Stage { stage: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
