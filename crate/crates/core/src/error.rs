use crate::dataset::{FrameId, InstanceId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown class label `{0}`")]
    UnknownClass(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("duplicate index entry (instance {instance_id}, frame {frame_id})")]
    DuplicateEntry { instance_id: InstanceId, frame_id: FrameId },

    #[error("no index entry for (instance {instance_id}, frame {frame_id})")]
    UnknownEntry { instance_id: InstanceId, frame_id: FrameId },

    #[error("batch needs at least 2 items, got {0}")]
    BatchTooSmall(usize),

    #[error("batch sampler: {0}")]
    Sampler(String),

    #[error("detection references frame {0} which has no ground truth")]
    UnknownFrame(FrameId),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config file: {0}")]
    Toml(String),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
