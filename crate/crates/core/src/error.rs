use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} does not hold {len} values")]
    TensorLength { shape: Vec<usize>, len: usize },
    #[error("cross entropy over zero positions: every target is ignored")]
    EmptyLoss,
    #[error("target id {id} out of range for {classes} classes")]
    TargetOutOfRange { id: usize, classes: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("graph was already differentiated; build a new graph")]
    AlreadyDifferentiated,
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("sequence of length {len} exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("image is {got:?}, model expects {expected:?}")]
    ImageSize {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("{0} images given; one or two are supported")]
    ImageCount(usize),
    #[error("operation `{op}` requires fusion kind {expected}")]
    WrongFusion {
        op: &'static str,
        expected: &'static str,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("caption has no words")]
    EmptyCaption,
    #[error("caption pool cannot provide a different caption")]
    PoolExhausted,
    #[error("no pretraining task enabled")]
    NoTasksEnabled,
    #[error("scene generation: {0}")]
    Scene(String),
    #[error("family {family}: no valid example after {attempts} attempts")]
    RetryBudget { family: &'static str, attempts: usize },
    #[error("only {available} fresh scenes remain, {needed} needed")]
    TooFewScenes { available: u64, needed: u64 },
    #[error("batch size {batch} is not divisible by {datasets} datasets")]
    IndivisibleBatch { batch: usize, datasets: usize },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("duplicate dataset name `{0}`")]
    DuplicateDataset(String),
    #[error("dataset `{name}` was encoded with vocabulary {dataset:#018x}, model uses {model:#018x}")]
    VocabMismatch { name: String, dataset: u64, model: u64 },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("empty reference set")]
    EmptyReference,
}
