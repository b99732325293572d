use std::path::PathBuf;

/// Errors surfaced by every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor extents {0:?} overflow the addressable size")]
    ExtentOverflow([usize; 4]),

    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("channel mismatch: layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("non-positive output extent for input {input} (kernel {kernel}, stride {stride}, padding {padding}, dilation {dilation})")]
    OutputExtent {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch norm needs at least two values per channel in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("top-{k} requested with only {classes} classes")]
    TopKTooLarge { k: usize, classes: usize },

    #[error("output channels {k_o} not divisible by rate count {n}")]
    IndivisibleChannels { k_o: usize, n: usize },

    #[error("branches produce different spatial extents: {0:?}")]
    BranchMisaligned(Vec<(usize, usize)>),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint entry `{name}` does not fit the model: {msg}")]
    EntryMismatch { name: String, msg: String },

    #[error("layer `{0}` not found")]
    UnknownLayer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
