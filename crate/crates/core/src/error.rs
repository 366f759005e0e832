use thiserror::Error;

use crate::blocks::BlockKind;
use crate::ir::{IrError, TensorShape};

/// Errors raised by the block, aggregation and architecture builders.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("channel mismatch: expected {expected}, found {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{channels} channels not divisible by width ratio {ratio}")]
    IndivisibleWidth { channels: usize, ratio: usize },
    #[error("{channels} intermediate channels not divisible into {groups} groups")]
    IndivisibleGroups { channels: usize, groups: usize },
    #[error("block stride must be 1 or 2, got {0}")]
    InvalidStride(usize),
    #[error("expected a {expected:?} block spec, got {got:?}")]
    WrongBlockKind { expected: BlockKind, got: BlockKind },
    #[error("aggregation inputs disagree spatially: {first} vs {other}")]
    SpatialMismatch {
        first: TensorShape,
        other: TensorShape,
    },
    #[error("residual input has {residual} channels but the node outputs {out}")]
    ResidualChannelMismatch { residual: usize, out: usize },
    #[error("aggregation node needs at least 2 inputs, got {0}")]
    TooFewAggInputs(usize),
    #[error("aggregation spec lists {expected} inputs but {got} were given")]
    InputCountMismatch { expected: usize, got: usize },
    #[error("aggregation kernel must be 1 or 3, got {0}")]
    InvalidAggKernel(usize),
    #[error("iterative aggregation over an empty feature list")]
    EmptyInput,
    #[error("hierarchy depth {0} outside 1..=6")]
    DepthOutOfRange(usize),
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("input {height}x{width} is not divisible by {multiple}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("expected a 3-channel input, got {0} channels")]
    InputChannels(usize),
    #[error("invalid input shape {0}")]
    InvalidInputShape(TensorShape),
}
