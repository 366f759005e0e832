//! Residual convolutional blocks: basic, bottleneck and split (grouped).
//!
//! Every k x k convolution pads by `floor(k / 2)`. A 1 x 1 projection with
//! batch norm replaces the identity skip whenever the block changes width or
//! stride.

use serde::{Deserialize, Serialize};

use crate::error::BuildError;
use crate::ir::{ConvAttrs, GraphBuilder, NodeId, PrimOp};

pub const DEFAULT_CARDINALITY: usize = 32;
/// Output-to-intermediate width ratio of bottleneck blocks.
pub const BOTTLENECK_MID_RATIO: usize = 2;
/// Output-to-intermediate width ratio of split blocks.
pub const SPLIT_MID_RATIO: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Basic,
    Bottleneck,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Groups of the 3 x 3 convolution; only read for split blocks.
    pub cardinality: usize,
    /// `out_channels / mid_ratio` is the intermediate width; unused by basic blocks.
    pub mid_ratio: usize,
}

impl BlockSpec {
    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Basic,
            in_channels,
            out_channels,
            stride,
            cardinality: 1,
            mid_ratio: 1,
        }
    }

    pub fn bottleneck(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Bottleneck,
            in_channels,
            out_channels,
            stride,
            cardinality: 1,
            mid_ratio: BOTTLENECK_MID_RATIO,
        }
    }

    pub fn split(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Split,
            in_channels,
            out_channels,
            stride,
            cardinality: DEFAULT_CARDINALITY,
            mid_ratio: SPLIT_MID_RATIO,
        }
    }

    pub fn of_kind(
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        match kind {
            BlockKind::Basic => Self::basic(in_channels, out_channels, stride),
            BlockKind::Bottleneck => Self::bottleneck(in_channels, out_channels, stride),
            BlockKind::Split => Self::split(in_channels, out_channels, stride),
        }
    }

    pub fn with_mid_ratio(mut self, mid_ratio: usize) -> Self {
        self.mid_ratio = mid_ratio;
        self
    }

    pub fn with_cardinality(mut self, cardinality: usize) -> Self {
        self.cardinality = cardinality;
        self
    }

    pub fn with_channels(mut self, in_channels: usize, out_channels: usize) -> Self {
        self.in_channels = in_channels;
        self.out_channels = out_channels;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    /// Intermediate width of bottleneck and split blocks.
    pub fn mid_channels(&self) -> Result<usize, BuildError> {
        if self.mid_ratio == 0 || !self.out_channels.is_multiple_of(self.mid_ratio) {
            return Err(BuildError::IndivisibleWidth {
                channels: self.out_channels,
                ratio: self.mid_ratio,
            });
        }
        let mid = self.out_channels / self.mid_ratio;
        if self.kind == BlockKind::Split
            && (self.cardinality == 0 || !mid.is_multiple_of(self.cardinality))
        {
            return Err(BuildError::IndivisibleGroups {
                channels: mid,
                groups: self.cardinality,
            });
        }
        Ok(mid)
    }

    fn check(
        &self,
        builder: &GraphBuilder,
        input: NodeId,
        expected: BlockKind,
    ) -> Result<(), BuildError> {
        if self.kind != expected {
            return Err(BuildError::WrongBlockKind {
                expected,
                got: self.kind,
            });
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(BuildError::InvalidStride(self.stride));
        }
        let got = builder.shape(input)?.channels;
        if got != self.in_channels {
            return Err(BuildError::ChannelMismatch {
                expected: self.in_channels,
                got,
            });
        }
        Ok(())
    }
}

/// Conv -> BatchNorm, optionally followed by ReLU.
pub(crate) fn conv_bn(
    b: &mut GraphBuilder,
    x: NodeId,
    conv: ConvAttrs,
    relu: bool,
) -> Result<NodeId, BuildError> {
    let out = conv.out_channels;
    let c = b.add_node(PrimOp::Conv(conv), &[x])?;
    let mut y = b.add_node(PrimOp::batch_norm(out), &[c])?;
    if relu {
        y = b.add_node(PrimOp::Relu, &[y])?;
    }
    Ok(y)
}

fn residual_join(
    b: &mut GraphBuilder,
    input: NodeId,
    main: NodeId,
    spec: &BlockSpec,
) -> Result<NodeId, BuildError> {
    let skip = if spec.needs_projection() {
        conv_bn(
            b,
            input,
            ConvAttrs::new(spec.in_channels, spec.out_channels, 1, spec.stride),
            false,
        )?
    } else {
        input
    };
    let sum = b.add_node(PrimOp::Add, &[main, skip])?;
    Ok(b.add_node(PrimOp::Relu, &[sum])?)
}

pub fn build_basic_block(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &BlockSpec,
) -> Result<NodeId, BuildError> {
    spec.check(b, input, BlockKind::Basic)?;
    b.with_block(|b| {
        let h = conv_bn(
            b,
            input,
            ConvAttrs::new(spec.in_channels, spec.out_channels, 3, spec.stride),
            true,
        )?;
        let main = conv_bn(
            b,
            h,
            ConvAttrs::new(spec.out_channels, spec.out_channels, 3, 1),
            false,
        )?;
        residual_join(b, input, main, spec)
    })
}

fn bottleneck_like(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &BlockSpec,
    groups: usize,
) -> Result<NodeId, BuildError> {
    let mid = spec.mid_channels()?;
    b.with_block(|b| {
        let h = conv_bn(b, input, ConvAttrs::new(spec.in_channels, mid, 1, 1), true)?;
        let h = conv_bn(
            b,
            h,
            ConvAttrs::new(mid, mid, 3, spec.stride).with_groups(groups),
            true,
        )?;
        let main = conv_bn(b, h, ConvAttrs::new(mid, spec.out_channels, 1, 1), false)?;
        residual_join(b, input, main, spec)
    })
}

pub fn build_bottleneck_block(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &BlockSpec,
) -> Result<NodeId, BuildError> {
    spec.check(b, input, BlockKind::Bottleneck)?;
    bottleneck_like(b, input, spec, 1)
}

pub fn build_split_block(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &BlockSpec,
) -> Result<NodeId, BuildError> {
    spec.check(b, input, BlockKind::Split)?;
    bottleneck_like(b, input, spec, spec.cardinality)
}

pub fn build_block(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &BlockSpec,
) -> Result<NodeId, BuildError> {
    match spec.kind {
        BlockKind::Basic => build_basic_block(b, input, spec),
        BlockKind::Bottleneck => build_bottleneck_block(b, input, spec),
        BlockKind::Split => build_split_block(b, input, spec),
    }
}
