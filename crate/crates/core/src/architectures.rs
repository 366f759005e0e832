//! The nine catalog networks and the builders that materialize them.
//!
//! Stage 1 keeps the input resolution (7x7 then 3x3 convolution), stage 2
//! halves it with a strided 3x3 convolution, and stages 3-6 each open with a
//! 2x2 max pool followed by a hierarchical aggregation. The pooled stage
//! input, width-matched by a 1x1 projection when needed, joins each stage's
//! root as an extra argument, which is how iterative aggregation across
//! stages shares the hierarchical roots.

use crate::aggregation::{build_hda, build_ida, AggNodeSpec, HdaSpec};
use crate::analysis::count_params;
use crate::blocks::{
    conv_bn, BlockKind, BlockSpec, BOTTLENECK_MID_RATIO, DEFAULT_CARDINALITY, SPLIT_MID_RATIO,
};
use crate::error::BuildError;
use crate::ir::{
    ConvAttrs, Graph, GraphBuilder, NodeId, PrimOp, Stage, TensorShape, UpsampleAttrs, UpsampleMode,
};

/// Catalog names in canonical order.
pub const ARCHITECTURE_NAMES: [&str; 9] = [
    "DLA-34",
    "DLA-46-C",
    "DLA-60",
    "DLA-102",
    "DLA-169",
    "DLA-X-46-C",
    "DLA-X-60-C",
    "DLA-X-60",
    "DLA-X-102",
];

/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub block_kind: BlockKind,
    pub stage_channels: [usize; 6],
    /// Hierarchy depth of stages 3 through 6.
    pub stage_depths: [usize; 4],
    pub residual_nodes: bool,
    pub cardinality: usize,
    pub mid_ratio: usize,
}

pub fn arch_spec(name: &str) -> Result<ArchSpec, BuildError> {
    use BlockKind::*;
    let (kind, channels, depths) = match name {
        "DLA-34" => (Basic, [16, 32, 64, 128, 256, 512], [1, 2, 2, 1]),
        "DLA-46-C" => (Bottleneck, [16, 32, 64, 64, 128, 256], [1, 2, 2, 1]),
        "DLA-60" => (Bottleneck, [16, 32, 128, 256, 512, 1024], [1, 2, 3, 1]),
        "DLA-102" => (Bottleneck, [16, 32, 128, 256, 512, 1024], [1, 3, 4, 1]),
        "DLA-169" => (Bottleneck, [16, 32, 128, 256, 512, 1024], [2, 3, 5, 1]),
        "DLA-X-46-C" => (Split, [16, 32, 64, 64, 128, 256], [1, 2, 2, 1]),
        "DLA-X-60-C" => (Split, [16, 32, 64, 64, 128, 256], [1, 2, 3, 1]),
        "DLA-X-60" => (Split, [16, 32, 128, 256, 512, 1024], [1, 2, 3, 1]),
        "DLA-X-102" => (Split, [16, 32, 128, 256, 512, 1024], [1, 3, 4, 1]),
        other => return Err(BuildError::UnknownArchitecture(other.to_string())),
    };
    let (cardinality, mid_ratio) = match kind {
        Basic => (1, 1),
        Bottleneck => (1, BOTTLENECK_MID_RATIO),
        Split => (DEFAULT_CARDINALITY, SPLIT_MID_RATIO),
    };
    Ok(ArchSpec {
        name: name.to_string(),
        block_kind: kind,
        stage_channels: channels,
        stage_depths: depths,
        residual_nodes: matches!(name, "DLA-102" | "DLA-169" | "DLA-X-102"),
        cardinality,
        mid_ratio,
    })
}

impl ArchSpec {
    pub fn block_template(&self, in_channels: usize, out_channels: usize) -> BlockSpec {
        BlockSpec::of_kind(self.block_kind, in_channels, out_channels, 1)
            .with_cardinality(self.cardinality)
            .with_mid_ratio(self.mid_ratio)
    }

    /// Same topology with every width clamped to `cap`. Split cardinality
    /// shrinks to the largest value that still divides every intermediate
    /// width.
    pub fn width_capped(&self, cap: usize) -> ArchSpec {
        let mut out = self.clone();
        for c in &mut out.stage_channels {
            *c = (*c).min(cap).max(1);
        }
        if out.block_kind == BlockKind::Split {
            out.cardinality = out.stage_channels[2..]
                .iter()
                .map(|&c| (c / out.mid_ratio).max(1))
                .fold(self.cardinality, gcd);
        }
        out
    }

    fn check(&self) -> Result<(), BuildError> {
        for pair in self.stage_channels[1..].windows(2) {
            if pair[1] < pair[0] {
                return Err(BuildError::ChannelMismatch {
                    expected: pair[0],
                    got: pair[1],
                });
            }
        }
        if let Some(&d) = self.stage_depths.iter().find(|&&d| d == 0) {
            return Err(BuildError::DepthOutOfRange(d));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseHeadSpec {
    pub project_channels: usize,
    pub node_kernel: usize,
    pub num_classes: usize,
    pub output_stride: usize,
}

impl DenseHeadSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            project_channels: 32,
            node_kernel: 3,
            num_classes,
            output_stride: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Reject inputs whose extents are not multiples of the backbone stride.
    /// Toy builds turn this off; odd extents then round up at every
    /// downsampling step.
    pub require_divisible: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            require_divisible: true,
        }
    }
}

fn check_input(input: TensorShape, opts: &BuildOptions) -> Result<(), BuildError> {
    if !input.is_valid() {
        return Err(BuildError::InvalidInputShape(input));
    }
    if input.channels != 3 {
        return Err(BuildError::InputChannels(input.channels));
    }
    if opts.require_divisible
        && (!input.height.is_multiple_of(BACKBONE_STRIDE)
            || !input.width.is_multiple_of(BACKBONE_STRIDE))
    {
        return Err(BuildError::IndivisibleInput {
            height: input.height,
            width: input.width,
            multiple: BACKBONE_STRIDE,
        });
    }
    Ok(())
}

/// Builds stages 1-6 and returns each stage's output.
fn build_backbone(
    b: &mut GraphBuilder,
    spec: &ArchSpec,
    x: NodeId,
) -> Result<[NodeId; 6], BuildError> {
    spec.check()?;
    let ch = spec.stage_channels;
    let mut stages = [x; 6];

    b.set_stage(Some(Stage::Backbone(1)));
    let h = conv_bn(b, x, ConvAttrs::new(3, ch[0], 7, 1), true)?;
    stages[0] = conv_bn(b, h, ConvAttrs::new(ch[0], ch[0], 3, 1), true)?;

    b.set_stage(Some(Stage::Backbone(2)));
    stages[1] = conv_bn(b, stages[0], ConvAttrs::new(ch[0], ch[1], 3, 2), true)?;

    for s in 2..6 {
        b.set_stage(Some(Stage::Backbone(s as u8 + 1)));
        let (cin, cout) = (ch[s - 1], ch[s]);
        let pooled = b.add_node(
            PrimOp::MaxPool {
                kernel: 2,
                stride: 2,
                ceil_mode: true,
            },
            &[stages[s - 1]],
        )?;
        let carried = if cin != cout {
            conv_bn(b, pooled, ConvAttrs::new(cin, cout, 1, 1), false)?
        } else {
            pooled
        };
        let hda = HdaSpec::new(spec.stage_depths[s - 2], spec.block_template(cin, cout))
            .with_extra_root_inputs(vec![carried])
            .with_residual_nodes(spec.residual_nodes);
        stages[s] = build_hda(b, pooled, &hda)?;
    }
    Ok(stages)
}

pub fn build_classifier(
    spec: &ArchSpec,
    num_classes: usize,
    input: TensorShape,
) -> Result<Graph, BuildError> {
    build_classifier_with(spec, num_classes, input, &BuildOptions::default())
}

/// Backbone, then global average pool, linear scoring and softmax.
pub fn build_classifier_with(
    spec: &ArchSpec,
    num_classes: usize,
    input: TensorShape,
    opts: &BuildOptions,
) -> Result<Graph, BuildError> {
    check_input(input, opts)?;
    let mut b = GraphBuilder::named(spec.name.clone());
    let x = b.input(input);
    let stages = build_backbone(&mut b, spec, x)?;
    b.set_stage(None);
    let pooled = b.add_node(PrimOp::GlobalAvgPool, &[stages[5]])?;
    let scores = b.add_node(
        PrimOp::Linear {
            in_features: spec.stage_channels[5],
            out_features: num_classes,
            has_bias: true,
        },
        &[pooled],
    )?;
    let probs = b.add_node(PrimOp::Softmax, &[scores])?;
    b.output(probs)?;
    Ok(b.finish())
}

pub fn build_dense_decoder(
    spec: &ArchSpec,
    head: &DenseHeadSpec,
    input: TensorShape,
) -> Result<Graph, BuildError> {
    build_dense_decoder_with(spec, head, input, &BuildOptions::default())
}

/// Backbone, then stages 2-6 projected to `head.project_channels`, upsampled
/// to stage-2 resolution by bilinear-initialized transposed convolutions,
/// and fused shallow-to-deep by iterative aggregation. Scores come out at
/// half the input resolution.
pub fn build_dense_decoder_with(
    spec: &ArchSpec,
    head: &DenseHeadSpec,
    input: TensorShape,
    opts: &BuildOptions,
) -> Result<Graph, BuildError> {
    check_input(input, opts)?;
    if head.output_stride != 2 {
        return Err(BuildError::IndivisibleInput {
            height: input.height,
            width: input.width,
            multiple: head.output_stride,
        });
    }
    let mut b = GraphBuilder::named(spec.name.clone());
    let x = b.input(input);
    let stages = build_backbone(&mut b, spec, x)?;

    b.set_stage(Some(Stage::Decoder));
    let width = head.project_channels;
    let mut features = Vec::with_capacity(5);
    for (s, &out) in stages.iter().enumerate().skip(1) {
        let c = spec.stage_channels[s];
        let mut f = conv_bn(&mut b, out, ConvAttrs::new(c, width, 1, 1), true)?;
        if s >= 2 {
            let up = UpsampleAttrs {
                factor: 1 << (s - 1),
                channels: width,
                mode: UpsampleMode::LearnedTransposedConv,
            };
            f = b.add_node(PrimOp::Upsample(up), &[f])?;
        }
        features.push(f);
    }
    let fused = build_ida(&mut b, &features, |step| {
        AggNodeSpec::new(vec![step.left_channels, step.right_channels], width)
            .with_kernel(head.node_kernel)
    })?;
    let scores = b.add_node(
        PrimOp::Conv(ConvAttrs::new(width, head.num_classes, 1, 1).with_bias()),
        &[fused],
    )?;
    let probs = b.add_node(PrimOp::Softmax, &[scores])?;
    b.output(probs)?;
    Ok(b.finish())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSummary {
    pub name: &'static str,
    pub block_kind: BlockKind,
    pub params: u64,
}

/// Catalog in canonical order with parameter counts at 1000 classes.
pub fn list_architectures() -> Vec<ArchSummary> {
    ARCHITECTURE_NAMES
        .iter()
        .map(|&name| {
            let spec = arch_spec(name).expect("catalog names resolve");
            let g = build_classifier(&spec, 1000, TensorShape::image(3, 224, 224))
                .expect("catalog builds");
            ArchSummary {
                name,
                block_kind: spec.block_kind,
                params: count_params(&g),
            }
        })
        .collect()
}
