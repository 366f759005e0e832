//! Computation-graph intermediate representation.
//!
//! A [`Graph`] is an append-only list of [`Node`]s, each holding one
//! [`PrimOp`] and the ids of its arguments in argument order. Ids are dense
//! and assigned in construction order, so `nodes[i].id == NodeId(i)`.
//! Graphs are produced by a [`GraphBuilder`] and are immutable afterwards.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Epsilon used by every batch normalization the builders emit.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Extents of an NCHW activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    /// A single image (batch 1).
    pub const fn image(channels: usize, height: usize, width: usize) -> Self {
        Self::new(1, channels, height, width)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.batch >= 1 && self.channels >= 1 && self.height >= 1 && self.width >= 1
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn with_spatial(self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self
        }
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    pub fn same_spatial(&self, other: &TensorShape) -> bool {
        self.batch == other.batch && self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvAttrs {
    /// Dense, bias-free convolution with `floor(kernel / 2)` padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            in_channels,
            out_channels,
            has_bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel * self.kernel
    }

    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        window_output_extent(extent, self.kernel, self.stride, self.padding, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpsampleMode {
    FixedBilinear,
    LearnedTransposedConv,
}

/// Depthwise transposed convolution by an integer factor.
///
/// Kernel `2f - f mod 2`, stride `f`, padding `ceil((f - 1) / 2)`, which maps
/// an extent `n` to exactly `n * f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpsampleAttrs {
    pub factor: usize,
    pub channels: usize,
    pub mode: UpsampleMode,
}

impl UpsampleAttrs {
    pub fn kernel(&self) -> usize {
        2 * self.factor - self.factor % 2
    }

    pub fn padding(&self) -> usize {
        self.factor / 2
    }

    /// The forward convolution whose adjoint this upsampling is.
    pub fn as_conv(&self) -> ConvAttrs {
        ConvAttrs {
            kernel: self.kernel(),
            stride: self.factor,
            padding: self.padding(),
            groups: self.channels,
            in_channels: self.channels,
            out_channels: self.channels,
            has_bias: false,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.channels * self.kernel() * self.kernel()
    }
}

/// A primitive operation. Argument order is significant for `Concat` and
/// `Add`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum PrimOp {
    Input {
        shape: TensorShape,
    },
    Conv(ConvAttrs),
    BatchNorm {
        channels: usize,
        epsilon: f64,
    },
    #[serde(rename = "ReLU")]
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    /// Channel-axis concatenation.
    Concat,
    Add,
    Upsample(UpsampleAttrs),
    /// Softmax over the channel axis at every spatial location.
    Softmax,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear,
    Concat,
    Add,
    Upsample,
    Softmax,
    Output,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Input => "Input",
            OpKind::Conv => "Conv",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::Relu => "ReLU",
            OpKind::MaxPool => "MaxPool",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Linear => "Linear",
            OpKind::Concat => "Concat",
            OpKind::Add => "Add",
            OpKind::Upsample => "Upsample",
            OpKind::Softmax => "Softmax",
            OpKind::Output => "Output",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

pub(crate) fn window_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    ceil_mode: bool,
) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || extent == 0 {
        return None;
    }
    if !ceil_mode {
        return (padded >= kernel).then(|| (padded - kernel) / stride + 1);
    }
    // Ceil mode lets the last window overhang, as long as it starts inside
    // the unpadded input or its left padding.
    let numer = (padded + stride - 1).checked_sub(kernel)?;
    let mut out = numer / stride + 1;
    if (out - 1) * stride >= extent + padding {
        out -= 1;
    }
    Some(out)
}

impl PrimOp {
    pub fn kind(&self) -> OpKind {
        match self {
            PrimOp::Input { .. } => OpKind::Input,
            PrimOp::Conv(_) => OpKind::Conv,
            PrimOp::BatchNorm { .. } => OpKind::BatchNorm,
            PrimOp::Relu => OpKind::Relu,
            PrimOp::MaxPool { .. } => OpKind::MaxPool,
            PrimOp::GlobalAvgPool => OpKind::GlobalAvgPool,
            PrimOp::Linear { .. } => OpKind::Linear,
            PrimOp::Concat => OpKind::Concat,
            PrimOp::Add => OpKind::Add,
            PrimOp::Upsample(_) => OpKind::Upsample,
            PrimOp::Softmax => OpKind::Softmax,
            PrimOp::Output => OpKind::Output,
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            PrimOp::Input { .. } => Arity::Exactly(0),
            PrimOp::Concat => Arity::AtLeast(2),
            PrimOp::Add => Arity::Exactly(2),
            _ => Arity::Exactly(1),
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        PrimOp::BatchNorm {
            channels,
            epsilon: BN_EPSILON,
        }
    }

    /// Attribute-level sanity problems, independent of graph context.
    pub fn attr_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            PrimOp::Input { shape } if !shape.is_valid() => {
                out.push(format!("input shape {shape} has a zero extent"));
            }
            PrimOp::Conv(c) => {
                if c.kernel < 1 {
                    out.push("conv kernel must be >= 1".into());
                }
                if c.stride < 1 {
                    out.push("conv stride must be >= 1".into());
                }
                if c.groups < 1
                    || c.in_channels % c.groups.max(1) != 0
                    || c.out_channels % c.groups.max(1) != 0
                {
                    out.push(format!(
                        "conv channels {}->{} not divisible by groups {}",
                        c.in_channels, c.out_channels, c.groups
                    ));
                }
            }
            PrimOp::BatchNorm { channels, epsilon } => {
                if *channels == 0 {
                    out.push("batch norm over zero channels".into());
                }
                if epsilon.is_nan() || *epsilon <= 0.0 {
                    out.push(format!("batch norm epsilon {epsilon} must be positive"));
                }
            }
            PrimOp::MaxPool { kernel, stride, .. } if *kernel < 1 || *stride < 1 => {
                out.push("max pool kernel and stride must be >= 1".into());
            }
            PrimOp::Upsample(u) if u.factor < 2 || u.channels == 0 => {
                out.push(format!(
                    "upsample factor {} over {} channels",
                    u.factor, u.channels
                ));
            }
            _ => {}
        }
        out
    }

    /// Output shape given argument shapes. The error is a human-readable
    /// description of the conflict.
    pub fn infer_shape(&self, args: &[TensorShape]) -> Result<TensorShape, String> {
        if !self.arity().accepts(args.len()) {
            return Err(format!(
                "{} expects {} inputs, got {}",
                self.kind(),
                self.arity(),
                args.len()
            ));
        }
        if let Some(p) = self.attr_problems().into_iter().next() {
            return Err(p);
        }
        let first = args.first().copied();
        let expect_channels = |want: usize, x: TensorShape| -> Result<(), String> {
            if x.channels == want {
                Ok(())
            } else {
                Err(format!(
                    "{} expects {} channels, input has {}",
                    self.kind(),
                    want,
                    x.channels
                ))
            }
        };
        match self {
            PrimOp::Input { shape } => Ok(*shape),
            PrimOp::Conv(c) => {
                let x = first.unwrap();
                expect_channels(c.in_channels, x)?;
                match (c.output_extent(x.height), c.output_extent(x.width)) {
                    (Some(h), Some(w)) => Ok(TensorShape::new(x.batch, c.out_channels, h, w)),
                    _ => Err(format!("conv kernel {} does not fit input {}", c.kernel, x)),
                }
            }
            PrimOp::BatchNorm { channels, .. } => {
                let x = first.unwrap();
                expect_channels(*channels, x)?;
                Ok(x)
            }
            PrimOp::Relu | PrimOp::Softmax | PrimOp::Output => Ok(first.unwrap()),
            PrimOp::MaxPool {
                kernel,
                stride,
                ceil_mode,
            } => {
                let x = first.unwrap();
                let h = window_output_extent(x.height, *kernel, *stride, 0, *ceil_mode);
                let w = window_output_extent(x.width, *kernel, *stride, 0, *ceil_mode);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(x.with_spatial(h, w)),
                    _ => Err(format!("max pool window {kernel} does not fit input {x}")),
                }
            }
            PrimOp::GlobalAvgPool => Ok(first.unwrap().with_spatial(1, 1)),
            PrimOp::Linear {
                in_features,
                out_features,
                ..
            } => {
                let x = first.unwrap();
                expect_channels(*in_features, x)?;
                Ok(x.with_channels(*out_features))
            }
            PrimOp::Concat => {
                let x = first.unwrap();
                if let Some(bad) = args.iter().find(|s| !s.same_spatial(&x)) {
                    return Err(format!("concat operands disagree: {x} vs {bad}"));
                }
                Ok(x.with_channels(args.iter().map(|s| s.channels).sum()))
            }
            PrimOp::Add => {
                if args[0] != args[1] {
                    return Err(format!("add operands differ: {} vs {}", args[0], args[1]));
                }
                Ok(args[0])
            }
            PrimOp::Upsample(u) => {
                let x = first.unwrap();
                expect_channels(u.channels, x)?;
                Ok(x.with_spatial(x.height * u.factor, x.width * u.factor))
            }
        }
    }

    /// Learnable scalars owned by this op. Running statistics are excluded.
    pub fn param_count(&self) -> u64 {
        match self {
            PrimOp::Conv(c) => {
                (c.weight_len() + if c.has_bias { c.out_channels } else { 0 }) as u64
            }
            PrimOp::BatchNorm { channels, .. } => 2 * *channels as u64,
            PrimOp::Linear {
                in_features,
                out_features,
                has_bias,
            } => (in_features * out_features + if *has_bias { *out_features } else { 0 }) as u64,
            PrimOp::Upsample(u) if u.mode == UpsampleMode::LearnedTransposedConv => {
                u.weight_len() as u64
            }
            _ => 0,
        }
    }

    /// Fused multiply-adds for a single batch item, given the op's output shape.
    ///
    /// Only convolutions, transposed convolutions and linear maps count.
    pub fn fmas(&self, output: &TensorShape) -> u64 {
        let spatial = (output.height * output.width) as u64;
        match self {
            PrimOp::Conv(c) => {
                spatial * (c.out_channels * c.in_per_group() * c.kernel * c.kernel) as u64
            }
            PrimOp::Linear {
                in_features,
                out_features,
                ..
            } => spatial * (in_features * out_features) as u64,
            // Each input pixel scatters one k x k kernel per channel.
            PrimOp::Upsample(u) => {
                spatial / (u.factor * u.factor) as u64
                    * (u.channels * u.kernel() * u.kernel()) as u64
            }
            _ => 0,
        }
    }
}

/// Resolution group a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Backbone stage 1..=6.
    Backbone(u8),
    Decoder,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Backbone(s) => write!(f, "stage{s}"),
            Stage::Decoder => f.write_str("decoder"),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Stage::Backbone(n) => s.serialize_u8(*n),
            Stage::Decoder => s.serialize_str("decoder"),
        }
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) if (1..=6).contains(&n) => Ok(Stage::Backbone(n)),
            Raw::Name(s) if s == "decoder" => Ok(Stage::Decoder),
            Raw::Num(n) => Err(serde::de::Error::custom(format!(
                "stage {n} out of range 1..=6"
            ))),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown stage {s:?}"))),
        }
    }
}

/// Membership of a node in a hierarchical aggregation, with the depth the
/// builder used for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HdaTag {
    pub id: u32,
    pub depth: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeTag {
    pub stage: Option<Stage>,
    pub block: Option<u32>,
    pub agg_node: Option<u32>,
    pub hda: Option<HdaTag>,
}

impl NodeTag {
    pub fn is_empty(&self) -> bool {
        *self == NodeTag::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: PrimOp,
    pub inputs: Vec<NodeId>,
    pub tag: NodeTag,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("node input {input} does not exist")]
    UnknownInput { input: NodeId },
    #[error("{kind} expects {expected} inputs, got {got}")]
    ArityMismatch {
        kind: OpKind,
        expected: Arity,
        got: usize,
    },
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("shape conflict at {node}: {message}")]
    ShapeConflict { node: NodeId, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    UnknownInput {
        node: NodeId,
        input: NodeId,
    },
    ArityViolation {
        node: NodeId,
        kind: OpKind,
        got: usize,
    },
    InvalidAttrs {
        node: NodeId,
        message: String,
    },
    Cycle,
    OrphanNode {
        node: NodeId,
    },
    /// An output that no tagged block feeds, in a graph that has blocks.
    UnfedOutput {
        node: NodeId,
    },
    MisregisteredEndpoint {
        node: NodeId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownInput { node, input } => {
                write!(f, "UnknownInput: {node} reads missing {input}")
            }
            Violation::ArityViolation { node, kind, got } => {
                write!(f, "ArityViolation: {node} ({kind}) has {got} inputs")
            }
            Violation::InvalidAttrs { node, message } => {
                write!(f, "InvalidAttrs: {node}: {message}")
            }
            Violation::Cycle => f.write_str("Cycle: no topological order exists"),
            Violation::OrphanNode { node } => {
                write!(f, "OrphanNode: {node} is unreachable from every input")
            }
            Violation::UnfedOutput { node } => {
                write!(f, "UnfedOutput: {node} is not fed by any block")
            }
            Violation::MisregisteredEndpoint { node } => {
                write!(
                    f,
                    "MisregisteredEndpoint: {node} input/output lists disagree with node kinds"
                )
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    name: Option<String>,
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

impl Graph {
    /// Assembles a graph without checking any invariant. Nodes are re-indexed
    /// by position; callers that care run [`Graph::validate`].
    pub fn from_parts(
        name: Option<String>,
        nodes: Vec<Node>,
        inputs: Vec<NodeId>,
        outputs: Vec<NodeId>,
    ) -> Self {
        Self {
            name,
            nodes,
            inputs,
            outputs,
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    /// Declared shape of the first input node.
    pub fn input_shape(&self) -> Option<TensorShape> {
        self.inputs
            .first()
            .and_then(|&id| match self.node(id).map(|n| &n.op) {
                Some(PrimOp::Input { shape }) => Some(*shape),
                _ => None,
            })
    }

    /// Consumers of each node, in ascending id order, one entry per edge.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if let Some(slot) = out.get_mut(i.0) {
                    slot.push(n.id);
                }
            }
        }
        out
    }

    /// Kahn's algorithm with ties broken by the smallest id.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, IrError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for node in &self.nodes {
            for &i in &node.inputs {
                if i.0 >= n {
                    return Err(IrError::UnknownInput { input: i });
                }
                indegree[node.id.0] += 1;
            }
        }
        let consumers = self.consumers();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for c in &consumers[i] {
                indegree[c.0] -= 1;
                if indegree[c.0] == 0 {
                    ready.push(Reverse(c.0));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err(IrError::CycleDetected)
        }
    }

    /// Checks every structural invariant; never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.nodes.len();
        for node in &self.nodes {
            for &i in &node.inputs {
                if i.0 >= n {
                    violations.push(Violation::UnknownInput {
                        node: node.id,
                        input: i,
                    });
                }
            }
            if !node.op.arity().accepts(node.inputs.len()) {
                violations.push(Violation::ArityViolation {
                    node: node.id,
                    kind: node.op.kind(),
                    got: node.inputs.len(),
                });
            }
            for message in node.op.attr_problems() {
                violations.push(Violation::InvalidAttrs {
                    node: node.id,
                    message,
                });
            }
        }
        let declared_inputs: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.op.kind() == OpKind::Input)
            .map(|n| n.id)
            .collect();
        let declared_outputs: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.op.kind() == OpKind::Output)
            .map(|n| n.id)
            .collect();
        for id in self.inputs.iter().chain(&self.outputs) {
            if id.0 >= n {
                violations.push(Violation::MisregisteredEndpoint { node: *id });
            }
        }
        if declared_inputs != self.inputs {
            for id in declared_inputs.iter().filter(|i| !self.inputs.contains(i)) {
                violations.push(Violation::MisregisteredEndpoint { node: *id });
            }
        }
        if declared_outputs != self.outputs {
            for id in declared_outputs
                .iter()
                .filter(|i| !self.outputs.contains(i))
            {
                violations.push(Violation::MisregisteredEndpoint { node: *id });
            }
        }
        if self.topo_order().is_err()
            && !violations
                .iter()
                .any(|v| matches!(v, Violation::UnknownInput { .. }))
        {
            violations.push(Violation::Cycle);
        }

        let consumers = self.consumers();
        let reached = forward_reach(&consumers, self.inputs.iter().copied().filter(|i| i.0 < n));
        for node in &self.nodes {
            if !reached[node.id.0] {
                violations.push(Violation::OrphanNode { node: node.id });
            }
        }

        if self.nodes.iter().any(|n| n.tag.block.is_some()) {
            let fed = forward_reach(
                &consumers,
                self.nodes
                    .iter()
                    .filter(|n| n.tag.block.is_some())
                    .map(|n| n.id),
            );
            for &o in self.outputs.iter().filter(|o| o.0 < n) {
                if !fed[o.0] {
                    violations.push(Violation::UnfedOutput { node: o });
                }
            }
        }
        ValidationReport { violations }
    }
}

fn forward_reach(consumers: &[Vec<NodeId>], seeds: impl IntoIterator<Item = NodeId>) -> Vec<bool> {
    let mut seen = vec![false; consumers.len()];
    let mut queue: VecDeque<NodeId> = VecDeque::new();
    for s in seeds {
        if !seen[s.0] {
            seen[s.0] = true;
            queue.push_back(s);
        }
    }
    while let Some(id) = queue.pop_front() {
        for &c in &consumers[id.0] {
            if !seen[c.0] {
                seen[c.0] = true;
                queue.push_back(c);
            }
        }
    }
    seen
}

/// Single-writer graph construction.
///
/// Shapes are inferred eagerly as nodes are added so the higher-level
/// builders can check channel and spatial agreement; a node whose shape
/// cannot be inferred is still added and reports its conflict through
/// [`GraphBuilder::shape`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    name: Option<String>,
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    shapes: Vec<Result<TensorShape, String>>,
    scope: NodeTag,
    next_block: u32,
    next_agg: u32,
    next_hda: u32,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(&mut self, op: PrimOp, inputs: &[NodeId]) -> Result<NodeId, IrError> {
        if let Some(&bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(IrError::UnknownInput { input: bad });
        }
        if !op.arity().accepts(inputs.len()) {
            return Err(IrError::ArityMismatch {
                kind: op.kind(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        let id = NodeId(self.nodes.len());
        let shape = inputs
            .iter()
            .map(|i| {
                self.shapes[i.0]
                    .clone()
                    .map_err(|_| format!("input {i} has no shape"))
            })
            .collect::<Result<Vec<_>, _>>()
            .and_then(|args| op.infer_shape(&args));
        match op.kind() {
            OpKind::Input => self.inputs.push(id),
            OpKind::Output => self.outputs.push(id),
            _ => {}
        }
        self.shapes.push(shape);
        self.nodes.push(Node {
            id,
            op,
            inputs: inputs.to_vec(),
            tag: self.scope,
        });
        Ok(id)
    }

    pub fn input(&mut self, shape: TensorShape) -> NodeId {
        self.add_node(PrimOp::Input { shape }, &[])
            .expect("input nodes take no arguments")
    }

    pub fn output(&mut self, of: NodeId) -> Result<NodeId, IrError> {
        self.add_node(PrimOp::Output, &[of])
    }

    pub fn shape(&self, id: NodeId) -> Result<TensorShape, IrError> {
        match self.shapes.get(id.0) {
            None => Err(IrError::UnknownInput { input: id }),
            Some(Ok(s)) => Ok(*s),
            Some(Err(message)) => Err(IrError::ShapeConflict {
                node: id,
                message: message.clone(),
            }),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn set_stage(&mut self, stage: Option<Stage>) {
        self.scope.stage = stage;
    }

    pub fn stage(&self) -> Option<Stage> {
        self.scope.stage
    }

    /// Runs `f` with every node it adds tagged by a fresh block id.
    pub fn with_block<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.scope.block;
        self.scope.block = Some(self.next_block);
        self.next_block += 1;
        let r = f(self);
        self.scope.block = saved;
        r
    }

    /// Runs `f` with every node it adds tagged by a fresh aggregation-node id.
    pub fn with_agg_node<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.scope.agg_node;
        self.scope.agg_node = Some(self.next_agg);
        self.next_agg += 1;
        let r = f(self);
        self.scope.agg_node = saved;
        r
    }

    /// Runs `f` inside a fresh hierarchical-aggregation scope of the given depth.
    pub fn with_hda<R>(&mut self, depth: u8, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.scope.hda;
        self.scope.hda = Some(HdaTag {
            id: self.next_hda,
            depth,
        });
        self.next_hda += 1;
        let r = f(self);
        self.scope.hda = saved;
        r
    }

    /// The current tag scope, applied to nodes added from now on.
    pub fn scope(&self) -> NodeTag {
        self.scope
    }

    pub fn finish(self) -> Graph {
        Graph {
            name: self.name,
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}
