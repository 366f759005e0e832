//! Aggregation nodes and the two aggregation schemes built from them.
//!
//! An aggregation node concatenates its inputs along channels and applies a
//! single convolution, batch norm and ReLU, which is one linear map
//! `sum_i W_i x_i` over the inputs. A residual node adds one of its inputs
//! (the last backbone input) after batch norm and before the ReLU.
//!
//! Iterative aggregation left-folds binary nodes over a shallow-to-deep
//! feature list. Hierarchical aggregation of depth `n` is the merged,
//! rerouted tree
//!
//! ```text
//! T_n(x)   = N(R_{n-1}, ..., R_1, L_1, L_2)
//! L_2      = B(L_1),  L_1 = B(R_1)
//! R_{n-1}  = T_{n-1}(x),  R_m = T_m(R_{m+1}) for m < n - 1
//! ```
//!
//! with `R_1` the identity when `n = 1`, so `T_1(x) = N(B(x), B(B(x)))`.

use crate::blocks::{build_block, BlockSpec};
use crate::error::BuildError;
use crate::ir::{ConvAttrs, GraphBuilder, NodeId, PrimOp};

pub const MAX_HDA_DEPTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggNodeSpec {
    pub input_channels: Vec<usize>,
    pub out_channels: usize,
    /// 1 for classification networks, 3 in the dense decoder.
    pub kernel: usize,
    pub residual: bool,
    /// Position of the input added back when `residual` is set; defaults to
    /// the last input.
    pub residual_input: Option<usize>,
}

impl AggNodeSpec {
    pub fn new(input_channels: Vec<usize>, out_channels: usize) -> Self {
        Self {
            input_channels,
            out_channels,
            kernel: 1,
            residual: false,
            residual_input: None,
        }
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_residual_input(mut self, index: usize) -> Self {
        self.residual_input = Some(index);
        self
    }

    pub fn residual_index(&self) -> usize {
        self.residual_input
            .unwrap_or(self.input_channels.len().saturating_sub(1))
    }
}

/// Concat -> Conv k x k -> BatchNorm [-> Add residual] -> ReLU.
pub fn build_aggregation_node(
    b: &mut GraphBuilder,
    inputs: &[NodeId],
    spec: &AggNodeSpec,
) -> Result<NodeId, BuildError> {
    if inputs.len() < 2 {
        return Err(BuildError::TooFewAggInputs(inputs.len()));
    }
    if inputs.len() != spec.input_channels.len() {
        return Err(BuildError::InputCountMismatch {
            expected: spec.input_channels.len(),
            got: inputs.len(),
        });
    }
    if !matches!(spec.kernel, 1 | 3) {
        return Err(BuildError::InvalidAggKernel(spec.kernel));
    }
    let shapes = inputs
        .iter()
        .map(|&i| b.shape(i))
        .collect::<Result<Vec<_>, _>>()?;
    for (shape, &want) in shapes.iter().zip(&spec.input_channels) {
        if shape.channels != want {
            return Err(BuildError::ChannelMismatch {
                expected: want,
                got: shape.channels,
            });
        }
    }
    if let Some(other) = shapes.iter().find(|s| !s.same_spatial(&shapes[0])) {
        return Err(BuildError::SpatialMismatch {
            first: shapes[0],
            other: *other,
        });
    }
    let residual = if spec.residual {
        let idx = spec.residual_index();
        let channels = shapes.get(idx).map(|s| s.channels).unwrap_or(0);
        if channels != spec.out_channels {
            return Err(BuildError::ResidualChannelMismatch {
                residual: channels,
                out: spec.out_channels,
            });
        }
        Some(inputs[idx])
    } else {
        None
    };

    let total: usize = spec.input_channels.iter().sum();
    b.with_agg_node(|b| {
        let cat = b.add_node(PrimOp::Concat, inputs)?;
        let conv = b.add_node(
            PrimOp::Conv(ConvAttrs::new(total, spec.out_channels, spec.kernel, 1)),
            &[cat],
        )?;
        let mut y = b.add_node(PrimOp::batch_norm(spec.out_channels), &[conv])?;
        if let Some(r) = residual {
            y = b.add_node(PrimOp::Add, &[y, r])?;
        }
        Ok(b.add_node(PrimOp::Relu, &[y])?)
    })
}

/// One fold step of iterative aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdaStep {
    pub index: usize,
    pub left_channels: usize,
    pub right_channels: usize,
}

/// `I(x_1) = x_1`, `I(x_1, x_2, ..., x_n) = I(N(x_1, x_2), x_3, ..., x_n)`.
pub fn build_ida(
    b: &mut GraphBuilder,
    features: &[NodeId],
    mut node_spec: impl FnMut(IdaStep) -> AggNodeSpec,
) -> Result<NodeId, BuildError> {
    let (&first, rest) = features.split_first().ok_or(BuildError::EmptyInput)?;
    let mut acc = first;
    for (index, &next) in rest.iter().enumerate() {
        let step = IdaStep {
            index,
            left_channels: b.shape(acc)?.channels,
            right_channels: b.shape(next)?.channels,
        };
        acc = build_aggregation_node(b, &[acc, next], &node_spec(step))?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdaSpec {
    pub depth: usize,
    /// Template for every block; its input width and stride apply to the
    /// first block only.
    pub block: BlockSpec,
    pub out_channels: usize,
    /// Appended to the root's arguments after `L_2`.
    pub extra_root_inputs: Vec<NodeId>,
    pub residual_nodes: bool,
    pub node_kernel: usize,
}

impl HdaSpec {
    pub fn new(depth: usize, block: BlockSpec) -> Self {
        Self {
            depth,
            out_channels: block.out_channels,
            block,
            extra_root_inputs: Vec::new(),
            residual_nodes: false,
            node_kernel: 1,
        }
    }

    pub fn with_extra_root_inputs(mut self, extras: Vec<NodeId>) -> Self {
        self.extra_root_inputs = extras;
        self
    }

    pub fn with_residual_nodes(mut self, residual: bool) -> Self {
        self.residual_nodes = residual;
        self
    }
}

struct TreeBuilder<'a> {
    spec: &'a HdaSpec,
    first_block_pending: bool,
}

impl TreeBuilder<'_> {
    fn block(&mut self, b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, BuildError> {
        let out = self.spec.out_channels;
        let spec = if std::mem::take(&mut self.first_block_pending) {
            self.spec.block
        } else {
            self.spec.block.with_channels(out, out).with_stride(1)
        };
        build_block(b, x, &spec)
    }

    fn tree(
        &mut self,
        b: &mut GraphBuilder,
        x: NodeId,
        level: usize,
        extras: &[NodeId],
    ) -> Result<NodeId, BuildError> {
        let mut args = Vec::with_capacity(level + 1 + extras.len());
        let mut carried = x;
        for m in (1..level).rev() {
            carried = self.tree(b, carried, m, &[])?;
            args.push(carried);
        }
        let l1 = self.block(b, carried)?;
        let l2 = self.block(b, l1)?;
        args.push(l1);
        args.push(l2);
        let residual_at = args.len() - 1;
        args.extend_from_slice(extras);
        let input_channels = args
            .iter()
            .map(|&a| b.shape(a).map(|s| s.channels))
            .collect::<Result<Vec<_>, _>>()?;
        let node = AggNodeSpec::new(input_channels, self.spec.out_channels)
            .with_kernel(self.spec.node_kernel)
            .with_residual(self.spec.residual_nodes)
            .with_residual_input(residual_at);
        build_aggregation_node(b, &args, &node)
    }
}

/// Builds `T_n(input)`; returns the root aggregation node's output.
pub fn build_hda(
    b: &mut GraphBuilder,
    input: NodeId,
    spec: &HdaSpec,
) -> Result<NodeId, BuildError> {
    if !(1..=MAX_HDA_DEPTH).contains(&spec.depth) {
        return Err(BuildError::DepthOutOfRange(spec.depth));
    }
    if spec.block.out_channels != spec.out_channels {
        return Err(BuildError::ChannelMismatch {
            expected: spec.out_channels,
            got: spec.block.out_channels,
        });
    }
    let mut tb = TreeBuilder {
        spec,
        first_block_pending: true,
    };
    b.with_hda(spec.depth as u8, |b| {
        tb.tree(b, input, spec.depth, &spec.extra_root_inputs)
    })
}

/// Closed-form structure of `T_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HdaStructure {
    pub blocks: usize,
    pub agg_nodes: usize,
    pub root_fanin: usize,
    /// Aggregation nodes traversed on the shortest path from the farthest
    /// block output to the root, root included.
    pub max_path_blocks: usize,
}

pub fn structure_of_hda(depth: usize) -> Result<HdaStructure, BuildError> {
    if !(1..=MAX_HDA_DEPTH).contains(&depth) {
        return Err(BuildError::DepthOutOfRange(depth));
    }
    Ok(HdaStructure {
        blocks: 1 << depth,
        agg_nodes: 1 << (depth - 1),
        root_fanin: depth + 1,
        max_path_blocks: depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::count_params;
    use crate::ir::{Graph, OpKind, TensorShape};
    use std::collections::BTreeSet;

    fn inputs(b: &mut GraphBuilder, channels: &[usize], hw: usize) -> Vec<NodeId> {
        channels
            .iter()
            .map(|&c| b.input(TensorShape::image(c, hw, hw)))
            .collect()
    }

    fn agg_ids(g: &Graph) -> BTreeSet<u32> {
        g.nodes().iter().filter_map(|n| n.tag.agg_node).collect()
    }

    fn block_ids(g: &Graph) -> BTreeSet<u32> {
        g.nodes().iter().filter_map(|n| n.tag.block).collect()
    }

    fn concat_of(g: &Graph, agg: u32) -> &crate::ir::Node {
        g.nodes()
            .iter()
            .find(|n| n.tag.agg_node == Some(agg) && n.op.kind() == OpKind::Concat)
            .unwrap()
    }

    #[test]
    fn binary_node_params() {
        let mut b = GraphBuilder::new();
        let xs = inputs(&mut b, &[64, 64], 4);
        build_aggregation_node(&mut b, &xs, &AggNodeSpec::new(vec![64, 64], 64)).unwrap();
        let g = b.finish();
        let conv: u64 = g
            .nodes()
            .iter()
            .filter(|n| n.op.kind() == OpKind::Conv)
            .map(|n| n.op.param_count())
            .sum();
        assert_eq!(conv, 8_192);
        assert_eq!(count_params(&g), 8_192 + 128);
    }

    #[test]
    fn residual_node_adds_last_input() {
        let mut b = GraphBuilder::new();
        let xs = inputs(&mut b, &[256, 256, 256], 2);
        let spec = AggNodeSpec::new(vec![256; 3], 256).with_residual(true);
        build_aggregation_node(&mut b, &xs, &spec).unwrap();
        let g = b.finish();
        let add = g
            .nodes()
            .iter()
            .find(|n| n.op.kind() == OpKind::Add)
            .unwrap();
        assert_eq!(add.inputs[1], xs[2]);
        assert_eq!(g.node(add.inputs[0]).unwrap().op.kind(), OpKind::BatchNorm);
    }

    #[test]
    fn residual_width_must_match_output() {
        let mut b = GraphBuilder::new();
        let xs = inputs(&mut b, &[256, 256, 128], 2);
        let spec = AggNodeSpec::new(vec![256, 256, 128], 256).with_residual(true);
        assert_eq!(
            build_aggregation_node(&mut b, &xs, &spec).unwrap_err(),
            BuildError::ResidualChannelMismatch {
                residual: 128,
                out: 256
            }
        );
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let mut b = GraphBuilder::new();
        let a = b.input(TensorShape::image(8, 4, 4));
        let c = b.input(TensorShape::image(8, 2, 2));
        let err =
            build_aggregation_node(&mut b, &[a, c], &AggNodeSpec::new(vec![8, 8], 8)).unwrap_err();
        assert!(matches!(err, BuildError::SpatialMismatch { .. }));
        let err = build_aggregation_node(&mut b, &[a], &AggNodeSpec::new(vec![8], 8)).unwrap_err();
        assert_eq!(err, BuildError::TooFewAggInputs(1));
    }

    #[test]
    fn ida_single_feature_is_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::image(8, 4, 4));
        let before = b.len();
        let out = build_ida(&mut b, &[x], |_| unreachable!()).unwrap();
        assert_eq!(out, x);
        assert_eq!(b.len(), before);
    }

    #[test]
    fn ida_folds_left() {
        let mut b = GraphBuilder::new();
        let xs = inputs(&mut b, &[8, 8, 8], 4);
        let out = build_ida(&mut b, &xs, |s| {
            AggNodeSpec::new(vec![s.left_channels, s.right_channels], 8)
        })
        .unwrap();
        let g = b.finish();
        assert_eq!(agg_ids(&g).len(), 2);
        let first_out = g
            .nodes()
            .iter()
            .rfind(|n| n.tag.agg_node == Some(0))
            .unwrap()
            .id;
        assert_eq!(concat_of(&g, 0).inputs, vec![xs[0], xs[1]]);
        assert_eq!(concat_of(&g, 1).inputs, vec![first_out, xs[2]]);
        assert_eq!(g.node(out).unwrap().tag.agg_node, Some(1));
    }

    #[test]
    fn ida_rejects_empty() {
        let mut b = GraphBuilder::new();
        assert_eq!(
            build_ida(&mut b, &[], |_| unreachable!()).unwrap_err(),
            BuildError::EmptyInput
        );
    }

    fn hda(depth: usize, extras: usize) -> (Graph, NodeId, Vec<NodeId>) {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::image(8, 4, 4));
        let ex: Vec<NodeId> = (0..extras)
            .map(|_| b.add_node(PrimOp::Relu, &[x]).unwrap())
            .collect();
        let spec =
            HdaSpec::new(depth, BlockSpec::basic(8, 8, 1)).with_extra_root_inputs(ex.clone());
        let root = build_hda(&mut b, x, &spec).unwrap();
        (b.finish(), root, ex)
    }

    fn root_fanin(g: &Graph, root: NodeId) -> usize {
        concat_of(g, g.node(root).unwrap().tag.agg_node.unwrap())
            .inputs
            .len()
    }

    #[test]
    fn depth_one_tree() {
        let (g, root, _) = hda(1, 0);
        assert_eq!(block_ids(&g).len(), 2);
        assert_eq!(agg_ids(&g).len(), 1);
        let cat = concat_of(&g, 0);
        // (B(x), B(B(x))): both arguments are block outputs, second fed by first.
        let first = g.node(cat.inputs[0]).unwrap();
        let second = g.node(cat.inputs[1]).unwrap();
        assert_eq!((first.tag.block, second.tag.block), (Some(0), Some(1)));
        assert_eq!(root_fanin(&g, root), 2);
    }

    #[test]
    fn depth_three_counts() {
        let (g, root, _) = hda(3, 0);
        assert_eq!(block_ids(&g).len(), 8);
        assert_eq!(agg_ids(&g).len(), 4);
        assert_eq!(root_fanin(&g, root), 4);
    }

    #[test]
    fn extra_root_input_is_appended() {
        let (g, root, ex) = hda(2, 1);
        assert_eq!(root_fanin(&g, root), 4);
        let cat = concat_of(&g, g.node(root).unwrap().tag.agg_node.unwrap());
        assert_eq!(*cat.inputs.last().unwrap(), ex[0]);
    }

    #[test]
    fn root_argument_order_is_deepest_subtree_first() {
        let (g, root, _) = hda(3, 0);
        let cat = concat_of(&g, g.node(root).unwrap().tag.agg_node.unwrap());
        let tags: Vec<_> = cat.inputs.iter().map(|&i| g.node(i).unwrap().tag).collect();
        // R_2, R_1 are aggregation outputs; L_1, L_2 are blocks.
        assert!(tags[0].agg_node.is_some() && tags[1].agg_node.is_some());
        assert!(tags[0].agg_node < tags[1].agg_node);
        assert!(tags[2].block.is_some() && tags[3].block.is_some());
        assert!(tags[2].block < tags[3].block);
    }

    #[test]
    fn subtree_outputs_are_rerouted() {
        // At depth 3, T_1 consumes the output of T_2 rather than a block.
        let (g, _, _) = hda(3, 0);
        let r2 = g
            .nodes()
            .iter()
            .rfind(|n| n.tag.agg_node == Some(1))
            .unwrap()
            .id;
        let consumers = g.consumers();
        let fed_blocks: Vec<_> = consumers[r2.0]
            .iter()
            .filter_map(|c| g.node(*c).unwrap().tag.block)
            .collect();
        assert!(!fed_blocks.is_empty());
    }

    #[test]
    fn residual_hda_attaches_to_second_leaf() {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::image(8, 4, 4));
        let extra = b.add_node(PrimOp::Relu, &[x]).unwrap();
        let spec = HdaSpec::new(1, BlockSpec::basic(8, 8, 1))
            .with_extra_root_inputs(vec![extra])
            .with_residual_nodes(true);
        build_hda(&mut b, x, &spec).unwrap();
        let g = b.finish();
        let cat = concat_of(&g, 0);
        let add = g
            .nodes()
            .iter()
            .find(|n| n.op.kind() == OpKind::Add && n.tag.agg_node.is_some())
            .unwrap();
        assert_eq!(add.inputs[1], cat.inputs[1]);
    }

    #[test]
    fn depth_bounds() {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::image(8, 4, 4));
        for depth in [0, 7] {
            let err =
                build_hda(&mut b, x, &HdaSpec::new(depth, BlockSpec::basic(8, 8, 1))).unwrap_err();
            assert_eq!(err, BuildError::DepthOutOfRange(depth));
            assert_eq!(
                structure_of_hda(depth).unwrap_err(),
                BuildError::DepthOutOfRange(depth)
            );
        }
    }

    #[test]
    fn closed_forms() {
        let s = structure_of_hda(1).unwrap();
        assert_eq!(
            (s.blocks, s.agg_nodes, s.root_fanin, s.max_path_blocks),
            (2, 1, 2, 1)
        );
        let s = structure_of_hda(4).unwrap();
        assert_eq!(
            (s.blocks, s.agg_nodes, s.root_fanin, s.max_path_blocks),
            (16, 8, 5, 4)
        );
        for n in 1..=MAX_HDA_DEPTH {
            let s = structure_of_hda(n).unwrap();
            assert_eq!(s.root_fanin, s.blocks.ilog2() as usize + 1);
        }
    }
}
