//! Static analyses: shape inference, parameter and FMA accounting, and the
//! aggregation-structure statistics that the structural checks compare with
//! the closed forms in [`crate::aggregation::structure_of_hda`].
//!
//! FMAs count only convolution, transposed-convolution and linear
//! multiply-adds at batch 1; normalization, activation, pooling and
//! concatenation contribute nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Index;

use serde::Serialize;
use thiserror::Error;

use crate::aggregation::structure_of_hda;
use crate::ir::{Graph, IrError, NodeId, OpKind, Stage, TensorShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("shape conflict at {node}: {message}")]
    ShapeConflict { node: NodeId, message: String },
    #[error("graph has {graph} inputs but {given} shapes were supplied")]
    InputCount { graph: usize, given: usize },
    #[error("input {node} declares {declared} channels, supplied shape has {given}")]
    InputChannels {
        node: NodeId,
        declared: usize,
        given: usize,
    },
    #[error("graph carries no block or aggregation tags")]
    MissingTags,
}

/// Inferred shape of every node, indexed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMap {
    shapes: Vec<TensorShape>,
}

impl ShapeMap {
    pub fn get(&self, id: NodeId) -> Option<&TensorShape> {
        self.shapes.get(id.0)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &TensorShape)> {
        self.shapes.iter().enumerate().map(|(i, s)| (NodeId(i), s))
    }
}

impl Index<NodeId> for ShapeMap {
    type Output = TensorShape;

    fn index(&self, id: NodeId) -> &TensorShape {
        &self.shapes[id.0]
    }
}

pub fn infer_shapes(graph: &Graph, input: TensorShape) -> Result<ShapeMap, AnalysisError> {
    infer_shapes_multi(graph, &[input])
}

/// Shape inference with one supplied shape per graph input, in order. The
/// supplied shapes may change batch and spatial extents but not channels.
pub fn infer_shapes_multi(
    graph: &Graph,
    inputs: &[TensorShape],
) -> Result<ShapeMap, AnalysisError> {
    if inputs.len() != graph.inputs().len() {
        return Err(AnalysisError::InputCount {
            graph: graph.inputs().len(),
            given: inputs.len(),
        });
    }
    let order = graph.topo_order()?;
    let mut shapes: Vec<Option<TensorShape>> = vec![None; graph.len()];
    for (&id, &given) in graph.inputs().iter().zip(inputs) {
        match graph.node(id).map(|n| &n.op) {
            Some(crate::ir::PrimOp::Input { shape }) if shape.channels != given.channels => {
                return Err(AnalysisError::InputChannels {
                    node: id,
                    declared: shape.channels,
                    given: given.channels,
                });
            }
            Some(_) => shapes[id.0] = Some(given),
            None => return Err(IrError::UnknownInput { input: id }.into()),
        }
    }
    for id in order {
        if shapes[id.0].is_some() {
            continue;
        }
        let node = graph
            .node(id)
            .expect("topo order only yields existing nodes");
        let args: Vec<TensorShape> = node
            .inputs
            .iter()
            .map(|i| shapes[i.0].expect("inputs precede"))
            .collect();
        let shape = node
            .op
            .infer_shape(&args)
            .map_err(|message| AnalysisError::ShapeConflict { node: id, message })?;
        shapes[id.0] = Some(shape);
    }
    Ok(ShapeMap {
        shapes: shapes
            .into_iter()
            .map(|s| s.expect("every node visited"))
            .collect(),
    })
}

/// Learnable scalars in the graph; batch-norm running statistics excluded.
pub fn count_params(graph: &Graph) -> u64 {
    graph.nodes().iter().map(|n| n.op.param_count()).sum()
}

pub fn count_fmas(graph: &Graph, input: TensorShape) -> Result<u64, AnalysisError> {
    let shapes = infer_shapes(graph, input.with_batch(1))?;
    Ok(graph.nodes().iter().map(|n| n.op.fmas(&shapes[n.id])).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub params: u64,
    pub fmas: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub fmas: u64,
    /// Keyed by `stage1`..`stage6`, `decoder`, or `untagged`.
    pub per_stage: BTreeMap<String, StageCost>,
}

pub fn stage_key(stage: Option<Stage>) -> String {
    stage
        .map(|s| s.to_string())
        .unwrap_or_else(|| "untagged".to_string())
}

pub fn cost_report(graph: &Graph, input: TensorShape) -> Result<CostReport, AnalysisError> {
    let shapes = infer_shapes(graph, input.with_batch(1))?;
    let mut per_stage: BTreeMap<String, StageCost> = BTreeMap::new();
    for n in graph.nodes() {
        let entry = per_stage.entry(stage_key(n.tag.stage)).or_default();
        entry.params += n.op.param_count();
        entry.fmas += n.op.fmas(&shapes[n.id]);
    }
    let params = per_stage.values().map(|c| c.params).sum();
    let fmas = per_stage.values().map(|c| c.fmas).sum();
    Ok(CostReport {
        params,
        fmas,
        per_stage,
    })
}

/// Measured structure of one hierarchical aggregation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HdaStats {
    pub id: u32,
    pub stage: String,
    /// Depth tags found on the aggregation's nodes; one entry when consistent.
    pub depth_tags: Vec<u8>,
    pub blocks: usize,
    pub agg_nodes: usize,
    pub root_fanin: usize,
    /// Root arguments produced outside the aggregation.
    pub extra_root_inputs: usize,
    pub max_block_to_root_hops: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StructureStats {
    pub blocks: usize,
    pub agg_nodes: usize,
    pub max_root_fanin: usize,
    pub per_stage_hda_depth: BTreeMap<String, u8>,
    pub max_block_to_output_hops: usize,
    pub hdas: Vec<HdaStats>,
}

const UNREACHABLE: usize = usize::MAX;

/// For every node, the fewest aggregation nodes entered on a path from it to
/// any of `targets` (targets themselves count 0).
fn agg_hops_to(graph: &Graph, order: &[NodeId], targets: &[NodeId]) -> Vec<usize> {
    let consumers = graph.consumers();
    let mut dist = vec![UNREACHABLE; graph.len()];
    for t in targets {
        dist[t.0] = 0;
    }
    for &u in order.iter().rev() {
        let from = graph.node(u).unwrap().tag.agg_node;
        for &v in &consumers[u.0] {
            if dist[v.0] == UNREACHABLE {
                continue;
            }
            let to = graph.node(v).unwrap().tag.agg_node;
            let step = usize::from(to.is_some() && to != from);
            dist[u.0] = dist[u.0].min(dist[v.0] + step);
        }
    }
    dist
}

/// Last node of each tagged group, which the builders make the group's output.
fn group_outputs(
    graph: &Graph,
    key: impl Fn(&crate::ir::NodeTag) -> Option<u32>,
) -> BTreeMap<u32, NodeId> {
    let mut out = BTreeMap::new();
    for n in graph.nodes() {
        if let Some(k) = key(&n.tag) {
            out.insert(k, n.id);
        }
    }
    out
}

pub fn structure_stats(graph: &Graph) -> Result<StructureStats, AnalysisError> {
    let block_out = group_outputs(graph, |t| t.block);
    let agg_out = group_outputs(graph, |t| t.agg_node);
    if block_out.is_empty() && agg_out.is_empty() {
        return Err(AnalysisError::MissingTags);
    }
    let order = graph.topo_order()?;

    let to_output = agg_hops_to(graph, &order, graph.outputs());
    let max_block_to_output_hops = block_out
        .values()
        .map(|id| to_output[id.0])
        .filter(|&d| d != UNREACHABLE)
        .max()
        .unwrap_or(0);

    let mut hda_ids: BTreeSet<u32> = BTreeSet::new();
    for n in graph.nodes() {
        if let Some(h) = n.tag.hda {
            hda_ids.insert(h.id);
        }
    }

    let mut hdas = Vec::new();
    let mut per_stage_hda_depth = BTreeMap::new();
    for hid in hda_ids {
        let members: Vec<&crate::ir::Node> = graph
            .nodes()
            .iter()
            .filter(|n| n.tag.hda.map(|h| h.id) == Some(hid))
            .collect();
        let depth_tags: Vec<u8> = members
            .iter()
            .filter_map(|n| n.tag.hda.map(|h| h.depth))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let blocks: BTreeSet<u32> = members.iter().filter_map(|n| n.tag.block).collect();
        let aggs: BTreeSet<u32> = members.iter().filter_map(|n| n.tag.agg_node).collect();
        let stage = stage_key(members.first().and_then(|n| n.tag.stage));

        // The root is the aggregation node whose output comes last.
        let root = aggs.iter().map(|a| agg_out[a]).max();
        let (root_fanin, extra_root_inputs, max_hops) = match root {
            None => (0, 0, 0),
            Some(root_out) => {
                let root_agg = graph.node(root_out).unwrap().tag.agg_node;
                let concat = members
                    .iter()
                    .find(|n| n.tag.agg_node == root_agg && n.op.kind() == OpKind::Concat);
                let (fanin, extras) = match concat {
                    Some(c) => {
                        let extras = c
                            .inputs
                            .iter()
                            .filter(|i| {
                                graph.node(**i).and_then(|n| n.tag.hda).map(|h| h.id) != Some(hid)
                            })
                            .count();
                        (c.inputs.len(), extras)
                    }
                    None => (0, 0),
                };
                let to_root = agg_hops_to(graph, &order, &[root_out]);
                let hops = blocks
                    .iter()
                    .map(|b| to_root[block_out[b].0])
                    .max()
                    .unwrap_or(0);
                (fanin, extras, hops)
            }
        };
        if let Some(&d) = depth_tags.first() {
            per_stage_hda_depth.insert(stage.clone(), d);
        }
        hdas.push(HdaStats {
            id: hid,
            stage,
            depth_tags,
            blocks: blocks.len(),
            agg_nodes: aggs.len(),
            root_fanin,
            extra_root_inputs,
            max_block_to_root_hops: max_hops,
        });
    }

    Ok(StructureStats {
        blocks: block_out.len(),
        agg_nodes: agg_out.len(),
        max_root_fanin: hdas.iter().map(|h| h.root_fanin).max().unwrap_or(0),
        per_stage_hda_depth,
        max_block_to_output_hops,
        hdas,
    })
}

/// Compares every measured hierarchy with the closed form for its tagged
/// depth. Returns one message per mismatch.
pub fn structural_violations(stats: &StructureStats) -> Vec<String> {
    let mut out = Vec::new();
    for h in &stats.hdas {
        let label = format!("hda {} ({})", h.id, h.stage);
        let depth = match h.depth_tags.as_slice() {
            [d] => *d as usize,
            tags => {
                out.push(format!(
                    "StructureMismatch: {label} has inconsistent depth tags {tags:?}"
                ));
                continue;
            }
        };
        let expect = match structure_of_hda(depth) {
            Ok(e) => e,
            Err(e) => {
                out.push(format!("StructureMismatch: {label}: {e}"));
                continue;
            }
        };
        if h.blocks != expect.blocks {
            out.push(format!(
                "StructureMismatch: {label} depth {depth} has {} blocks, expected {}",
                h.blocks, expect.blocks
            ));
        }
        if h.agg_nodes != expect.agg_nodes {
            out.push(format!(
                "StructureMismatch: {label} depth {depth} has {} aggregation nodes, expected {}",
                h.agg_nodes, expect.agg_nodes
            ));
        }
        let own_fanin = h.root_fanin.saturating_sub(h.extra_root_inputs);
        if own_fanin != expect.root_fanin {
            out.push(format!(
                "StructureMismatch: {label} depth {depth} root fan-in {} (+{} extra), expected {}",
                own_fanin, h.extra_root_inputs, expect.root_fanin
            ));
        }
        if h.blocks > 0 && own_fanin != h.blocks.ilog2() as usize + 1 {
            out.push(format!(
                "FanInBound: {label} root fan-in {own_fanin} is not log2({}) + 1",
                h.blocks
            ));
        }
        if h.max_block_to_root_hops > depth {
            out.push(format!(
                "PathBound: {label} block-to-root path crosses {} aggregation nodes, depth is {depth}",
                h.max_block_to_root_hops
            ));
        }
    }
    out
}
