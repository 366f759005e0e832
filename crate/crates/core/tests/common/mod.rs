#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use dla::aggregation::{build_hda, HdaSpec};
use dla::architectures::{
    arch_spec, build_classifier_with, build_dense_decoder_with, BuildOptions, DenseHeadSpec,
};
use dla::blocks::BlockSpec;
use dla::ir::{Graph, GraphBuilder, NodeId, TensorShape};

pub const TOY_CAP: usize = 16;
pub const TOY_INPUT: usize = 16;
/// Smallest decoder input whose stage-6 map upsamples back onto stage 2.
pub const TOY_DECODER_INPUT: usize = 32;
pub const TOY_CLASSES: usize = 10;

pub const TOY_OPTIONS: BuildOptions = BuildOptions {
    require_divisible: false,
};

pub fn toy_classifier(arch: &str) -> Graph {
    let spec = arch_spec(arch).unwrap().width_capped(TOY_CAP);
    build_classifier_with(
        &spec,
        TOY_CLASSES,
        TensorShape::image(3, TOY_INPUT, TOY_INPUT),
        &TOY_OPTIONS,
    )
    .unwrap()
}

pub fn toy_decoder(arch: &str) -> Graph {
    let spec = arch_spec(arch).unwrap().width_capped(TOY_CAP);
    let mut head = DenseHeadSpec::new(4);
    head.project_channels = TOY_CAP;
    let input = TensorShape::image(3, TOY_DECODER_INPUT, TOY_DECODER_INPUT);
    build_dense_decoder_with(&spec, &head, input, &TOY_OPTIONS).unwrap()
}

/// A standalone `T_depth` over 8-channel 8x8 features, with `extras`
/// additional root inputs taken from the HDA input.
pub fn standalone_hda(depth: usize, extras: usize) -> Graph {
    let mut b = GraphBuilder::named(format!("hda{depth}"));
    let x = b.input(TensorShape::image(8, 8, 8));
    let spec =
        HdaSpec::new(depth, BlockSpec::basic(8, 8, 1)).with_extra_root_inputs(vec![x; extras]);
    let root = build_hda(&mut b, x, &spec).unwrap();
    b.output(root).unwrap();
    b.finish()
}

/// Counts for the unmerged binary aggregation tree over `2^depth` leaves.
#[derive(Debug)]
pub struct OracleTree {
    /// Leaf range `[lo, hi)` of every internal node, with whether it is a
    /// right child.
    pub internal: Vec<(usize, usize, bool)>,
    pub leaves: usize,
}

pub fn oracle_tree(depth: usize) -> OracleTree {
    fn walk(lo: usize, hi: usize, right: bool, out: &mut Vec<(usize, usize, bool)>) {
        if hi - lo < 2 {
            return;
        }
        out.push((lo, hi, right));
        let mid = (lo + hi) / 2;
        walk(lo, mid, false, out);
        walk(mid, hi, true, out);
    }
    let leaves = 1 << depth;
    let mut internal = Vec::new();
    walk(0, leaves, false, &mut internal);
    OracleTree { internal, leaves }
}

/// For each aggregation node of `graph`, the set of block ordinals (ranked by
/// block id) its arguments cover: blocks reachable backwards through blocks
/// only, plus whatever the aggregation nodes passed directly cover.
pub fn agg_coverage(graph: &Graph) -> BTreeMap<u32, BTreeSet<usize>> {
    let block_rank: BTreeMap<u32, usize> = graph
        .nodes()
        .iter()
        .filter_map(|n| n.tag.block)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, b)| (b, i))
        .collect();
    let mut cover: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for n in graph.nodes() {
        let Some(a) = n.tag.agg_node else { continue };
        for &i in &n.inputs {
            let src = graph.node(i).unwrap();
            if src.tag.agg_node == Some(a) {
                continue;
            }
            if let Some(other) = src.tag.agg_node {
                let inner = cover.get(&other).cloned().unwrap_or_default();
                cover.entry(a).or_default().extend(inner);
                continue;
            }
            let mut found = BTreeSet::new();
            let mut stack = vec![i];
            let mut seen = BTreeSet::new();
            while let Some(u) = stack.pop() {
                if !seen.insert(u) {
                    continue;
                }
                let node = graph.node(u).unwrap();
                if node.tag.agg_node.is_some() {
                    continue;
                }
                if let Some(blk) = node.tag.block {
                    found.insert(block_rank[&blk]);
                    stack.extend(node.inputs.iter().copied());
                }
            }
            cover.entry(a).or_default().extend(found);
        }
    }
    cover
}

/// Fewest aggregation nodes entered on any path from `from` to `to`,
/// by 0-1 breadth-first search.
pub fn agg_hops(graph: &Graph, from: NodeId, to: NodeId) -> Option<usize> {
    let consumers = graph.consumers();
    let mut dist = vec![usize::MAX; graph.len()];
    let mut queue = VecDeque::from([from]);
    dist[from.0] = 0;
    while let Some(u) = queue.pop_front() {
        let here = graph.node(u).unwrap().tag.agg_node;
        for &v in &consumers[u.0] {
            let there = graph.node(v).unwrap().tag.agg_node;
            let w = usize::from(there.is_some() && there != here);
            if dist[u.0] + w < dist[v.0] {
                dist[v.0] = dist[u.0] + w;
                if w == 0 {
                    queue.push_front(v);
                } else {
                    queue.push_back(v);
                }
            }
        }
    }
    (dist[to.0] != usize::MAX).then_some(dist[to.0])
}

/// Last node of every block.
pub fn block_outputs(graph: &Graph) -> Vec<NodeId> {
    let mut last = BTreeMap::new();
    for n in graph.nodes() {
        if let Some(b) = n.tag.block {
            last.insert(b, n.id);
        }
    }
    last.into_values().collect()
}

/// Bilinear interpolation by `f` with half-pixel centres and clamped edges.
pub fn bilinear_reference(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x]
    };
    let mut out = vec![0.0; h * f * w * f];
    for oy in 0..h * f {
        let sy = (oy as f64 + 0.5) / f as f64 - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        for ox in 0..w * f {
            let sx = (ox as f64 + 0.5) / f as f64 - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            out[oy * w * f + ox] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// A smooth random field: a few low-frequency sinusoids.
pub fn smooth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..0.4),
                rng.gen_range(0.0..0.4),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(
                waves
                    .iter()
                    .map(|[a, fy, fx, p]| a * (fy * y as f64 + fx * x as f64 + p).sin())
                    .sum(),
            );
        }
    }
    out
}
