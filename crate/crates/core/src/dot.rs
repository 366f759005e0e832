//! Graphviz export.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::ir::{Graph, Node, OpKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Collapse {
    #[default]
    None,
    /// Each tagged block and each aggregation node becomes one vertex.
    Blocks,
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn shape_of(n: &Node) -> &'static str {
    if n.tag.agg_node.is_some() {
        "diamond"
    } else if n.tag.block.is_some() {
        "box"
    } else if matches!(n.op.kind(), OpKind::Input | OpKind::Output) {
        "plaintext"
    } else {
        "ellipse"
    }
}

fn vertex(n: &Node, collapse: Collapse) -> String {
    match (collapse, n.tag.agg_node, n.tag.block) {
        (Collapse::Blocks, Some(a), _) => format!("agg{a}"),
        (Collapse::Blocks, None, Some(b)) => format!("block{b}"),
        _ => format!("n{}", n.id.0),
    }
}

pub fn export_dot(graph: &Graph, collapse: Collapse) -> String {
    let mut out = String::new();
    let name = graph.name().unwrap_or("graph");
    writeln!(out, "digraph {} {{", quote(name)).unwrap();
    out.push_str("  rankdir=TB;\n");
    out.push_str("  node [fontname=\"Helvetica\"];\n");

    let mut seen = BTreeSet::new();
    for n in graph.nodes() {
        let v = vertex(n, collapse);
        if !seen.insert(v.clone()) {
            continue;
        }
        let label = match (collapse, n.tag.agg_node, n.tag.block) {
            (Collapse::Blocks, Some(a), _) => format!("agg {a}"),
            (Collapse::Blocks, None, Some(b)) => format!("block {b}"),
            _ => format!("{} {}", n.id, n.op.kind()),
        };
        let stage = n
            .tag
            .stage
            .map(|s| format!(", stage={}", quote(&s.to_string())))
            .unwrap_or_default();
        writeln!(
            out,
            "  {v} [label={}, shape={}{stage}];",
            quote(&label),
            shape_of(n)
        )
        .unwrap();
    }

    let mut edges = BTreeSet::new();
    let mut ordered = Vec::new();
    for n in graph.nodes() {
        let to = vertex(n, collapse);
        for i in &n.inputs {
            let Some(src) = graph.node(*i) else { continue };
            let from = vertex(src, collapse);
            if from != to && edges.insert((from.clone(), to.clone())) {
                ordered.push((from, to.clone()));
            }
        }
    }
    for (from, to) in ordered {
        writeln!(out, "  {from} -> {to};").unwrap();
    }
    out.push_str("}\n");
    out
}
