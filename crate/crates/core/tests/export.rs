mod common;

use std::collections::BTreeSet;

use dla::analysis::count_params;
use dla::architectures::{
    arch_spec, build_classifier, build_dense_decoder, DenseHeadSpec, ARCHITECTURE_NAMES,
};
use dla::document::{
    parse_document, parse_graph, serialize_graph, to_value, DocumentError, FORMAT_VERSION,
};
use dla::dot::{export_dot, Collapse};
use dla::ir::TensorShape;
use serde_json::Value;

/// Checks the subset of the DOT language the exporter emits: a digraph with
/// attribute statements, vertex statements and edges between declared
/// vertices. Returns the vertex and edge counts.
fn check_dot(text: &str) -> Result<(usize, usize), String> {
    let mut lines = text.lines();
    let head = lines.next().ok_or("empty")?;
    let rest = head.strip_prefix("digraph ").ok_or("missing digraph")?;
    let rest = rest.strip_suffix(" {").ok_or("missing brace")?;
    let _ = quoted(rest)?;
    let mut vertices = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut closed = false;
    for line in lines {
        if closed {
            return Err(format!("text after closing brace: {line}"));
        }
        if line == "}" {
            closed = true;
            continue;
        }
        let stmt = line
            .strip_prefix("  ")
            .and_then(|l| l.strip_suffix(';'))
            .ok_or(format!("bad statement: {line}"))?;
        if let Some((from, to)) = stmt.split_once(" -> ") {
            ident(from)?;
            ident(to)?;
            if !vertices.contains(from) || !vertices.contains(to) {
                return Err(format!("edge to undeclared vertex: {stmt}"));
            }
            if !edges.insert((from.to_string(), to.to_string())) {
                return Err(format!("duplicate edge: {stmt}"));
            }
        } else if let Some((id, attrs)) = stmt.split_once(" [") {
            let attrs = attrs.strip_suffix(']').ok_or("unclosed attribute list")?;
            check_attrs(attrs)?;
            if id != "node" {
                ident(id)?;
                if !vertices.insert(id.to_string()) {
                    return Err(format!("vertex declared twice: {id}"));
                }
            }
        } else {
            let (k, v) = stmt
                .split_once('=')
                .ok_or(format!("bad statement: {stmt}"))?;
            ident(k)?;
            ident(v)?;
        }
    }
    if !closed {
        return Err("missing closing brace".into());
    }
    Ok((vertices.len(), edges.len()))
}

fn ident(s: &str) -> Result<(), String> {
    let ok = s
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    ok.then_some(()).ok_or(format!("bad identifier {s:?}"))
}

/// Parses one quoted string at the start of `s`, returning the remainder.
fn quoted(s: &str) -> Result<&str, String> {
    let body = s
        .strip_prefix('"')
        .ok_or(format!("expected quote in {s:?}"))?;
    let mut escaped = false;
    for (i, c) in body.char_indices() {
        match (escaped, c) {
            (true, _) => escaped = false,
            (false, '\\') => escaped = true,
            (false, '"') => return Ok(&body[i + 1..]),
            (false, '\n') => return Err("raw newline in string".into()),
            _ => {}
        }
    }
    Err(format!("unterminated string {s:?}"))
}

fn check_attrs(mut s: &str) -> Result<(), String> {
    loop {
        let (key, rest) = s
            .split_once('=')
            .ok_or(format!("attribute without value: {s:?}"))?;
        ident(key)?;
        s = if rest.starts_with('"') {
            quoted(rest)?
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            ident(&rest[..end])?;
            &rest[end..]
        };
        if s.is_empty() {
            return Ok(());
        }
        s = s
            .strip_prefix(", ")
            .ok_or(format!("expected separator at {s:?}"))?;
    }
}

#[test]
fn dot_checker_rejects_malformed_text() {
    assert!(check_dot("digraph \"g\" {\n  a [label=\"x\"];\n}\n").is_ok());
    assert!(check_dot("digraph \"g\" {\n  a -> b;\n}\n").is_err());
    assert!(check_dot("digraph \"g\" {\n  a [label=\"x];\n}\n").is_err());
    assert!(check_dot("digraph \"g\" {\n  a [label=\"x\"];\n").is_err());
}

#[test]
fn catalog_dot_is_well_formed() {
    for name in ARCHITECTURE_NAMES {
        let g = common::toy_classifier(name);
        let (v, e) = check_dot(&export_dot(&g, Collapse::None))
            .unwrap_or_else(|err| panic!("{name}: {err}"));
        assert_eq!(v, g.len());
        assert_eq!(e, g.edge_count());

        let collapsed = export_dot(&g, Collapse::Blocks);
        let (v, e) = check_dot(&collapsed).unwrap_or_else(|err| panic!("{name} collapsed: {err}"));
        let blocks = g
            .nodes()
            .iter()
            .filter(|n| n.tag.agg_node.is_none())
            .filter_map(|n| n.tag.block)
            .collect::<BTreeSet<_>>();
        let aggs = g
            .nodes()
            .iter()
            .filter_map(|n| n.tag.agg_node)
            .collect::<BTreeSet<_>>();
        let loose = g
            .nodes()
            .iter()
            .filter(|n| n.tag.agg_node.is_none() && n.tag.block.is_none())
            .count();
        assert_eq!(v, blocks.len() + aggs.len() + loose);
        assert!(e < g.edge_count());
        assert_eq!(collapsed.matches("shape=diamond").count(), aggs.len());
    }
    let decoder = common::toy_decoder("DLA-34");
    check_dot(&export_dot(&decoder, Collapse::Blocks)).unwrap();
}

#[test]
fn collapsed_depth_two_tree() {
    let g = common::standalone_hda(2, 0);
    let dot = export_dot(&g, Collapse::Blocks);
    check_dot(&dot).unwrap();
    assert_eq!(dot.matches("shape=box").count(), 4);
    assert_eq!(dot.matches("shape=diamond").count(), 2);
}

#[test]
fn documents_round_trip() {
    let input = TensorShape::image(3, 224, 224);
    for name in ARCHITECTURE_NAMES {
        let spec = arch_spec(name).unwrap();
        for g in [
            build_classifier(&spec, 1000, input).unwrap(),
            build_dense_decoder(&spec, &DenseHeadSpec::new(19), input).unwrap(),
        ] {
            let text = serialize_graph(&g);
            let (back, meta) = parse_document(&text).unwrap();
            assert_eq!(back, g);
            assert_eq!(serialize_graph(&back), text);
            assert_eq!(meta.arch_name.as_deref(), Some(name));
            assert_eq!(meta.input_shape, Some(input));
            let value: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(value, to_value(&g));
            assert_eq!(value["format_version"], FORMAT_VERSION);
        }
    }
}

#[test]
fn documents_are_rejected_when_damaged() {
    let g = common::toy_classifier("DLA-34");
    let text = serialize_graph(&g);
    assert!(matches!(
        parse_graph(&text[..text.len() / 2]),
        Err(DocumentError::Json(_))
    ));
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = "0".into();
    assert!(parse_graph(&v.to_string()).is_err());
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["nodes"][3]["inputs"] = serde_json::json!([99999]);
    let dangling = parse_graph(&v.to_string()).expect("parsing is structural only");
    assert!(!dangling.validate().is_valid());
}

/// Parameters of one serialized node, computed from its attributes alone.
fn node_params(node: &Value) -> u64 {
    let a = &node["attrs"];
    let u = |k: &str| a[k].as_u64().unwrap();
    match node["kind"].as_str().unwrap() {
        "Conv" => {
            let k = u("kernel");
            u("out_channels") * (u("in_channels") / u("groups")) * k * k
                + if a["has_bias"] == true {
                    u("out_channels")
                } else {
                    0
                }
        }
        "BatchNorm" => 2 * u("channels"),
        "Linear" => {
            u("in_features") * u("out_features")
                + if a["has_bias"] == true {
                    u("out_features")
                } else {
                    0
                }
        }
        "Upsample" => {
            let f = u("factor");
            let k = 2 * f - f % 2;
            if a["mode"] == "LearnedTransposedConv" {
                u("channels") * k * k
            } else {
                0
            }
        }
        _ => 0,
    }
}

#[test]
fn param_count_is_the_sum_of_serialized_nodes() {
    let input = TensorShape::image(3, 224, 224);
    for name in ARCHITECTURE_NAMES {
        let spec = arch_spec(name).unwrap();
        for g in [
            build_classifier(&spec, 1000, input).unwrap(),
            build_dense_decoder(&spec, &DenseHeadSpec::new(19), input).unwrap(),
        ] {
            let doc = to_value(&g);
            let oracle: u64 = doc["nodes"]
                .as_array()
                .unwrap()
                .iter()
                .map(node_params)
                .sum();
            assert_eq!(count_params(&g), oracle, "{name}");
        }
    }
}
