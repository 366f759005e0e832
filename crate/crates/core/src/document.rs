//! Canonical JSON form of a [`Graph`].
//!
//! Object keys are sorted and absent tags are omitted, so serializing the
//! same graph always yields the same bytes.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::ir::{Graph, Node, NodeId, NodeTag, PrimOp, TensorShape};

pub const FORMAT_VERSION: &str = "1";
pub const GENERATOR_VERSION: &str = concat!("dla ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("malformed JSON")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> DocumentError {
    DocumentError::Format(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentMetadata {
    pub arch_name: Option<String>,
    pub input_shape: Option<TensorShape>,
    pub generator_version: String,
}

fn tag_value(tag: &NodeTag) -> Value {
    match serde_json::to_value(tag).expect("tags serialize") {
        Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).collect()),
        other => other,
    }
}

fn node_value(n: &Node) -> Value {
    let op = serde_json::to_value(&n.op).expect("ops serialize");
    let kind = op["kind"].clone();
    let attrs = op
        .get("attrs")
        .cloned()
        .unwrap_or_else(|| Value::Object(Map::new()));
    json!({
        "attrs": attrs,
        "id": n.id,
        "inputs": n.inputs,
        "kind": kind,
        "tags": tag_value(&n.tag),
    })
}

pub fn to_value(graph: &Graph) -> Value {
    json!({
        "format_version": FORMAT_VERSION,
        "inputs": graph.inputs(),
        "metadata": {
            "arch_name": graph.name(),
            "generator_version": GENERATOR_VERSION,
            "input_shape": graph.input_shape(),
        },
        "nodes": graph.nodes().iter().map(node_value).collect::<Vec<_>>(),
        "outputs": graph.outputs(),
    })
}

/// Pretty-printed canonical document with a trailing newline.
pub fn serialize_graph(graph: &Graph) -> String {
    let mut s = serde_json::to_string_pretty(&to_value(graph)).expect("documents serialize");
    s.push('\n');
    s
}

fn field<'a>(obj: &'a Value, key: &str, ctx: &str) -> Result<&'a Value, DocumentError> {
    obj.get(key)
        .ok_or_else(|| format_err(format!("{ctx}: missing field {key:?}")))
}

fn ids(v: &Value, ctx: &str) -> Result<Vec<NodeId>, DocumentError> {
    serde_json::from_value(v.clone()).map_err(|e| format_err(format!("{ctx}: {e}")))
}

fn parse_op(kind: &Value, attrs: &Value, ctx: &str) -> Result<PrimOp, DocumentError> {
    let tagged = json!({ "kind": kind, "attrs": attrs });
    match serde_json::from_value(tagged) {
        Ok(op) => Ok(op),
        Err(first) => {
            let empty = attrs.is_null() || attrs.as_object().is_some_and(Map::is_empty);
            if empty {
                if let Ok(op) = serde_json::from_value(json!({ "kind": kind })) {
                    return Ok(op);
                }
            }
            Err(format_err(format!("{ctx}: {first}")))
        }
    }
}

pub fn parse_document(text: &str) -> Result<(Graph, DocumentMetadata), DocumentError> {
    let doc: Value = serde_json::from_str(text)?;
    if !doc.is_object() {
        return Err(format_err("document is not a JSON object"));
    }
    match field(&doc, "format_version", "document")?.as_str() {
        Some(FORMAT_VERSION) => {}
        other => return Err(format_err(format!("unsupported format_version {other:?}"))),
    }
    let records = field(&doc, "nodes", "document")?
        .as_array()
        .ok_or_else(|| format_err("nodes is not an array"))?;
    let mut nodes = Vec::with_capacity(records.len());
    for (pos, r) in records.iter().enumerate() {
        let ctx = format!("node record {pos}");
        let id: NodeId = serde_json::from_value(field(r, "id", &ctx)?.clone())
            .map_err(|e| format_err(format!("{ctx}: {e}")))?;
        if id.0 != pos {
            return Err(format_err(format!(
                "{ctx}: id {id} out of order, expected %{pos}"
            )));
        }
        let op = parse_op(field(r, "kind", &ctx)?, field(r, "attrs", &ctx)?, &ctx)?;
        let inputs = ids(field(r, "inputs", &ctx)?, &ctx)?;
        let tag: NodeTag = match r.get("tags") {
            None | Some(Value::Null) => NodeTag::default(),
            Some(t) => serde_json::from_value(t.clone())
                .map_err(|e| format_err(format!("{ctx}: tags: {e}")))?,
        };
        nodes.push(Node {
            id,
            op,
            inputs,
            tag,
        });
    }
    let inputs = ids(field(&doc, "inputs", "document")?, "inputs")?;
    let outputs = ids(field(&doc, "outputs", "document")?, "outputs")?;
    for id in inputs.iter().chain(&outputs) {
        if id.0 >= nodes.len() {
            return Err(format_err(format!("endpoint {id} does not name a node")));
        }
    }

    let meta = field(&doc, "metadata", "document")?;
    let arch_name = meta
        .get("arch_name")
        .and_then(Value::as_str)
        .map(str::to_owned);
    let input_shape = match meta.get("input_shape") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| format_err(format!("metadata.input_shape: {e}")))?,
        ),
    };
    let generator_version = meta
        .get("generator_version")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_owned();

    let graph = Graph::from_parts(arch_name.clone(), nodes, inputs, outputs);
    Ok((
        graph,
        DocumentMetadata {
            arch_name,
            input_shape,
            generator_version,
        },
    ))
}

pub fn parse_graph(text: &str) -> Result<Graph, DocumentError> {
    parse_document(text).map(|(g, _)| g)
}
