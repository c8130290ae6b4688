//! Function-level code property graphs: the JSON sample format, the node
//! kind / edge relation registry, and structural validation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_NODE_KINDS: usize = 44;
pub const NUM_EDGE_RELATIONS: usize = 20;

const DEFAULT_REGISTRY: &str = include_str!("../data/registry.json");

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed sample JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sample has no label field")]
    MissingLabel,
    #[error("label {0} is not 0 or 1")]
    BadLabel(i64),
    #[error("sample has no nodes")]
    Empty,
    #[error("duplicate node id {0}")]
    DuplicateNode(u64),
    #[error("edge {edge} references absent node id {id}")]
    DanglingEndpoint { edge: usize, id: u64 },
    #[error("unknown node kind {0:?}")]
    UnknownNodeKind(String),
    #[error("unknown edge relation {0:?}")]
    UnknownRelation(String),
    #[error("invalid registry: {0}")]
    Registry(String),
}

/// Which of the two registry namespaces a name belongs to. Some names (for
/// example `CALL`) exist in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeSpace {
    NodeKind,
    EdgeRelation,
}

/// Ordered kind and relation names. IDs are positional, starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RegistryFile", into = "RegistryFile")]
pub struct TypeRegistry {
    node_kinds: Vec<String>,
    edge_relations: Vec<String>,
    node_index: HashMap<String, u16>,
    edge_index: HashMap<String, u16>,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    node_kinds: Vec<String>,
    edge_relations: Vec<String>,
}

impl TryFrom<RegistryFile> for TypeRegistry {
    type Error = GraphError;

    fn try_from(f: RegistryFile) -> Result<Self, GraphError> {
        TypeRegistry::new(f.node_kinds, f.edge_relations)
    }
}

impl From<TypeRegistry> for RegistryFile {
    fn from(r: TypeRegistry) -> Self {
        RegistryFile {
            node_kinds: r.node_kinds,
            edge_relations: r.edge_relations,
        }
    }
}

fn index_names(names: &[String], expect: usize, what: &str) -> Result<HashMap<String, u16>, GraphError> {
    if names.len() != expect {
        return Err(GraphError::Registry(format!(
            "expected {expect} {what}, found {}",
            names.len()
        )));
    }
    let mut index = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if index.insert(n.clone(), (i + 1) as u16).is_some() {
            return Err(GraphError::Registry(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(index)
}

impl TypeRegistry {
    pub fn new(node_kinds: Vec<String>, edge_relations: Vec<String>) -> Result<Self, GraphError> {
        let node_index = index_names(&node_kinds, NUM_NODE_KINDS, "node kinds")?;
        let edge_index = index_names(&edge_relations, NUM_EDGE_RELATIONS, "edge relations")?;
        Ok(Self {
            node_kinds,
            edge_relations,
            node_index,
            edge_index,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, GraphError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn node_kinds(&self) -> &[String] {
        &self.node_kinds
    }

    pub fn edge_relations(&self) -> &[String] {
        &self.edge_relations
    }

    /// 1-based ID of `name` in the given namespace.
    pub fn resolve(&self, space: TypeSpace, name: &str) -> Result<u16, GraphError> {
        match space {
            TypeSpace::NodeKind => self
                .node_index
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::UnknownNodeKind(name.to_string())),
            TypeSpace::EdgeRelation => self
                .edge_index
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::UnknownRelation(name.to_string())),
        }
    }

    pub fn node_kind(&self, name: &str) -> Result<u16, GraphError> {
        self.resolve(TypeSpace::NodeKind, name)
    }

    pub fn relation(&self, name: &str) -> Result<u16, GraphError> {
        self.resolve(TypeSpace::EdgeRelation, name)
    }

    pub fn node_kind_name(&self, id: u16) -> Option<&str> {
        self.node_kinds.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn relation_name(&self, id: u16) -> Option<&str> {
        self.edge_relations.get((id as usize).checked_sub(1)?).map(String::as_str)
    }
}

impl Default for TypeRegistry {
    /// Node kinds and edge relations of the current Joern CPG schema.
    fn default() -> Self {
        Self::from_json(DEFAULT_REGISTRY.as_bytes()).expect("bundled registry is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: u64,
    /// Node kind ID in `1..=44`.
    pub kind: u16,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRecord {
    pub src: u64,
    pub dst: u64,
    /// Edge relation ID in `1..=20`.
    pub relation: u16,
    pub attr: String,
}

/// A validated function-level graph. After parsing, node ids are the
/// contiguous positions `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGraph {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub label: u8,
    pub project: String,
    pub sample_id: String,
}

#[derive(Deserialize, Serialize)]
struct RawSample {
    id: String,
    label: Option<i64>,
    #[serde(default)]
    project: String,
    nodes: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

#[derive(Deserialize, Serialize)]
struct RawNode {
    id: u64,
    kind: String,
    #[serde(default)]
    code: String,
}

#[derive(Deserialize, Serialize)]
struct RawEdge {
    src: u64,
    dst: u64,
    relation: String,
    #[serde(default)]
    attr: String,
}

/// Parses one sample object. Node ids are remapped to `0..N` in input order.
pub fn parse_cpg_export(bytes: &[u8], registry: &TypeRegistry) -> Result<CodeGraph, GraphError> {
    parse_sample(bytes, registry, true)
}

/// Like [`parse_cpg_export`] but for inference inputs: a missing label is
/// read as 0.
pub fn parse_cpg_unlabeled(bytes: &[u8], registry: &TypeRegistry) -> Result<CodeGraph, GraphError> {
    parse_sample(bytes, registry, false)
}

fn parse_sample(bytes: &[u8], registry: &TypeRegistry, require_label: bool) -> Result<CodeGraph, GraphError> {
    let raw: RawSample = serde_json::from_slice(bytes)?;
    let label = match raw.label {
        None if !require_label => 0,
        None => return Err(GraphError::MissingLabel),
        Some(l @ (0 | 1)) => l as u8,
        Some(l) => return Err(GraphError::BadLabel(l)),
    };
    if raw.nodes.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut remap = HashMap::with_capacity(raw.nodes.len());
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (pos, n) in raw.nodes.into_iter().enumerate() {
        if remap.insert(n.id, pos as u64).is_some() {
            return Err(GraphError::DuplicateNode(n.id));
        }
        nodes.push(NodeRecord {
            id: pos as u64,
            kind: registry.node_kind(&n.kind)?,
            code: n.code,
        });
    }
    let mut edges = Vec::with_capacity(raw.edges.len());
    for (i, e) in raw.edges.into_iter().enumerate() {
        let lookup = |id: u64| {
            remap
                .get(&id)
                .copied()
                .ok_or(GraphError::DanglingEndpoint { edge: i, id })
        };
        edges.push(EdgeRecord {
            src: lookup(e.src)?,
            dst: lookup(e.dst)?,
            relation: registry.relation(&e.relation)?,
            attr: e.attr,
        });
    }
    Ok(CodeGraph {
        nodes,
        edges,
        label,
        project: raw.project,
        sample_id: raw.id,
    })
}

/// Writes `g` back in the sample format (one line, no trailing newline).
pub fn serialize_cpg(g: &CodeGraph, registry: &TypeRegistry) -> Result<String, GraphError> {
    let kind = |id| {
        registry
            .node_kind_name(id)
            .map(str::to_string)
            .ok_or_else(|| GraphError::UnknownNodeKind(id.to_string()))
    };
    let rel = |id| {
        registry
            .relation_name(id)
            .map(str::to_string)
            .ok_or_else(|| GraphError::UnknownRelation(id.to_string()))
    };
    let raw = RawSample {
        id: g.sample_id.clone(),
        label: Some(g.label as i64),
        project: g.project.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| {
                Ok(RawNode {
                    id: n.id,
                    kind: kind(n.kind)?,
                    code: n.code.clone(),
                })
            })
            .collect::<Result<_, GraphError>>()?,
        edges: g
            .edges
            .iter()
            .map(|e| {
                Ok(RawEdge {
                    src: e.src,
                    dst: e.dst,
                    relation: rel(e.relation)?,
                    attr: e.attr.clone(),
                })
            })
            .collect::<Result<_, GraphError>>()?,
    };
    Ok(serde_json::to_string(&raw)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoNodes,
    BadLabel(u8),
    NodeKindOutOfRange { node: usize, kind: u16 },
    DuplicateNodeId { node: usize, id: u64 },
    RelationOutOfRange { edge: usize, relation: u16 },
    DanglingEndpoint { edge: usize, id: u64 },
}

/// Every invariant violation in `g`. An empty list means the graph is valid.
pub fn validate_graph(g: &CodeGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if g.nodes.is_empty() {
        out.push(Violation::NoNodes);
    }
    if g.label > 1 {
        out.push(Violation::BadLabel(g.label));
    }
    let mut ids = HashSet::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        if !(1..=NUM_NODE_KINDS as u16).contains(&n.kind) {
            out.push(Violation::NodeKindOutOfRange { node: i, kind: n.kind });
        }
        if !ids.insert(n.id) {
            out.push(Violation::DuplicateNodeId { node: i, id: n.id });
        }
    }
    for (i, e) in g.edges.iter().enumerate() {
        if !(1..=NUM_EDGE_RELATIONS as u16).contains(&e.relation) {
            out.push(Violation::RelationOutOfRange { edge: i, relation: e.relation });
        }
        for id in [e.src, e.dst] {
            if !ids.contains(&id) {
                out.push(Violation::DanglingEndpoint { edge: i, id });
            }
        }
    }
    out
}
