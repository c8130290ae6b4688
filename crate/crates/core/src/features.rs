//! Model-ready graphs: token windows and type IDs per node and edge, and the
//! concatenated batch form with a graph-membership vector.

use thiserror::Error;

use crate::codetok::{fit_window, BpeVocabulary};
use crate::graph_ir::CodeGraph;

pub const DEFAULT_NODE_WINDOW: usize = 8;
pub const DEFAULT_EDGE_WINDOW: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("record truncated at byte {0}")]
    Truncated(usize),
    #[error("record string is not UTF-8")]
    Utf8,
    #[error("window lengths differ within a batch ({0}/{1} vs {2}/{3})")]
    WindowMismatch(usize, usize, usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("edge endpoint {0} outside graph of {1} nodes")]
    Endpoint(u32, usize),
}

/// One tokenized graph. Both token windows and discrete types are kept so
/// any model variation can be trained from the same preprocessed data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGraph {
    pub sample_id: String,
    pub project: String,
    pub label: u8,
    pub node_window: usize,
    pub edge_window: usize,
    pub node_kinds: Vec<u16>,
    /// `N × node_window`, row-major.
    pub node_tokens: Vec<u32>,
    pub edge_src: Vec<u32>,
    pub edge_dst: Vec<u32>,
    pub edge_relations: Vec<u16>,
    /// `E × edge_window`, row-major.
    pub edge_tokens: Vec<u32>,
}

impl FeatureGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_kinds.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.sample_id);
        put_str(&mut out, &self.project);
        out.push(self.label);
        put_u32(&mut out, self.node_window as u32);
        put_u32(&mut out, self.edge_window as u32);
        put_u32(&mut out, self.num_nodes() as u32);
        put_u32(&mut out, self.num_edges() as u32);
        self.node_kinds.iter().for_each(|&k| out.extend_from_slice(&k.to_le_bytes()));
        self.node_tokens.iter().for_each(|&t| put_u32(&mut out, t));
        self.edge_src.iter().for_each(|&t| put_u32(&mut out, t));
        self.edge_dst.iter().for_each(|&t| put_u32(&mut out, t));
        self.edge_relations.iter().for_each(|&k| out.extend_from_slice(&k.to_le_bytes()));
        self.edge_tokens.iter().for_each(|&t| put_u32(&mut out, t));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = Reader { bytes, pos: 0 };
        let sample_id = r.string()?;
        let project = r.string()?;
        let label = r.take(1)?[0];
        let node_window = r.u32()? as usize;
        let edge_window = r.u32()? as usize;
        let n = r.u32()? as usize;
        let e = r.u32()? as usize;
        let node_kinds = r.u16s(n)?;
        let node_tokens = r.u32s(n * node_window)?;
        let edge_src = r.u32s(e)?;
        let edge_dst = r.u32s(e)?;
        let edge_relations = r.u16s(e)?;
        let edge_tokens = r.u32s(e * edge_window)?;
        for &v in edge_src.iter().chain(&edge_dst) {
            if v as usize >= n {
                return Err(FeatureError::Endpoint(v, n));
            }
        }
        Ok(Self {
            sample_id,
            project,
            label,
            node_window,
            edge_window,
            node_kinds,
            node_tokens,
            edge_src,
            edge_dst,
            edge_relations,
            edge_tokens,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FeatureError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, FeatureError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FeatureError::Utf8)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FeatureError> {
        let b = self.take(n.checked_mul(4).ok_or(FeatureError::Truncated(self.pos))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>, FeatureError> {
        let b = self.take(n.checked_mul(2).ok_or(FeatureError::Truncated(self.pos))?)?;
        Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Tokenizes node code and edge attributes into fixed windows.
pub fn featurize(g: &CodeGraph, vocab: &BpeVocabulary, node_window: usize, edge_window: usize) -> FeatureGraph {
    let pad = vocab.pad_id();
    let mut node_tokens = Vec::with_capacity(g.nodes.len() * node_window);
    for n in &g.nodes {
        node_tokens.extend(fit_window(&vocab.encode(&n.code), node_window, pad).ids);
    }
    let mut edge_tokens = Vec::with_capacity(g.edges.len() * edge_window);
    for e in &g.edges {
        edge_tokens.extend(fit_window(&vocab.encode(&e.attr), edge_window, pad).ids);
    }
    FeatureGraph {
        sample_id: g.sample_id.clone(),
        project: g.project.clone(),
        label: g.label,
        node_window,
        edge_window,
        node_kinds: g.nodes.iter().map(|n| n.kind).collect(),
        node_tokens,
        edge_src: g.edges.iter().map(|e| e.src as u32).collect(),
        edge_dst: g.edges.iter().map(|e| e.dst as u32).collect(),
        edge_relations: g.edges.iter().map(|e| e.relation).collect(),
        edge_tokens,
    }
}

/// Several graphs concatenated into one disjoint graph. Node indices are
/// offset per graph; `graph_of[i]` names the graph of node `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub n_graphs: usize,
    pub node_window: usize,
    pub edge_window: usize,
    pub graph_of: Vec<usize>,
    pub node_kinds: Vec<u16>,
    pub node_tokens: Vec<u32>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_relations: Vec<u16>,
    pub edge_tokens: Vec<u32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a FeatureGraph>) -> Result<Self, FeatureError> {
        let mut graphs = graphs.into_iter().peekable();
        let first = graphs.peek().ok_or(FeatureError::EmptyBatch)?;
        let mut b = Batch {
            n_graphs: 0,
            node_window: first.node_window,
            edge_window: first.edge_window,
            graph_of: vec![],
            node_kinds: vec![],
            node_tokens: vec![],
            edge_src: vec![],
            edge_dst: vec![],
            edge_relations: vec![],
            edge_tokens: vec![],
            labels: vec![],
        };
        for g in graphs {
            if (g.node_window, g.edge_window) != (b.node_window, b.edge_window) {
                return Err(FeatureError::WindowMismatch(
                    b.node_window,
                    b.edge_window,
                    g.node_window,
                    g.edge_window,
                ));
            }
            let offset = b.graph_of.len();
            for &v in g.edge_src.iter().chain(&g.edge_dst) {
                if v as usize >= g.num_nodes() {
                    return Err(FeatureError::Endpoint(v, g.num_nodes()));
                }
            }
            b.graph_of.extend(std::iter::repeat(b.n_graphs).take(g.num_nodes()));
            b.node_kinds.extend_from_slice(&g.node_kinds);
            b.node_tokens.extend_from_slice(&g.node_tokens);
            b.edge_src.extend(g.edge_src.iter().map(|&s| s as usize + offset));
            b.edge_dst.extend(g.edge_dst.iter().map(|&d| d as usize + offset));
            b.edge_relations.extend_from_slice(&g.edge_relations);
            b.edge_tokens.extend_from_slice(&g.edge_tokens);
            b.labels.push(g.label);
            b.n_graphs += 1;
        }
        Ok(b)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph_of.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }
}
