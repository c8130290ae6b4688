//! Seeded generator of small function graphs for fixtures and smoke tests.
//! A graph is labelled 1 exactly when it contains a node of the marker kind.

use crate::graph_ir::{CodeGraph, EdgeRecord, NodeRecord, TypeRegistry};
use crate::tensor::Rng;

pub const MARKER_KIND: &str = "CALL";

const FILLER: &[(&str, &[&str])] = &[
    ("IDENTIFIER", &["n", "buf", "len", "i", "ptr"]),
    ("LITERAL", &["0", "1", "16", "\"ok\""]),
    ("LOCAL", &["int i", "char buf[16]", "size_t len"]),
    ("BLOCK", &["", "{}"]),
    ("RETURN", &["return 0;", "return n;", "return len;"]),
    ("CONTROL_STRUCTURE", &["if (n > 0)", "while (i < len)", "for (i = 0; i < n; i++)"]),
];

const MARKER_CODE: &[&str] = &["strcpy(buf, src)", "memcpy(dst, src, n)", "gets(buf)"];

#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub n_projects: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            min_nodes: 5,
            max_nodes: 12,
            n_projects: 4,
        }
    }
}

fn pick<'a, T>(rng: &mut Rng, items: &'a [T]) -> &'a T {
    &items[(rng.uniform() * items.len() as f64) as usize]
}

fn below(rng: &mut Rng, n: usize) -> usize {
    (rng.uniform() * n as f64) as usize
}

/// One graph: a METHOD root, filler nodes hung off random earlier nodes by
/// AST edges, a CFG chain in node order, and (for label 1) one marker node
/// at a random position.
pub fn synthetic_graph(
    registry: &TypeRegistry,
    opts: &SyntheticOptions,
    label: u8,
    sample_id: String,
    rng: &mut Rng,
) -> CodeGraph {
    let kind = |name: &str| registry.node_kind(name).expect("kind in registry");
    let n = opts.min_nodes + below(rng, opts.max_nodes - opts.min_nodes + 1);
    let mut nodes = vec![NodeRecord {
        id: 0,
        kind: kind("METHOD"),
        code: "int f(char *src, int n)".into(),
    }];
    let marker_at = (label == 1).then(|| 1 + below(rng, n - 1));
    for i in 1..n {
        let (k, code) = if Some(i) == marker_at {
            (kind(MARKER_KIND), pick(rng, MARKER_CODE).to_string())
        } else {
            let (name, codes) = pick(rng, FILLER);
            (kind(name), pick(rng, codes).to_string())
        };
        nodes.push(NodeRecord { id: i as u64, kind: k, code });
    }
    let ast = registry.relation("AST").unwrap();
    let cfg = registry.relation("CFG").unwrap();
    let mut edges = vec![];
    for i in 1..n {
        edges.push(EdgeRecord {
            src: below(rng, i) as u64,
            dst: i as u64,
            relation: ast,
            attr: String::new(),
        });
        edges.push(EdgeRecord {
            src: (i - 1) as u64,
            dst: i as u64,
            relation: cfg,
            attr: String::new(),
        });
    }
    CodeGraph {
        nodes,
        edges,
        label,
        project: format!("project{}", below(rng, opts.n_projects.max(1))),
        sample_id,
    }
}

/// `n` graphs with `n_positive` of label 1 spread evenly through the list.
pub fn synthetic_corpus(
    registry: &TypeRegistry,
    opts: &SyntheticOptions,
    n: usize,
    n_positive: usize,
    prefix: &str,
    seed: u64,
) -> Vec<CodeGraph> {
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let label = u8::from((i + 1) * n_positive / n.max(1) > i * n_positive / n.max(1));
            synthetic_graph(registry, opts, label, format!("{prefix}{i:05}"), &mut root.split(i as u64))
        })
        .collect()
}
