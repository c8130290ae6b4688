//! Layers of the network as functions over tape variables: token and type
//! embeddings, the attention message-passing convolution, GraphNorm, the
//! convolution block and the pooled classification head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Rng, Tensor, TensorError, Var};

pub const GRAPH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("node kind {0} outside 1..={1}")]
    NodeKindOutOfRange(u16, usize),
    #[error("edge relation {0} outside 1..={1}")]
    RelationOutOfRange(u16, usize),
    #[error("edge endpoint {0} outside {1} nodes")]
    Endpoint(usize, usize),
    #[error("edge features given without an edge map, or the reverse")]
    EdgeFeatureMismatch,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// How edges contribute to messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRepr {
    None,
    TypeEmbed,
    Tokens,
}

/// Sinusoidal positional encoding table, `len × dim`.
pub fn positional_encoding<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for col in 0..dim {
            let pair = (col / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
            data.push(T::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).unwrap()
}

/// Embeds `n` windows of `window` token IDs (row-major in `ids`), adds the
/// positional encoding per position and flattens each window to one row of
/// width `window · d`.
pub fn encode_tokens<'t, T: Real>(
    table: Var<'t, T>,
    ids: &[u32],
    window: usize,
    pe: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let shape = table.shape();
    let (vocab, dim) = (shape[0], shape[1]);
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(NnError::TokenOutOfRange { id, vocab });
    }
    assert_eq!(ids.len() % window, 0, "ids not a whole number of windows");
    let n = ids.len() / window;
    let rows: Rc<[usize]> = ids.iter().map(|&i| i as usize).collect();
    let gathered = table.gather_rows(rows)?;
    let mut tiled = Vec::with_capacity(ids.len() * dim);
    for _ in 0..n {
        tiled.extend_from_slice(pe.data());
    }
    let pe_const = table.tape().constant(Tensor::new(vec![ids.len(), dim], tiled)?);
    Ok(gathered.add(pe_const)?.reshape(&[n, window * dim])?)
}

/// Rows of a type-embedding table for 1-based type IDs.
pub fn encode_types<'t, T: Real>(table: Var<'t, T>, types: &[u16], is_node: bool) -> Result<Var<'t, T>> {
    let n_types = table.shape()[0];
    let mut rows = Vec::with_capacity(types.len());
    for &t in types {
        if t == 0 || t as usize > n_types {
            return Err(if is_node {
                NnError::NodeKindOutOfRange(t, n_types)
            } else {
                NnError::RelationOutOfRange(t, n_types)
            });
        }
        rows.push(t as usize - 1);
    }
    Ok(table.gather_rows(rows.into())?)
}

pub fn encode_node_types<'t, T: Real>(table: Var<'t, T>, kinds: &[u16]) -> Result<Var<'t, T>> {
    encode_types(table, kinds, true)
}

/// Edge feature rows for the chosen representation; `None` when edges carry
/// no features.
pub fn encode_edges<'t, T: Real>(
    repr: EdgeRepr,
    relations: &[u16],
    type_table: Option<Var<'t, T>>,
    tokens: &[u32],
    token_table: Option<Var<'t, T>>,
    edge_window: usize,
    pe: Option<&Tensor<T>>,
) -> Result<Option<Var<'t, T>>> {
    match repr {
        EdgeRepr::None => Ok(None),
        EdgeRepr::TypeEmbed => {
            let table = type_table.ok_or(NnError::EdgeFeatureMismatch)?;
            encode_types(table, relations, false).map(Some)
        }
        EdgeRepr::Tokens => {
            let table = token_table.ok_or(NnError::EdgeFeatureMismatch)?;
            let pe = pe.ok_or(NnError::EdgeFeatureMismatch)?;
            encode_tokens(table, tokens, edge_window, pe).map(Some)
        }
    }
}

/// Weights of one message-passing convolution. Maps multiply on the right:
/// `h · W` with `W: D_in × D`.
#[derive(Clone, Copy)]
pub struct ConvVars<'t, T: Real> {
    pub w_query: Var<'t, T>,
    pub w_message: Var<'t, T>,
    pub w_self: Var<'t, T>,
    pub bias: Var<'t, T>,
    pub w_edge: Option<Var<'t, T>>,
}

/// Edge list of a (batched) graph, `src[e] → dst[e]`.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub n_nodes: usize,
}

impl EdgeIndex {
    pub fn new(src: &[usize], dst: &[usize], n_nodes: usize) -> Result<Self> {
        assert_eq!(src.len(), dst.len());
        if let Some(&bad) = src.iter().chain(dst).find(|&&v| v >= n_nodes) {
            return Err(NnError::Endpoint(bad, n_nodes));
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            n_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Keys and attention weights of every edge. Keys are `W_msg·h_src`, plus the
/// projected edge features when present; scores are the scaled dot product
/// with the destination's query, normalized over each destination's incoming
/// edges.
pub fn attention<'t, T: Real>(
    h: Var<'t, T>,
    edges: &EdgeIndex,
    edge_feats: Option<Var<'t, T>>,
    p: &ConvVars<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let width = p.w_query.shape()[1];
    let query = h.matmul(p.w_query)?;
    let message = h.matmul(p.w_message)?;
    let mut keys = message.gather_rows(edges.src.clone())?;
    match (edge_feats, p.w_edge) {
        (Some(f), Some(w)) => keys = keys.add(f.matmul(w)?)?,
        (None, None) => {}
        _ => return Err(NnError::EdgeFeatureMismatch),
    }
    let q_dst = query.gather_rows(edges.dst.clone())?;
    let scores = q_dst
        .mul(keys)?
        .sum_axis(1)?
        .scale(T::one() / T::lit(width as f64).sqrt());
    let alpha = scores.segment_softmax(edges.dst.clone())?;
    Ok((keys, alpha))
}

/// `out_i = W_self·h_i + b + mean over incoming edges j→i of α_ij·k_ij`.
/// Nodes without incoming edges get the self term only.
pub fn general_conv<'t, T: Real>(
    h: Var<'t, T>,
    edges: &EdgeIndex,
    edge_feats: Option<Var<'t, T>>,
    p: &ConvVars<'t, T>,
) -> Result<Var<'t, T>> {
    let (keys, alpha) = attention(h, edges, edge_feats, p)?;
    let aggregated = keys.mul_col(alpha)?.segment_mean(edges.dst.clone(), edges.n_nodes)?;
    Ok(h.matmul(p.w_self)?.add_row(p.bias)?.add(aggregated)?)
}

#[derive(Clone, Copy)]
pub struct GraphNormVars<'t, T: Real> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
    pub alpha: Var<'t, T>,
}

/// Per-graph, per-feature normalization:
/// `γ·(h − α·μ)/sqrt(mean((h − α·μ)²) + ε) + β`, statistics taken within each
/// graph only.
pub fn graph_norm<'t, T: Real>(
    h: Var<'t, T>,
    graph_of: &Rc<[usize]>,
    n_graphs: usize,
    p: &GraphNormVars<'t, T>,
) -> Result<Var<'t, T>> {
    let mean = h.segment_mean(graph_of.clone(), n_graphs)?;
    let centered = h.sub(mean.gather_rows(graph_of.clone())?.mul_row(p.alpha)?)?;
    let var = centered
        .mul(centered)?
        .segment_mean(graph_of.clone(), n_graphs)?
        .add_scalar(T::lit(GRAPH_NORM_EPS));
    let std = var.sqrt().gather_rows(graph_of.clone())?;
    Ok(centered.div(std)?.mul_row(p.gamma)?.add_row(p.beta)?)
}

#[derive(Clone, Copy)]
pub struct BlockVars<'t, T: Real> {
    pub conv: ConvVars<'t, T>,
    pub prelu: Var<'t, T>,
    pub norm: GraphNormVars<'t, T>,
}

/// One block: `Dropout(GraphNorm(PReLU(conv(h))))`.
#[allow(clippy::too_many_arguments)]
pub fn conv_group<'t, T: Real>(
    h: Var<'t, T>,
    edges: &EdgeIndex,
    edge_feats: Option<Var<'t, T>>,
    graph_of: &Rc<[usize]>,
    n_graphs: usize,
    block: &BlockVars<'t, T>,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var<'t, T>> {
    let x = general_conv(h, edges, edge_feats, &block.conv)?;
    let x = x.prelu(block.prelu)?;
    let x = graph_norm(x, graph_of, n_graphs, &block.norm)?;
    Ok(x.dropout(dropout, rng, training)?)
}

/// Head weights. `hidden` is `(W1, b1)` in two-layer mode and absent in
/// single-linear mode.
#[derive(Clone, Copy)]
pub struct HeadVars<'t, T: Real> {
    pub hidden: Option<(Var<'t, T>, Var<'t, T>)>,
    pub w_out: Var<'t, T>,
    pub b_out: Var<'t, T>,
}

/// Global mean pool per graph, then `W2·σ(W1·h̄ + b1) + b2` (or `W2·h̄ + b2`).
pub fn readout_and_classify<'t, T: Real>(
    h: Var<'t, T>,
    graph_of: &Rc<[usize]>,
    n_graphs: usize,
    head: &HeadVars<'t, T>,
) -> Result<Var<'t, T>> {
    let pooled = h.segment_mean(graph_of.clone(), n_graphs)?;
    let z = match head.hidden {
        Some((w1, b1)) => pooled.matmul(w1)?.add_row(b1)?.sigmoid(),
        None => pooled,
    };
    Ok(z.matmul(head.w_out)?.add_row(head.b_out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
    }

    struct ConvFixture {
        wq: Tensor<f64>,
        wm: Tensor<f64>,
        ws: Tensor<f64>,
        b: Tensor<f64>,
    }

    impl ConvFixture {
        fn new(din: usize, d: usize, rng: &mut Rng) -> Self {
            Self {
                wq: rand_t(&[din, d], rng),
                wm: rand_t(&[din, d], rng),
                ws: rand_t(&[din, d], rng),
                b: rand_t(&[d], rng),
            }
        }

        fn vars<'t>(&self, tape: &'t Tape<f64>) -> ConvVars<'t, f64> {
            ConvVars {
                w_query: tape.param(self.wq.clone()),
                w_message: tape.param(self.wm.clone()),
                w_self: tape.param(self.ws.clone()),
                bias: tape.param(self.b.clone()),
                w_edge: None,
            }
        }
    }

    fn row_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        let (r, c) = w.dims2();
        (0..c).map(|j| (0..r).map(|i| x[i] * w.get2(i, j)).sum()).collect()
    }

    #[test]
    fn pe_closed_form() {
        let pe = positional_encoding::<f64>(8, 16);
        for c in 0..16 {
            assert_eq!(pe.get2(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.get2(1, 0) - 0.841471).abs() < 1e-6);
        // column pair (2,3) shares frequency 10000^(2/16)
        let f = 10000f64.powf(2.0 / 16.0);
        assert!((pe.get2(3, 2) - (3.0 / f).sin()).abs() < 1e-12);
        assert!((pe.get2(3, 3) - (3.0 / f).cos()).abs() < 1e-12);
    }

    #[test]
    fn token_encoding_shape_and_values() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(3);
        let table = rand_t(&[20, 16], &mut rng);
        let e = tape.param(table.clone());
        let pe = positional_encoding(8, 16);
        let ids: Vec<u32> = (0..16).map(|i| i % 20).collect();
        let out = encode_tokens(e, &ids, 8, &pe).unwrap().value();
        assert_eq!(out.shape(), &[2, 128]);
        // second window, position 3, column 5
        assert_eq!(out.get2(1, 3 * 16 + 5), table.get2(11, 5) + pe.get2(3, 5));
        assert!(matches!(
            encode_tokens(e, &[25; 8], 8, &pe),
            Err(NnError::TokenOutOfRange { id: 25, vocab: 20 })
        ));
    }

    #[test]
    fn empty_edge_tokens_give_pe_of_padding() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(4);
        let table = rand_t(&[10, 16], &mut rng);
        let pe = positional_encoding(16, 16);
        let pad = 0u32;
        let out = encode_edges(EdgeRepr::Tokens, &[1], None, &[pad; 16], Some(tape.param(table.clone())), 16, Some(&pe))
            .unwrap()
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[1, 256]);
        for pos in 0..16 {
            for c in 0..16 {
                assert_eq!(out.get2(0, pos * 16 + c), table.get2(0, c) + pe.get2(pos, c));
            }
        }
    }

    #[test]
    fn edge_variants() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(5);
        let types = rand_t(&[20, 4], &mut rng);
        assert!(encode_edges::<f64>(EdgeRepr::None, &[1], None, &[], None, 16, None).unwrap().is_none());
        let out = encode_edges(EdgeRepr::TypeEmbed, &[5], Some(tape.param(types.clone())), &[], None, 16, None)
            .unwrap()
            .unwrap()
            .value();
        assert_eq!(out.data(), types.row(4));
        assert!(matches!(
            encode_edges(EdgeRepr::TypeEmbed, &[21], Some(tape.param(types)), &[], None, 16, None),
            Err(NnError::RelationOutOfRange(21, 20))
        ));
    }

    #[test]
    fn node_type_rows() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(6);
        let table = rand_t(&[44, 16], &mut rng);
        let t = tape.param(table.clone());
        let out = encode_node_types(t, &[1, 7, 7]).unwrap().value();
        assert_eq!(out.row(0), table.row(0));
        assert_eq!(out.row(1), out.row(2));
        assert!(encode_node_types(t, &[0]).is_err());
        assert!(encode_node_types(t, &[45]).is_err());
        // only gathered rows receive gradient
        let loss = encode_node_types(t, &[3]).unwrap().sum();
        let g = tape.backward(loss).unwrap().get(t);
        for r in 0..44 {
            let expect = if r == 2 { 1.0 } else { 0.0 };
            assert!(g.row(r).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn conv_single_node_is_self_term() {
        let mut rng = Rng::new(7);
        let fx = ConvFixture::new(3, 4, &mut rng);
        let tape = Tape::new();
        let h = rand_t(&[1, 3], &mut rng);
        let edges = EdgeIndex::new(&[], &[], 1).unwrap();
        let out = general_conv(tape.constant(h.clone()), &edges, None, &fx.vars(&tape)).unwrap().value();
        let expect: Vec<f64> = row_mat(h.row(0), &fx.ws).iter().zip(fx.b.data()).map(|(a, b)| a + b).collect();
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_one_incoming_edge() {
        let mut rng = Rng::new(8);
        let fx = ConvFixture::new(3, 4, &mut rng);
        let tape = Tape::new();
        let h = rand_t(&[2, 3], &mut rng);
        let edges = EdgeIndex::new(&[0], &[1], 2).unwrap();
        let vars = fx.vars(&tape);
        let hv = tape.constant(h.clone());
        let (_, alpha) = attention(hv, &edges, None, &vars).unwrap();
        assert_eq!(alpha.value().data(), &[1.0]);
        let out = general_conv(hv, &edges, None, &vars).unwrap().value();
        let s = row_mat(h.row(1), &fx.ws);
        let m = row_mat(h.row(0), &fx.wm);
        for j in 0..4 {
            assert!((out.get2(1, j) - (s[j] + fx.b.data()[j] + m[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_symmetric_sources() {
        let mut rng = Rng::new(9);
        let fx = ConvFixture::new(3, 4, &mut rng);
        let tape = Tape::new();
        let mut h = rand_t(&[3, 3], &mut rng);
        let row0 = h.row(0).to_vec();
        h.data_mut()[3..6].copy_from_slice(&row0);
        let edges = EdgeIndex::new(&[0, 1], &[2, 2], 3).unwrap();
        let (_, alpha) = attention(tape.constant(h), &edges, None, &fx.vars(&tape)).unwrap();
        assert_eq!(alpha.value().data(), &[0.5, 0.5]);
    }

    /// Dense reimplementation: materializes the full score matrix with a mask
    /// and normalizes row by row.
    fn dense_conv(h: &Tensor<f64>, src: &[usize], dst: &[usize], fx: &ConvFixture) -> Vec<Vec<f64>> {
        let n = h.dims2().0;
        let d = fx.wq.dims2().1;
        let q: Vec<Vec<f64>> = (0..n).map(|i| row_mat(h.row(i), &fx.wq)).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| row_mat(h.row(i), &fx.wm)).collect();
        let mut out = vec![];
        for i in 0..n {
            let incoming: Vec<usize> = (0..src.len()).filter(|&e| dst[e] == i).collect();
            let scores: Vec<f64> = incoming
                .iter()
                .map(|&e| q[i].iter().zip(&k[src[e]]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut row: Vec<f64> = row_mat(h.row(i), &fx.ws).iter().zip(fx.b.data()).map(|(a, b)| a + b).collect();
            for (idx, &e) in incoming.iter().enumerate() {
                let a = scores[idx].exp() / z;
                for j in 0..d {
                    row[j] += a * k[src[e]][j] / incoming.len() as f64;
                }
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn conv_matches_dense_oracle() {
        let mut rng = Rng::new(10);
        let fx = ConvFixture::new(4, 5, &mut rng);
        let h = rand_t(&[5, 4], &mut rng);
        let src = [0, 1, 2, 3, 4, 0, 2, 1];
        let dst = [1, 2, 3, 4, 0, 2, 2, 1];
        let tape = Tape::new();
        let edges = EdgeIndex::new(&src, &dst, 5).unwrap();
        let out = general_conv(tape.constant(h.clone()), &edges, None, &fx.vars(&tape)).unwrap().value();
        let dense = dense_conv(&h, &src, &dst, &fx);
        for i in 0..5 {
            for j in 0..5 {
                assert!((out.get2(i, j) - dense[i][j]).abs() < 1e-12);
            }
        }
    }

    fn norm_vars<'t>(tape: &'t Tape<f64>, d: usize, alpha: f64) -> GraphNormVars<'t, f64> {
        GraphNormVars {
            gamma: tape.param(Tensor::full(&[d], 1.0)),
            beta: tape.param(Tensor::full(&[d], 0.0)),
            alpha: tape.param(Tensor::full(&[d], alpha)),
        }
    }

    #[test]
    fn graph_norm_zero_mean() {
        let mut rng = Rng::new(11);
        let tape = Tape::new();
        let h = rand_t(&[7, 3], &mut rng);
        let g: Rc<[usize]> = vec![0, 0, 0, 1, 1, 1, 1].into();
        let out = graph_norm(tape.constant(h), &g, 2, &norm_vars(&tape, 3, 1.0)).unwrap().value();
        for (graph, rows) in [(0, 0..3), (1, 3..7)] {
            let _ = graph;
            for c in 0..3 {
                let n = rows.len() as f64;
                let m: f64 = rows.clone().map(|r| out.get2(r, c)).sum::<f64>() / n;
                assert!(m.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn graph_norm_single_node_gives_beta() {
        let tape = Tape::new();
        let h = Tensor::new(vec![1, 3], vec![4.0, -2.0, 9.0]).unwrap();
        let g: Rc<[usize]> = vec![0].into();
        let p = GraphNormVars {
            gamma: tape.param(Tensor::new(vec![3], vec![2.0, 3.0, 4.0]).unwrap()),
            beta: tape.param(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            alpha: tape.param(Tensor::full(&[3], 1.0)),
        };
        let out = graph_norm(tape.constant(h), &g, 1, &p).unwrap().value();
        assert_eq!(out.data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn graph_norm_batched_equals_separate() {
        let mut rng = Rng::new(12);
        let h = rand_t(&[5, 4], &mut rng);
        let a = Tensor::new(vec![4], vec![0.3, 0.9, 1.2, -0.5]).unwrap();
        let run = |rows: Tensor<f64>, g: Vec<usize>, n: usize| {
            let tape = Tape::new();
            let p = GraphNormVars {
                gamma: tape.param(Tensor::full(&[4], 1.5)),
                beta: tape.param(Tensor::full(&[4], -0.2)),
                alpha: tape.param(a.clone()),
            };
            graph_norm(tape.constant(rows), &g.into(), n, &p).unwrap().value().as_ref().clone()
        };
        let both = run(h.clone(), vec![0, 0, 1, 1, 1], 2);
        let first = run(Tensor::new(vec![2, 4], h.data()[..8].to_vec()).unwrap(), vec![0, 0], 1);
        let second = run(Tensor::new(vec![3, 4], h.data()[8..].to_vec()).unwrap(), vec![0, 0, 0], 1);
        for (x, y) in both.data().iter().zip(first.data().iter().chain(second.data())) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_norm_unit_variance() {
        let mut rng = Rng::new(13);
        let tape = Tape::new();
        let h = rand_t(&[40, 3], &mut rng).map(|v| v * 3.0);
        let g: Rc<[usize]> = vec![0; 40].into();
        let out = graph_norm(tape.constant(h), &g, 1, &norm_vars(&tape, 3, 1.0)).unwrap().value();
        for c in 0..3 {
            let var: f64 = (0..40).map(|r| out.get2(r, c).powi(2)).sum::<f64>() / 40.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    fn block_fixture<'t>(tape: &'t Tape<f64>, fx: &ConvFixture) -> BlockVars<'t, f64> {
        BlockVars {
            conv: fx.vars(tape),
            prelu: tape.param(Tensor::new(vec![1], vec![0.25]).unwrap()),
            norm: norm_vars(tape, fx.wq.dims2().1, 0.8),
        }
    }

    #[test]
    fn conv_group_eval_is_manual_chain() {
        let mut rng = Rng::new(14);
        let fx = ConvFixture::new(3, 4, &mut rng);
        let h = rand_t(&[4, 3], &mut rng);
        let edges = EdgeIndex::new(&[0, 1, 2, 3], &[1, 2, 3, 0], 4).unwrap();
        let g: Rc<[usize]> = vec![0, 0, 0, 0].into();
        let tape = Tape::new();
        let block = block_fixture(&tape, &fx);
        let hv = tape.constant(h);
        let composed = conv_group(hv, &edges, None, &g, 1, &block, 0.08, &mut Rng::new(0), false).unwrap();
        let p0 = conv_group(hv, &edges, None, &g, 1, &block, 0.0, &mut Rng::new(0), true).unwrap();
        let manual = graph_norm(
            general_conv(hv, &edges, None, &block.conv).unwrap().prelu(block.prelu).unwrap(),
            &g,
            1,
            &block.norm,
        )
        .unwrap();
        assert_eq!(composed.value(), manual.value());
        assert_eq!(p0.value(), manual.value());
    }

    #[test]
    fn readout_cases() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(15);
        let w2 = rand_t(&[3, 2], &mut rng);
        let head = HeadVars {
            hidden: Some((tape.param(rand_t(&[3, 3], &mut rng)), tape.param(Tensor::zeros(&[3])))),
            w_out: tape.param(w2.clone()),
            b_out: tape.param(Tensor::zeros(&[2])),
        };
        // zero pooled vector, zero biases -> W2 · 0.5
        let h = tape.constant(Tensor::zeros(&[4, 3]));
        let g: Rc<[usize]> = vec![0; 4].into();
        let logits = readout_and_classify(h, &g, 1, &head).unwrap().value();
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| 0.5 * w2.get2(i, j)).sum();
            assert!((logits.get2(0, j) - expect).abs() < 1e-15);
        }
        // constant node features pool to that constant
        let single = HeadVars { hidden: None, ..head };
        let c = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let out = readout_and_classify(tape.constant(c), &vec![0, 0].into(), 1, &single).unwrap().value();
        let expect = row_mat(&[1.0, 2.0, 3.0], &w2);
        assert!((out.get2(0, 0) - expect[0]).abs() < 1e-14);
        assert!((out.get2(0, 1) - expect[1]).abs() < 1e-14);
    }
}
