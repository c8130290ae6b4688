//! Configuration, parameter allocation, the full forward pass and checkpoint
//! files.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codetok::STARCODER_VOCAB_SIZE;
use crate::features::{Batch, DEFAULT_EDGE_WINDOW, DEFAULT_NODE_WINDOW};
use crate::graph_ir::{NUM_EDGE_RELATIONS, NUM_NODE_KINDS};
use crate::nn::{self, BlockVars, ConvVars, EdgeIndex, EdgeRepr, GraphNormVars, HeadVars, NnError};
use crate::tensor::{DType, Real, Rng, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGNN";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "vgnn";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("batch windows {found:?} differ from config {expected:?}")]
    WindowMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("not a checkpoint or unsupported version ({0})")]
    Version(String),
    #[error("array {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("array {name} stored as {found:?}, wanted {wanted:?}")]
    DType { name: String, found: Option<u8>, wanted: DType },
    #[error("checkpoint config header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Nn(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRepr {
    Tokens,
    Types,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    TwoLayer,
    SingleLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelVariations {
    pub node_repr: NodeRepr,
    pub edge_repr: EdgeRepr,
    pub head_mode: HeadMode,
}

impl Default for ModelVariations {
    fn default() -> Self {
        Self {
            node_repr: NodeRepr::Tokens,
            edge_repr: EdgeRepr::None,
            head_mode: HeadMode::TwoLayer,
        }
    }
}

impl ModelVariations {
    /// Every combination, in a fixed order.
    pub fn all() -> Vec<Self> {
        let mut out = vec![];
        for node_repr in [NodeRepr::Tokens, NodeRepr::Types] {
            for edge_repr in [EdgeRepr::None, EdgeRepr::TypeEmbed, EdgeRepr::Tokens] {
                for head_mode in [HeadMode::TwoLayer, HeadMode::SingleLinear] {
                    out.push(Self {
                        node_repr,
                        edge_repr,
                        head_mode,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub node_window: usize,
    pub edge_window: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub edge_type_dim: usize,
    pub variations: ModelVariations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: STARCODER_VOCAB_SIZE,
            embed_dim: 16,
            node_window: DEFAULT_NODE_WINDOW,
            edge_window: DEFAULT_EDGE_WINDOW,
            hidden: 128,
            n_layers: 6,
            dropout: 0.08,
            edge_type_dim: 4,
            variations: ModelVariations::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("node_window", self.node_window),
            ("edge_window", self.edge_window),
            ("hidden", self.hidden),
            ("n_layers", self.n_layers),
            ("edge_type_dim", self.edge_type_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn uses_token_embedding(&self) -> bool {
        self.variations.node_repr == NodeRepr::Tokens || self.variations.edge_repr == EdgeRepr::Tokens
    }

    /// Width of the node features entering the first convolution.
    pub fn node_input_width(&self) -> usize {
        match self.variations.node_repr {
            NodeRepr::Tokens => self.node_window * self.embed_dim,
            NodeRepr::Types => self.embed_dim,
        }
    }

    pub fn edge_feature_width(&self) -> Option<usize> {
        match self.variations.edge_repr {
            EdgeRepr::None => None,
            EdgeRepr::TypeEmbed => Some(self.edge_type_dim),
            EdgeRepr::Tokens => Some(self.edge_window * self.embed_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in ±sqrt(1/fan_in).
    Fan(usize),
    Normal(f64),
    Const(f64),
}

/// Names, shapes and initializers of every array, in a fixed order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h) = (cfg.embed_dim, cfg.hidden);
    let mut out = vec![];
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    if cfg.uses_token_embedding() {
        push("embed.tokens".into(), vec![cfg.vocab_size, d], Init::Normal(1.0));
    }
    if cfg.variations.node_repr == NodeRepr::Types {
        push("embed.node_types".into(), vec![NUM_NODE_KINDS, d], Init::Normal(1.0));
    }
    if cfg.variations.edge_repr == EdgeRepr::TypeEmbed {
        push("embed.edge_types".into(), vec![NUM_EDGE_RELATIONS, cfg.edge_type_dim], Init::Normal(1.0));
    }
    for layer in 0..cfg.n_layers {
        let d_in = if layer == 0 { cfg.node_input_width() } else { h };
        let p = |s: &str| format!("layers.{layer}.{s}");
        push(p("conv.w_query"), vec![d_in, h], Init::Fan(d_in));
        push(p("conv.w_message"), vec![d_in, h], Init::Fan(d_in));
        push(p("conv.w_self"), vec![d_in, h], Init::Fan(d_in));
        push(p("conv.bias"), vec![h], Init::Fan(d_in));
        if let Some(de) = cfg.edge_feature_width() {
            push(p("conv.w_edge"), vec![de, h], Init::Fan(de));
        }
        push(p("prelu"), vec![1], Init::Const(0.25));
        push(p("norm.gamma"), vec![h], Init::Const(1.0));
        push(p("norm.beta"), vec![h], Init::Const(0.0));
        // A mean-scale of exactly 1 makes the mean-pooled output of the last
        // block equal to β for every graph, so the readout starts blind.
        push(p("norm.alpha"), vec![h], Init::Const(0.0));
    }
    if cfg.variations.head_mode == HeadMode::TwoLayer {
        push("head.w1".into(), vec![h, h], Init::Fan(h));
        push("head.b1".into(), vec![h], Init::Fan(h));
    }
    push("head.w2".into(), vec![h, 2], Init::Fan(h));
    push("head.b2".into(), vec![2], Init::Fan(h));
    out
}

/// Every learnable array by unique name, plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Real> {
    pub config: ModelConfig,
    pub arrays: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// Allocates and initializes every array from `config.seed`. Each array
    /// draws from its own split stream, so adding one array leaves the others
    /// unchanged.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut arrays = IndexMap::new();
        for (i, (name, shape, init)) in layout(config).into_iter().enumerate() {
            let mut rng = root.split(i as u64);
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Fan(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive sd");
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
                Init::Const(c) => vec![T::lit(c); n],
            };
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            arrays,
        })
    }

    pub fn param_count(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.get(name)
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every array as a differentiable leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self.arrays.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }
}

/// Parameter arrays as variables on one tape.
pub struct BoundParams<'t, T: Real> {
    pub vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    fn var(&self, name: &str) -> Var<'t, T> {
        self.vars[name]
    }

    fn opt(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }
}

/// Node and edge index vectors of a batch, shared by every layer.
pub struct BatchIndex {
    pub edges: EdgeIndex,
    pub graph_of: Rc<[usize]>,
    pub n_graphs: usize,
}

impl BatchIndex {
    pub fn new(batch: &Batch) -> Result<Self> {
        Ok(Self {
            edges: EdgeIndex::new(&batch.edge_src, &batch.edge_dst, batch.num_nodes())?,
            graph_of: batch.graph_of.clone().into(),
            n_graphs: batch.n_graphs,
        })
    }
}

/// Full network: input encoding, `n_layers` blocks, pooling and head.
/// Returns `B × 2` logits.
pub fn forward<'t, T: Real>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    batch: &Batch,
    training: bool,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    if (batch.node_window, batch.edge_window) != (config.node_window, config.edge_window) {
        return Err(ModelError::WindowMismatch {
            expected: (config.node_window, config.edge_window),
            found: (batch.node_window, batch.edge_window),
        });
    }
    let index = BatchIndex::new(batch)?;
    let tokens = params.opt("embed.tokens");
    let mut h = match config.variations.node_repr {
        NodeRepr::Tokens => {
            let pe = nn::positional_encoding(config.node_window, config.embed_dim);
            nn::encode_tokens(tokens.expect("token table"), &batch.node_tokens, config.node_window, &pe)?
        }
        NodeRepr::Types => nn::encode_node_types(params.var("embed.node_types"), &batch.node_kinds)?,
    };
    let edge_pe = (config.variations.edge_repr == EdgeRepr::Tokens)
        .then(|| nn::positional_encoding(config.edge_window, config.embed_dim));
    let edge_feats = nn::encode_edges(
        config.variations.edge_repr,
        &batch.edge_relations,
        params.opt("embed.edge_types"),
        &batch.edge_tokens,
        tokens,
        config.edge_window,
        edge_pe.as_ref(),
    )?;
    for layer in 0..config.n_layers {
        let p = |s: &str| params.var(&format!("layers.{layer}.{s}"));
        let block = BlockVars {
            conv: ConvVars {
                w_query: p("conv.w_query"),
                w_message: p("conv.w_message"),
                w_self: p("conv.w_self"),
                bias: p("conv.bias"),
                w_edge: params.opt(&format!("layers.{layer}.conv.w_edge")),
            },
            prelu: p("prelu"),
            norm: GraphNormVars {
                gamma: p("norm.gamma"),
                beta: p("norm.beta"),
                alpha: p("norm.alpha"),
            },
        };
        h = nn::conv_group(
            h,
            &index.edges,
            edge_feats,
            &index.graph_of,
            index.n_graphs,
            &block,
            config.dropout,
            rng,
            training,
        )?;
    }
    let head = HeadVars {
        hidden: params.opt("head.w1").zip(params.opt("head.b1")),
        w_out: params.var("head.w2"),
        b_out: params.var("head.b2"),
    };
    Ok(nn::readout_and_classify(h, &index.graph_of, index.n_graphs, &head)?)
}

/// Eval-mode logits without recording a tape.
pub fn predict<T: Real>(params: &ModelParameters<T>, batch: &Batch) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let bound = params.bind(&tape);
    let logits = forward(&params.config, &bound, batch, false, &mut Rng::new(0))?;
    let out = logits.value().as_ref().clone();
    Ok(out)
}

pub fn save_checkpoint<T: Real>(params: &ModelParameters<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&checkpoint_bytes(params)?)?;
    f.flush()?;
    Ok(())
}

pub fn checkpoint_bytes<T: Real>(params: &ModelParameters<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
    for (name, t) in &params.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    Ok(out)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParameters<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against the shapes `expected` would
/// allocate.
pub fn load_checkpoint_for<T: Real>(path: &Path, expected: &ModelConfig) -> Result<ModelParameters<T>> {
    let params: ModelParameters<T> = load_checkpoint(path)?;
    check_layout(expected, &params.arrays)?;
    Ok(params)
}

fn check_layout<T: Real>(cfg: &ModelConfig, arrays: &IndexMap<String, Tensor<T>>) -> Result<()> {
    let want = layout(cfg);
    for (name, shape, _) in &want {
        let found = arrays.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
        if &found != shape {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found,
            });
        }
    }
    if let Some(extra) = arrays.keys().find(|k| !want.iter().any(|(n, _, _)| n == *k)) {
        return Err(ModelError::ShapeMismatch {
            name: extra.clone(),
            expected: vec![],
            found: arrays[extra].shape().to_vec(),
        });
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ModelError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelParameters<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| ModelError::Version("file too short".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Version("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(format!("format version {version}")));
    }
    let header_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(header_len)?)?;
    let n = c.u32()? as usize;
    let mut arrays = IndexMap::new();
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8_lossy(c.take(name_len)?).into_owned();
        let tag = c.take(1)?[0];
        if DType::from_tag(tag) != Some(T::DTYPE) {
            return Err(ModelError::DType {
                name,
                found: Some(tag),
                wanted: T::DTYPE,
            });
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64()?).map_err(|_| ModelError::Truncated)?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(T::DTYPE.size()))
            .ok_or(ModelError::Truncated)?;
        let data = T::from_le_bytes_slice(c.take(len)?);
        arrays.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(ModelError::Version("trailing bytes after arrays".into()));
    }
    check_layout(&config, &arrays)?;
    Ok(ModelParameters { config, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureGraph;
    use crate::tensor::segment_softmax;

    /// Independent accounting from the architecture description.
    fn walk_count(c: &ModelConfig) -> usize {
        let v = &c.variations;
        let mut n = 0;
        if v.node_repr == NodeRepr::Tokens || v.edge_repr == EdgeRepr::Tokens {
            n += c.vocab_size * c.embed_dim;
        }
        let first = if v.node_repr == NodeRepr::Types {
            n += 44 * c.embed_dim;
            c.embed_dim
        } else {
            c.node_window * c.embed_dim
        };
        let de = match v.edge_repr {
            EdgeRepr::None => 0,
            EdgeRepr::TypeEmbed => {
                n += 20 * c.edge_type_dim;
                c.edge_type_dim
            }
            EdgeRepr::Tokens => c.edge_window * c.embed_dim,
        };
        for l in 0..c.n_layers {
            let din = if l == 0 { first } else { c.hidden };
            n += 3 * din * c.hidden + c.hidden + de * c.hidden + 1 + 3 * c.hidden;
        }
        if v.head_mode == HeadMode::TwoLayer {
            n += c.hidden * c.hidden + c.hidden;
        }
        n + c.hidden * 2 + 2
    }

    fn small_config(variations: ModelVariations) -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            embed_dim: 4,
            node_window: 3,
            edge_window: 2,
            hidden: 6,
            n_layers: 2,
            edge_type_dim: 3,
            variations,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn fixture_graph(seed: u64, n: usize, e: usize, cfg: &ModelConfig) -> FeatureGraph {
        let mut rng = Rng::new(seed);
        let mut pick = |m: usize| (rng.uniform() * m as f64) as usize;
        let edge_src: Vec<u32> = (0..e).map(|_| pick(n) as u32).collect();
        let edge_dst: Vec<u32> = (0..e).map(|_| pick(n) as u32).collect();
        FeatureGraph {
            sample_id: format!("s{seed}"),
            project: "p".into(),
            label: (seed % 2) as u8,
            node_window: cfg.node_window,
            edge_window: cfg.edge_window,
            node_kinds: (0..n).map(|_| 1 + pick(44) as u16).collect(),
            node_tokens: (0..n * cfg.node_window).map(|_| pick(cfg.vocab_size) as u32).collect(),
            edge_src,
            edge_dst,
            edge_relations: (0..e).map(|_| 1 + pick(20) as u16).collect(),
            edge_tokens: (0..e * cfg.edge_window).map(|_| pick(cfg.vocab_size) as u32).collect(),
        }
    }

    #[test]
    fn default_count_in_band() {
        let p = ModelParameters::<f32>::build(&ModelConfig::default()).unwrap();
        assert_eq!(p.get("embed.tokens").unwrap().len(), 786_432);
        assert_eq!(p.param_count(), 1_101_192);
        assert_eq!(p.get("layers.0.conv.w_query").unwrap().shape(), &[128, 128]);
        assert_eq!(p.get("head.w2").unwrap().shape(), &[128, 2]);
        assert!(p.get("layers.5.prelu").is_some() && p.get("layers.6.prelu").is_none());
    }

    #[test]
    fn counts_match_walker() {
        for v in ModelVariations::all() {
            let cfg = ModelConfig {
                variations: v,
                ..ModelConfig::default()
            };
            let p = ModelParameters::<f32>::build(&cfg).unwrap();
            assert_eq!(p.param_count(), walk_count(&cfg), "{v:?}");
        }
        let types = ModelConfig {
            variations: ModelVariations {
                node_repr: NodeRepr::Types,
                ..Default::default()
            },
            ..ModelConfig::default()
        };
        let p = ModelParameters::<f32>::build(&types).unwrap();
        assert!(p.get("embed.tokens").is_none());
        assert_eq!(p.get("layers.0.conv.w_self").unwrap().shape(), &[16, 128]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_config(ModelVariations::default());
        let a = ModelParameters::<f32>::build(&cfg).unwrap();
        let b = ModelParameters::<f32>::build(&cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
        let other = ModelParameters::<f32>::build(&ModelConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.arrays, other.arrays);
    }

    #[test]
    fn init_ranges() {
        let p = ModelParameters::<f64>::build(&ModelConfig::default()).unwrap();
        let bound = (1.0f64 / 128.0).sqrt();
        assert!(p.get("layers.2.conv.w_message").unwrap().data().iter().all(|v| v.abs() <= bound));
        let e = p.get("embed.tokens").unwrap().data();
        let sd = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.01);
        assert_eq!(p.get("layers.0.prelu").unwrap().data(), &[0.25]);
        assert!(p.get("layers.0.norm.alpha").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("layers.0.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        for bad in [
            ModelConfig { dropout: 1.5, ..Default::default() },
            ModelConfig { dropout: -0.1, ..Default::default() },
            ModelConfig { hidden: 0, ..Default::default() },
        ] {
            assert!(matches!(ModelParameters::<f32>::build(&bad), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn empty_code_single_node_is_finite() {
        let cfg = ModelConfig {
            vocab_size: 40,
            ..ModelConfig::default()
        };
        let p = ModelParameters::<f32>::build(&cfg).unwrap();
        let g = FeatureGraph {
            sample_id: "x".into(),
            project: "p".into(),
            label: 0,
            node_window: 8,
            edge_window: 16,
            node_kinds: vec![27],
            node_tokens: vec![0; 8],
            edge_src: vec![],
            edge_dst: vec![],
            edge_relations: vec![],
            edge_tokens: vec![],
        };
        let out = predict(&p, &Batch::from_graphs([&g]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!(out.all_finite());
    }

    #[test]
    fn duplicated_graph_and_repeat_calls() {
        let cfg = small_config(ModelVariations::default());
        let p = ModelParameters::<f64>::build(&cfg).unwrap();
        let g = fixture_graph(3, 5, 7, &cfg);
        let batch = Batch::from_graphs([&g, &g]).unwrap();
        let a = predict(&p, &batch).unwrap();
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(a, predict(&p, &batch).unwrap());
    }

    #[test]
    fn window_mismatch_rejected() {
        let cfg = small_config(ModelVariations::default());
        let p = ModelParameters::<f64>::build(&cfg).unwrap();
        let mut g = fixture_graph(3, 3, 2, &cfg);
        g.node_window = 4;
        g.node_tokens = vec![0; 12];
        assert!(matches!(
            predict(&p, &Batch::from_graphs([&g]).unwrap()),
            Err(ModelError::WindowMismatch { .. })
        ));
    }

    #[test]
    fn edge_types_are_consumed() {
        let base = small_config(ModelVariations::default());
        let typed = small_config(ModelVariations {
            edge_repr: EdgeRepr::TypeEmbed,
            ..Default::default()
        });
        let mut g = fixture_graph(5, 5, 8, &base);
        g.edge_relations = vec![3; 8];
        let batch = Batch::from_graphs([&g]).unwrap();
        let a = predict(&ModelParameters::<f64>::build(&base).unwrap(), &batch).unwrap();
        let b = predict(&ModelParameters::<f64>::build(&typed).unwrap(), &batch).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    // Straight-line reimplementation on nested vectors, no tape.
    type M = Vec<Vec<f64>>;

    fn mm(a: &M, w: &Tensor<f64>) -> M {
        let (r, c) = w.dims2();
        a.iter()
            .map(|x| (0..c).map(|j| (0..r).map(|i| x[i] * w.get2(i, j)).sum()).collect())
            .collect()
    }

    fn dense_forward(p: &ModelParameters<f64>, g: &FeatureGraph) -> Vec<f64> {
        let c = &p.config;
        let n = g.num_nodes();
        let pe = |pos: usize, col: usize| {
            let a = pos as f64 / 10000f64.powf((col / 2 * 2) as f64 / c.embed_dim as f64);
            if col % 2 == 0 { a.sin() } else { a.cos() }
        };
        let window = |ids: &[u32], len: usize| -> Vec<f64> {
            let e = p.get("embed.tokens").unwrap();
            let mut v = vec![];
            for pos in 0..len {
                for col in 0..c.embed_dim {
                    v.push(e.get2(ids[pos] as usize, col) + pe(pos, col));
                }
            }
            v
        };
        let mut h: M = (0..n)
            .map(|i| match c.variations.node_repr {
                NodeRepr::Tokens => window(&g.node_tokens[i * c.node_window..], c.node_window),
                NodeRepr::Types => p.get("embed.node_types").unwrap().row(g.node_kinds[i] as usize - 1).to_vec(),
            })
            .collect();
        let ef: Option<M> = match c.variations.edge_repr {
            EdgeRepr::None => None,
            EdgeRepr::TypeEmbed => Some(
                g.edge_relations
                    .iter()
                    .map(|&r| p.get("embed.edge_types").unwrap().row(r as usize - 1).to_vec())
                    .collect(),
            ),
            EdgeRepr::Tokens => Some(
                (0..g.num_edges())
                    .map(|e| window(&g.edge_tokens[e * c.edge_window..], c.edge_window))
                    .collect(),
            ),
        };
        for l in 0..c.n_layers {
            let w = |s: &str| p.get(&format!("layers.{l}.{s}")).unwrap();
            let q = mm(&h, w("conv.w_query"));
            let m = mm(&h, w("conv.w_message"));
            let s = mm(&h, w("conv.w_self"));
            let fe = ef.as_ref().map(|f| mm(f, w("conv.w_edge")));
            let d = c.hidden;
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                let inc: Vec<usize> = (0..g.num_edges()).filter(|&e| g.edge_dst[e] as usize == i).collect();
                let keys: M = inc
                    .iter()
                    .map(|&e| {
                        let mut k = m[g.edge_src[e] as usize].clone();
                        if let Some(fe) = &fe {
                            k.iter_mut().zip(&fe[e]).for_each(|(a, b)| *a += b);
                        }
                        k
                    })
                    .collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| k.iter().zip(&q[i]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let alpha = segment_softmax(&scores, &vec![0; scores.len()]);
                for j in 0..d {
                    out[i][j] = s[i][j] + w("conv.bias").data()[j];
                    if !inc.is_empty() {
                        let agg: f64 = keys.iter().zip(&alpha).map(|(k, a)| a * k[j]).sum();
                        out[i][j] += agg / inc.len() as f64;
                    }
                    let a = w("prelu").data()[0];
                    if out[i][j] <= 0.0 {
                        out[i][j] *= a;
                    }
                }
            }
            for j in 0..d {
                let mu = out.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let al = w("norm.alpha").data()[j];
                let var = out.iter().map(|r| (r[j] - al * mu).powi(2)).sum::<f64>() / n as f64 + 1e-5;
                for r in out.iter_mut() {
                    r[j] = w("norm.gamma").data()[j] * (r[j] - al * mu) / var.sqrt() + w("norm.beta").data()[j];
                }
            }
            h = out;
        }
        let pooled: Vec<f64> = (0..c.hidden).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let z = match c.variations.head_mode {
            HeadMode::TwoLayer => mm(&vec![pooled], p.get("head.w1").unwrap())[0]
                .iter()
                .zip(p.get("head.b1").unwrap().data())
                .map(|(a, b)| 1.0 / (1.0 + (-(a + b)).exp()))
                .collect(),
            HeadMode::SingleLinear => pooled,
        };
        mm(&vec![z], p.get("head.w2").unwrap())[0]
            .iter()
            .zip(p.get("head.b2").unwrap().data())
            .map(|(a, b)| a + b)
            .collect()
    }

    #[test]
    fn forward_matches_dense_oracle_all_variations() {
        for v in ModelVariations::all() {
            let cfg = small_config(v);
            let p = ModelParameters::<f64>::build(&cfg).unwrap();
            let g = fixture_graph(9, 4, 5, &cfg);
            let got = predict(&p, &Batch::from_graphs([&g]).unwrap()).unwrap();
            let want = dense_forward(&p, &g);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{v:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vgnn");
        for v in ModelVariations::all() {
            let cfg = small_config(v);
            let p = ModelParameters::<f32>::build(&cfg).unwrap();
            save_checkpoint(&p, &path).unwrap();
            let q: ModelParameters<f32> = load_checkpoint(&path).unwrap();
            assert_eq!(p.config, q.config);
            assert_eq!(p.param_count(), q.param_count());
            for ((n1, a), (n2, b)) in p.arrays.iter().zip(&q.arrays) {
                assert_eq!(n1, n2);
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn checkpoint_errors() {
        let cfg = small_config(ModelVariations::default());
        let p = ModelParameters::<f32>::build(&cfg).unwrap();
        let bytes = checkpoint_bytes(&p).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint::<f32>(&bad), Err(ModelError::Version(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(parse_checkpoint::<f32>(&v2), Err(ModelError::Version(_))));
        assert!(matches!(parse_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(ModelError::Truncated)));
        assert!(matches!(parse_checkpoint::<f64>(&bytes), Err(ModelError::DType { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vgnn");
        save_checkpoint(&p, &path).unwrap();
        let wider = ModelConfig { hidden: 8, ..cfg };
        assert!(matches!(
            load_checkpoint_for::<f32>(&path, &wider),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }
}
