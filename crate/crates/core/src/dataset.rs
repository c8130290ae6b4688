//! Preprocessed dataset on disk: shard files of length-prefixed
//! [`FeatureGraph`] records and a JSON index.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureGraph};

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_FORMAT: u32 = 1;
pub const DEFAULT_SHARD_SIZE: usize = 4096;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unsupported index format {0}")]
    Format(u32),
    #[error("record {index} ({sample_id}): {reason}")]
    Record { index: usize, sample_id: String, reason: String },
    #[error("index references unknown shard {0}")]
    UnknownShard(usize),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub project: String,
    pub label: u8,
    pub shard: usize,
    /// Byte offset of the record's length prefix.
    pub offset: u64,
    /// Record length without the prefix.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: u32,
    pub vocab_size: usize,
    pub node_window: usize,
    pub edge_window: usize,
    /// Digest of the raw inputs the shards were built from.
    pub input_digest: String,
    pub shards: Vec<String>,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn sample_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.sample_id.as_str()).collect()
    }

    pub fn projects(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.project.as_str()).collect()
    }
}

/// Header fields of a dataset being written.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub node_window: usize,
    pub edge_window: usize,
    pub input_digest: String,
}

/// Writes `graphs` in order into shards of `shard_size` records, then the
/// index. Output bytes depend only on the arguments.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, graphs: &[FeatureGraph], shard_size: usize) -> Result<DatasetIndex> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut shards = vec![];
    let mut entries = Vec::with_capacity(graphs.len());
    for (s, chunk) in graphs.chunks(shard_size.max(1)).enumerate() {
        let name = format!("shard-{s:05}.bin");
        let path = dir.join(&name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        let mut offset = 0u64;
        for g in chunk {
            let rec = g.to_bytes();
            w.write_all(&(rec.len() as u64).to_le_bytes()).map_err(io_err(&path))?;
            w.write_all(&rec).map_err(io_err(&path))?;
            entries.push(IndexEntry {
                sample_id: g.sample_id.clone(),
                project: g.project.clone(),
                label: g.label,
                shard: s,
                offset,
                length: rec.len() as u64,
            });
            offset += 8 + rec.len() as u64;
        }
        w.flush().map_err(io_err(&path))?;
        shards.push(name);
    }
    let index = DatasetIndex {
        format: INDEX_FORMAT,
        vocab_size: meta.vocab_size,
        node_window: meta.node_window,
        edge_window: meta.edge_window,
        input_digest: meta.input_digest.clone(),
        shards,
        entries,
    };
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let index: DatasetIndex =
        serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json { path: path.clone(), source })?;
    if index.format != INDEX_FORMAT {
        return Err(DatasetError::Format(index.format));
    }
    Ok(index)
}

/// An index with every record decoded in memory, in index order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub graphs: Vec<FeatureGraph>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let index = read_index(dir)?;
        let shards: Vec<Vec<u8>> = index
            .shards
            .iter()
            .map(|name| {
                let path = dir.join(name);
                fs::read(&path).map_err(io_err(&path))
            })
            .collect::<Result<_>>()?;
        let mut graphs = Vec::with_capacity(index.entries.len());
        for (i, e) in index.entries.iter().enumerate() {
            let bad = |reason: String| DatasetError::Record {
                index: i,
                sample_id: e.sample_id.clone(),
                reason,
            };
            let shard = shards.get(e.shard).ok_or(DatasetError::UnknownShard(e.shard))?;
            let start = e.offset as usize;
            let body = start + 8;
            let end = body + e.length as usize;
            if end > shard.len() {
                return Err(bad("record extends past end of shard".into()));
            }
            let prefix = u64::from_le_bytes(shard[start..body].try_into().unwrap());
            if prefix != e.length {
                return Err(bad(format!("length prefix {prefix} disagrees with index {}", e.length)));
            }
            let g = FeatureGraph::from_bytes(&shard[body..end]).map_err(|err: FeatureError| bad(err.to_string()))?;
            if g.sample_id != e.sample_id || g.label != e.label {
                return Err(bad("record does not match its index entry".into()));
            }
            if (g.node_window, g.edge_window) != (index.node_window, index.edge_window) {
                return Err(bad("record windows differ from the index".into()));
            }
            graphs.push(g);
        }
        Ok(Self { index, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&FeatureGraph> {
        indices.iter().map(|&i| &self.graphs[i]).collect()
    }
}
