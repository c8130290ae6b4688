//! Raw graph samples to tokenized shards.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use vulgnn::codetok::{load_vocabulary, BpeVocabulary, VocabOptions};
use vulgnn::dataset::{read_index, write_dataset, DatasetMeta};
use vulgnn::features::{featurize, FeatureGraph};
use vulgnn::graph_ir::{parse_cpg_export, TypeRegistry};

use crate::config::{data_err, CliError, Result};

pub struct PreprocessArgs {
    pub input: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub registry: Option<PathBuf>,
    pub out: PathBuf,
    pub workers: usize,
    pub skip_bad: bool,
    pub any_vocab_size: bool,
    pub node_window: usize,
    pub edge_window: usize,
    pub shard_size: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub written: usize,
    pub skipped: usize,
    pub up_to_date: bool,
}

/// One raw sample and where it came from, for error messages.
pub struct RawInput {
    pub origin: String,
    pub bytes: Vec<u8>,
}

/// Samples of a `.jsonl` file (one per non-blank line), a `.json` file (one
/// sample), or a directory of such files taken in name order.
pub fn read_inputs(path: &Path) -> Result<Vec<RawInput>> {
    let mut files = vec![];
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(data_err(path))? {
            let p = entry.map_err(data_err(path))?.path();
            if matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")) {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = vec![];
    for f in files {
        let bytes = fs::read(&f).map_err(data_err(&f))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if f.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                out.push(RawInput {
                    origin: format!("{name}:{}", i + 1),
                    bytes: line.to_vec(),
                });
            }
        } else {
            out.push(RawInput { origin: name, bytes });
        }
    }
    Ok(out)
}

pub fn load_registry(path: Option<&Path>) -> Result<TypeRegistry> {
    match path {
        None => Ok(TypeRegistry::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(data_err(p))?;
            TypeRegistry::from_json(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
    }
}

pub fn load_vocab(vocab: &Path, merges: &Path, any_size: bool) -> Result<(BpeVocabulary, Vec<u8>, Vec<u8>)> {
    let v = fs::read(vocab).map_err(data_err(vocab))?;
    let m = fs::read(merges).map_err(data_err(merges))?;
    let opts = VocabOptions {
        allow_size_mismatch: any_size,
        ..Default::default()
    };
    let bpe = load_vocabulary(&v, &m, &opts).map_err(|e| CliError::Data(format!("vocabulary: {e}")))?;
    Ok((bpe, v, m))
}

pub fn run(args: &PreprocessArgs) -> Result<PreprocessSummary> {
    if args.node_window == 0 || args.edge_window == 0 {
        return Err(CliError::Usage("token windows must be at least 1".into()));
    }
    let (vocab, vocab_bytes, merges_bytes) = load_vocab(&args.vocab, &args.merges, args.any_vocab_size)?;
    let registry = load_registry(args.registry.as_deref())?;
    let inputs = read_inputs(&args.input)?;

    let mut h = Sha256::new();
    for part in [&vocab_bytes, &merges_bytes] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(serde_json::to_vec(&registry).expect("registry serializes"));
    h.update(format!("windows {} {}", args.node_window, args.edge_window));
    for r in &inputs {
        h.update((r.bytes.len() as u64).to_le_bytes());
        h.update(&r.bytes);
    }
    let digest = format!("{:x}", h.finalize());

    if let Ok(existing) = read_index(&args.out) {
        let shards_present = existing.shards.iter().all(|s| args.out.join(s).is_file());
        if existing.input_digest == digest && shards_present {
            return Ok(PreprocessSummary {
                written: existing.entries.len(),
                skipped: 0,
                up_to_date: true,
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let results: Vec<std::result::Result<FeatureGraph, String>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|r| {
                let g = parse_cpg_export(&r.bytes, &registry).map_err(|e| format!("{}: {e}", r.origin))?;
                Ok(featurize(&g, &vocab, args.node_window, args.edge_window))
            })
            .collect()
    });

    let mut graphs = Vec::with_capacity(results.len());
    let mut failures = vec![];
    for r in results {
        match r {
            Ok(g) => graphs.push(g),
            Err(e) => failures.push(e),
        }
    }
    for f in &failures {
        eprintln!("bad sample {f}");
    }
    if !failures.is_empty() && !args.skip_bad {
        return Err(CliError::Data(format!(
            "{} of {} samples failed; rerun with --skip-bad to drop them",
            failures.len(),
            inputs.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(g) = graphs.iter().find(|g| !seen.insert(g.sample_id.as_str())) {
        return Err(CliError::Data(format!("duplicate sample id {:?}", g.sample_id)));
    }
    if graphs.is_empty() {
        return Err(CliError::Data("no valid samples".into()));
    }
    let meta = DatasetMeta {
        vocab_size: vocab.size(),
        node_window: args.node_window,
        edge_window: args.edge_window,
        input_digest: digest,
    };
    write_dataset(&args.out, &meta, &graphs, args.shard_size)?;
    Ok(PreprocessSummary {
        written: graphs.len(),
        skipped: failures.len(),
        up_to_date: false,
    })
}
