#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use vulgnn::codetok::{load_vocabulary, BpeVocabulary, VocabOptions};
use vulgnn::graph_ir::{serialize_cpg, CodeGraph, TypeRegistry};
use vulgnn::synthetic::{synthetic_corpus, SyntheticOptions};
use vulgnn_cli::preprocess::{self, PreprocessArgs};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn toy_vocab_paths() -> (PathBuf, PathBuf) {
    (fixtures().join("toy-vocab.json"), fixtures().join("toy-merges.txt"))
}

pub fn toy_vocab() -> BpeVocabulary {
    let (v, m) = toy_vocab_paths();
    let opts = VocabOptions {
        allow_size_mismatch: true,
        ..Default::default()
    };
    load_vocabulary(&fs::read(v).unwrap(), &fs::read(m).unwrap(), &opts).unwrap()
}

pub fn corpus(n: usize, n_positive: usize, prefix: &str, seed: u64, n_projects: usize) -> Vec<CodeGraph> {
    let opts = SyntheticOptions {
        n_projects,
        ..Default::default()
    };
    synthetic_corpus(&TypeRegistry::default(), &opts, n, n_positive, prefix, seed)
}

pub fn write_jsonl(path: &Path, graphs: &[CodeGraph]) {
    let reg = TypeRegistry::default();
    let lines: Vec<String> = graphs.iter().map(|g| serialize_cpg(g, &reg).unwrap()).collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub fn preprocess_args(input: &Path, out: &Path) -> PreprocessArgs {
    let (vocab, merges) = toy_vocab_paths();
    PreprocessArgs {
        input: input.to_path_buf(),
        vocab,
        merges,
        registry: None,
        out: out.to_path_buf(),
        workers: 1,
        skip_bad: false,
        any_vocab_size: true,
        node_window: 8,
        edge_window: 16,
        shard_size: 256,
    }
}

/// Writes `graphs` as JSONL under `dir` and preprocesses them into `dir/name`.
pub fn make_dataset(dir: &Path, name: &str, graphs: &[CodeGraph]) -> PathBuf {
    let input = dir.join(format!("{name}.jsonl"));
    write_jsonl(&input, graphs);
    let out = dir.join(name);
    preprocess::run(&preprocess_args(&input, &out)).unwrap();
    out
}

/// Run config JSON for the toy vocabulary with the given training length.
pub fn run_config(epochs: usize, runs: usize) -> serde_json::Value {
    serde_json::json!({
        "model": { "vocab_size": toy_vocab().size() },
        "train": { "epochs": epochs, "runs": runs },
    })
}
