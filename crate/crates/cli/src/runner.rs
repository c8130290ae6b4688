//! `train`, `eval` and `predict`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vulgnn::dataset::{Dataset, DatasetIndex, INDEX_FILE};
use vulgnn::features::{featurize, Batch, FeatureGraph};
use vulgnn::graph_ir::parse_cpg_unlabeled;
use vulgnn::model::{load_checkpoint, predict, save_checkpoint, ModelConfig, ModelParameters};
use vulgnn::protocol::{resolve_split_file, split_random, split_unseen_projects, Split, SplitFile, SplitMode};
use vulgnn::train::{
    class_weights, evaluate, mean_metrics, prediction_rule, train_run, ClassWeights, EpochLog, MeanMetrics,
    MetricsReport,
};

use crate::config::{data_err, read_json, relative_to, sha256_hex, write_json, CliError, Result, RunConfig};
use crate::preprocess::{load_registry, load_vocab};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "best.vgnn";
pub const REPORT_FILE: &str = "report.json";
pub const SPLITS_FILE: &str = "splits.json";

/// Written before any training starts.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub data: String,
    pub dataset_digest: String,
    pub input_digest: String,
    pub model_seed: u64,
    pub train_seed: u64,
    pub split_seed: u64,
    pub started_unix: u64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub best_epoch: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Deterministic summary of a training job; no timestamps or absolute paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_digest: String,
    pub dataset_digest: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub class_weights: [f64; 2],
    pub runs: Vec<RunSummary>,
    pub mean_test: MeanMetrics,
    /// Run whose best epoch had the highest validation F1 (earliest on ties).
    pub selected_run: usize,
    pub checkpoint: String,
}

/// Content digest of a dataset directory's index.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let path = dir.join(INDEX_FILE);
    Ok(sha256_hex(&fs::read(&path).map_err(data_err(&path))?))
}

pub fn check_compatible(model: &ModelConfig, index: &DatasetIndex) -> Result<()> {
    if model.vocab_size != index.vocab_size {
        return Err(CliError::Data(format!(
            "model vocabulary size {} differs from dataset vocabulary size {}",
            model.vocab_size, index.vocab_size
        )));
    }
    if (model.node_window, model.edge_window) != (index.node_window, index.edge_window) {
        return Err(CliError::Data(format!(
            "model token windows {}/{} differ from dataset windows {}/{}",
            model.node_window, model.edge_window, index.node_window, index.edge_window
        )));
    }
    Ok(())
}

/// Partitions `ds` according to the config's split spec.
pub fn make_split(cfg: &RunConfig, ds: &Dataset, config_path: Option<&Path>) -> Result<Split> {
    let spec = &cfg.split;
    Ok(match spec.mode {
        SplitMode::Random => split_random(ds.len(), spec.seed)?,
        SplitMode::UnseenProjects => split_unseen_projects(&ds.index.projects(), spec.n_unseen_projects, spec.seed)?,
        SplitMode::ExternalFile => {
            let file = spec
                .file
                .as_ref()
                .ok_or_else(|| CliError::Usage("split mode external_file needs split.file".into()))?;
            let path = match config_path {
                Some(c) => relative_to(c, Path::new(file)),
                None => PathBuf::from(file),
            };
            let parts: SplitFile = read_json(&path)?;
            resolve_split_file(&parts, &ds.index.sample_ids())?
        }
    })
}

pub fn split_file(split: &Split, ds: &Dataset) -> SplitFile {
    let ids = |v: &[usize]| v.iter().map(|&i| ds.graphs[i].sample_id.clone()).collect();
    SplitFile {
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    }
}

pub struct ProtocolResult {
    pub runs: Vec<RunSummary>,
    pub mean_test: MeanMetrics,
    pub selected_run: usize,
    pub best: ModelParameters<f32>,
}

/// `cfg.train.runs` independent trainings, each scored on `test` with its
/// best-validation checkpoint.
pub fn train_protocol(
    cfg: &RunConfig,
    train: &[&FeatureGraph],
    val: &[&FeatureGraph],
    test: &[&FeatureGraph],
    weights: &ClassWeights,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<ProtocolResult> {
    for (name, part) in [("training", train), ("validation", val), ("test", test)] {
        if part.is_empty() {
            return Err(CliError::Data(format!("{name} split is empty")));
        }
    }
    let mut runs = vec![];
    let mut best: Option<(usize, f64, ModelParameters<f32>)> = None;
    for run in 0..cfg.train.runs {
        let mut sink_err = None;
        let outcome = train_run(&cfg.model, &cfg.train, train, val, weights, run, |e| {
            if sink_err.is_none() {
                sink_err = on_epoch(e).err();
            }
        })?;
        if let Some(e) = sink_err {
            return Err(e);
        }
        let test_metrics = evaluate(&outcome.best, test)?.metrics;
        if best.as_ref().map_or(true, |(_, f1, _)| outcome.best_val.f1 > *f1) {
            best = Some((run, outcome.best_val.f1, outcome.best.clone()));
        }
        runs.push(RunSummary {
            run,
            best_epoch: outcome.best_epoch,
            val: outcome.best_val,
            test: test_metrics,
        });
    }
    let tests: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
    let (selected_run, _, best) = best.expect("at least one run");
    Ok(ProtocolResult {
        mean_test: mean_metrics(&tests),
        runs,
        selected_run,
        best,
    })
}

pub fn weights_for(cfg: &RunConfig, ds: &Dataset, train: &[&FeatureGraph]) -> Result<ClassWeights> {
    let labels: Vec<u8> = if cfg.freeze_class_weights {
        ds.index.labels()
    } else {
        train.iter().map(|g| g.label).collect()
    };
    Ok(class_weights(&labels)?)
}

pub fn cmd_train(config_path: &Path, data: &Path, out: &Path) -> Result<TrainReport> {
    let cfg: RunConfig = read_json(config_path)?;
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    check_compatible(&cfg.model, &ds.index)?;
    let split = make_split(&cfg, &ds, Some(config_path))?;
    let digest = dataset_digest(data)?;
    fs::create_dir_all(out).map_err(data_err(out))?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_digest: cfg.digest(),
        config: cfg.clone(),
        data: data.display().to_string(),
        dataset_digest: digest.clone(),
        input_digest: ds.index.input_digest.clone(),
        model_seed: cfg.model.seed,
        train_seed: cfg.train.seed,
        split_seed: cfg.split.seed,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        outputs: [MANIFEST_FILE, SPLITS_FILE, EPOCH_LOG_FILE, CHECKPOINT_FILE, REPORT_FILE]
            .map(String::from)
            .to_vec(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(SPLITS_FILE), &split_file(&split, &ds))?;

    let (train, val, test) = (ds.select(&split.train), ds.select(&split.val), ds.select(&split.test));
    let weights = weights_for(&cfg, &ds, &train)?;
    let log_path = out.join(EPOCH_LOG_FILE);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(data_err(&log_path))?);
    let result = train_protocol(&cfg, &train, &val, &test, &weights, |e| {
        let line = serde_json::to_string(e).expect("log serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(data_err(&log_path))
    })?;
    save_checkpoint(&result.best, &out.join(CHECKPOINT_FILE))?;
    let report = TrainReport {
        config_digest: cfg.digest(),
        dataset_digest: digest,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        class_weights: weights.w,
        runs: result.runs,
        mean_test: result.mean_test,
        selected_run: result.selected_run,
        checkpoint: CHECKPOINT_FILE.into(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split_name: &str,
    splits: Option<&Path>,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let params: ModelParameters<f32> = load_checkpoint(checkpoint)?;
    let ds = Dataset::open(data)?;
    check_compatible(&params.config, &ds.index)?;
    let graphs: Vec<&FeatureGraph> = if split_name == "all" {
        ds.graphs.iter().collect()
    } else {
        let path = splits
            .map(Path::to_path_buf)
            .unwrap_or_else(|| relative_to(checkpoint, Path::new(SPLITS_FILE)));
        let file: SplitFile = read_json(&path)?;
        let split = resolve_split_file(&file, &ds.index.sample_ids())?;
        let part = split
            .part(split_name)
            .ok_or_else(|| CliError::Usage(format!("unknown split {split_name:?}; use train, val, test or all")))?;
        ds.select(part)
    };
    if graphs.is_empty() {
        return Err(CliError::Data(format!("split {split_name:?} is empty")));
    }
    let metrics = evaluate(&params, &graphs)?.metrics;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| relative_to(checkpoint, Path::new(&format!("eval-{split_name}.json"))));
    write_json(&path, &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictLine {
    Scored { sample_id: String, label: u8, logits: [f32; 2] },
    Failed { sample: String, error: String },
}

pub fn cmd_predict(
    checkpoint: &Path,
    sample: &Path,
    vocab: &Path,
    merges: &Path,
    registry: Option<&Path>,
) -> Result<Vec<PredictLine>> {
    let params: ModelParameters<f32> = load_checkpoint(checkpoint)?;
    let registry = load_registry(registry)?;
    let (bpe, _, _) = load_vocab(vocab, merges, true)?;
    if bpe.size() != params.config.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            bpe.size(),
            params.config.vocab_size
        )));
    }
    let inputs = crate::preprocess::read_inputs(sample)?;
    let mut out = Vec::with_capacity(inputs.len());
    for r in inputs {
        let line = parse_cpg_unlabeled(&r.bytes, &registry)
            .map_err(|e| e.to_string())
            .and_then(|g| {
                let f = featurize(&g, &bpe, params.config.node_window, params.config.edge_window);
                let batch = Batch::from_graphs([&f]).map_err(|e| e.to_string())?;
                let logits = predict(&params, &batch).map_err(|e| e.to_string())?;
                let l = [logits.get2(0, 0), logits.get2(0, 1)];
                Ok(PredictLine::Scored {
                    sample_id: g.sample_id,
                    label: prediction_rule(&l),
                    logits: l,
                })
            });
        out.push(line.unwrap_or_else(|error| PredictLine::Failed { sample: r.origin, error }));
    }
    Ok(out)
}
