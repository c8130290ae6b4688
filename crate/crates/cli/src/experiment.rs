//! `experiment`: runs a plan of protocol tests and tabulates the results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vulgnn::dataset::Dataset;
use vulgnn::features::FeatureGraph;
use vulgnn::protocol::{downsample_ratio, mix_synthetic_real, split_unseen_projects, Ratio, Split, SplitMode};
use vulgnn::train::{derive_seed, MeanMetrics};

use crate::config::{data_err, read_json, relative_to, write_json, CliError, Experiment, Plan, Result, RunConfig};
use crate::runner::{check_compatible, make_split, train_protocol, weights_for};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<Ratio>,
    pub n_train: usize,
    pub train_vulnerable: usize,
    pub train_non_vulnerable: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub metrics: MeanMetrics,
}

fn counts(graphs: &[&FeatureGraph]) -> (usize, usize) {
    let pos = graphs.iter().filter(|g| g.label == 1).count();
    (pos, graphs.len() - pos)
}

fn run_row(
    cfg: &RunConfig,
    ds: &Dataset,
    experiment: &str,
    setting: (Option<f64>, Option<Ratio>),
    train: Vec<&FeatureGraph>,
    val: Vec<&FeatureGraph>,
    test: Vec<&FeatureGraph>,
) -> Result<ResultRow> {
    let weights = weights_for(cfg, ds, &train)?;
    let result = train_protocol(cfg, &train, &val, &test, &weights, |_| Ok(()))?;
    let (pos, neg) = counts(&train);
    Ok(ResultRow {
        experiment: experiment.into(),
        fraction: setting.0,
        ratio: setting.1,
        n_train: train.len(),
        train_vulnerable: pos,
        train_non_vulnerable: neg,
        n_val: val.len(),
        n_test: test.len(),
        metrics: result.mean_test,
    })
}

/// Base partition of the real data for tests 1, 3 and 4: the configured split
/// unless it is the unseen-project mode, which only test 2 uses.
fn base_split(cfg: &RunConfig, ds: &Dataset, plan_path: &Path) -> Result<Split> {
    let mut c = cfg.clone();
    if c.split.mode == SplitMode::UnseenProjects {
        c.split.mode = SplitMode::Random;
    }
    make_split(&c, ds, Some(plan_path))
}

pub fn run_plan(plan_path: &Path, out: &Path) -> Result<Vec<ResultRow>> {
    let plan: Plan = read_json(plan_path)?;
    let cfg = &plan.config;
    cfg.validate()?;

    // Pre-flight: every referenced dataset must exist before any training.
    let data_dir = relative_to(plan_path, &plan.data);
    let mut needed: Vec<PathBuf> = vec![data_dir.clone()];
    for e in &plan.experiments {
        if let Experiment::Test3 { synthetic, fractions } = e {
            needed.push(relative_to(plan_path, synthetic));
            if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                return Err(CliError::Usage(format!("fraction {f} outside [0, 1]")));
            }
        }
    }
    for dir in &needed {
        if !dir.join(vulgnn::dataset::INDEX_FILE).is_file() {
            return Err(CliError::Data(format!("dataset {} not found", dir.display())));
        }
    }

    let ds = Dataset::open(&data_dir)?;
    check_compatible(&cfg.model, &ds.index)?;
    let mut rows = vec![];
    for (k, e) in plan.experiments.iter().enumerate() {
        let name = e.name();
        match e {
            Experiment::Test1 => {
                let s = base_split(cfg, &ds, plan_path)?;
                rows.push(run_row(cfg, &ds, name, (None, None), ds.select(&s.train), ds.select(&s.val), ds.select(&s.test))?);
            }
            Experiment::Test2 => {
                let s = split_unseen_projects(&ds.index.projects(), cfg.split.n_unseen_projects, cfg.split.seed)?;
                rows.push(run_row(cfg, &ds, name, (None, None), ds.select(&s.train), ds.select(&s.val), ds.select(&s.test))?);
            }
            Experiment::Test3 { synthetic, fractions } => {
                let syn = Dataset::open(&relative_to(plan_path, synthetic))?;
                check_compatible(&cfg.model, &syn.index)?;
                let s = base_split(cfg, &ds, plan_path)?;
                for (j, &f) in fractions.iter().enumerate() {
                    let seed = derive_seed(derive_seed(cfg.split.seed, k), j);
                    let picked = mix_synthetic_real(&[], &s.train, f, seed)?;
                    let mut train: Vec<&FeatureGraph> = syn.graphs.iter().collect();
                    train.extend(ds.select(&picked));
                    rows.push(run_row(cfg, &ds, name, (Some(f), None), train, ds.select(&s.val), ds.select(&s.test))?);
                }
            }
            Experiment::Test4 { ratios } => {
                let s = base_split(cfg, &ds, plan_path)?;
                let labels = ds.index.labels();
                for (j, &r) in ratios.iter().enumerate() {
                    let seed = derive_seed(derive_seed(cfg.split.seed, k), j);
                    let kept = downsample_ratio(&s.train, &labels, r, seed);
                    rows.push(run_row(cfg, &ds, name, (None, Some(r)), ds.select(&kept), ds.select(&s.val), ds.select(&s.test))?);
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(data_err(out))?;
    write_json(&out.join(RESULTS_JSON), &rows)?;
    let csv_path = out.join(RESULTS_CSV);
    fs::write(&csv_path, to_csv(&rows)).map_err(data_err(&csv_path))?;
    Ok(rows)
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(
        "experiment,fraction,ratio,n_train,train_vulnerable,train_non_vulnerable,n_val,n_test,runs,accuracy,precision,recall,f1,fpr\n",
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.experiment,
            r.fraction.map(|f| f.to_string()).unwrap_or_default(),
            r.ratio.map(|x| x.to_string()).unwrap_or_default(),
            r.n_train,
            r.train_vulnerable,
            r.train_non_vulnerable,
            r.n_val,
            r.n_test,
            m.runs,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.fpr
        );
    }
    s
}
