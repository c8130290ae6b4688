//! Loss, class weighting, Adam, metrics and the training loop with best-epoch
//! selection.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Batch, FeatureError, FeatureGraph};
use crate::model::{self, ModelConfig, ModelError, ModelParameters};
use crate::tensor::{Real, Rng, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {0} absent from the training labels")]
    ClassAbsent(u8),
    #[error("label {0} outside {{0, 1}}")]
    BadLabel(u8),
    #[error("{what}: lengths {left} and {right} differ")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("{0} set is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NumericalFault { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 400,
            epochs: 25,
            seed: 0,
            runs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.runs == 0 {
            return bad("batch_size, epochs and runs must be at least 1".into());
        }
        Ok(())
    }
}

/// Seed of run `run` derived from a base seed.
pub fn derive_seed(base: u64, run: usize) -> u64 {
    Rng::new(base).split(run as u64).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; 2],
}

impl ClassWeights {
    pub const BALANCED: ClassWeights = ClassWeights { w: [1.0, 1.0] };
}

/// `w_k = N / (2 · N_k)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let mut counts = [0usize; 2];
    for &y in labels {
        *counts.get_mut(y as usize).ok_or(TrainError::BadLabel(y))? += 1;
    }
    let n = labels.len() as f64;
    let mut w = [0.0; 2];
    for k in 0..2 {
        if counts[k] == 0 {
            return Err(TrainError::ClassAbsent(k as u8));
        }
        w[k] = n / (2.0 * counts[k] as f64);
    }
    Ok(ClassWeights { w })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−[pw·y·log σ(x) + (1−y)·log(1−σ(x))]`, evaluated as
/// `(1−y)·x + (1 + (pw−1)·y)·softplus(−x)`.
pub fn weighted_bce_with_logits(x: f64, y: f64, pos_weight: f64) -> f64 {
    (1.0 - y) * x + (1.0 + (pos_weight - 1.0) * y) * softplus(-x)
}

/// Mean weighted BCE over the `B × 2` one-hot targets. Output column `k` is
/// the positive side of its own binary term with `pos_weight = w_k / w_0`,
/// and every term is scaled by `w_0`.
pub fn batch_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[u8], weights: &ClassWeights) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(TrainError::LengthMismatch {
            what: "logits rows vs labels",
            left: shape.first().copied().unwrap_or(0),
            right: labels.len(),
        });
    }
    let [w0, w1] = weights.w;
    let pos_weight = [1.0, w1 / w0];
    let mut neg = Vec::with_capacity(2 * labels.len());
    let mut pos = Vec::with_capacity(2 * labels.len());
    for &y in labels {
        if y > 1 {
            return Err(TrainError::BadLabel(y));
        }
        for k in 0..2 {
            let t = if y as usize == k { 1.0 } else { 0.0 };
            // (1−t)·x + (1+(pw−1)t)·sp(−x) == (1−t)·sp(x) + pw·t·sp(−x)
            neg.push(T::lit(w0 * (1.0 - t)));
            pos.push(T::lit(w0 * pos_weight[k] * t));
        }
    }
    let tape = logits.tape();
    let neg = tape.constant(Tensor::new(shape.clone(), neg)?);
    let pos = tape.constant(Tensor::new(shape, pos)?);
    let terms = neg
        .mul(logits.softplus())?
        .add(pos.mul(logits.scale(-T::one()).softplus())?)?;
    Ok(terms.mean())
}

/// Argmax over two logits; ties go to class 0.
pub fn prediction_rule<T: Real>(logits: &[T]) -> u8 {
    u8::from(logits[1] > logits[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    /// Ratios whose denominator was zero and which were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut undefined = vec![];
        let mut ratio = |name: &str, num: usize, den: usize| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio("accuracy", tp + tn, tp + tn + fp + fn_);
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fn_);
        let fpr = ratio("fpr", fp, fp + tn);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined.push("f1".into());
            0.0
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy,
            precision,
            recall,
            f1,
            fpr,
            undefined,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            what: "predictions vs labels",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut c = [[0usize; 2]; 2];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 {
            return Err(TrainError::BadLabel(p));
        }
        if y > 1 {
            return Err(TrainError::BadLabel(y));
        }
        c[p as usize][y as usize] += 1;
    }
    Ok(MetricsReport::from_counts(c[1][1], c[1][0], c[0][0], c[0][1]))
}

/// Mean of the ratio metrics over several runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub runs: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

pub fn mean_metrics(reports: &[MetricsReport]) -> MeanMetrics {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MeanMetrics {
        runs: reports.len(),
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        fpr: avg(|r| r.fpr),
    }
}

/// First and second moments per named array.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Real> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every array that has a gradient.
pub fn adam_step<T: Real>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1, b2, lr, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.lr), T::lit(cfg.adam_eps));
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    for (name, theta) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(theta.shape()));
        let iter = theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(g.data());
        for ((p, (m, v)), &g) in iter {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// 1-based index of the highest score; the earliest wins ties.
pub fn select_best_epoch(val_f1: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &f) in val_f1.iter().enumerate() {
        if best.map_or(true, |(_, b)| f > b) {
            best = Some((i, f));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub run: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub struct Evaluation {
    pub metrics: MetricsReport,
    pub predictions: Vec<u8>,
    pub logits: Vec<[f32; 2]>,
}

/// Graphs per forward pass during evaluation. Fixed, not taken from the
/// training config, so any evaluation of a checkpoint batches identically.
pub const EVAL_BATCH_SIZE: usize = 256;

/// Eval-mode metrics over `graphs`, in their given order.
pub fn evaluate(params: &ModelParameters<f32>, graphs: &[&FeatureGraph]) -> Result<Evaluation> {
    if graphs.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut logits = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_BATCH_SIZE) {
        let batch = Batch::from_graphs(chunk.iter().copied())?;
        let out = model::predict(params, &batch)?;
        logits.extend((0..chunk.len()).map(|i| [out.get2(i, 0), out.get2(i, 1)]));
    }
    let predictions: Vec<u8> = logits.iter().map(|l| prediction_rule(l)).collect();
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    Ok(Evaluation {
        metrics: compute_metrics(&predictions, &labels)?,
        predictions,
        logits,
    })
}

pub struct RunOutcome {
    pub best_epoch: usize,
    pub best: ModelParameters<f32>,
    pub best_val: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Trains one model from scratch. Each epoch reshuffles the training set
/// with a seeded stream, keeps the last partial batch, and scores the
/// validation set; the parameters of the best-F1 epoch are returned.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[&FeatureGraph],
    val: &[&FeatureGraph],
    weights: &ClassWeights,
    run: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let model_cfg = ModelConfig {
        seed: derive_seed(model_cfg.seed, run),
        ..model_cfg.clone()
    };
    let mut params = ModelParameters::<f32>::build(&model_cfg)?;
    let root = Rng::new(derive_seed(cfg.seed, run));
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, MetricsReport, ModelParameters<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = root.split(1).split(epoch as u64);
        let mut dropout_rng = root.split(2).split(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_graphs(idx.iter().map(|&i| train[i]))?;
            let fault = TrainError::NumericalFault { epoch, batch: b + 1 };
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let logits = model::forward(&model_cfg, &bound, &batch, true, &mut dropout_rng)?;
            let loss = batch_loss(logits, &batch.labels, weights)?;
            let loss_value = loss.value().item() as f64;
            if !loss_value.is_finite() {
                return Err(fault);
            }
            let mut grads_tape = tape.backward(loss)?;
            let mut grads = IndexMap::with_capacity(bound.vars.len());
            for (name, &var) in &bound.vars {
                let g = grads_tape.take(var);
                if !g.all_finite() {
                    return Err(fault);
                }
                grads.insert(name.clone(), g);
            }
            drop(bound);
            adam_step(&mut params.arrays, &grads, &mut state, cfg);
            loss_sum += loss_value * idx.len() as f64;
        }
        let val_eval = evaluate(&params, val)?;
        let entry = EpochLog {
            run,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val: val_eval.metrics,
        };
        on_epoch(&entry);
        if best.as_ref().map_or(true, |(_, m, _)| entry.val.f1 > m.f1) {
            best = Some((epoch, entry.val.clone(), params.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best_val, best) = best.expect("at least one epoch");
    debug_assert_eq!(
        Some(best_epoch),
        select_best_epoch(&log.iter().map(|l| l.val.f1).collect::<Vec<_>>())
    );
    Ok(RunOutcome {
        best_epoch,
        best,
        best_val,
        log,
    })
}
