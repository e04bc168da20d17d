//! Contrastive pretraining (stage 1) and joint-loss fine-tuning (stage 2).

mod loss;
mod queue;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Block, Mode, NetworkParams};
use crate::numerics::{AdamConfig, Graph, Tensor};
use crate::signal::{view_batch, IqRecord, VIEW_ANGLES};

pub use loss::{contrastive_loss, contrastive_term, cosine_similarity, cross_entropy_loss, joint_loss, LossWeights};
pub use queue::KeyQueue;

const EVAL_CHUNK: usize = 256;

/// Settings shared by both training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Key-branch momentum coefficient.
    pub momentum: f64,
    pub weights: LossWeights,
    /// Stage 2 only: when false the contrastive branch is skipped entirely
    /// and training reduces to cross-entropy.
    pub contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            momentum: 0.99,
            weights: LossWeights::default(),
            contrastive: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        LossWeights::new(self.weights.alpha, self.weights.tau)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// Per-epoch averages over batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub contrastive: f64,
    pub cross_entropy: f64,
    pub total: f64,
    /// Eval-mode accuracy on the training records (stage 2 only).
    pub train_accuracy: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,L_CL,L_CE,L,train_acc";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let acc = m.train_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.contrastive, m.cross_entropy, m.total, acc);
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}

/// Splits a shuffled index list into `ceil(n / cap)` batches of near-equal
/// size, so no batch is much smaller than the rest.
fn batches(order: &[usize], cap: usize) -> Vec<&[usize]> {
    let count = order.len().div_ceil(cap);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let size = (order.len() - start) / (count - b);
        out.push(&order[start..start + size]);
        start += size;
    }
    out
}

struct StepLosses {
    contrastive: f64,
    cross_entropy: f64,
    total: f64,
}

/// One optimization step on a batch. Keys are computed from the current key
/// branch, then the query branch takes an Adam step, the key branch follows
/// by momentum, and the batch's keys enter the queue.
fn train_step<R: Rng + ?Sized>(
    params: &mut NetworkParams,
    batch: &[&IqRecord],
    labels: Option<&[usize]>,
    queue: &mut KeyQueue,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let contrastive = cfg.contrastive || labels.is_none();
    let s_tilde = view_batch(batch.iter().copied(), VIEW_ANGLES[0])?;
    let mut g = Graph::new();
    let bound = params.bind_query(&mut g);
    let tilde = params.query_forward(&mut g, &bound, &s_tilde, Mode::Train, contrastive, labels.is_some(), rng)?;

    let mut terms = Vec::new();
    let mut cl_value = 0.0;
    let mut keys = None;
    if contrastive {
        let s_bar = view_batch(batch.iter().copied(), VIEW_ANGLES[1])?;
        let bar = params.query_forward(&mut g, &bound, &s_bar, Mode::Train, true, false, rng)?;
        let k_tilde = params.key_embeddings(&s_tilde)?;
        let k_bar = params.key_embeddings(&s_bar)?;
        let q_tilde = tilde.q.expect("predictor requested");
        let q_bar = bar.q.expect("predictor requested");
        let cl = contrastive_term(&mut g, q_tilde, q_bar, &k_tilde, &k_bar, queue, cfg.weights.tau)?;
        cl_value = g.value(cl).data()[0];
        let weight = if labels.is_some() { cfg.weights.alpha } else { 1.0 };
        terms.push((cl, weight));
        keys = Some((k_tilde, k_bar));
    }
    let mut ce_value = 0.0;
    if let Some(labels) = labels {
        let probs = tilde.probs.expect("classifier requested");
        let ce = g.cross_entropy(probs, labels)?;
        ce_value = g.value(ce).data()[0];
        terms.insert(0, (ce, 1.0 - cfg.weights.alpha));
    }
    let loss = g.linear(&terms)?;
    let total = g.value(loss).data()[0];
    let grads = g.backward(loss)?;

    let blocks: &[Block] = if labels.is_some() {
        &[Block::Encoder, Block::Projection, Block::Predictor, Block::Classifier]
    } else {
        &[Block::Encoder, Block::Projection, Block::Predictor]
    };
    params.apply_gradients(&bound, &grads, blocks, adam)?;
    params.update_running_stats(&tilde.stats);
    params.momentum_update(cfg.momentum)?;
    if let Some((k_tilde, k_bar)) = keys {
        queue.enqueue(&k_tilde, &k_bar)?;
    }
    Ok(StepLosses {
        contrastive: cl_value,
        cross_entropy: ce_value,
        total,
    })
}

/// Stage 1: contrastive pretraining of the encoder, projection head and
/// predictor on unlabeled records.
pub fn pretrain_stage1<R: Rng + ?Sized>(
    params: &mut NetworkParams,
    records: &[&IqRecord],
    queue: &mut KeyQueue,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::config("stage 1 needs a nonempty unlabeled pool"));
    }
    if cfg.batch_size > records.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} records available",
            cfg.batch_size,
            records.len()
        )));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let parts = batches(&order, cfg.batch_size);
        for part in &parts {
            let batch: Vec<&IqRecord> = part.iter().map(|&i| records[i]).collect();
            sum += train_step(params, &batch, None, queue, cfg, &adam, rng)?.contrastive;
        }
        let mean = sum / parts.len() as f64;
        log::debug!("stage 1 epoch {epoch}: L_CL {mean:.5}");
        history.push(EpochMetrics {
            epoch,
            contrastive: mean,
            cross_entropy: 0.0,
            total: mean,
            train_accuracy: None,
        });
    }
    Ok(history)
}

/// Stage 2: joint cross-entropy + contrastive training on labeled records.
/// The batch size is clamped to the number of labeled records.
pub fn train_stage2<R: Rng + ?Sized>(
    params: &mut NetworkParams,
    records: &[&IqRecord],
    queue: &mut KeyQueue,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::config("stage 2 needs a nonempty labeled pool"));
    }
    let labels: Vec<usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.ok_or_else(|| Error::config(format!("training record {i} has no label"))))
        .collect::<Result<_>>()?;
    let m = params.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::config(format!("label {bad} out of range for {m} classes")));
    }
    let missing: Vec<usize> = (0..m).filter(|c| !labels.contains(c)).collect();
    if !missing.is_empty() {
        log::warn!("classes {missing:?} have no labeled records");
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let cap = cfg.batch_size.min(records.len());
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut cl, mut ce, mut total) = (0.0, 0.0, 0.0);
        let parts = batches(&order, cap);
        for part in &parts {
            let batch: Vec<&IqRecord> = part.iter().map(|&i| records[i]).collect();
            let batch_labels: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
            let step = train_step(params, &batch, Some(&batch_labels), queue, cfg, &adam, rng)?;
            cl += step.contrastive;
            ce += step.cross_entropy;
            total += step.total;
        }
        let n = parts.len() as f64;
        let acc = accuracy(params, records, &labels)?;
        log::debug!("stage 2 epoch {epoch}: L {:.5} train acc {acc:.3}", total / n);
        history.push(EpochMetrics {
            epoch,
            contrastive: cl / n,
            cross_entropy: ce / n,
            total: total / n,
            train_accuracy: Some(acc),
        });
    }
    Ok(history)
}

/// Eval-mode projection outputs of the s̃ view, one row per record.
pub fn embed_records(params: &NetworkParams, records: &[&IqRecord]) -> Result<Tensor> {
    let mut rows: Vec<f64> = Vec::new();
    for chunk in records.chunks(EVAL_CHUNK) {
        let x = view_batch(chunk.iter().copied(), VIEW_ANGLES[0])?;
        rows.extend(params.embed(&x)?.into_data());
    }
    Tensor::new(vec![records.len(), params.config.embed_dim], rows)
}

/// Eval-mode class predictions (argmax, lowest class on ties).
pub fn predict_classes(params: &NetworkParams, records: &[&IqRecord]) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let p = embed_records(params, records)?;
    let probs = params.classify(&p, Mode::Eval, &mut rand::rng())?;
    Ok((0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}

fn accuracy(params: &NetworkParams, records: &[&IqRecord], labels: &[usize]) -> Result<f64> {
    let predicted = predict_classes(params, records)?;
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Overall and per-class accuracy against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes with no records.
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(params: &NetworkParams, records: &[&IqRecord]) -> Result<Evaluation> {
    let truth: Vec<usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.emitter_truth.ok_or_else(|| Error::config(format!("test record {i} has no ground truth"))))
        .collect::<Result<_>>()?;
    let predicted = predict_classes(params, records)?;
    let m = params.config.num_classes;
    let mut hits = vec![0usize; m];
    let mut counts = vec![0usize; m];
    for (&p, &y) in predicted.iter().zip(&truth) {
        if y < m {
            counts[y] += 1;
            hits[y] += (p == y) as usize;
        }
    }
    let correct: usize = predicted.iter().zip(&truth).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
    })
}
