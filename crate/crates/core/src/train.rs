//! Training loop, split evaluation and the plain-text artifacts around them.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{class_weights, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, Timings};
use crate::model::{Batch, EncoderModel, ForwardCtx, Variant};
use crate::optim::{
    clip_global_norm, cosine_warmup_lr, AdamWConfig, EarlyStopDecision, EarlyStopState, GradAccumulator, Mode,
    OptimizerState, ScheduleConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub early_stopping: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub class_weighting: bool,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    pub eval_batch_size: usize,
    /// Worker threads for evaluation; results do not depend on it.
    pub eval_threads: usize,
    /// Write measured wall-clock seconds; when false every timing is 0.
    pub record_timings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 16,
            grad_accumulation: 4,
            peak_lr: 3e-4,
            min_lr: 1e-6,
            warmup_fraction: 0.1,
            optimizer: AdamWConfig::default(),
            clip_norm: Some(1.0),
            early_stopping: true,
            patience: 10,
            min_delta: 1e-4,
            class_weighting: true,
            target_val_accuracy: None,
            eval_batch_size: 64,
            eval_threads: 1,
            record_timings: true,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".to_string());
        }
        if self.grad_accumulation == 0 {
            v.push("grad_accumulation must be >= 1".to_string());
        }
        if !(0.0 <= self.min_lr && self.min_lr <= self.peak_lr) {
            v.push(format!("need 0 <= min_lr ({}) <= peak_lr ({})", self.min_lr, self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            v.push("warmup_fraction must lie in [0, 1)".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                v.push("clip_norm must be > 0".to_string());
            }
        }
        if self.early_stopping && self.patience == 0 {
            v.push("patience must be >= 1 when early stopping is on".to_string());
        }
        if self.eval_batch_size == 0 {
            v.push("eval_batch_size must be >= 1".to_string());
        }
        if !(self.optimizer.eps > 0.0) || !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            v.push("optimizer needs eps > 0 and betas in [0, 1)".to_string());
        }
        if self.optimizer.weight_decay < 0.0 {
            v.push("weight_decay must be >= 0".to_string());
        }
        v
    }
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub lr: f64,
    pub aux_loss: f64,
    pub wall_clock_s: f64,
}

/// Token share and overflow of one expert over one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub epoch: usize,
    pub layer: usize,
    pub expert: usize,
    pub fraction: f64,
    pub overflow_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub routing: Vec<RoutingRow>,
    pub epochs_run: usize,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: String,
    pub warnings: Vec<String>,
    pub train_time_s: f64,
    pub optimizer_steps: u64,
}

impl TrainOutcome {
    /// `val_loss − train_loss` per epoch.
    pub fn gap_series(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut out = Vec::new();
        for r in self.log.iter().filter(|r| r.split == Split::Train) {
            if let Some(v) = self.log.iter().find(|v| v.split == Split::Val && v.epoch == r.epoch) {
                out.push((r.epoch, v.loss - r.loss, r.loss, v.loss));
            }
        }
        out
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.log.iter().rev().find(|r| r.split == split)
    }
}

/// Evaluation of one split in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub loss: f64,
    pub aux_loss: f64,
    pub probs: Vec<f64>,
    pub report: EvalReport,
}

fn eval_chunk(model: &EncoderModel, data: &LabeledDataset, idx: &[usize], weights: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    let seqs = data.sequences(idx);
    let labels = data.labels(idx);
    let batch = Batch::from_sequences(&seqs);
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &batch, &mut ForwardCtx::eval())?;
    let loss = model.loss(&mut g, &out, &labels, weights)?;
    let probs = crate::tensor::softmax(g.value(out.logits), 1)?;
    let p1 = (0..idx.len()).map(|r| probs.row(r)[1]).collect();
    Ok((g.value(loss).item() * idx.len() as f64, g.value(out.aux_loss).item(), p1))
}

/// Loss, probabilities and metrics of `model` on `idx`.
pub fn evaluate(
    model: &EncoderModel,
    data: &LabeledDataset,
    idx: &[usize],
    weights: &[f64],
    batch_size: usize,
    threads: usize,
) -> Result<SplitEval> {
    if idx.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let start = Instant::now();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let results: Vec<Result<(f64, f64, Vec<f64>)>> = if threads <= 1 {
        chunks.iter().map(|c| eval_chunk(model, data, c, weights)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per.max(1))
                .map(|group| s.spawn(move || group.iter().map(|c| eval_chunk(model, data, c, weights)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut aux = 0.0;
    let mut probs = Vec::with_capacity(idx.len());
    for r in results {
        let (l, a, p) = r?;
        loss += l;
        aux += a;
        probs.extend(p);
    }
    let labels = data.labels(idx);
    let report = EvalReport::from_scores(
        &labels,
        &probs,
        Timings {
            train_total_s: None,
            eval_total_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(SplitEval {
        loss: loss / idx.len() as f64,
        aux_loss: aux / chunks.len() as f64,
        probs,
        report,
    })
}

/// Gradients of one micro-batch are added to `acc`; returns the loss.
pub fn accumulate_micro_batch(
    model: &EncoderModel,
    batch: &Batch,
    labels: &[usize],
    weights: &[f64],
    acc: &mut GradAccumulator,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<crate::moe::RoutingRecord>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, &mut ForwardCtx::train(rng))?;
    let loss = model.loss(&mut g, &out, labels, weights)?;
    let grads = g.backward(loss)?;
    acc.add(&g, &grads);
    Ok((g.value(loss).item(), out.routing))
}

/// Averages the accumulated gradients, clips them and applies one update.
/// Returns the pre-clip global norm.
pub fn apply_accumulated(
    model: &mut EncoderModel,
    opt: &mut OptimizerState,
    acc: &mut GradAccumulator,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let mut grads = acc.take_mean();
    let norm = match clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => crate::optim::global_norm(&grads),
    };
    opt.step(&mut model.store, &grads, lr)?;
    Ok(norm)
}

/// Trains `model` on the train split of `data`, evaluating train and val
/// after each epoch.
pub fn train(model: &mut EncoderModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    let start = Instant::now();
    let clock = |t: &Instant| if cfg.record_timings { t.elapsed().as_secs_f64() } else { 0.0 };
    let mut train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("train and val splits must both be non-empty".into()));
    }
    let weights = if cfg.class_weighting {
        class_weights(&data.labels(&train_idx), model.config.num_classes)?
    } else {
        vec![1.0; model.config.num_classes]
    };
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        routing: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: f64::NAN,
        stop_reason: "epoch budget exhausted".into(),
        warnings: Vec::new(),
        train_time_s: 0.0,
        optimizer_steps: 0,
    };
    if cfg.epochs == 0 {
        outcome.stop_reason = "epochs = 0".into();
        outcome.warnings.push("epochs = 0: returning the initialised model untrained".into());
        return Ok(outcome);
    }

    let micro_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accumulation) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let schedule = ScheduleConfig::with_warmup_fraction(cfg.peak_lr, cfg.min_lr, total_steps, cfg.warmup_fraction)?;
    let mut opt = OptimizerState::new(&model.store, cfg.optimizer);
    let mut acc = GradAccumulator::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut early = EarlyStopState::new(cfg.patience.max(1), cfg.min_delta, Mode::Min);
    let mut best_store = model.store.clone();
    let mut step: u64 = 0;
    let mut lr = 0.0;
    let switch = model.config.variant == Variant::Switch;
    let n_layers = model.config.num_layers;
    let n_experts = model.config.num_experts;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut counts = vec![vec![0usize; n_experts]; n_layers];
        let mut overflow = vec![vec![0usize; n_experts]; n_layers];
        let mut routed = vec![0usize; n_layers];
        let batches: Vec<&[usize]> = train_idx.chunks(cfg.batch_size).collect();
        for (b, chunk) in batches.iter().enumerate() {
            let batch = Batch::from_sequences(&data.sequences(chunk));
            let labels = data.labels(chunk);
            let (_, routing) = accumulate_micro_batch(model, &batch, &labels, &weights, &mut acc, &mut rng)?;
            if switch {
                for (l, rec) in routing.iter().enumerate() {
                    routed[l] += rec.expert.len();
                    for (&e, &o) in rec.expert.iter().zip(&rec.overflowed) {
                        counts[l][e] += 1;
                        overflow[l][e] += usize::from(o);
                    }
                }
            }
            if acc.count() == cfg.grad_accumulation || b + 1 == batches.len() {
                step += 1;
                lr = cosine_warmup_lr(step, &schedule);
                apply_accumulated(model, &mut opt, &mut acc, lr, cfg.clip_norm)?;
            }
        }
        if switch {
            for l in 0..n_layers {
                for e in 0..n_experts {
                    let n = routed[l].max(1) as f64;
                    outcome.routing.push(RoutingRow {
                        epoch,
                        layer: l,
                        expert: e,
                        fraction: counts[l][e] as f64 / n,
                        overflow_fraction: overflow[l][e] as f64 / n,
                    });
                }
            }
        }

        let tr = evaluate(model, data, &data.indices(Split::Train), &weights, cfg.eval_batch_size, cfg.eval_threads)?;
        let va = evaluate(model, data, &val_idx, &weights, cfg.eval_batch_size, cfg.eval_threads)?;
        let wall = clock(&start);
        for (split, e) in [(Split::Train, &tr), (Split::Val, &va)] {
            outcome.log.push(EpochRecord {
                epoch,
                split,
                loss: e.loss,
                accuracy: e.report.accuracy,
                precision: e.report.precision.positive,
                recall: e.report.recall.positive,
                lr,
                aux_loss: e.aux_loss,
                wall_clock_s: wall,
            });
        }
        outcome.epochs_run = epoch;
        outcome.optimizer_steps = step;

        let decision = early.update(epoch, va.loss)?;
        if let EarlyStopDecision::Continue { improved: true } = decision {
            best_store = model.store.clone();
            outcome.best_epoch = epoch;
            outcome.best_val_loss = va.loss;
        }
        if let Some(t) = cfg.target_val_accuracy {
            if va.report.accuracy >= t {
                outcome.stop_reason = format!("validation accuracy {:.4} reached target {t}", va.report.accuracy);
                break;
            }
        }
        if cfg.early_stopping {
            if let EarlyStopDecision::Stop { best_epoch } = decision {
                outcome.stop_reason = format!("early stop after epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }
    if cfg.early_stopping && cfg.target_val_accuracy.is_none() {
        model.store = best_store;
    }
    outcome.train_time_s = clock(&start);
    Ok(outcome)
}

fn f(x: f64) -> String {
    format!("{x}")
}

pub fn training_log_tsv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\tsplit\tloss\taccuracy\tprecision\trecall\tlr\taux_loss\twall_clock_s\n");
    for r in log {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            r.epoch,
            r.split,
            f(r.loss),
            f(r.accuracy),
            f(r.precision),
            f(r.recall),
            f(r.lr),
            f(r.aux_loss),
            r.wall_clock_s
        );
    }
    s
}

pub fn routing_tsv(rows: &[RoutingRow]) -> String {
    let mut s = String::from("epoch\tlayer\texpert\tfraction\toverflow_fraction\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.layer, r.expert, f(r.fraction), f(r.overflow_fraction));
    }
    s
}

pub fn gap_tsv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch\tgap\ttrain_loss\tval_loss\n");
    for (e, gap, t, v) in outcome.gap_series() {
        let _ = writeln!(s, "{e}\t{}\t{}\t{}", f(gap), f(t), f(v));
    }
    s
}

/// One line per example: id, label, then the pooled hidden state at `layer`.
pub fn hidden_embeddings_tsv(model: &EncoderModel, data: &LabeledDataset, idx: &[usize], layer: usize, batch_size: usize) -> Result<String> {
    let vecs = model.pooled_hidden(&data.sequences(idx), layer, batch_size)?;
    let d = model.config.d_model;
    let mut s = String::from("id\tlabel");
    for k in 0..d {
        let _ = write!(s, "\th{k}");
    }
    s.push('\n');
    for (&i, v) in idx.iter().zip(&vecs) {
        let ex = &data.examples[i];
        let _ = write!(s, "{}\t{}", ex.id, ex.label);
        for x in v {
            let _ = write!(s, "\t{}", f(*x));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_hidden_embeddings(
    model: &EncoderModel,
    data: &LabeledDataset,
    split: Split,
    layer: usize,
    path: &Path,
) -> Result<usize> {
    let idx = data.indices(split);
    let text = hidden_embeddings_tsv(model, data, &idx, layer, 64)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(idx.len())
}
