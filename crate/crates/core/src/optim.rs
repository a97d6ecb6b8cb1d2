//! AdamW, cosine learning-rate schedule with linear warmup, gradient
//! accumulation, global-norm clipping and early stopping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay λ; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 5e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One AdamW update of every parameter in `store` with `grads`
    /// (indexed like the store). Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw_step", &[store.len()], &[grads.len()]));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim("adamw_step", store.get(id).shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in {}[{i}] at step {}",
                    g.data()[i],
                    store.name(id),
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let old = p[i];
                let mut new = old - lr * m_hat / (v_hat.sqrt() + eps);
                if weight_decay != 0.0 {
                    new -= lr * weight_decay * old;
                }
                p[i] = new;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    /// Warmup over `warmup_fraction` of `total_steps`, rounded.
    pub fn with_warmup_fraction(peak_lr: f64, min_lr: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self> {
        let warmup = ((total_steps as f64) * warmup_fraction).round() as u64;
        let cfg = ScheduleConfig {
            peak_lr,
            min_lr,
            warmup_steps: warmup.min(total_steps.saturating_sub(1)),
            total_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_lr && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then cosine decay to
/// `min_lr` at `total_steps`. Steps past the end return `min_lr`.
pub fn cosine_warmup_lr(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Sums per-parameter gradients over micro-batches.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: Vec<Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            count: 0,
        }
    }

    /// Adds the gradients of every parameter bound in `graph`.
    pub fn add(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.param_bindings() {
            if let Some(g) = grads.get(var) {
                for (s, x) in self.sums[id.index()].data_mut().iter_mut().zip(g.data()) {
                    *s += x;
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient over the micro-batches added so far; resets the buffer.
    pub fn take_mean(&mut self) -> Vec<Tensor> {
        let n = self.count.max(1) as f64;
        self.count = 0;
        self.sums
            .iter_mut()
            .map(|s| {
                let mean = s.map(|x| x / n);
                s.data_mut().iter_mut().for_each(|x| *x = 0.0);
                mean
            })
            .collect()
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Lower is better (losses).
    Min,
    /// Higher is better (accuracies).
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Continue { improved: bool },
    Stop { best_epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_metric: f64,
    /// 1-based; 0 before the first update.
    pub best_epoch: usize,
    pub patience: usize,
    pub epochs_since_best: usize,
    pub min_delta: f64,
    pub mode: Mode,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64, mode: Mode) -> Self {
        EarlyStopState {
            best_metric: match mode {
                Mode::Min => f64::INFINITY,
                Mode::Max => f64::NEG_INFINITY,
            },
            best_epoch: 0,
            patience,
            epochs_since_best: 0,
            min_delta,
            mode,
        }
    }

    /// Records the metric of `epoch` (1-based). Stops once `patience`
    /// consecutive epochs fail to improve on the best by more than `min_delta`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> Result<EarlyStopDecision> {
        if !metric.is_finite() {
            return Err(Error::Numeric(format!("early-stopping metric {metric} at epoch {epoch}")));
        }
        let improved = match self.mode {
            _ if self.best_epoch == 0 => true,
            Mode::Min => metric < self.best_metric - self.min_delta,
            Mode::Max => metric > self.best_metric + self.min_delta,
        };
        if improved {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            return Ok(EarlyStopDecision::Continue { improved: true });
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best >= self.patience {
            Ok(EarlyStopDecision::Stop {
                best_epoch: self.best_epoch,
            })
        } else {
            Ok(EarlyStopDecision::Continue { improved: false })
        }
    }
}
