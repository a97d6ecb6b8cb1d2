//! Run configuration: one flat table of every knob, read from TOML or JSON,
//! with `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchtx::data::TokenizerConfig;
use switchtx::model::{ModelConfig, Pooling, Variant};
use switchtx::optim::AdamWConfig;
use switchtx::synthetic::SyntheticConfig;
use switchtx::train::TrainConfig;
use switchtx::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub variant: Variant,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub capacity_factor: f64,
    pub aux_loss_weight: f64,
    pub dense_moe: bool,
    pub router_jitter: f64,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
    pub model_seed: u64,

    // optimisation
    pub epochs: usize,
    pub long_epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub early_stopping: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub class_weighting: bool,
    /// Stop once validation accuracy reaches this; 0 disables it.
    pub target_val_accuracy: f64,
    pub train_seed: u64,
    pub eval_batch_size: usize,
    pub eval_threads: usize,
    pub record_timings: bool,

    // data
    /// JSON-lines or tab-separated file; empty means "generate a synthetic corpus".
    pub dataset: Option<PathBuf>,
    pub split_seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub stratify: bool,
    pub min_frequency: usize,
    pub remove_stop_words: bool,
    pub merge_negations: bool,
    pub synthetic_n: usize,
    pub synthetic_positive_fraction: f64,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SyntheticConfig::default();
        RunConfig {
            variant: m.variant,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            num_experts: m.num_experts,
            d_model: m.d_model,
            d_ff: m.d_ff,
            max_len: m.max_len,
            dropout: m.dropout,
            capacity_factor: m.capacity_factor,
            aux_loss_weight: m.aux_loss_weight,
            dense_moe: m.dense_moe,
            router_jitter: m.router_jitter,
            pooling: m.pooling,
            layer_norm_eps: m.layer_norm_eps,
            model_seed: m.seed,
            epochs: t.epochs,
            long_epochs: 500,
            batch_size: t.batch_size,
            grad_accumulation: t.grad_accumulation,
            peak_lr: t.peak_lr,
            min_lr: t.min_lr,
            warmup_fraction: t.warmup_fraction,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            adam_eps: t.optimizer.eps,
            weight_decay: t.optimizer.weight_decay,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            early_stopping: t.early_stopping,
            patience: t.patience,
            min_delta: t.min_delta,
            class_weighting: t.class_weighting,
            target_val_accuracy: 0.0,
            train_seed: t.seed,
            eval_batch_size: t.eval_batch_size,
            eval_threads: t.eval_threads,
            record_timings: t.record_timings,
            dataset: None,
            split_seed: 17,
            val_fraction: 0.1,
            test_fraction: 0.1,
            stratify: true,
            min_frequency: 2,
            remove_stop_words: false,
            merge_negations: false,
            synthetic_n: s.n,
            synthetic_positive_fraction: s.positive_fraction,
            synthetic_noise: s.noise,
            synthetic_seed: s.seed,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (TOML unless the extension is `.json`) and applies
    /// `overrides`; flags win over the file.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                if p.extension().and_then(|e| e.to_str()) == Some("json") {
                    let v: serde_json::Value =
                        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    json_to_toml(v)?
                } else {
                    text.parse::<toml::Table>()
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            num_experts: self.num_experts,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            capacity_factor: self.capacity_factor,
            aux_loss_weight: self.aux_loss_weight,
            dense_moe: self.dense_moe,
            router_jitter: self.router_jitter,
            pooling: self.pooling,
            layer_norm_eps: self.layer_norm_eps,
            num_classes: 2,
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accumulation: self.grad_accumulation,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_fraction: self.warmup_fraction,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            early_stopping: self.early_stopping,
            patience: self.patience,
            min_delta: self.min_delta,
            class_weighting: self.class_weighting,
            target_val_accuracy: (self.target_val_accuracy > 0.0).then_some(self.target_val_accuracy),
            eval_batch_size: self.eval_batch_size,
            eval_threads: self.eval_threads,
            record_timings: self.record_timings,
            seed: self.train_seed,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n: self.synthetic_n,
            positive_fraction: self.synthetic_positive_fraction,
            noise: self.synthetic_noise,
            seed: self.synthetic_seed,
            ..Default::default()
        }
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (1.0 - self.val_fraction - self.test_fraction, self.val_fraction, self.test_fraction)
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            lowercase: true,
            remove_stop_words: self.remove_stop_words,
            merge_negations: self.merge_negations,
        }
    }

    /// Every violated constraint across the model, training and data knobs.
    pub fn violations(&self) -> Vec<String> {
        // vocab size is only known after reading the data
        let mut v: Vec<String> = self
            .model_config(2)
            .violations()
            .into_iter()
            .filter(|m| !m.starts_with("vocab_size"))
            .collect();
        v.extend(self.train_config().violations());
        if self.min_frequency == 0 {
            v.push("min_frequency must be >= 1".into());
        }
        let (train, val, test) = self.split_fractions();
        if !(val > 0.0 && test >= 0.0 && train > 0.0) {
            v.push(format!("val_fraction ({val}) must be > 0, test_fraction ({test}) >= 0, and together < 1"));
        }
        if !(0.0..=1.0).contains(&self.target_val_accuracy) {
            v.push("target_val_accuracy must lie in [0, 1]".into());
        }
        match &self.dataset {
            Some(p) if !p.exists() => v.push(format!("dataset {} does not exist", p.display())),
            Some(_) => {}
            None => {
                if let Err(e) = self.synthetic_config().validate() {
                    v.push(e.to_string());
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn json_to_toml(v: serde_json::Value) -> Result<toml::Table> {
    let text = serde_json::to_string(&v).expect("value serialises");
    let t: toml::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    match t {
        toml::Value::Table(t) => Ok(t),
        _ => Err(Error::Config("config must be an object".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_table() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.grad_accumulation), (70, 16, 4));
        assert_eq!((c.dropout, c.adam_eps, c.max_len), (0.35, 5e-6, 256));
        assert_eq!((c.num_layers, c.num_heads, c.num_experts), (4, 4, 4));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "epochs = 5\nvariant = \"dense\"\nd_model = 32\n").unwrap();
        let c = RunConfig::load(Some(&p), &[("epochs".into(), "7".into()), ("output_dir".into(), "out/x".into())]).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.variant, Variant::Dense);
        assert_eq!(c.d_model, 32);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));

        let j = dir.path().join("run.json");
        std::fs::write(&j, r#"{"epochs": 3, "dropout": 0.1}"#).unwrap();
        let c = RunConfig::load(Some(&j), &[]).unwrap();
        assert_eq!((c.epochs, c.dropout), (3, 0.1));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::load(None, &[("epoch".into(), "3".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn every_violation_is_listed() {
        let c = RunConfig {
            d_model: 10,
            num_heads: 3,
            dropout: 1.5,
            batch_size: 0,
            dataset: Some(PathBuf::from("/nonexistent/data.jsonl")),
            ..Default::default()
        };
        let v = c.violations();
        assert_eq!(v.len(), 4, "{v:?}");
    }
}
