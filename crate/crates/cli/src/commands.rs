use std::path::{Path, PathBuf};

use switchtx::checkpoint;
use switchtx::data::{class_weights, prepare_dataset, read_dataset, write_dataset, Example, LabeledDataset, Split, Vocabulary};
use switchtx::interpret::{attribute_example, rank_misclassified, AttributionReport, IgConfig};
use switchtx::metrics::EvalReport;
use switchtx::model::EncoderModel;
use switchtx::synthetic::generate_synthetic_corpus;
use switchtx::train::{self, evaluate, TrainOutcome};
use switchtx::{digest_bytes, Error, Result};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Examples named by the config and the digest of their canonical JSONL form.
pub fn load_examples(cfg: &RunConfig) -> Result<(Vec<Example>, String)> {
    let examples = match &cfg.dataset {
        Some(p) => read_dataset(p)?,
        None => generate_synthetic_corpus(&cfg.synthetic_config())?.examples,
    };
    Ok((examples.clone(), dataset_digest(&examples)))
}

pub fn dataset_digest(examples: &[Example]) -> String {
    let mut text = String::new();
    for e in examples {
        text += &serde_json::to_string(e).expect("example serialises");
        text.push('\n');
    }
    digest_bytes(text.as_bytes())
}

pub struct Prepared {
    pub data: LabeledDataset,
    pub vocab: Vocabulary,
    pub dataset_digest: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (examples, dataset_digest) = load_examples(cfg)?;
    let (data, vocab) = prepare_dataset(
        examples,
        &cfg.tokenizer(),
        cfg.min_frequency,
        cfg.max_len,
        cfg.split_fractions(),
        cfg.split_seed,
        cfg.stratify,
    )?;
    Ok(Prepared { data, vocab, dataset_digest })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json_line<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s.into_bytes()
}

fn strip_timings(report: &mut EvalReport, keep: bool) {
    if !keep {
        report.timings.eval_total_s = 0.0;
        if report.timings.train_total_s.is_some() {
            report.timings.train_total_s = Some(0.0);
        }
    }
}

#[derive(Debug, serde::Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: String,
    pub optimizer_steps: u64,
    pub train_time_s: f64,
    pub parameters: usize,
    pub vocab_size: usize,
    pub warnings: Vec<String>,
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub val_report: EvalReport,
    pub manifest: Manifest,
}

/// `train` and `train-long` share everything but the epoch budget and the
/// gap series.
pub fn run_train(cfg: &RunConfig, long: bool) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    if long {
        cfg.early_stopping = false;
        cfg.epochs = cfg.long_epochs;
    }
    cfg.validate()?;
    let command = if long { "train-long" } else { "train" };
    let Prepared { data, vocab, dataset_digest } = prepare(&cfg)?;
    let mut model = EncoderModel::new(cfg.model_config(vocab.len()))?;
    let outcome = train::train(&mut model, &data, &cfg.train_config())?;

    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let mut manifest = Manifest::new(command, &cfg, dataset_digest);
    manifest.warnings = outcome.warnings.clone();

    let ckpt = checkpoint::to_bytes(&model, &vocab);
    manifest.write_output(&dir, CHECKPOINT_FILE, &ckpt)?;
    manifest.write_output(&dir, "train_log.tsv", train::training_log_tsv(&outcome.log).as_bytes())?;
    if !outcome.routing.is_empty() {
        manifest.write_output(&dir, "routing.tsv", train::routing_tsv(&outcome.routing).as_bytes())?;
    }
    if long {
        manifest.write_output(&dir, "gap.tsv", train::gap_tsv(&outcome).as_bytes())?;
    }

    let weights = weights_for(&cfg, &data)?;
    let mut val = evaluate(&model, &data, &data.indices(Split::Val), &weights, cfg.eval_batch_size, cfg.eval_threads)?;
    val.report.timings.train_total_s = Some(outcome.train_time_s);
    strip_timings(&mut val.report, cfg.record_timings);
    manifest.write_output(&dir, "val_report.json", &json_line(&val.report))?;
    manifest.write_output(&dir, "val_report.tsv", val.report.to_tsv().as_bytes())?;

    let summary = TrainSummary {
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stop_reason: outcome.stop_reason.clone(),
        optimizer_steps: outcome.optimizer_steps,
        train_time_s: outcome.train_time_s,
        parameters: model.count_parameters().total,
        vocab_size: vocab.len(),
        warnings: outcome.warnings.clone(),
    };
    manifest.write_output(&dir, "summary.json", &json_line(&summary))?;
    manifest.save(&dir)?;
    Ok(TrainRun { outcome, val_report: val.report, manifest })
}

fn weights_for(cfg: &RunConfig, data: &LabeledDataset) -> Result<Vec<f64>> {
    if cfg.class_weighting {
        class_weights(&data.labels(&data.indices(Split::Train)), 2)
    } else {
        Ok(vec![1.0, 1.0])
    }
}

/// A checkpoint together with the dataset re-encoded under the run config;
/// fails when the two vocabularies disagree.
pub struct Loaded {
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub data: LabeledDataset,
    pub dataset_digest: String,
    pub checkpoint_digest: String,
}

pub fn load_checkpointed(cfg: &RunConfig, ckpt: &Path) -> Result<Loaded> {
    cfg.validate()?;
    let bytes = std::fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let (model, vocab) = checkpoint::from_bytes(&bytes)?;
    let prepared = prepare(cfg)?;
    if prepared.vocab.digest() != vocab.digest() {
        return Err(Error::Compatibility(format!(
            "checkpoint vocabulary ({} tokens, digest {}) differs from the one built from the dataset ({} tokens, digest {})",
            vocab.len(),
            &vocab.digest()[..12],
            prepared.vocab.len(),
            &prepared.vocab.digest()[..12]
        )));
    }
    if model.config.max_len < cfg.max_len {
        return Err(Error::Compatibility(format!(
            "checkpoint max_len {} is shorter than the configured {}",
            model.config.max_len, cfg.max_len
        )));
    }
    Ok(Loaded {
        model,
        vocab,
        data: prepared.data,
        dataset_digest: prepared.dataset_digest,
        checkpoint_digest: digest_bytes(&bytes),
    })
}

fn manifest_for(command: &str, cfg: &RunConfig, loaded: &Loaded) -> Manifest {
    let mut m = Manifest::new(command, cfg, loaded.dataset_digest.clone());
    m.inputs.insert("checkpoint".into(), loaded.checkpoint_digest.clone());
    m
}

pub fn run_eval(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<EvalReport> {
    let loaded = load_checkpointed(cfg, ckpt)?;
    let idx = loaded.data.indices(split);
    let weights = weights_for(cfg, &loaded.data)?;
    let mut ev = evaluate(&loaded.model, &loaded.data, &idx, &weights, cfg.eval_batch_size, cfg.eval_threads)?;
    strip_timings(&mut ev.report, cfg.record_timings);

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut manifest = manifest_for("eval", cfg, &loaded);
    manifest.write_output(dir, &format!("eval_{split}.json"), &json_line(&ev.report))?;
    manifest.write_output(dir, &format!("eval_{split}.tsv"), ev.report.to_tsv().as_bytes())?;
    manifest.save(dir)?;
    Ok(ev.report)
}

pub enum Selection {
    Ids(Vec<String>),
    Misclassified(Split),
}

pub fn run_attribute(cfg: &RunConfig, ckpt: &Path, selection: &Selection, ig: &IgConfig) -> Result<Vec<AttributionReport>> {
    let loaded = load_checkpointed(cfg, ckpt)?;
    let Loaded { model, vocab, data, .. } = &loaded;
    let reports = match selection {
        Selection::Ids(ids) => {
            let mut idx = Vec::with_capacity(ids.len());
            for id in ids {
                idx.push(data.find(id).ok_or_else(|| Error::Lookup(format!("no example with id {id:?}")))?);
            }
            idx.into_iter()
                .map(|i| attribute_example(model, vocab, data, i, ig))
                .collect::<Result<Vec<_>>>()?
        }
        Selection::Misclassified(split) => {
            rank_misclassified(model, vocab, data, &data.indices(*split), ig, cfg.eval_batch_size)?
        }
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut jsonl = String::new();
    let mut text = String::new();
    for r in &reports {
        jsonl += &serde_json::to_string(r).expect("report serialises");
        jsonl.push('\n');
        text += &r.highlighted();
        text.push('\n');
    }
    let mut manifest = manifest_for("attribute", cfg, &loaded);
    manifest.write_output(dir, "attributions.jsonl", jsonl.as_bytes())?;
    manifest.write_output(dir, "attributions.txt", text.as_bytes())?;
    manifest.save(dir)?;
    Ok(reports)
}

/// Writes one embedding table per (split, layer) pair and returns their names.
pub fn run_export_embeddings(cfg: &RunConfig, ckpt: &Path, layers: &[usize], splits: &[Split]) -> Result<Vec<String>> {
    let loaded = load_checkpointed(cfg, ckpt)?;
    let layers: Vec<usize> = if layers.is_empty() { (0..loaded.model.config.num_layers).collect() } else { layers.to_vec() };
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut manifest = manifest_for("export-embeddings", cfg, &loaded);
    let mut names = Vec::new();
    for &split in splits {
        for &layer in &layers {
            let name = format!("embeddings_{split}_layer{layer}.tsv");
            train::export_hidden_embeddings(&loaded.model, &loaded.data, split, layer, &dir.join(&name))?;
            manifest.record_output(dir, &name)?;
            names.push(name);
        }
    }
    manifest.save(dir)?;
    Ok(names)
}

/// Writes the configured synthetic corpus as JSON lines.
pub fn run_gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let corpus = generate_synthetic_corpus(&cfg.synthetic_config())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(out, &corpus.examples)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut manifest = Manifest::new("gen-data", cfg, dataset_digest(&corpus.examples));
    let bytes = std::fs::read(out).map_err(|e| Error::io(out, e))?;
    manifest.outputs.insert(file_name(out), digest_bytes(&bytes));
    manifest.save(dir)?;
    Ok(corpus.examples.len())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| PathBuf::from(p).display().to_string())
}
