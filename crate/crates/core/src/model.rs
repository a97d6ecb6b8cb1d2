//! Encoder stacks: embeddings, `num_layers` post-norm encoder blocks with
//! either a dense FFN or a switch layer, masked pooling and a classifier head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{FfnParams, MultiHeadParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::{RouteOptions, RoutingRecord, SwitchParams};
use crate::nn::{EmbeddingTable, LayerNormParams, LinearParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Switch,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dense => "dense",
            Variant::Switch => "switch",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Variant::Dense),
            "switch" => Ok(Variant::Switch),
            other => Err(Error::Config(format!("unknown variant `{other}` (dense|switch)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over real (unpadded) positions.
    Mean,
    /// Representation of the first token.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub capacity_factor: f64,
    pub aux_loss_weight: f64,
    pub dense_moe: bool,
    /// Multiplicative router-input noise half-width during training; 0 disables it.
    pub router_jitter: f64,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Switch,
            num_layers: 4,
            num_heads: 4,
            num_experts: 4,
            d_model: 200,
            d_ff: 800,
            vocab_size: 0,
            max_len: 256,
            dropout: 0.35,
            capacity_factor: 1.25,
            aux_loss_weight: 0.01,
            dense_moe: false,
            router_jitter: 0.0,
            pooling: Pooling::Mean,
            layer_norm_eps: 1e-5,
            num_classes: 2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            v.push(format!(
                "d_model ({}) must be divisible by num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        if self.d_model == 0 {
            v.push("d_model must be >= 1".into());
        }
        if self.d_ff < self.d_model {
            v.push(format!("d_ff ({}) must be >= d_model ({})", self.d_ff, self.d_model));
        }
        if self.vocab_size < 2 {
            v.push(format!("vocab_size ({}) must be >= 2", self.vocab_size));
        }
        if self.max_len == 0 {
            v.push("max_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if self.variant == Variant::Switch {
            if self.num_experts == 0 {
                v.push("num_experts must be >= 1".into());
            }
            if !(self.capacity_factor >= 1.0) {
                v.push(format!("capacity_factor ({}) must be >= 1", self.capacity_factor));
            }
        }
        if !(self.aux_loss_weight >= 0.0) {
            v.push("aux_loss_weight must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.router_jitter) {
            v.push("router_jitter must lie in [0, 1)".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            v.push("layer_norm_eps must be > 0".into());
        }
        if self.num_classes < 2 {
            v.push("num_classes must be >= 2".into());
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

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FeedForward {
    Dense(FfnParams),
    Switch(SwitchParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub mha: MultiHeadParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

/// Token ids of a batch, padded to a common length, with real-token masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Pads every sequence with PAD (id 0) to the longest one.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            let mut row = s.to_vec();
            row.resize(len, crate::data::PAD_ID);
            let mut m = vec![true; s.len()];
            m.resize(len, false);
            ids.push(row);
            mask.push(m);
        }
        Batch { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.ids.first().map(Vec::len).unwrap_or(0)
    }
}

/// Real tokens of a batch laid out back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// `(start, len)` rows of each sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    pub fn from_batch(batch: &Batch, max_len: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for (row, mask) in batch.ids.iter().zip(&batch.mask) {
            if row.len() != mask.len() {
                return Err(Error::dim("batch", &[row.len()], &[mask.len()]));
            }
            if row.len() > max_len {
                return Err(Error::Contract(format!(
                    "sequence of length {} exceeds max_len {max_len}",
                    row.len()
                )));
            }
            let start = ids.len();
            for (p, (&id, &m)) in row.iter().zip(mask).enumerate() {
                if m {
                    ids.push(id);
                    positions.push(p);
                }
            }
            let len = ids.len() - start;
            if len == 0 {
                return Err(Error::Contract("sequence without any real token".into()));
            }
            segments.push((start, len));
        }
        Ok(Packed {
            ids,
            positions,
            segments,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }
}

/// Forward-pass switches.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Per-layer forced expert choices.
    pub fixed_routes: Option<&'a [Vec<usize>]>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            fixed_routes: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            rng: Some(rng),
            fixed_routes: None,
        }
    }
}

pub struct ForwardOutput {
    /// `[B×num_classes]`
    pub logits: Var,
    /// Post-block states for every layer, packed `[N×d_model]`.
    pub hidden: Vec<Var>,
    /// Mean of per-layer switch auxiliary losses; constant 0 for dense.
    pub aux_loss: Var,
    pub routing: Vec<RoutingRecord>,
    pub packed: Packed,
}

/// Itemised scalar parameter counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.items {
            writeln!(f, "{name:<28} {n:>12}")?;
        }
        write!(f, "{:<28} {:>12}", "total", self.total)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingTable,
    pub blocks: Vec<EncoderBlock>,
    pub head: LinearParams,
}

impl EncoderModel {
    /// Builds and Glorot-initialises a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTable::new(
            &mut store,
            config.vocab_size,
            config.d_model,
            config.max_len,
            &mut rng,
        )?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let name = format!("block{l}");
            let mha = MultiHeadParams::new(
                &mut store,
                &format!("{name}.attn"),
                config.d_model,
                config.num_heads,
                &mut rng,
            )?;
            let norm1 = LayerNormParams::new(
                &mut store,
                &format!("{name}.norm1"),
                config.d_model,
                config.layer_norm_eps,
            )?;
            let ffn = match config.variant {
                Variant::Dense => FeedForward::Dense(FfnParams::new(
                    &mut store,
                    &format!("{name}.ffn"),
                    config.d_model,
                    config.d_ff,
                    &mut rng,
                )),
                Variant::Switch => {
                    let mut s = SwitchParams::new(
                        &mut store,
                        &format!("{name}.moe"),
                        config.d_model,
                        config.d_ff,
                        config.num_experts,
                        config.capacity_factor,
                        config.aux_loss_weight,
                        &mut rng,
                    )?;
                    s.dense_moe = config.dense_moe;
                    FeedForward::Switch(s)
                }
            };
            let norm2 = LayerNormParams::new(
                &mut store,
                &format!("{name}.norm2"),
                config.d_model,
                config.layer_norm_eps,
            )?;
            blocks.push(EncoderBlock {
                mha,
                norm1,
                ffn,
                norm2,
            });
        }
        let head = LinearParams::new(&mut store, "head", config.d_model, config.num_classes, &mut rng);
        Ok(EncoderModel {
            config,
            store,
            embeddings,
            blocks,
            head,
        })
    }

    pub fn count_parameters(&self) -> ParamReport {
        let mut items = vec![
            ("embeddings.tokens".to_string(), self.embeddings.vocab_size * self.embeddings.dim),
            ("embeddings.positions".to_string(), self.embeddings.max_len * self.embeddings.dim),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            items.push((format!("block{l}.attention"), b.mha.num_params()));
            items.push((format!("block{l}.norm1"), b.norm1.num_params()));
            match &b.ffn {
                FeedForward::Dense(f) => items.push((format!("block{l}.ffn"), f.num_params())),
                FeedForward::Switch(s) => {
                    items.push((format!("block{l}.moe.gate"), s.gate.num_params()));
                    items.push((
                        format!("block{l}.moe.experts"),
                        s.experts.iter().map(FfnParams::num_params).sum(),
                    ));
                }
            }
            items.push((format!("block{l}.norm2"), b.norm2.num_params()));
        }
        items.push(("head".to_string(), self.head.num_params()));
        let total = items.iter().map(|(_, n)| n).sum();
        ParamReport { items, total }
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, ctx: &mut ForwardCtx<'_>) -> Result<ForwardOutput> {
        let packed = Packed::from_batch(batch, self.config.max_len)?;
        let tok = self.embeddings.token_rows(g, &self.store, &packed.ids)?;
        self.forward_from_token_embeddings(g, tok, packed, ctx)
    }

    /// Runs the network from already looked-up token embeddings `[N×d_model]`
    /// (positional embeddings are still added here).
    pub fn forward_from_token_embeddings(
        &self,
        g: &mut Graph,
        tok: Var,
        packed: Packed,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        let store = &self.store;
        let cfg = &self.config;
        if g.shape(tok) != [packed.num_tokens(), cfg.d_model] {
            return Err(Error::dim(
                "forward",
                g.shape(tok),
                &[packed.num_tokens(), cfg.d_model],
            ));
        }
        let dropout = if ctx.training { cfg.dropout } else { 0.0 };
        let mut rng_fallback = ChaCha8Rng::seed_from_u64(cfg.seed);

        let pos = self.embeddings.position_rows(g, store, &packed.positions)?;
        let mut x = g.add(tok, pos)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut routing = Vec::new();
        let mut aux_terms = Vec::new();

        for (l, block) in self.blocks.iter().enumerate() {
            let attn = block.mha.forward_packed(g, store, x, &packed.segments)?;
            let rng = ctx.rng.as_deref_mut().unwrap_or(&mut rng_fallback);
            let attn = g.dropout(attn, dropout, ctx.training, rng)?;
            let res = g.add(x, attn)?;
            x = block.norm1.forward(g, store, res)?;

            let ff = match &block.ffn {
                FeedForward::Dense(f) => f.forward(g, store, x)?,
                FeedForward::Switch(s) => {
                    let fixed = ctx.fixed_routes.map(|r| r[l].as_slice());
                    let router_in = if ctx.training && cfg.router_jitter > 0.0 {
                        let rng = ctx.rng.as_deref_mut().unwrap_or(&mut rng_fallback);
                        let noise = jitter(g.shape(x), cfg.router_jitter, rng);
                        let nc = g.constant(noise);
                        Some(g.mul(x, nc)?)
                    } else {
                        None
                    };
                    let out = s.forward(
                        g,
                        store,
                        x,
                        RouteOptions {
                            training: ctx.training,
                            fixed_routes: fixed,
                            router_input: router_in,
                        },
                    )?;
                    routing.push(out.record);
                    aux_terms.push(out.aux_loss);
                    out.output
                }
            };
            let rng = ctx.rng.as_deref_mut().unwrap_or(&mut rng_fallback);
            let ff = g.dropout(ff, dropout, ctx.training, rng)?;
            let res = g.add(x, ff)?;
            x = block.norm2.forward(g, store, res)?;
            hidden.push(x);
        }

        let pooled = match cfg.pooling {
            Pooling::Mean => g.segment_mean(x, &packed.segments)?,
            Pooling::First => {
                let firsts: Vec<usize> = packed.segments.iter().map(|&(s, _)| s).collect();
                g.gather_rows(x, &firsts)?
            }
        };
        let rng = ctx.rng.as_deref_mut().unwrap_or(&mut rng_fallback);
        let pooled = g.dropout(pooled, dropout, ctx.training, rng)?;
        let logits = self.head.forward(g, store, pooled)?;

        let aux_loss = if aux_terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let parts: Vec<Var> = aux_terms
                .iter()
                .map(|&a| g.reshape(a, vec![1, 1]))
                .collect::<Result<_>>()?;
            let all = g.concat_rows(&parts)?;
            g.mean(all)
        };

        Ok(ForwardOutput {
            logits,
            hidden,
            aux_loss,
            routing,
            packed,
        })
    }

    /// Weighted cross-entropy plus `aux_loss_weight ·` auxiliary loss.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let weights: Vec<f64> = labels
            .iter()
            .map(|&y| class_weights.get(y).copied().unwrap_or(1.0))
            .collect();
        let ce = g.cross_entropy(out.logits, labels, &weights)?;
        if self.config.variant == Variant::Switch && self.config.aux_loss_weight > 0.0 {
            let aux = g.scale(out.aux_loss, self.config.aux_loss_weight);
            g.add(ce, aux)
        } else {
            Ok(ce)
        }
    }

    /// Softmax class probabilities for each sequence, in eval mode.
    pub fn predict_proba<S: AsRef<[usize]>>(&self, seqs: &[S], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let batch = Batch::from_sequences(chunk);
            let mut g = Graph::inference();
            let fwd = self.forward(&mut g, &batch, &mut ForwardCtx::eval())?;
            let probs = crate::tensor::softmax(g.value(fwd.logits), 1)?;
            for r in 0..chunk.len() {
                out.push(probs.row(r).to_vec());
            }
        }
        Ok(out)
    }

    /// Masked-mean pooled hidden state at `layer` for each sequence.
    pub fn pooled_hidden<S: AsRef<[usize]>>(&self, seqs: &[S], layer: usize, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        if layer >= self.blocks.len() {
            return Err(Error::Contract(format!(
                "layer {layer} out of range: model has num_layers = {}",
                self.blocks.len()
            )));
        }
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let batch = Batch::from_sequences(chunk);
            let mut g = Graph::inference();
            let fwd = self.forward(&mut g, &batch, &mut ForwardCtx::eval())?;
            let pooled = g.segment_mean(fwd.hidden[layer], &fwd.packed.segments)?;
            for r in 0..chunk.len() {
                out.push(g.value(pooled).row(r).to_vec());
            }
        }
        Ok(out)
    }
}

fn jitter<R: Rng + ?Sized>(shape: &[usize], eps: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(1.0 - eps..1.0 + eps)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Scatters packed `[N×d]` rows back into a zero-padded `[B×len×d]` tensor.
pub fn unpack_hidden(packed_rows: &Tensor, batch: &Batch) -> Result<Tensor> {
    let d = packed_rows.dims2().1;
    let len = batch.padded_len();
    let mut out = vec![0.0; batch.len() * len * d];
    let mut r = 0;
    for (b, mask) in batch.mask.iter().enumerate() {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                out[(b * len + p) * d..(b * len + p + 1) * d].copy_from_slice(packed_rows.row(r));
                r += 1;
            }
        }
    }
    Tensor::new(vec![batch.len(), len, d], out)
}
