//! Integrated Gradients over token embeddings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{LabeledDataset, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ForwardCtx, Packed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Every token replaced by PAD; positional embeddings are kept.
    Pad,
    /// All-zero token embeddings.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// Right Riemann sum over `k/m`, `k = 1..m`.
    Right,
    /// Trapezoid over `k/m`, `k = 0..m`.
    Trapezoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    True,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub num_steps: usize,
    pub baseline: Baseline,
    pub rule: Rule,
    pub target: TargetMode,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            num_steps: 128,
            baseline: Baseline::Pad,
            rule: Rule::Right,
            target: TargetMode::True,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    /// Same shape as the input.
    pub attributions: Tensor,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `Σ attributions − (F(x) − F(x′))`
    pub residual: f64,
}

/// Integrated Gradients of a scalar function along the straight path from
/// `baseline` to `x`. `f` returns the value and gradient at a point.
pub fn integrated_gradients_fn<F>(mut f: F, x: &Tensor, baseline: &Tensor, num_steps: usize, rule: Rule) -> Result<IgResult>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if num_steps < 8 {
        return Err(Error::Contract(format!("num_steps ({num_steps}) must be >= 8")));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::dim("integrated_gradients", x.shape(), baseline.shape()));
    }
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let m = num_steps as f64;
    let mut total = vec![0.0; x.len()];
    let mut f_input = f64::NAN;
    let mut f_baseline = f64::NAN;
    let first = match rule {
        Rule::Right => 1,
        Rule::Trapezoid => 0,
    };
    for k in first..=num_steps {
        let alpha = k as f64 / m;
        let point = if k == num_steps {
            x.clone()
        } else if k == 0 {
            baseline.clone()
        } else {
            let data = baseline.data().iter().zip(&diff).map(|(b, d)| b + alpha * d).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let (value, grad) = f(&point)?;
        if grad.shape() != x.shape() {
            return Err(Error::dim("integrated_gradients", x.shape(), grad.shape()));
        }
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at path step {k} of {num_steps}")));
        }
        let w = match rule {
            Rule::Trapezoid if k == 0 || k == num_steps => 0.5,
            _ => 1.0,
        };
        for (t, g) in total.iter_mut().zip(grad.data()) {
            *t += w * g;
        }
        if k == num_steps {
            f_input = value;
        }
        if k == 0 {
            f_baseline = value;
        }
    }
    if f_baseline.is_nan() {
        f_baseline = f(baseline)?.0;
    }
    let attr: Vec<f64> = total.iter().zip(&diff).map(|(t, d)| d * t / m).collect();
    let residual = attr.iter().sum::<f64>() - (f_input - f_baseline);
    Ok(IgResult {
        attributions: Tensor::new(x.shape().to_vec(), attr)?,
        f_input,
        f_baseline,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub target: usize,
    pub prob_positive: f64,
    pub tokens: Vec<TokenScore>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_residual: f64,
    pub num_steps: usize,
    pub baseline: Baseline,
    pub rule: Rule,
}

impl AttributionReport {
    /// Tokens as `+tok(0.12)` / `-tok(-0.05)`; the sign marks the direction.
    pub fn highlighted(&self) -> String {
        let mut s = format!(
            "# {} label={} predicted={} target={} p1={:.4} residual={:.3e}\n",
            self.id, self.label, self.predicted, self.target, self.prob_positive, self.completeness_residual
        );
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| format!("{}{}({:.4})", if t.score >= 0.0 { '+' } else { '-' }, t.token, t.score))
            .collect();
        let _ = writeln!(s, "{}", parts.join(" "));
        s
    }

    /// Indices of the `k` tokens with largest |score|.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| self.tokens[b].score.abs().total_cmp(&self.tokens[a].score.abs()));
        idx.truncate(k);
        idx
    }
}

/// IG of the `target` logit with respect to the token embeddings of `ids`.
/// Returns the per-token scores (summed over the embedding dimension) and
/// the raw result.
pub fn attribute_sequence(model: &EncoderModel, ids: &[usize], target: usize, cfg: &IgConfig) -> Result<(Vec<f64>, IgResult)> {
    if target >= model.config.num_classes {
        return Err(Error::Contract(format!("target class {target} out of range")));
    }
    let n = ids.len();
    let packed = Packed {
        ids: ids.to_vec(),
        positions: (0..n).collect(),
        segments: vec![(0, n)],
    };
    if n == 0 || n > model.config.max_len {
        return Err(Error::Contract(format!("sequence length {n} outside 1..={}", model.config.max_len)));
    }
    let table = model.store.get(model.embeddings.table);
    let d = model.config.d_model;
    let rows = |id_of: &dyn Fn(usize) -> usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * d);
        for p in 0..n {
            let id = id_of(p);
            if id >= model.embeddings.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: model.embeddings.vocab_size,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(vec![n, d], data)
    };
    let x = rows(&|p| ids[p])?;
    let baseline = match cfg.baseline {
        Baseline::Pad => rows(&|_| PAD_ID)?,
        Baseline::Zero => Tensor::zeros(&[n, d]),
    };
    let f = |e: &Tensor| -> Result<(f64, Tensor)> {
        let mut g = Graph::inference();
        let tok = g.input(e.clone());
        let out = model.forward_from_token_embeddings(&mut g, tok, packed.clone(), &mut ForwardCtx::eval())?;
        let logit = g.gather_elems(out.logits, &[(0, target)])?;
        let root = g.sum(logit);
        let grads = g.backward(root)?;
        Ok((g.value(root).item(), grads.get_or_zeros(tok, &[n, d])))
    };
    let res = integrated_gradients_fn(f, &x, &baseline, cfg.num_steps, cfg.rule)?;
    let scores = (0..n).map(|p| res.attributions.row(p).iter().sum()).collect();
    Ok((scores, res))
}

/// Attribution report for example `i` of `data`.
pub fn attribute_example(
    model: &EncoderModel,
    vocab: &Vocabulary,
    data: &LabeledDataset,
    i: usize,
    cfg: &IgConfig,
) -> Result<AttributionReport> {
    let ids = &data.encoded[i];
    let probs = model.predict_proba(&[ids.as_slice()], 1)?;
    let predicted = argmax(&probs[0]);
    let ex = &data.examples[i];
    let target = match cfg.target {
        TargetMode::True => ex.label,
        TargetMode::Predicted => predicted,
    };
    let (scores, res) = attribute_sequence(model, ids, target, cfg)?;
    let tokens = ids
        .iter()
        .zip(scores)
        .map(|(&id, score)| TokenScore {
            token: vocab.token(id).unwrap_or(crate::data::UNK_TOKEN).to_string(),
            score,
        })
        .collect();
    Ok(AttributionReport {
        id: ex.id.clone(),
        label: ex.label,
        predicted,
        target,
        prob_positive: probs[0].get(1).copied().unwrap_or(f64::NAN),
        tokens,
        f_input: res.f_input,
        f_baseline: res.f_baseline,
        completeness_residual: res.residual,
        num_steps: cfg.num_steps,
        baseline: cfg.baseline,
        rule: cfg.rule,
    })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Misclassified examples among `indices`, false negatives first, each with
/// an attribution report.
pub fn rank_misclassified(
    model: &EncoderModel,
    vocab: &Vocabulary,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &IgConfig,
    batch_size: usize,
) -> Result<Vec<AttributionReport>> {
    let probs = model.predict_proba(&data.sequences(indices), batch_size)?;
    let mut wrong: Vec<(bool, usize)> = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        let pred = argmax(&probs[k]);
        let label = data.examples[i].label;
        if pred != label {
            wrong.push((!(label == 1 && pred == 0), i));
        }
    }
    wrong.sort();
    wrong
        .into_iter()
        .map(|(_, i)| attribute_example(model, vocab, data, i, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_rows(&[vec![0.5, -1.5, 2.0], vec![3.0, 0.25, -0.75]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, -3.0], vec![0.1, 4.0, 2.5]]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        for steps in [8, 13, 128] {
            for rule in [Rule::Right, Rule::Trapezoid] {
                let r = integrated_gradients_fn(
                    |e| Ok((e.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(), w.clone())),
                    &x,
                    &zero,
                    steps,
                    rule,
                )
                .unwrap();
                for i in 0..6 {
                    assert!((r.attributions.data()[i] - w.data()[i] * x.data()[i]).abs() <= 1e-12);
                }
                assert!(r.residual.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn baseline_input_gives_zero() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let r = integrated_gradients_fn(
            |e| Ok((e.data().iter().map(|v| v.sin()).sum(), e.map(f64::cos))),
            &x,
            &x,
            16,
            Rule::Right,
        )
        .unwrap();
        assert!(r.attributions.data().iter().all(|&a| a == 0.0));
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn preconditions() {
        let x = Tensor::vector(vec![1.0]);
        let f = |e: &Tensor| Ok((e.data()[0], Tensor::vector(vec![1.0])));
        assert!(integrated_gradients_fn(f, &x, &x, 4, Rule::Right).is_err());
        let nan = |_: &Tensor| Ok((0.0, Tensor::vector(vec![f64::NAN])));
        let e = integrated_gradients_fn(nan, &x, &Tensor::vector(vec![0.0]), 8, Rule::Right).unwrap_err();
        assert!(e.to_string().contains("step 1"), "{e}");
        assert!(integrated_gradients_fn(f, &x, &Tensor::vector(vec![0.0, 1.0]), 8, Rule::Right).is_err());
    }
}
