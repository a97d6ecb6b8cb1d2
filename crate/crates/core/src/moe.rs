//! The switch layer: a softmax router over expert FFNs with top-1 dispatch,
//! per-expert capacity, and the load-balancing auxiliary loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::FfnParams;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LinearParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchParams {
    /// Router projection `[d_model×E]`.
    pub gate: LinearParams,
    pub experts: Vec<FfnParams>,
    pub capacity_factor: f64,
    pub aux_loss_weight: f64,
    /// Combine every expert weighted by its gate probability instead of
    /// dispatching each token to its argmax expert.
    pub dense_moe: bool,
}

/// Where each token went during one switch forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Argmax expert per token (also for overflowed tokens).
    pub expert: Vec<usize>,
    /// Gate probability of the chosen expert per token.
    pub gate_prob: Vec<f64>,
    /// Tokens actually processed per expert.
    pub counts: Vec<usize>,
    /// Tokens dropped because their expert was full.
    pub overflow: usize,
    pub overflowed: Vec<bool>,
}

impl RoutingRecord {
    pub fn num_tokens(&self) -> usize {
        self.expert.len()
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Per-expert share of tokens by chosen expert, overflow included.
    pub fn expert_utilization(&self) -> Vec<f64> {
        expert_utilization(self)
    }

    /// Per-expert share of tokens that were routed to the expert but dropped.
    pub fn overflow_fractions(&self) -> Vec<f64> {
        let t = self.num_tokens().max(1) as f64;
        let mut out = vec![0.0; self.num_experts()];
        for (&e, &o) in self.expert.iter().zip(&self.overflowed) {
            if o {
                out[e] += 1.0;
            }
        }
        out.iter().map(|c| c / t).collect()
    }
}

/// Per-expert fraction of tokens that chose it.
pub fn expert_utilization(record: &RoutingRecord) -> Vec<f64> {
    let mut counts = vec![0usize; record.num_experts()];
    for &e in &record.expert {
        counts[e] += 1;
    }
    let t = record.num_tokens() as f64;
    counts.iter().map(|&c| c as f64 / t).collect()
}

/// Per-call knobs for [`SwitchParams::forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RouteOptions<'a> {
    /// Capacity limits apply only while training.
    pub training: bool,
    /// Forces the chosen expert of each token. Used to hold routing fixed
    /// across finite-difference perturbations.
    pub fixed_routes: Option<&'a [usize]>,
    /// Router reads this instead of the layer input (jittered copy).
    pub router_input: Option<Var>,
}

pub struct SwitchOutput {
    pub output: Var,
    pub record: RoutingRecord,
    pub aux_loss: Var,
}

impl SwitchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        capacity_factor: f64,
        aux_loss_weight: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::Config("a switch layer needs at least one expert".into()));
        }
        if capacity_factor < 1.0 || !capacity_factor.is_finite() {
            return Err(Error::Config(format!("capacity_factor {capacity_factor} must be >= 1")));
        }
        if aux_loss_weight < 0.0 {
            return Err(Error::Config("aux_loss_weight must be non-negative".into()));
        }
        let gate = LinearParams::new(store, &format!("{name}.gate"), d_model, num_experts, rng);
        let experts = (0..num_experts)
            .map(|j| FfnParams::new(store, &format!("{name}.expert{j}"), d_model, d_ff, rng))
            .collect();
        Ok(SwitchParams {
            gate,
            experts,
            capacity_factor,
            aux_loss_weight,
            dense_moe: false,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params() + self.experts.iter().map(FfnParams::num_params).sum::<usize>()
    }

    /// Router probabilities `[T×E]`.
    pub fn gate_probs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.gate.forward(g, store, x)?;
        g.softmax(logits, 1)
    }

    /// Token capacity of each expert for a batch of `tokens` tokens.
    pub fn capacity(&self, tokens: usize, training: bool) -> usize {
        if !training {
            return tokens;
        }
        let cap = (self.capacity_factor * tokens as f64 / self.num_experts() as f64).floor() as usize;
        cap.max(1)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        opts: RouteOptions<'_>,
    ) -> Result<SwitchOutput> {
        let (t, d) = match g.shape(x) {
            [t, d] => (*t, *d),
            s => return Err(Error::dim("switch_forward", s, &[0, 0])),
        };
        let e = self.num_experts();
        let probs = self.gate_probs(g, store, opts.router_input.unwrap_or(x))?;
        let pt = g.value(probs).clone();

        let expert: Vec<usize> = match opts.fixed_routes {
            Some(r) if r.len() == t && r.iter().all(|&j| j < e) => r.to_vec(),
            Some(r) => {
                return Err(Error::Contract(format!(
                    "fixed routes must name one of {e} experts for each of {t} tokens, got {}",
                    r.len()
                )))
            }
            None => (0..t).map(|i| argmax(pt.row(i))).collect(),
        };
        let gate_prob: Vec<f64> = expert.iter().enumerate().map(|(i, &j)| pt.at(i, j)).collect();

        let aux_loss = self.aux_loss(g, probs, &expert)?;

        let (output, counts, overflowed) = if self.dense_moe {
            let mut acc: Option<Var> = None;
            for (j, ffn) in self.experts.iter().enumerate() {
                let y = ffn.forward(g, store, x)?;
                let pj = g.slice(probs, 0, t, j, 1)?;
                let y = g.mul_col(y, pj)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            let mut counts = vec![0; e];
            for &j in &expert {
                counts[j] += 1;
            }
            (acc.unwrap(), counts, vec![false; t])
        } else {
            let cap = self.capacity(t, opts.training);
            let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); e];
            let mut overflowed = vec![false; t];
            for (i, &j) in expert.iter().enumerate() {
                if assigned[j].len() < cap {
                    assigned[j].push(i);
                } else {
                    overflowed[i] = true;
                }
            }
            let mut acc: Option<Var> = None;
            for (j, tokens) in assigned.iter().enumerate() {
                if tokens.is_empty() {
                    continue;
                }
                let xj = g.gather_rows(x, tokens)?;
                let yj = self.experts[j].forward(g, store, xj)?;
                let picks: Vec<(usize, usize)> = tokens.iter().map(|&i| (i, j)).collect();
                let pj = g.gather_elems(probs, &picks)?;
                let yj = g.mul_col(yj, pj)?;
                let placed = g.scatter_rows(yj, tokens, t)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, placed)?,
                    None => placed,
                });
            }
            let out = match acc {
                Some(v) => v,
                None => g.constant(Tensor::zeros(&[t, d])),
            };
            (out, assigned.iter().map(Vec::len).collect(), overflowed)
        };

        let overflow = overflowed.iter().filter(|&&o| o).count();
        Ok(SwitchOutput {
            output,
            record: RoutingRecord {
                expert,
                gate_prob,
                counts,
                overflow,
                overflowed,
            },
            aux_loss,
        })
    }

    /// `E · Σ_j f_j · P_j` with `f_j` the dispatch fraction (constant) and
    /// `P_j` the mean router probability (differentiable).
    fn aux_loss(&self, g: &mut Graph, probs: Var, expert: &[usize]) -> Result<Var> {
        let t = expert.len();
        let e = self.num_experts();
        let mut f = vec![0.0; e];
        for &j in expert {
            f[j] += 1.0 / t as f64;
        }
        let weights: Vec<f64> = (0..t).flat_map(|_| f.iter().copied()).collect();
        let fc = g.constant(Tensor::new(vec![t, e], weights)?);
        let prod = g.mul(probs, fc)?;
        let s = g.sum(prod);
        Ok(g.scale(s, e as f64 / t as f64))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Router probabilities for a single token.
pub fn gate_probs(g: &mut Graph, store: &ParamStore, x_t: Var, gate: &LinearParams) -> Result<Var> {
    let d = g.value(x_t).len();
    let row = g.reshape(x_t, vec![1, d])?;
    let logits = gate.forward(g, store, row)?;
    g.softmax(logits, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::param_gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(store: &mut ParamStore, d: usize, e: usize, cf: f64, seed: u64) -> SwitchParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SwitchParams::new(store, "moe", d, 2 * d, e, cf, 0.01, &mut rng).unwrap()
    }

    #[test]
    fn gate_probs_examples() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 3, 4, 1.25, 0);
        store.set(p.gate.weight, Tensor::zeros(&[3, 4])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let pr = gate_probs(&mut g, &store, x, &p.gate).unwrap();
        assert!(g.value(pr).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p1 = layer(&mut store, 3, 1, 1.25, 1);
        let pr = gate_probs(&mut g, &store, x, &p1.gate).unwrap();
        assert_eq!(g.value(pr).data(), &[1.0]);

        let p2 = layer(&mut store, 3, 2, 1.25, 2);
        store.set(p2.gate.weight, Tensor::zeros(&[3, 2])).unwrap();
        store.set(p2.gate.bias, Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        let pr = gate_probs(&mut g, &store, x, &p2.gate).unwrap();
        let v = g.value(pr).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn single_expert_is_plain_ffn() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 4, 1, 1.25, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[5, 4]));
        let out = p.forward(&mut g, &store, x, RouteOptions { training: true, ..Default::default() }).unwrap();
        let ffn = p.experts[0].forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(out.output), g.value(ffn));
        assert_eq!(g.value(out.aux_loss).item(), 1.0);
        assert_eq!(out.record.overflow, 0);
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 4, 3, 1.25, 4);
        for j in 1..3 {
            for (src, dst) in [
                (p.experts[0].lin1.weight, p.experts[j].lin1.weight),
                (p.experts[0].lin1.bias, p.experts[j].lin1.bias),
                (p.experts[0].lin2.weight, p.experts[j].lin2.weight),
                (p.experts[0].lin2.bias, p.experts[j].lin2.bias),
            ] {
                let t = store.get(src).clone();
                store.set(dst, t).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[6, 4]));
        let out = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap();
        let ffn = p.experts[0].forward(&mut g, &store, x).unwrap();
        for i in 0..6 {
            let gp = out.record.gate_prob[i];
            for (a, b) in g.value(out.output).row(i).iter().zip(g.value(ffn).row(i)) {
                assert!((a - gp * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_set_two_expert_routing() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 2, 2, 2.0, 5);
        // Token 1 = e₁, token 2 = e₂.  Logit gaps ln 9 and ln 4 give 0.9 and 0.8.
        store.set(p.gate.weight, Tensor::from_rows(&[vec![9f64.ln(), 0.0], vec![0.0, 4f64.ln()]]).unwrap()).unwrap();
        store.set(p.gate.bias, Tensor::zeros(&[2])).unwrap();
        let x0 = Tensor::eye(2);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let out = p.forward(&mut g, &store, x, RouteOptions { training: true, ..Default::default() }).unwrap();
        assert_eq!(out.record.expert, vec![0, 1]);
        assert!((out.record.gate_prob[0] - 0.9).abs() < 1e-15);
        assert!((out.record.gate_prob[1] - 0.8).abs() < 1e-15);

        // Oracle: evaluate both experts on both tokens by hand.
        let ffn = |j: usize, row: &[f64]| -> Vec<f64> {
            let e = &p.experts[j];
            let (w1, b1, w2, b2) = (store.get(e.lin1.weight), store.get(e.lin1.bias), store.get(e.lin2.weight), store.get(e.lin2.bias));
            let h: Vec<f64> = (0..4).map(|k| (row[0] * w1.at(0, k) + row[1] * w1.at(1, k) + b1.data()[k]).max(0.0)).collect();
            (0..2).map(|c| (0..4).map(|k| h[k] * w2.at(k, c)).sum::<f64>() + b2.data()[c]).collect()
        };
        let want1: Vec<f64> = ffn(0, x0.row(0)).iter().map(|v| 0.9 * v).collect();
        let want2: Vec<f64> = ffn(1, x0.row(1)).iter().map(|v| 0.8 * v).collect();
        for (a, b) in g.value(out.output).row(0).iter().zip(&want1) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g.value(out.output).row(1).iter().zip(&want2) {
            assert!((a - b).abs() < 1e-14);
        }
        // f = (0.5, 0.5), P = ((0.9 + 0.2)/2, (0.1 + 0.8)/2).
        let aux = 2.0 * (0.5 * 0.55 + 0.5 * 0.45);
        assert!((g.value(out.aux_loss).item() - aux).abs() < 1e-15);
    }

    #[test]
    fn capacity_overflow_is_recorded() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 3, 2, 1.0, 6);
        store.set(p.gate.weight, Tensor::zeros(&[3, 2])).unwrap();
        store.set(p.gate.bias, Tensor::vector(vec![1.0, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[6, 3]));
        let out = p.forward(&mut g, &store, x, RouteOptions { training: true, ..Default::default() }).unwrap();
        // capacity = floor(1.0·6/2) = 3; every token prefers expert 0.
        assert_eq!(out.record.counts, vec![3, 0]);
        assert_eq!(out.record.overflow, 3);
        assert_eq!(out.record.counts.iter().sum::<usize>() + out.record.overflow, 6);
        for i in 3..6 {
            assert!(g.value(out.output).row(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.record.expert_utilization(), vec![1.0, 0.0]);
        assert_eq!(out.record.overflow_fractions(), vec![0.5, 0.0]);

        // no capacity limit at inference
        let out = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap();
        assert_eq!(out.record.overflow, 0);
    }

    #[test]
    fn aux_loss_balance() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 2, 2, 2.0, 7);
        store.set(p.gate.weight, Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        store.set(p.gate.bias, Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        // symmetric tokens → f = P = (1/2, 1/2)
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let out = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap();
        assert_eq!(out.record.expert, vec![0, 1]);
        assert!((g.value(out.aux_loss).item() - 1.0).abs() < 1e-15);

        // Uniform router with a balanced dispatch is exactly 1.
        let mut uniform = store.clone();
        uniform.set(p.gate.weight, Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let out = p
            .forward(&mut g, &uniform, x, RouteOptions { fixed_routes: Some(&[0, 1]), ..Default::default() })
            .unwrap();
        assert_eq!(g.value(out.aux_loss).item(), 1.0);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![3.0, 0.0], vec![1.0, 0.5]]).unwrap());
        let out = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap();
        assert_eq!(out.record.expert, vec![0, 0, 0]);
        assert!(g.value(out.aux_loss).item() > 1.0);
    }

    #[test]
    fn dense_mode_with_forced_gate_is_that_expert() {
        let mut store = ParamStore::new();
        let mut p = layer(&mut store, 3, 3, 1.25, 8);
        p.dense_moe = true;
        store.set(p.gate.weight, Tensor::zeros(&[3, 3])).unwrap();
        store.set(p.gate.bias, Tensor::vector(vec![0.0, 1000.0, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[4, 3]));
        let out = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap();
        let ffn = p.experts[1].forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(out.output), g.value(ffn));
    }

    #[test]
    fn switch_gradients_with_fixed_routes() {
        let mut store = ParamStore::new();
        let p = layer(&mut store, 4, 3, 4.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let x0 = rand_tensor(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let routes = p.forward(&mut g, &store, x, RouteOptions::default()).unwrap().record.expert;
        let err = param_gradient_check(
            &store,
            |g, s| {
                let x = g.constant(x0.clone());
                let out = p.forward(g, s, x, RouteOptions { training: true, fixed_routes: Some(&routes), router_input: None })?;
                let sq = g.mul(out.output, out.output)?;
                let l = g.sum(sq);
                let aux = g.scale(out.aux_loss, 0.5);
                g.add(l, aux)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
