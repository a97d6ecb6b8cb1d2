//! Parameter storage and the primitive layers: affine projection, layer
//! normalisation, embedding lookup, dropout and Glorot-normal init.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Flat, ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::dim("ParamStore::set", self.tensors[id.0].shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Samples a `[fan_in×fan_out]` matrix from `N(0, 2/(fan_in+fan_out))`.
pub fn glorot_normal_init(fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    glorot_normal(fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn glorot_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "fan_in and fan_out must be >= 1");
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

/// Affine map `x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_normal(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        LinearParams {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::Config(format!("layer-norm epsilon {epsilon} must be > 0")));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Ok(LayerNormParams {
            gamma,
            beta,
            dim,
            epsilon,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        layer_norm(g, store, x, self)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// `γ·(x−μ)/sqrt(σ²+ε) + β` over the last axis.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, p: &LayerNormParams) -> Result<Var> {
    let d = *g.shape(x).last().unwrap();
    if d != p.dim {
        return Err(Error::dim("layer_norm", g.shape(x), &[p.dim]));
    }
    let gamma = g.param(store, p.gamma);
    let beta = g.param(store, p.beta);
    g.layer_norm(x, gamma, beta, p.epsilon)
}

/// Token embedding table plus learned absolute positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
    pub table: ParamId,
    pub positional: ParamId,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must hold at least PAD and UNK".into()));
        }
        let table = store.add("embed.tokens", glorot_normal(vocab_size, dim, rng));
        let positional = store.add("embed.positions", glorot_normal(max_len, dim, rng));
        Ok(EmbeddingTable {
            vocab_size,
            dim,
            max_len,
            table,
            positional,
        })
    }

    /// Token rows only, `[ids.len()×dim]`.
    pub fn token_rows(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: self.vocab_size,
            });
        }
        let table = g.param(store, self.table);
        g.gather_rows(table, ids)
    }

    pub fn position_rows(&self, g: &mut Graph, store: &ParamStore, positions: &[usize]) -> Result<Var> {
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::Contract(format!(
                "position {bad} exceeds max_len {}",
                self.max_len
            )));
        }
        let table = g.param(store, self.positional);
        g.gather_rows(table, positions)
    }

    /// Token embedding plus positional embedding for one sequence.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = self.token_rows(g, store, tokens)?;
        let pos = self.position_rows(g, store, &positions)?;
        g.add(tok, pos)
    }

    pub fn num_params(&self) -> usize {
        (self.vocab_size + self.max_len) * self.dim
    }
}

/// Inverted dropout; identity at inference.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    g.dropout(x, rate, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check_many;

    fn ln_params(store: &mut ParamStore, d: usize, eps: f64) -> LayerNormParams {
        LayerNormParams {
            gamma: store.add("g", Tensor::full(&[d], 1.0)),
            beta: store.add("b", Tensor::zeros(&[d])),
            dim: d,
            epsilon: eps,
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::new();
        let p = ln_params(&mut store, 3, 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = layer_norm(&mut g, &store, x, &p).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut store = ParamStore::new();
        let p = ln_params(&mut store, 3, 1e-5);
        store.set(p.beta, Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![7.0, 7.0, 7.0]]).unwrap());
        let y = layer_norm(&mut g, &store, x, &p).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);

        store.set(p.gamma, Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -4.0, 9.0]]).unwrap());
        let y = layer_norm(&mut g, &store, x, &p).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut store = ParamStore::new();
        let p = ln_params(&mut store, 4, 1e-5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(layer_norm(&mut g, &store, x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_gradients() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7], vec![1.5, 0.1, -0.4, -2.2]]).unwrap();
        let gamma = Tensor::vector(vec![1.1, 0.9, -0.5, 2.0]);
        let beta = Tensor::vector(vec![0.1, 0.0, 0.3, -0.2]);
        let w = Tensor::new(vec![2, 4], vec![0.5, -1.0, 0.25, 2.0, 1.5, 0.3, -0.7, 0.9]).unwrap();
        let err = finite_difference_check_many(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let wc = g.constant(w.clone());
                let y = g.mul(y, wc)?;
                Ok(g.sum(y))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn glorot_variance_and_determinism() {
        let t = glorot_normal_init(200, 200, 7);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.005).abs() < 0.0005, "{var}");
        assert_eq!(glorot_normal_init(200, 200, 7), t);

        let one = (0..40_000).map(|s| glorot_normal_init(1, 1, s).item()).collect::<Vec<_>>();
        let v = one.iter().map(|x| x * x).sum::<f64>() / one.len() as f64;
        assert!((v - 1.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn glorot_variance_for_small_fans() {
        for (fi, fo) in [(32, 32), (64, 16), (8, 120)] {
            let target = 2.0 / (fi + fo) as f64;
            let mut draws = Vec::new();
            for s in 0..(40_000 / (fi * fo) + 1) as u64 {
                draws.extend_from_slice(glorot_normal_init(fi, fo, s).data());
            }
            let v = draws.iter().map(|x| x * x).sum::<f64>() / draws.len() as f64;
            assert!((v - target).abs() < 0.1 * target, "{fi}x{fo}: {v} vs {target}");
        }
    }

    fn table(store: &mut ParamStore) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        EmbeddingTable::new(store, 6, 4, 5, &mut rng).unwrap()
    }

    #[test]
    fn embed_all_pad_and_single_token() {
        let mut store = ParamStore::new();
        let emb = table(&mut store);
        let mut g = Graph::new();
        let y = emb.embed(&mut g, &store, &[0, 0, 0]).unwrap();
        let tab = store.get(emb.table);
        let pos = store.get(emb.positional);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(g.value(y).at(r, c), tab.at(0, c) + pos.at(r, c));
            }
        }

        store.set(emb.positional, Tensor::zeros(&[5, 4])).unwrap();
        let mut g = Graph::new();
        let y = emb.embed(&mut g, &store, &[3]).unwrap();
        assert_eq!(g.value(y).data(), store.get(emb.table).row(3));
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let mut store = ParamStore::new();
        let emb = table(&mut store);
        let mut g = Graph::new();
        assert!(matches!(
            emb.embed(&mut g, &store, &[1, 6]),
            Err(Error::Vocabulary { id: 6, vocab_size: 6 })
        ));
    }

    #[test]
    fn embedding_gradient_touches_only_looked_up_rows() {
        let mut store = ParamStore::new();
        let emb = table(&mut store);
        let mut g = Graph::new();
        let y = emb.embed(&mut g, &store, &[2, 4, 2]).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let tv = g.param(&store, emb.table);
        let gt = grads.get(tv).unwrap();
        for r in [0, 1, 3, 5] {
            assert!(gt.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(gt.row(2).iter().any(|&v| v != 0.0));

        // Finite difference on an untouched row is exactly zero as well.
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let y = emb.embed(&mut g, s, &[2, 4, 2]).unwrap();
            let sq = g.mul(y, y).unwrap();
            let l = g.sum(sq);
            g.value(l).item()
        };
        let mut up = store.clone();
        up.get_mut(emb.table).data_mut()[5 * 4 + 1] += 1e-5;
        assert_eq!(f(&up), f(&store));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[10_000], 1.0));
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.35, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&mut g, x, 1.0, true, &mut rng), Err(Error::Config(_))));

        let y = dropout(&mut g, x, 0.5, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
        assert!((0.47..=0.53).contains(&kept), "{kept}");
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_backward_uses_stored_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[64], 3.0));
        let y = dropout(&mut g, x, 0.35, true, &mut rng).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap().data();
        for (gv, yv) in gx.iter().zip(g.value(y).data()) {
            assert_eq!(*gv * 3.0, *yv);
        }
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = LinearParams::new(&mut store, "l", 4, 3, &mut rng);
        assert_eq!(lin.num_params(), 15);
        assert_eq!(store.num_scalars(), 15);
        let ln = LayerNormParams::new(&mut store, "n", 8, 1e-5).unwrap();
        assert_eq!(ln.num_params(), 16);
    }
}
