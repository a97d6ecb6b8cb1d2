//! Scaled dot-product attention, multi-head self-attention and the
//! position-wise feed-forward network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot_normal, LinearParams, ParamId, ParamStore};

/// Per-head query/key/value projections, each `[d_model×d_k]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: Vec<AttentionHeadParams>,
    /// Output projection `[num_heads·d_k → d_model]`.
    pub wo: LinearParams,
    pub d_model: usize,
    pub d_k: usize,
}

impl MultiHeadParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by num_heads {num_heads}"
            )));
        }
        let d_k = d_model / num_heads;
        let heads = (0..num_heads)
            .map(|h| AttentionHeadParams {
                wq: store.add(format!("{name}.head{h}.wq"), glorot_normal(d_model, d_k, rng)),
                wk: store.add(format!("{name}.head{h}.wk"), glorot_normal(d_model, d_k, rng)),
                wv: store.add(format!("{name}.head{h}.wv"), glorot_normal(d_model, d_k, rng)),
            })
            .collect();
        let wo = LinearParams::new(store, &format!("{name}.wo"), num_heads * d_k, d_model, rng);
        Ok(MultiHeadParams {
            heads,
            wo,
            d_model,
            d_k,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_params(&self) -> usize {
        3 * self.heads.len() * self.d_model * self.d_k + self.wo.num_params()
    }

    /// Self-attention over one (possibly padded) `[len×d_model]` sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pad_mask: &[bool]) -> Result<Var> {
        let len = g.shape(x)[0];
        if pad_mask.len() != len {
            return Err(Error::dim("multi_head_attention", g.shape(x), &[pad_mask.len()]));
        }
        self.forward_segments(g, store, x, &[(0, len)], Some(pad_mask))
    }

    /// Self-attention over packed sequences: rows `start..start+len` of `x`
    /// form one sequence per segment, and sequences never attend to one another.
    /// Segments must tile `x` contiguously from row 0.
    pub fn forward_packed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        self.forward_segments(g, store, x, segments, None)
    }

    fn forward_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = g.shape(x)[1];
        if d != self.d_model {
            return Err(Error::dim("multi_head_attention", g.shape(x), &[self.d_model]));
        }
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = g.param(store, head.wq);
            let wk = g.param(store, head.wk);
            let wv = g.param(store, head.wv);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let out = if segments.len() == 1 && segments[0].0 == 0 && segments[0].1 == g.shape(x)[0] {
                let all = vec![true; segments[0].1];
                scaled_dot_product_attention(g, q, k, v, mask.unwrap_or(&all))?
            } else {
                let mut parts = Vec::with_capacity(segments.len());
                for &(start, len) in segments {
                    let qs = g.slice(q, start, len, 0, self.d_k)?;
                    let ks = g.slice(k, start, len, 0, self.d_k)?;
                    let vs = g.slice(v, start, len, 0, self.d_k)?;
                    parts.push(scaled_dot_product_attention(g, qs, ks, vs, &vec![true; len])?);
                }
                g.concat_rows(&parts)?
            };
            head_outputs.push(out);
        }
        let concat = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)?
        };
        self.wo.forward(g, store, concat)
    }
}

/// `softmax(q·kᵀ/√d_k + mask)·v`, where keys with `pad_mask[j] == false`
/// get zero weight.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    pad_mask: &[bool],
) -> Result<Var> {
    let w = attention_weights(g, q, k, pad_mask)?;
    if g.shape(w)[1] != g.shape(v)[0] {
        return Err(Error::dim("attention", g.shape(w), g.shape(v)));
    }
    g.matmul(w, v)
}

/// The `[len_q×len_k]` attention weight matrix.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, pad_mask: &[bool]) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dim("attention", &sq, &sk));
    }
    if pad_mask.len() != sk[0] {
        return Err(Error::dim("attention mask", &sk, &[pad_mask.len()]));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (sq[1] as f64).sqrt());
    g.masked_softmax(scaled, pad_mask)
}

/// `ReLU(x·W₁ + b₁)·W₂ + b₂`, applied row-wise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        FfnParams {
            lin1: LinearParams::new(store, &format!("{name}.lin1"), d_model, d_ff, rng),
            lin2: LinearParams::new(store, &format!("{name}.lin2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        position_wise_ffn(g, store, x, self)
    }

    pub fn num_params(&self) -> usize {
        self.lin1.num_params() + self.lin2.num_params()
    }
}

pub fn position_wise_ffn(g: &mut Graph, store: &ParamStore, x: Var, p: &FfnParams) -> Result<Var> {
    let h = p.lin1.forward(g, store, x)?;
    let h = g.relu(h);
    p.lin2.forward(g, store, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check_many;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 4.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![7.0, -1.5, 2.0]]).unwrap());
        let out = scaled_dot_product_attention(&mut g, q, k, v, &[true]).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -1.5, 2.0]);
    }

    #[test]
    fn two_key_closed_form() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let k = g.constant(Tensor::eye(2));
        let v = g.constant(Tensor::eye(2));
        let out = scaled_dot_product_attention(&mut g, q, k, v, &[true, true]).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let expect = [a / (a + 1.0), 1.0 / (a + 1.0)];
        let got = g.value(out).data();
        assert!((got[0] - expect[0]).abs() < 1e-15 && (got[1] - expect[1]).abs() < 1e-15);
        assert!((got[0] - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn zero_query_averages_unmasked_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0], vec![4.0, 4.0, 4.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0], vec![100.0, 100.0]]).unwrap());
        let out = scaled_dot_product_attention(&mut g, q, k, v, &[true, true, false]).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(out).row(r), &[2.0, 15.0]);
        }
    }

    #[test]
    fn weights_rows_sum_to_one_and_masked_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let len = rng.random_range(2..7);
            let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let mut g = Graph::new();
            let q = g.constant(rand_tensor(&mut rng, &[len, 4]).map(|v| v * 20.0));
            let k = g.constant(rand_tensor(&mut rng, &[len, 4]));
            let w = attention_weights(&mut g, q, k, &mask).unwrap();
            let wt = g.value(w);
            for r in 0..len {
                let total: f64 = wt.row(r).iter().sum();
                assert!((total - 1.0).abs() <= 1e-10);
                for (c, &keep) in mask.iter().enumerate() {
                    if !keep {
                        assert!(wt.at(r, c) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn all_masked_is_contract_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 2]));
        let r = scaled_dot_product_attention(&mut g, q, q, q, &[false, false]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn divisibility_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadParams::new(&mut store, "mha", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_head_identity_reduces_to_sdpa() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MultiHeadParams::new(&mut store, "mha", 3, 1, &mut rng).unwrap();
        for id in [p.heads[0].wq, p.heads[0].wk, p.heads[0].wv, p.wo.weight] {
            store.set(id, Tensor::eye(3)).unwrap();
        }
        let x0 = rand_tensor(&mut rng, &[4, 3]);
        let mask = [true, true, true, false];
        let mut g = Graph::new();
        let x = g.constant(x0);
        let y = p.forward(&mut g, &store, x, &mask).unwrap();
        let z = scaled_dot_product_attention(&mut g, x, x, x, &mask).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(z)) < 1e-15);
        assert_eq!(g.shape(y), &[4, 3]);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MultiHeadParams::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
        let x0 = rand_tensor(&mut rng, &[5, 8]);
        let perm = [2, 0, 1, 4, 3];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x0.row(i).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x0);
        let b = g.constant(xp);
        let ya = p.forward(&mut g, &store, a, &[true; 5]).unwrap();
        let yb = p.forward(&mut g, &store, b, &[true; 5]).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (u, v) in g.value(yb).row(r).iter().zip(g.value(ya).row(src)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn packed_matches_per_sequence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MultiHeadParams::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let s1 = rand_tensor(&mut rng, &[3, 8]);
        let s2 = rand_tensor(&mut rng, &[2, 8]);
        let mut g = Graph::new();
        let a = g.constant(s1);
        let b = g.constant(s2);
        let packed = g.concat_rows(&[a, b]).unwrap();
        let yp = p.forward_packed(&mut g, &store, packed, &[(0, 3), (3, 2)]).unwrap();
        let ya = p.forward(&mut g, &store, a, &[true; 3]).unwrap();
        let yb = p.forward(&mut g, &store, b, &[true; 2]).unwrap();
        let both = g.concat_rows(&[ya, yb]).unwrap();
        assert!(g.value(yp).max_abs_diff(g.value(both)) < 1e-14);
    }

    #[test]
    fn sdpa_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 2])];
        let err = finite_difference_check_many(
            |g, v| {
                let out = scaled_dot_product_attention(g, v[0], v[1], v[2], &[true, true, false, true])?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ffn_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = FfnParams::new(&mut store, "ffn", 3, 3, &mut rng);
        store.set(p.lin1.weight, Tensor::eye(3)).unwrap();
        store.set(p.lin2.bias, Tensor::vector(vec![0.5, -0.5, 2.0])).unwrap();
        store.set(p.lin2.weight, Tensor::zeros(&[3, 3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 9.0]]).unwrap());
        let y = p.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).row(0), &[0.5, -0.5, 2.0]);
        assert_eq!(g.value(y).row(1), &[0.5, -0.5, 2.0]);

        // Dead-ReLU path: negative row with W₁ = I, b₁ = 0 gives exactly b₂.
        store.set(p.lin2.weight, Tensor::eye(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![-1.0, -2.0, -0.1]]).unwrap());
        let y = p.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).row(0), &[0.5, -0.5, 2.0]);
    }

    #[test]
    fn ffn_commutes_with_row_permutation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = FfnParams::new(&mut store, "ffn", 4, 16, &mut rng);
        let x0 = rand_tensor(&mut rng, &[3, 4]);
        let rows = vec![x0.row(2).to_vec(), x0.row(0).to_vec(), x0.row(1).to_vec(), x0.row(0).to_vec()];
        let mut g = Graph::new();
        let a = g.constant(x0);
        let b = g.constant(Tensor::from_rows(&rows).unwrap());
        let ya = p.forward(&mut g, &store, a).unwrap();
        let yb = p.forward(&mut g, &store, b).unwrap();
        assert_eq!(g.value(yb).row(0), g.value(ya).row(2));
        assert_eq!(g.value(yb).row(1), g.value(ya).row(0));
        assert_eq!(g.value(yb).row(2), g.value(ya).row(1));
        assert_eq!(g.value(yb).row(3), g.value(yb).row(1));
    }
}
