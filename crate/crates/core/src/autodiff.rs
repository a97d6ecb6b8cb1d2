//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order, so the node
//! list is already topologically sorted. [`Graph::backward`] walks it once
//! in reverse, accumulating gradients additively into each input.
//!
//! Nodes whose inputs are all constants are recorded as constants
//! themselves and never receive a gradient buffer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, softmax_strided, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
    },
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    GatherElems {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        denom: f64,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Option<Var>>,
    no_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` never received one.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that binds parameters as constants, so nothing is retained
    /// for a backward pass.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf, once per graph.
    /// A graph must only ever be used with a single store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if i >= self.bindings.len() {
            self.bindings.resize(i + 1, None);
        }
        if let Some(v) = self.bindings[i] {
            return v;
        }
        let t = store.get(id).clone();
        let v = if self.no_grad { self.constant(t) } else { self.input(t) };
        self.bindings[i] = Some(v);
        v
    }

    /// Every parameter bound on this graph with its leaf handle.
    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Bias add: `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2("add_row", self.value(x))?;
        if self.value(b).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, b), rg))
    }

    /// Row scaling: `x[m×n] * s[m×1]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2("mul_col", self.value(x))?;
        if self.value(s).len() != m {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(s)));
        }
        let scale = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= scale[r];
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = crate::tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax over the last axis of a 2-D tensor where columns with
    /// `keep[c] == false` receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = dims2("masked_softmax", self.value(x))?;
        if keep.len() != n {
            return Err(Error::dim("masked_softmax", self.shape(x), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Contract("every key position is masked".into()));
        }
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::Numeric("attention scores contain non-finite values".into()));
        }
        let mut out = src.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &k) in row.iter_mut().zip(keep) {
                *v = if k { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MaskedSoftmax(x), rg))
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    /// Uses the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", xt.shape(), self.shape(gamma)));
        }
        let rows = xt.len() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        if !rstd.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "layer_norm over a zero-variance row with eps = 0".into(),
            ));
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. With `training == false` or `rate == 0` the input
    /// handle is returned untouched.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Selects rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.value(src))?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Vocabulary { id: i, vocab_size: m });
            }
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `src` at row `idx[i]` of a zero `[rows×n]` output.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = dims2("scatter_rows", self.value(src))?;
        if idx.len() != m || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("scatter_rows", self.shape(src), &[idx.len(), rows]));
        }
        let data = self.value(src).data();
        let mut out = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&data[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// The `[rows×cols]` block starting at `(r0, c0)`.
    pub fn slice(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (m, n) = dims2("slice", self.value(x))?;
        if rows == 0 || cols == 0 || r0 + rows > m || c0 + cols > n {
            return Err(Error::dim("slice", &[m, n], &[r0 + rows, c0 + cols]));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&data[r * n + c0..r * n + c0 + cols]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Slice { x, r0, c0 }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = dims2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, n) = dims2("concat_rows", self.value(first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean of each `(start, len)` row segment, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2("segment_mean", self.value(x))?;
        if segments.is_empty() || segments.iter().any(|&(s, l)| l == 0 || s + l > m) {
            return Err(Error::Contract("segment out of range or empty".into()));
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; segments.len() * n];
        for (b, &(s, l)) in segments.iter().enumerate() {
            let orow = &mut out[b * n..(b + 1) * n];
            for r in s..s + l {
                for (o, &v) in orow.iter_mut().zip(&data[r * n..(r + 1) * n]) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= l as f64;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), n], out)?,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Picks individual `(row, col)` entries into an `[n×1]` column.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2("gather_elems", self.value(x))?;
        if idx.is_empty() || idx.iter().any(|&(r, c)| r >= m || c >= n) {
            return Err(Error::Contract("gather_elems index out of range".into()));
        }
        let xt = self.value(x);
        let out = idx.iter().map(|&(r, c)| xt.at(r, c)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), 1], out)?,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Weighted softmax cross-entropy of `[B×C]` logits, normalised by the
    /// batch size: `Σ_b w_b · −log p_b[y_b] / B`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (b, c) = dims2("cross_entropy", self.value(logits))?;
        if labels.len() != b || weights.len() != b {
            return Err(Error::dim("cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} >= {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        if !probs.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut loss = 0.0;
        for r in 0..b {
            softmax_strided(&mut probs, r * c, c, 1);
            let row = &self.value(logits).data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[labels[r]]);
        }
        let denom = b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
                denom,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `root`, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = out.dims2().1;
                let bd = self.value(*b).data();
                acc(*a, &mut |s| gemm_nt(g, bd, s, m, n, k));
                let ad = self.value(*a).data();
                acc(*b, &mut |s| gemm_tn(ad, g, s, k, m, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = out.dims2().1;
                let bd = self.value(*b).data();
                acc(*a, &mut |s| gemm_nn(g, bd, s, m, n, k));
                let ad = self.value(*a).data();
                acc(*b, &mut |s| gemm_tn(g, ad, s, n, m, k));
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bd[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * ad[j];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let (m, n) = out.dims2();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for r in 0..m {
                        add_into(s, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MulCol(x, sc) => {
                let (m, n) = out.dims2();
                let (xd, sd) = (self.value(*x).data(), self.value(*sc).data());
                acc(*x, &mut |s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[r * n + c] * sd[r];
                        }
                    }
                });
                acc(*sc, &mut |s| {
                    for r in 0..m {
                        s[r] += (0..n).map(|c| g[r * n + c] * xd[r * n + c]).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += v * c)),
            Op::Relu(x) => {
                let y = out.data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if y[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 =
                                (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                s[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = out.data();
                let (m, n) = out.dims2();
                acc(*x, &mut |s| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for p in row {
                            s[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let rows = out.len() / d;
                let gm = self.value(*gamma).data();
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for (j, p) in span.clone().enumerate() {
                            let dh = g[p] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[p];
                        }
                        let scale = rstd[r] / d as f64;
                        for (j, p) in span.enumerate() {
                            let dh = g[p] * gm[j];
                            s[p] += scale * (d as f64 * dh - sum_dh - xhat[p] * sum_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for r in 0..rows {
                        add_into(s, &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * mask[j];
                }
            }),
            Op::GatherRows { src, idx } => {
                let n = out.dims2().1;
                acc(*src, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { src, idx } => {
                let n = out.dims2().1;
                acc(*src, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Slice { x, r0, c0 } => {
                let (rows, cols) = out.dims2();
                let n = self.value(*x).dims2().1;
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let dst = (r0 + r) * n + c0;
                        add_into(&mut s[dst..dst + cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    acc(p, &mut |s| {
                        for r in 0..m {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SegmentMean { x, segments } => {
                let n = out.dims2().1;
                acc(*x, &mut |s| {
                    for (b, &(st, l)) in segments.iter().enumerate() {
                        let inv = 1.0 / l as f64;
                        for r in st..st + l {
                            for c in 0..n {
                                s[r * n + c] += g[b * n + c] * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherElems { x, idx } => {
                let n = self.value(*x).dims2().1;
                acc(*x, &mut |s| {
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        s[r * n + c] += g[k];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
                denom,
            } => {
                let c = self.value(*logits).dims2().1;
                acc(*logits, &mut |s| {
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        let k = g[0] * w / denom;
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += k * (probs[r * c + j] - target);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
