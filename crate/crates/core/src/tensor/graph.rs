use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{shape_err, Result, TerraError};

/// Score written into masked attention positions. A large finite negative
/// number keeps `exp` at exactly zero without producing `NaN` in backward.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedFill { x: Var, mask: Vec<bool> },
    RowSum(Var),
    Sum(Var),
    WeightedSqError { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    WeightedCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so the node list is already topologically sorted.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
            macs: 0,
        }
    }

    /// Training-mode graph with its own dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            macs: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulates spent in forward `matmul`/`bmm` so far.
    pub fn forward_macs(&self) -> u64 {
        self.macs
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TerraError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push("param", t.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(name, value, op, ng)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push(name, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.data(x).len() {
            return shape_err("mul_const", format!("{} vs {}", self.data(x).len(), c.len()));
        }
        let data = self.data(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push("mul_const", value, Op::MulConst(x, c), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    /// `x[..., d] + b[d]`, broadcasting the bias over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.data(b).len() != d {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x) || self.needs(b);
        self.push("add_bias", value, Op::AddBias(x, b), ng)
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), k, 1, self.data(b), n, 1, &mut out, 0.0);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// Batched product: `[n,m,k]·[n,k,p]`, or `[n,m,k]·[n,p,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (rsb, csb) = if trans_b { (1, k) } else { (p, 1) };
        let mut out = vec![0.0; bs * m * p];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(
                m,
                k,
                p,
                &da[i * m * k..(i + 1) * m * k],
                k,
                1,
                &db[i * k * p..(i + 1) * k * p],
                rsb,
                csb,
                &mut out[i * m * p..(i + 1) * m * p],
                0.0,
            );
        }
        self.macs += (bs * m * k * p) as u64;
        let value = Tensor::new(vec![bs, m, p], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("bmm", value, Op::Bmm { a, b, trans_b }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err("transpose", format!("{s:?} is not a matrix"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(x);
        self.push("transpose", value, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        if len == 0 || start + len > d {
            return shape_err("slice_cols", format!("{start}..{} of {d}", start + len));
        }
        let data = self.data(x).chunks(d).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        self.push("slice_cols", value, Op::SliceCols { x, start }, ng)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows = self.value(first).rows();
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return shape_err("concat_cols", format!("{:?} vs {s:?}", self.shape(first)));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push("concat_cols", value, Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Row lookup of a 2-D table: embedding lookup or time-slice selection.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return shape_err("gather_rows", format!("indices out of range for {s:?}"));
        }
        let d = s[1];
        let src = self.data(x);
        let data = idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let ng = self.needs(x);
        self.push("gather_rows", value, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TerraError::Contract(format!("dropout probability {p} not in [0,1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push("dropout", value, Op::Dropout { x, mask }, ng)
    }

    /// Softmax over the last axis, shifted by the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push("softmax", value, Op::Softmax(x), ng)
    }

    /// Normalises the last axis to zero mean and unit (biased) variance, then
    /// applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.data(gamma).len() != d || self.data(beta).len() != d {
            return shape_err("layer_norm", format!("x {:?}, gamma/beta must have {d}", self.shape(x)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (gm, bt) = (self.data(gamma), self.data(beta));
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            ng,
        )
    }

    /// Overwrites positions where `mask` is true with [`MASK_FILL`]. The mask
    /// covers the trailing `mask.len()` elements and repeats over the rest.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let n = self.data(x).len();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return shape_err("masked_fill", format!("mask of {} over {n} values", mask.len()));
        }
        let data = self
            .data(x)
            .iter()
            .zip(mask.iter().cycle())
            .map(|(&v, &m)| if m { MASK_FILL } else { v })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push("masked_fill", value, Op::MaskedFill { x, mask }, ng)
    }

    /// Sum over the last axis, giving shape `[rows, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let data: Vec<f64> = self.data(x).chunks(d).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        let value = Tensor::new(vec![rows, 1], data)?;
        let ng = self.needs(x);
        self.push("row_sum", value, Op::RowSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ_i w_i (pred_i − target_i)²`; a mean-squared error when the
    /// weights are `1/n`.
    pub fn weighted_sq_error(&mut self, pred: Var, target: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let n = self.data(pred).len();
        if target.len() != n || weights.len() != n {
            return shape_err("weighted_sq_error", format!("pred {n}, target {}, weights {}", target.len(), weights.len()));
        }
        let l = self
            .data(pred)
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let ng = self.needs(pred);
        self.push("weighted_sq_error", Tensor::scalar(l), Op::WeightedSqError { pred, target, weights }, ng)
    }

    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let n = target.len().max(1);
        self.weighted_sq_error(pred, target, vec![1.0 / n as f64; n])
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` with a log-sum-exp
    /// evaluation of the normaliser.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows || weights.len() != rows || targets.iter().any(|&t| t >= k) {
            return shape_err("weighted_cross_entropy", format!("{rows} rows of {k} classes"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut l = 0.0;
        for (r, row) in self.data(logits).chunks(k).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            l += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        let ng = self.needs(logits);
        self.push(
            "weighted_cross_entropy",
            Tensor::scalar(l),
            Op::WeightedCrossEntropy { logits, targets, weights, probs },
            ng,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let n = targets.len().max(1);
        self.weighted_cross_entropy(logits, targets, vec![1.0 / n as f64; n])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TerraError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let n = self.data(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let y = out.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(db).for_each(|((o, gi), bi)| *o += gi * bi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(da).for_each(|((o, gi), ai)| *o += gi * ai));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(c).for_each(|((o, gi), ci)| *o += gi * ci));
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| axpy(gx, g, *s)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| axpy(gx, g, 1.0));
                acc(*b, &mut |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| gemm(m, n, k, g, n, 1, db, 1, n, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, da, 1, k, g, n, 1, gb, 1.0));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                let (rsb, csb) = if *trans_b { (1, k) } else { (p, 1) };
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        gemm_strided(
                            m, p, k,
                            &g[i * m * p..], p, 1,
                            &db[i * k * p..], csb, rsb,
                            &mut ga[i * m * k..], k, 1,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        gemm_strided(
                            k, m, p,
                            &da[i * m * k..], 1, k,
                            &g[i * m * p..], p, 1,
                            &mut gb[i * k * p..], rsb, csb,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| axpy(gx, g, 1.0)),
            Op::SliceCols { x, start } => {
                let d = self.value(*x).last_dim();
                let w = out.last_dim();
                acc(*x, &mut |gx| {
                    for (row, grow) in gx.chunks_mut(d).zip(g.chunks(w)) {
                        axpy(&mut row[*start..start + w], grow, 1.0);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = out.last_dim();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    acc(x, &mut |gx| {
                        for (row, grow) in gx.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(row, &grow[off..off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Sigmoid(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Relu(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gi, yi| if yi > 0.0 { gi } else { 0.0 })),
            Op::Exp(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gi, yi| gi * yi)),
            Op::Log(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| zip3(gx, g, dx, |gi, xi| gi / xi));
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| zip3(gx, g, mask, |gi, mi| gi * mi)),
            Op::Softmax(x) => {
                let d = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((o, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = out.last_dim();
                let gm = self.data(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        zip3(gg, gr, hr, |a, b| a * b);
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((o, gr), hr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            o[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((o, gi), &m) in gx.iter_mut().zip(g).zip(mask.iter().cycle()) {
                        if !m {
                            *o += gi;
                        }
                    }
                });
            }
            Op::RowSum(x) => {
                let d = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (row, gi) in gx.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::WeightedSqError { pred, target, weights } => {
                let dp = self.data(*pred);
                acc(*pred, &mut |gp| {
                    for i in 0..gp.len() {
                        gp[i] += 2.0 * weights[i] * (dp[i] - target[i]) * g[0];
                    }
                });
            }
            Op::WeightedCrossEntropy { logits, targets, weights, probs } => {
                let k = self.value(*logits).last_dim();
                acc(*logits, &mut |gl| {
                    for (r, row) in gl.chunks_mut(k).enumerate() {
                        for j in 0..k {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            row[j] += weights[r] * (probs[r * k + j] - onehot) * g[0];
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of one backward sweep, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += f(x, y);
    }
}

/// `C = A·B + beta·C` where `C` is a row-major `[m×n]` buffer and `A`, `B`
/// are given by explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Accumulating `C += A·B` with arbitrary strides on all three operands.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            1.0,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{self, op_catalog};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = g.constant(t(&[2, 2], &[2., 3., 4., 5.])).unwrap();
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[2., 3., 4., 5.]);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let v = g.constant(t(&[2, 1], &[5., 6.])).unwrap();
        let c = g.matmul(a, v).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
        assert!(g.matmul(v, v).is_err());
    }

    #[test]
    fn matmul_sum_grad_is_broadcast_column_sums() {
        let mut g = Graph::new();
        let a = g.param(&t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
        let bt = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let b = g.constant(bt).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let ga = g.backward(s).unwrap().get(a);
        // d sum(AB) / dA_ij = Σ_n B_jn
        assert_eq!(ga.data(), &[3., 7., 11., 3., 7., 11.]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[0., 0., 0., 3f64.ln(), 1000., 1000.])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        assert!((d[2] - 0.25).abs() < 1e-15 && (d[3] - 0.75).abs() < 1e-15);
        assert_eq!(&d[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[4., 4., 1., 3.])).unwrap();
        let one = g.constant(t(&[2], &[1., 1.])).unwrap();
        let zero = g.constant(t(&[2], &[0., 0.])).unwrap();
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[0..2], &[0., 0.]);
        assert!((d[2] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);

        let beta = g.constant(t(&[2], &[0.3, -0.7])).unwrap();
        let gamma = g.constant(t(&[2], &[0., 0.])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let th = g.param(&Tensor::scalar(0.37)).unwrap();
        let s = g.sum(th).unwrap();
        assert_eq!(g.backward(s).unwrap().get(th).data(), &[1.0]);

        let mut g = Graph::new();
        let th = g.param(&t(&[2], &[1., -2.])).unwrap();
        let sq = g.mul(th, th).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(th).data(), &[2., -4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let th = g.param(&t(&[2], &[1., -2.])).unwrap();
        assert!(matches!(g.backward(th), Err(TerraError::Contract(_))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(θ) = θ·θ + θ, f'(θ) = 2θ + 1
        let mut g = Graph::new();
        let th = g.param(&Tensor::scalar(1.5)).unwrap();
        let sq = g.mul(th, th).unwrap();
        let f = g.add(sq, th).unwrap();
        let s = g.sum(f).unwrap();
        assert_eq!(g.backward(s).unwrap().get(th).data(), &[4.0]);
    }

    #[test]
    fn unreachable_param_has_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(&t(&[2], &[1., 2.])).unwrap();
        let b = g.param(&t(&[3], &[1., 2., 3.])).unwrap();
        let s = g.sum(a).unwrap();
        assert_eq!(g.backward(s).unwrap().get(b).data(), &[0., 0., 0.]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., 1.])).unwrap();
        assert!(matches!(g.log(x), Err(TerraError::NonFinite { op: "log" })));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1., 2., 3.])).unwrap();
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);

        let mut g = Graph::training(3);
        let x = g.constant(Tensor::full(&[1000], 1.0)).unwrap();
        let y = g.dropout(x, 0.25).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        assert!((650..850).contains(&kept));
    }

    #[test]
    fn masked_positions_get_exactly_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.3, 50.0, -1.0, 2.0])).unwrap();
        let m = g.masked_fill(x, vec![false, true, false, false]).unwrap();
        let p = g.softmax_rows(m).unwrap();
        assert_eq!(g.value(p).data()[..2], [1.0, 0.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for case in op_catalog() {
            for seed in 0..3 {
                let r = case.run(seed).unwrap();
                assert!(r.max_rel_err < 1e-4, "{}: {r:?}", case.name);
            }
        }
    }

    #[test]
    fn composed_attention_gradient() {
        let q = t(&[1, 3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let k = t(&[1, 3, 2], &[0.7, -0.1, 0.2, 0.3, -0.4, 0.9]);
        let r = gradcheck::check(&[q, k], 1e-5, |g, v| {
            let s = g.bmm(v[0], v[1], true)?;
            let s = g.masked_fill(s, vec![false, true, true, false, false, true, false, false, false])?;
            let p = g.softmax_rows(s)?;
            let o = g.bmm(p, v[1], false)?;
            let o = g.tanh(o)?;
            g.sum(o)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
