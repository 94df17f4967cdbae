//! Causal transformer over paired treatment/covariate sequences.
//!
//! Sequence position `s` (0-based, `s < T`) carries the covariates `X_s` and
//! the treatment token for `Z_s`, where position 0 holds a learned
//! start-of-sequence token instead of a treatment. The hidden state at
//! position `t-1` therefore summarises exactly `(Z̄_{t-1}, X̄_{t-1})` and
//! feeds the time-`t` heads:
//!
//! - propensity `ê_t^z` (softmax over all `K` arms),
//! - conditional mean `μ̂_t`,
//! - blip components `ĝ_t^z` for the `K-1` active arms.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TerraError};
use crate::snmm::{Panel, Trajectory};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub n_covariates: usize,
    pub n_treatments: usize,
    pub horizon: usize,
}

impl ArchConfig {
    /// Default widths for the given data dimensions.
    pub fn for_dims(n_covariates: usize, n_treatments: usize, horizon: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            dropout_p: 0.1,
            n_covariates,
            n_treatments,
            horizon,
        }
    }

    pub fn for_panel(panel: &Panel) -> Self {
        Self::for_dims(panel.n_covariates(), panel.n_treatments(), panel.horizon())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TerraError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} not in [0,1)", self.dropout_p));
        }
        if self.n_treatments < 2 || self.n_covariates == 0 || self.horizon == 0 {
            return bad("need K >= 2 arms, p >= 1 covariates and T >= 1".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count (all linear maps carry a bias).
    pub fn param_count(&self) -> usize {
        let (d, f, p, k) = (self.d_model, self.d_ff, self.n_covariates, self.n_treatments);
        let lin = |i: usize, o: usize| i * o + o;
        let encoders = lin(k + 1, d) + lin(p, d);
        let attention = 4 * lin(d, d);
        let ff = lin(d, f) + lin(f, d);
        let block = 4 * attention + 2 * ff + 6 * 2 * d;
        let heads = 3 * lin(2 * d, d) + lin(d, k) + lin(d, 1) + lin(d, k - 1);
        encoders + self.n_layers * block + heads
    }
}

/// Sinusoidal positional encoding at 1-based time `t` and 0-based channel
/// `k`.
pub fn pos_encode(t: usize, k: usize, d_model: usize) -> f64 {
    let angle = t as f64 * 10000f64.powf(-(k as f64) / d_model as f64);
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Affine input/output normalisation fitted on the training panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Scaler {
    pub fn identity(p: usize) -> Self {
        Self {
            x_mean: vec![0.0; p],
            x_scale: vec![1.0; p],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn fit(panel: &Panel) -> Self {
        let p = panel.n_covariates();
        let xs: Vec<&[f64]> = panel.trajectories().iter().flat_map(|t| t.covariates.iter().map(Vec::as_slice)).collect();
        let n = xs.len() as f64;
        let mut x_mean = vec![0.0; p];
        for x in &xs {
            for j in 0..p {
                x_mean[j] += x[j] / n;
            }
        }
        let mut x_var = vec![0.0; p];
        for x in &xs {
            for j in 0..p {
                x_var[j] += (x[j] - x_mean[j]).powi(2) / n;
            }
        }
        let x_scale = x_var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let ys: Vec<f64> = panel.trajectories().iter().map(|t| t.outcome).collect();
        let m = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / m;
        let y_var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / m;
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale: if y_var > 1e-12 { y_var.sqrt() } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    self_treat: Attention,
    self_feat: Attention,
    cross_treat: Attention,
    cross_feat: Attention,
    ff_treat: FeedForward,
    ff_feat: FeedForward,
    /// Post-sublayer norms: self (treat, feat), cross (treat, feat), ff (treat, feat).
    norms: [Norm; 6],
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_z: Linear,
    embed_x: Linear,
    blocks: Vec<Block>,
    propensity: Head,
    cond_mean: Head,
    blip: Head,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive dims")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let b = self.uniform(&[fan_out], bound);
        Linear {
            w: self.add(format!("{name}.weight"), w),
            b: self.add(format!("{name}.bias"), b),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: self.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
        }
    }

    fn head(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Head {
        Head {
            hidden: self.linear(&format!("{name}.hidden"), d_in, d_hidden),
            out: self.linear(&format!("{name}.out"), d_hidden, d_out),
        }
    }
}

fn build_layout(arch: &ArchConfig, b: &mut Builder) -> Layout {
    let (d, k) = (arch.d_model, arch.n_treatments);
    let embed_z = b.linear("embed_z", k + 1, d);
    let embed_x = b.linear("embed_x", arch.n_covariates, d);
    let blocks = (0..arch.n_layers)
        .map(|l| {
            let p = format!("block{l}");
            Block {
                self_treat: b.attention(&format!("{p}.self_treat"), d),
                self_feat: b.attention(&format!("{p}.self_feat"), d),
                cross_treat: b.attention(&format!("{p}.cross_treat"), d),
                cross_feat: b.attention(&format!("{p}.cross_feat"), d),
                ff_treat: b.ff(&format!("{p}.ff_treat"), d, arch.d_ff),
                ff_feat: b.ff(&format!("{p}.ff_feat"), d, arch.d_ff),
                norms: [
                    b.norm(&format!("{p}.norm_self_treat"), d),
                    b.norm(&format!("{p}.norm_self_feat"), d),
                    b.norm(&format!("{p}.norm_cross_treat"), d),
                    b.norm(&format!("{p}.norm_cross_feat"), d),
                    b.norm(&format!("{p}.norm_ff_treat"), d),
                    b.norm(&format!("{p}.norm_ff_feat"), d),
                ],
            }
        })
        .collect();
    Layout {
        embed_z,
        embed_x,
        blocks,
        propensity: b.head("head_propensity", 2 * d, d, k),
        cond_mean: b.head("head_cond_mean", 2 * d, d, 1),
        blip: b.head("head_blip", 2 * d, d, k - 1),
    }
}

/// Graph handles for one forward pass. Rows are `unit * T + (t - 1)`.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    /// `[B·T × K]` pre-softmax propensity scores.
    pub propensity_logits: Var,
    /// `[B·T × K]` simplex rows.
    pub propensity: Var,
    /// `[B·T × 1]` in outcome units.
    pub cond_mean: Var,
    /// `[B·T × (K-1)]` in outcome units; the control arm is never emitted.
    pub blip: Var,
    pub n_units: usize,
    pub horizon: usize,
}

/// Plain-value head outputs for a set of units.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n_units: usize,
    pub horizon: usize,
    pub n_treatments: usize,
    propensity: Vec<f64>,
    cond_mean: Vec<f64>,
    blip: Vec<f64>,
}

impl Predictions {
    pub fn from_graph(g: &Graph, out: &ModelOutputs, n_treatments: usize) -> Self {
        Self {
            n_units: out.n_units,
            horizon: out.horizon,
            n_treatments,
            propensity: g.value(out.propensity).data().to_vec(),
            cond_mean: g.value(out.cond_mean).data().to_vec(),
            blip: g.value(out.blip).data().to_vec(),
        }
    }

    fn row(&self, unit: usize, t: usize) -> usize {
        unit * self.horizon + t - 1
    }

    /// `ê_t^z` for all `K` arms.
    pub fn propensity(&self, unit: usize, t: usize) -> &[f64] {
        let k = self.n_treatments;
        let r = self.row(unit, t);
        &self.propensity[r * k..(r + 1) * k]
    }

    pub fn cond_mean(&self, unit: usize, t: usize) -> f64 {
        self.cond_mean[self.row(unit, t)]
    }

    /// `ĝ_t^z` for `z ∈ Z⁺`.
    pub fn blip(&self, unit: usize, t: usize) -> &[f64] {
        let k = self.n_treatments - 1;
        let r = self.row(unit, t);
        &self.blip[r * k..(r + 1) * k]
    }

    /// `ĝ_t^{z}` with the control arm fixed at zero.
    pub fn blip_for_arm(&self, unit: usize, t: usize, z: usize) -> f64 {
        if z == 0 {
            0.0
        } else {
            self.blip(unit, t)[z - 1]
        }
    }

    fn extend(&mut self, other: Predictions) {
        self.n_units += other.n_units;
        self.propensity.extend(other.propensity);
        self.cond_mean.extend(other.cond_mean);
        self.blip.extend(other.blip);
    }
}

/// The trainable model: architecture, parameters and input scaling.
#[derive(Debug, Clone)]
pub struct Terra {
    arch: ArchConfig,
    params: ParamStore,
    scaler: Scaler,
    layout: Layout,
}

impl Terra {
    pub fn new(arch: ArchConfig, scaler: Scaler, seed: u64) -> Result<Self> {
        arch.validate()?;
        if scaler.x_mean.len() != arch.n_covariates || scaler.x_scale.len() != arch.n_covariates {
            return Err(TerraError::Config("scaler dimension differs from covariate dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let layout = build_layout(&arch, &mut b);
        let params = ParamStore {
            names: b.names,
            tensors: b.tensors,
        };
        Ok(Self {
            arch,
            params,
            scaler,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, checking every name and shape.
    pub fn from_parts(arch: ArchConfig, scaler: Scaler, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(arch, scaler, 0)?;
        if params.len() != model.params.len() {
            return Err(TerraError::Parse(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.into_iter().enumerate() {
            if name != model.params.names[i] || t.shape() != model.params.tensors[i].shape() {
                return Err(TerraError::Parse(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    model.params.names[i],
                    model.params.tensors[i].shape(),
                    t.shape()
                )));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    /// Registers every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.tensors.iter().map(|t| g.param(t)).collect()
    }

    fn linear(&self, g: &mut Graph, p: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[l.w])?;
        g.add_bias(y, p[l.b])
    }

    fn norm(&self, g: &mut Graph, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, p[n.gamma], p[n.beta], LN_EPS)
    }

    /// Treatment and covariate embeddings with positional encoding added,
    /// each `[B·T × d_model]`.
    pub fn encode_sequences(&self, g: &mut Graph, p: &[Var], batch: &[&Trajectory]) -> Result<(Var, Var)> {
        let (t_len, d, k) = (self.arch.horizon, self.arch.d_model, self.arch.n_treatments);
        let pcov = self.arch.n_covariates;
        let rows = batch.len() * t_len;
        let mut one_hot = vec![0.0; rows * (k + 1)];
        let mut feats = Vec::with_capacity(rows * pcov);
        for (u, tr) in batch.iter().enumerate() {
            if tr.horizon() != t_len || tr.covariates.iter().any(|x| x.len() != pcov) {
                return Err(TerraError::Shape {
                    op: "encode_sequences",
                    detail: format!("unit {u} does not match T={t_len}, p={pcov}"),
                });
            }
            for s in 0..t_len {
                let token = if s == 0 { k } else { tr.treatments[s - 1] };
                if token > k {
                    return Err(TerraError::Shape {
                        op: "encode_sequences",
                        detail: format!("treatment {token} out of range"),
                    });
                }
                one_hot[(u * t_len + s) * (k + 1) + token] = 1.0;
                feats.extend(
                    tr.covariates[s]
                        .iter()
                        .zip(&self.scaler.x_mean)
                        .zip(&self.scaler.x_scale)
                        .map(|((x, m), sc)| (x - m) / sc),
                );
            }
        }
        let pe: Vec<f64> = (0..rows)
            .flat_map(|r| (0..d).map(move |c| pos_encode(r % t_len + 1, c, d)))
            .collect();
        let pe = g.constant(Tensor::new(vec![rows, d], pe)?)?;

        let oh = g.constant(Tensor::new(vec![rows, k + 1], one_hot)?)?;
        let z_emb = self.linear(g, p, self.layout.embed_z, oh)?;
        let z_emb = g.add(z_emb, pe)?;
        let xs = g.constant(Tensor::new(vec![rows, pcov], feats)?)?;
        let x_emb = self.linear(g, p, self.layout.embed_x, xs)?;
        let x_emb = g.add(x_emb, pe)?;
        Ok((z_emb, x_emb))
    }

    /// Multi-head attention where query row `t` sees key rows `s ≤ t` of the
    /// same unit. Returns the projected output and each head's weights
    /// `[B × T × T]`.
    fn masked_multihead(
        &self,
        g: &mut Graph,
        p: &[Var],
        a: Attention,
        query: Var,
        memory: Var,
        n_units: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let (t_len, dk) = (self.arch.horizon, self.arch.d_head());
        let q = self.linear(g, p, a.q, query)?;
        let k = self.linear(g, p, a.k, memory)?;
        let v = self.linear(g, p, a.v, memory)?;
        let mask: Vec<bool> = (0..t_len * t_len).map(|i| i % t_len > i / t_len).collect();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.arch.n_heads);
        let mut weights = Vec::with_capacity(self.arch.n_heads);
        for h in 0..self.arch.n_heads {
            let split = |g: &mut Graph, x: Var| -> Result<Var> {
                let s = g.slice_cols(x, h * dk, dk)?;
                g.reshape(s, vec![n_units, t_len, dk])
            };
            let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.bmm(qh, kh, true)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.masked_fill(scores, mask.clone())?;
            let attn = g.softmax_rows(scores)?;
            let out = g.bmm(attn, vh, false)?;
            heads.push(g.reshape(out, vec![n_units * t_len, dk])?);
            weights.push(attn);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((self.linear(g, p, a.o, cat)?, weights))
    }

    /// `LayerNorm(dropout(sublayer) + x)`.
    fn residual(&self, g: &mut Graph, p: &[Var], n: Norm, sub: Var, x: Var) -> Result<Var> {
        let sub = g.dropout(sub, self.arch.dropout_p)?;
        let s = g.add(sub, x)?;
        self.norm(g, p, n, s)
    }

    fn feed_forward(&self, g: &mut Graph, p: &[Var], f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(g, p, f.up, x)?;
        let h = g.relu(h)?;
        self.linear(g, p, f.down, h)
    }

    fn block(&self, g: &mut Graph, p: &[Var], b: &Block, treat: Var, feat: Var, n_units: usize) -> Result<(Var, Var)> {
        let (st, _) = self.masked_multihead(g, p, b.self_treat, treat, treat, n_units)?;
        let treat = self.residual(g, p, b.norms[0], st, treat)?;
        let (sf, _) = self.masked_multihead(g, p, b.self_feat, feat, feat, n_units)?;
        let feat = self.residual(g, p, b.norms[1], sf, feat)?;

        let (ct, _) = self.masked_multihead(g, p, b.cross_treat, treat, feat, n_units)?;
        let (cf, _) = self.masked_multihead(g, p, b.cross_feat, feat, treat, n_units)?;
        let treat = self.residual(g, p, b.norms[2], ct, treat)?;
        let feat = self.residual(g, p, b.norms[3], cf, feat)?;

        let ft = self.feed_forward(g, p, b.ff_treat, treat)?;
        let treat = self.residual(g, p, b.norms[4], ft, treat)?;
        let ff = self.feed_forward(g, p, b.ff_feat, feat)?;
        let feat = self.residual(g, p, b.norms[5], ff, feat)?;
        Ok((treat, feat))
    }

    fn head(&self, g: &mut Graph, p: &[Var], h: Head, x: Var) -> Result<Var> {
        let z = self.linear(g, p, h.hidden, x)?;
        let z = g.relu(z)?;
        self.linear(g, p, h.out, z)
    }

    /// Full forward pass for a batch of units, using the graph's mode for
    /// dropout.
    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &[&Trajectory]) -> Result<ModelOutputs> {
        if batch.is_empty() {
            return Err(TerraError::Contract("forward on an empty batch".into()));
        }
        let n = batch.len();
        let (mut treat, mut feat) = self.encode_sequences(g, p, batch)?;
        for b in &self.layout.blocks {
            (treat, feat) = self.block(g, p, b, treat, feat, n)?;
        }
        let trunk = g.concat_cols(&[treat, feat])?;

        let logits = self.head(g, p, self.layout.propensity, trunk)?;
        let propensity = g.softmax_rows(logits)?;
        let mu = self.head(g, p, self.layout.cond_mean, trunk)?;
        let mu = g.scale(mu, self.scaler.y_scale)?;
        let shift = g.constant(Tensor::scalar(self.scaler.y_mean))?;
        let cond_mean = g.add_bias(mu, shift)?;
        let blip = self.head(g, p, self.layout.blip, trunk)?;
        let blip = g.scale(blip, self.scaler.y_scale)?;
        Ok(ModelOutputs {
            propensity_logits: logits,
            propensity,
            cond_mean,
            blip,
            n_units: n,
            horizon: self.arch.horizon,
        })
    }

    /// Evaluation-mode predictions, computed in chunks of `chunk` units.
    pub fn predict(&self, units: &[&Trajectory], chunk: usize) -> Result<Predictions> {
        let mut all: Option<Predictions> = None;
        for part in units.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let p = self.bind(&mut g)?;
            let out = self.forward(&mut g, &p, part)?;
            let pred = Predictions::from_graph(&g, &out, self.arch.n_treatments);
            match all.as_mut() {
                None => all = Some(pred),
                Some(a) => a.extend(pred),
            }
        }
        all.ok_or_else(|| TerraError::Contract("predict on an empty unit list".into()))
    }

    pub fn predict_panel(&self, panel: &Panel) -> Result<Predictions> {
        let units: Vec<&Trajectory> = panel.trajectories().iter().collect();
        self.predict(&units, 256)
    }

    /// Attention weights of the first block's self-attention on the
    /// treatment stream, one `[B × T × T]` tensor per head.
    pub fn first_layer_attention(&self, batch: &[&Trajectory]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let (treat, _) = self.encode_sequences(&mut g, &p, batch)?;
        let b = self.layout.blocks[0];
        let (_, w) = self.masked_multihead(&mut g, &p, b.self_treat, treat, treat, batch.len())?;
        Ok(w.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests;
