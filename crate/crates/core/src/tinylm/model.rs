//! Pre-norm decoder-only transformer with a frozen NF4 base and trainable
//! low-rank adapters. Forward and backward passes are written out by hand;
//! gradients are produced for adapter parameters only.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize_with, QuantConfig, QuantizedTensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Std of the random frozen base weights; 0 selects 1/sqrt(d_model).
    #[serde(default)]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: 0,
            init_std: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("model dimensions must be at least 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be nonnegative");
        }
        Ok(())
    }

    fn weight_std(&self) -> f64 {
        if self.init_std > 0.0 {
            self.init_std
        } else {
            1.0 / (self.d_model as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Linear roles that receive an adapter: `attn.q`, `attn.k`, `attn.v`,
    /// `attn.o`, `mlp.up`, `mlp.down`, `head`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: ["attn.q", "attn.k", "attn.v", "attn.o", "head"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// A linear map `y = x W^T` with `W` held in NF4 and an optional adapter.
#[derive(Debug, Clone)]
pub struct QLinear {
    pub name: String,
    pub base: QuantizedTensor,
    weight: Array2<f64>,
    pub adapter: Option<LoraAdapter>,
}

impl QLinear {
    pub fn new(name: String, base: QuantizedTensor, adapter: Option<LoraAdapter>) -> Result<Self> {
        let weight = dequantize(&base)?;
        if let Some(a) = &adapter {
            if a.dims() != weight.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {:?} on `{name}` with weight {:?}",
                    a.dims(),
                    weight.dim()
                )));
            }
        }
        Ok(Self {
            name,
            base,
            weight,
            adapter,
        })
    }

    /// Dequantized frozen weight.
    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut y = x.dot(&self.weight.t());
        let u = self.adapter.as_ref().map(|a| {
            let u = x.dot(&a.a.t());
            y.scaled_add(a.scaling(), &u.dot(&a.b.t()));
            u
        });
        (y, u)
    }

    fn backward(
        &self,
        x: &Array2<f64>,
        u: Option<&Array2<f64>>,
        dy: &Array2<f64>,
        grads: &mut Vec<(Array2<f64>, Array2<f64>)>,
    ) -> Array2<f64> {
        let mut dx = dy.dot(&self.weight);
        if let (Some(a), Some(u)) = (&self.adapter, u) {
            let s = a.scaling();
            let db = dy.t().dot(u) * s;
            let du = dy.dot(&a.b) * s;
            let da = du.t().dot(x);
            dx += &du.dot(&a.a);
            grads.push((da, db));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &rstd.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, rstd })
    }

    fn backward(&self, c: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mean_d = dxhat.sum_axis(Axis(1)) / d;
        let mean_dx = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat - &mean_d.insert_axis(Axis(1)) - &c.xhat * &mean_dx.insert_axis(Axis(1));
        dx *= &c.rstd.view().insert_axis(Axis(1));
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: QLinear,
    pub k: QLinear,
    pub v: QLinear,
    pub o: QLinear,
    pub ln2: LayerNorm,
    pub up: QLinear,
    pub down: QLinear,
}

struct BlockCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    uq: Option<Array2<f64>>,
    uk: Option<Array2<f64>>,
    uv: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    uo: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    uu: Option<Array2<f64>>,
    act: Array2<f64>,
    ud: Option<Array2<f64>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows_causal(scores: &mut Array2<f64>) {
    for (t, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.slice(s![..=t]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= t {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl Block {
    fn forward(&self, x: &Array2<f64>, n_heads: usize) -> (Array2<f64>, BlockCache) {
        let (t_len, d) = x.dim();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let (h1, ln1) = self.ln1.forward(x);
        let (q, uq) = self.q.forward(&h1);
        let (k, uk) = self.k.forward(&h1);
        let (v, uv) = self.v.forward(&h1);

        let mut attn = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_causal(&mut p);
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let (o, uo) = self.o.forward(&attn);
        let x_mid = x + &o;

        let (h2, ln2) = self.ln2.forward(&x_mid);
        let (pre, uu) = self.up.forward(&h2);
        let act = pre.mapv(gelu);
        let (mlp, ud) = self.down.forward(&act);
        let out = &x_mid + &mlp;

        let cache = BlockCache {
            x_in: x.clone(),
            ln1,
            h1,
            q,
            k,
            v,
            uq,
            uk,
            uv,
            probs,
            attn,
            uo,
            ln2,
            h2,
            pre,
            uu,
            act,
            ud,
        };
        (out, cache)
    }

    /// Gradients are appended in the order q, k, v, o, up, down (adapted
    /// linears only); the caller reverses per-block order as needed.
    fn backward(
        &self,
        c: &BlockCache,
        dout: &Array2<f64>,
        n_heads: usize,
    ) -> (Array2<f64>, Vec<(Array2<f64>, Array2<f64>)>) {
        let d = dout.ncols();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        // collected in reverse, flipped at the end
        let mut rev = Vec::new();

        // MLP branch
        let dact = {
            let mut g = Vec::new();
            let r = self.down.backward(&c.act, c.ud.as_ref(), dout, &mut g);
            rev.extend(g);
            r
        };
        let mut dpre = dact;
        Zip::from(&mut dpre).and(&c.pre).for_each(|g, &p| *g *= gelu_grad(p));
        let dh2 = {
            let mut g = Vec::new();
            let r = self.up.backward(&c.h2, c.uu.as_ref(), &dpre, &mut g);
            rev.extend(g);
            r
        };
        let dx_mid = dout + &self.ln2.backward(&c.ln2, &dh2);

        // attention branch
        let dattn = {
            let mut g = Vec::new();
            let r = self.o.backward(&c.attn, c.uo.as_ref(), &dx_mid, &mut g);
            rev.extend(g);
            r
        };
        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let dout_h = dattn.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
            let dp = dout_h.dot(&c.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dh1 = Array2::zeros(c.h1.dim());
        for (lin, u, dy) in [
            (&self.v, c.uv.as_ref(), &dv),
            (&self.k, c.uk.as_ref(), &dk),
            (&self.q, c.uq.as_ref(), &dq),
        ] {
            let mut g = Vec::new();
            dh1 += &lin.backward(&c.h1, u, dy, &mut g);
            rev.extend(g);
        }
        let dx = dx_mid + self.ln1.backward(&c.ln1, &dh1);
        debug_assert_eq!(c.x_in.dim(), dx.dim());
        rev.reverse();
        (dx, rev)
    }

    fn linears(&self) -> [&QLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn linears_mut(&mut self) -> [&mut QLinear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.up,
            &mut self.down,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: QLinear,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    hf: Array2<f64>,
    uh: Option<Array2<f64>>,
}

/// Adapter gradients as `(dA, dB)` pairs in `TinyLm::adapters()` order.
pub type AdapterGrads = Vec<(Array2<f64>, Array2<f64>)>;

fn role_of(name: &str) -> &str {
    // "layers.3.attn.q" -> "attn.q"
    match name.strip_prefix("layers.") {
        Some(rest) => rest.split_once('.').map_or(rest, |(_, r)| r),
        None => name,
    }
}

impl TinyLm {
    /// Random frozen base, quantized to NF4, with adapters attached to the
    /// configured roles.
    pub fn new(config: ModelConfig, lora: &LoraConfig, quant: QuantConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = config.weight_std();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut gauss = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng));

        let tok_emb = gauss(config.vocab_size, d);
        let pos_emb = gauss(config.max_seq_len, d);
        let mut raw = Vec::new();
        for l in 0..config.n_layers {
            for (role, rows, cols) in [
                ("attn.q", d, d),
                ("attn.k", d, d),
                ("attn.v", d, d),
                ("attn.o", d, d),
                ("mlp.up", config.d_ff, d),
                ("mlp.down", d, config.d_ff),
            ] {
                raw.push((format!("layers.{l}.{role}"), gauss(rows, cols)));
            }
        }
        raw.push(("head".to_string(), gauss(config.vocab_size, d)));

        let mut linears = Vec::with_capacity(raw.len());
        for (i, (name, w)) in raw.into_iter().enumerate() {
            let q = quantize_with(&w, quant)?;
            let adapter = if lora.targets.iter().any(|t| t == role_of(&name)) {
                let (rows, cols) = w.dim();
                Some(init_adapter(
                    rows,
                    cols,
                    lora.rank,
                    lora.alpha,
                    seed.wrapping_add(1 + i as u64),
                    name.clone(),
                )?)
            } else {
                None
            };
            linears.push(QLinear::new(name, q, adapter)?);
        }
        Self::assemble(config, tok_emb, pos_emb, linears, None)
    }

    /// Rebuild from parts; `linears` in layer order q, k, v, o, up, down, then head.
    pub fn assemble(
        config: ModelConfig,
        tok_emb: Array2<f64>,
        pos_emb: Array2<f64>,
        linears: Vec<QLinear>,
        norms: Option<Vec<LayerNorm>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if tok_emb.dim() != (config.vocab_size, d) || pos_emb.dim() != (config.max_seq_len, d) {
            return Err(Error::ShapeMismatch("embedding tables do not match config".into()));
        }
        if linears.len() != 6 * config.n_layers + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} linears for {} layers",
                linears.len(),
                config.n_layers
            )));
        }
        let expected_norms = 2 * config.n_layers + 1;
        let mut norms = norms.unwrap_or_else(|| (0..expected_norms).map(|_| LayerNorm::new(d)).collect());
        if norms.len() != expected_norms || norms.iter().any(|n| n.gamma.len() != d || n.beta.len() != d) {
            return Err(Error::ShapeMismatch("layer norm parameters do not match config".into()));
        }
        let ln_f = norms.pop().unwrap();
        let mut norms = norms.into_iter();
        let mut it = linears.into_iter();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut next = |role: &str, rows: usize, cols: usize| -> Result<QLinear> {
                let lin = it.next().unwrap();
                if lin.weight.dim() != (rows, cols) {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {l} {role}: {:?}, expected {:?}",
                        lin.weight.dim(),
                        (rows, cols)
                    )));
                }
                Ok(lin)
            };
            let q = next("q", d, d)?;
            let k = next("k", d, d)?;
            let v = next("v", d, d)?;
            let o = next("o", d, d)?;
            let up = next("up", config.d_ff, d)?;
            let down = next("down", d, config.d_ff)?;
            blocks.push(Block {
                ln1: norms.next().unwrap(),
                q,
                k,
                v,
                o,
                ln2: norms.next().unwrap(),
                up,
                down,
            });
        }
        let head = it.next().unwrap();
        if head.weight.dim() != (config.vocab_size, d) {
            return Err(Error::ShapeMismatch("head does not match vocabulary".into()));
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn linears(&self) -> Vec<&QLinear> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .chain(std::iter::once(&self.head))
            .collect()
    }

    pub fn linears_mut(&mut self) -> Vec<&mut QLinear> {
        let mut out: Vec<&mut QLinear> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.linears_mut());
        }
        out.push(&mut self.head);
        out
    }

    /// Layer norms in block order (ln1, ln2 per block) followed by the final norm.
    pub fn norms(&self) -> Vec<&LayerNorm> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.ln1, &b.ln2])
            .chain(std::iter::once(&self.ln_f))
            .collect()
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.linears().into_iter().filter_map(|l| l.adapter.as_ref()).collect()
    }

    pub fn adapters_mut(&mut self) -> Vec<&mut LoraAdapter> {
        self.linears_mut()
            .into_iter()
            .filter_map(|l| l.adapter.as_mut())
            .collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.adapters().iter().map(|a| a.n_params()).sum()
    }

    /// Serialized NF4 base tensors, in linear order.
    pub fn base_bytes(&self) -> Vec<u8> {
        self.linears().iter().flat_map(|l| l.base.to_bytes()).collect()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::ShapeMismatch("empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Logits of shape `(len(ids), vocab_size)`.
    pub fn forward(&self, ids: &[u32]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(ids)?.0)
    }

    pub fn forward_cached(&self, ids: &[u32]) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(t);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, self.config.n_heads);
            caches.push(c);
            x = y;
        }
        let (hf, ln_f) = self.ln_f.forward(&x);
        let (logits, uh) = self.head.forward(&hf);
        Ok((
            logits,
            ForwardCache {
                ids: ids.to_vec(),
                blocks: caches,
                ln_f,
                hf,
                uh,
            },
        ))
    }

    /// Adapter gradients given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> AdapterGrads {
        let mut head_grad = Vec::new();
        let dhf = self.head.backward(&cache.hf, cache.uh.as_ref(), dlogits, &mut head_grad);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dhf);
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dprev, g) = b.backward(c, &dx, self.config.n_heads);
            per_block.push(g);
            dx = dprev;
        }
        debug_assert_eq!(dx.nrows(), cache.ids.len());
        per_block.reverse();
        per_block.into_iter().flatten().chain(head_grad).collect()
    }

    /// Adapter parameters flattened as A then B for each adapter, in order.
    pub fn adapter_params(&self) -> Vec<f64> {
        self.adapters()
            .iter()
            .flat_map(|a| a.a.iter().chain(a.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_adapter_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for a in self.adapters_mut() {
            for v in a.a.iter_mut().chain(a.b.iter_mut()) {
                *v = it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }
}

pub fn flatten_grads(g: &AdapterGrads) -> Vec<f64> {
    g.iter()
        .flat_map(|(da, db)| da.iter().chain(db.iter()).copied().collect::<Vec<_>>())
        .collect()
}

/// Mean cross-entropy over positions with `mask[t]`, and its gradient with
/// respect to the logits.
pub fn loss_and_grad(logits: &Array2<f64>, targets: &[u32], mask: &[bool]) -> Result<(f64, Array2<f64>)> {
    let (t_len, v) = logits.dim();
    if targets.len() != t_len || mask.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "{t_len} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array2::zeros((t_len, v));
    let mut total = 0.0;
    for t in (0..t_len).filter(|&t| mask[t]) {
        let row = logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        let target = targets[t] as usize;
        if target >= v {
            return Err(Error::ShapeMismatch(format!("target {target} outside vocabulary")));
        }
        total += log_z - row[target];
        let mut g = grad.row_mut(t);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (row[j] - log_z).exp() * inv;
        }
        g[target] -= inv;
    }
    Ok((total * inv, grad))
}

pub fn loss_masked(logits: &Array2<f64>, targets: &[u32], mask: &[bool]) -> Result<f64> {
    loss_and_grad(logits, targets, mask).map(|(l, _)| l)
}
