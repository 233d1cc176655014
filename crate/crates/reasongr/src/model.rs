//! Single-layer, single-head encoder-decoder over a frozen 4-bit base with
//! trainable low-rank adapters on every attention projection and the output
//! projection.
//!
//! Everything runs in f64 so forward, loss, and gradients are exactly
//! reproducible. The backward pass is hand-derived; its correctness contract
//! is the central-finite-difference oracle in the tests.

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{init_lora, LoraAdapter};
use crate::quant::{dequantize, quantize_4bit, QuantizedMatrix, DEFAULT_BLOCK_SIZE};
use crate::tokenizer::TokenId;

/// Base matrices that carry adapters.
pub const ADAPTER_TARGETS: [&str; 13] = [
    "enc_attn_q",
    "enc_attn_k",
    "enc_attn_v",
    "enc_attn_o",
    "dec_attn_q",
    "dec_attn_k",
    "dec_attn_v",
    "dec_attn_o",
    "cross_attn_q",
    "cross_attn_k",
    "cross_attn_v",
    "cross_attn_o",
    "output_proj",
];

/// Frozen matrices without adapters.
const FROZEN_ONLY: [&str; 5] = ["embed", "enc_ffn_in", "enc_ffn_out", "dec_ffn_in", "dec_ffn_out"];

/// Layer-norm sites, in forward order.
pub const NORM_SITES: [&str; 7] = [
    "enc_ln_attn",
    "enc_ln_ffn",
    "enc_ln_final",
    "dec_ln_attn",
    "dec_ln_cross",
    "dec_ln_ffn",
    "dec_ln_final",
];

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl ModelDims {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelDims {
            d_model: 64,
            d_ff: 128,
            vocab_size,
            max_src_len: 96,
            max_tgt_len: 24,
        }
    }
}

/// A frozen base matrix: quantized storage plus a dequantized compute cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenMatrix {
    pub quant: QuantizedMatrix,
    #[serde(skip, default = "empty_matrix")]
    deq: Array2<f64>,
}

fn empty_matrix() -> Array2<f64> {
    Array2::zeros((0, 0))
}

impl FrozenMatrix {
    fn from_dense(w: &Array2<f64>) -> Result<Self> {
        let quant = quantize_4bit(w, DEFAULT_BLOCK_SIZE)?;
        let deq = dequantize(&quant);
        Ok(FrozenMatrix { quant, deq })
    }

    fn rebuild(&mut self) {
        self.deq = dequantize(&self.quant);
    }

    pub fn dense(&self) -> &Array2<f64> {
        &self.deq
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

/// Frozen backbone: quantized matrices, layer norms, and the fixed
/// sinusoidal position table. Immutable during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqModel {
    pub dims: ModelDims,
    bases: IndexMap<String, FrozenMatrix>,
    norms: IndexMap<String, LayerNorm>,
    #[serde(skip, default = "empty_matrix")]
    pos: Array2<f64>,
}

/// The trainable collection: one adapter per target, plus the switch that
/// also trains layer-norm gains and biases (off by default).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: IndexMap<String, LoraAdapter>,
    pub train_layer_norm: bool,
}

impl AdapterSet {
    /// One rank-`r` adapter on each attention projection and the output
    /// projection.
    pub fn init<R: Rng>(model: &SeqModel, rank: usize, rng: &mut R) -> Result<Self> {
        let mut adapters = IndexMap::new();
        for name in ADAPTER_TARGETS {
            let base = model.base(name);
            let adapter = init_lora(name, base.nrows(), base.ncols(), rank, rng)?;
            adapters.insert(name.to_string(), adapter);
        }
        Ok(AdapterSet {
            adapters,
            train_layer_norm: false,
        })
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }
}

/// Gradients for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// (dA, dB) per adapter, in adapter order.
    pub adapters: IndexMap<String, (Array2<f64>, Array2<f64>)>,
    /// (d_gain, d_bias) per norm site when layer-norm training is enabled.
    pub norms: Option<IndexMap<String, (Array1<f64>, Array1<f64>)>>,
}

impl Gradients {
    /// Zero gradients shaped like the trainable set.
    pub fn zeros_like(adapters: &AdapterSet, norm_dims: &IndexMap<String, LayerNorm>) -> Self {
        Self::zeros(adapters, norm_dims)
    }

    fn zeros(adapters: &AdapterSet, norm_dims: &IndexMap<String, LayerNorm>) -> Self {
        let mut map = IndexMap::new();
        for (name, ad) in &adapters.adapters {
            map.insert(
                name.clone(),
                (Array2::zeros(ad.a.dim()), Array2::zeros(ad.b.dim())),
            );
        }
        let norms = adapters.train_layer_norm.then(|| {
            norm_dims
                .iter()
                .map(|(name, ln)| {
                    (
                        name.clone(),
                        (Array1::zeros(ln.gain.len()), Array1::zeros(ln.bias.len())),
                    )
                })
                .collect()
        });
        Gradients { adapters: map, norms }
    }

    /// Accumulates `other` scaled by `w` into `self`; shapes must agree.
    pub fn add_scaled(&mut self, other: &Gradients, w: f64) {
        for (name, (da, db)) in &mut self.adapters {
            let (oa, ob) = &other.adapters[name];
            da.scaled_add(w, oa);
            db.scaled_add(w, ob);
        }
        if let (Some(mine), Some(theirs)) = (&mut self.norms, &other.norms) {
            for (name, (dg, dbi)) in mine {
                let (og, obi) = &theirs[name];
                dg.scaled_add(w, og);
                dbi.scaled_add(w, obi);
            }
        }
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (da, db) in self.adapters.values() {
            acc += da.iter().map(|x| x * x).sum::<f64>();
            acc += db.iter().map(|x| x * x).sum::<f64>();
        }
        if let Some(norms) = &self.norms {
            for (dg, db) in norms.values() {
                acc += dg.iter().map(|x| x * x).sum::<f64>();
                acc += db.iter().map(|x| x * x).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    /// Scales gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for (da, db) in self.adapters.values_mut() {
                da.mapv_inplace(|x| x * s);
                db.mapv_inplace(|x| x * s);
            }
            if let Some(norms) = &mut self.norms {
                for (dg, db) in norms.values_mut() {
                    dg.mapv_inplace(|x| x * s);
                    db.mapv_inplace(|x| x * s);
                }
            }
        }
    }
}

impl SeqModel {
    /// Fresh model with Gaussian base weights quantized to 4 bits.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let d = dims.d_model;
        let shapes: Vec<(&str, usize, usize, f64)> = vec![
            // (name, rows = d_out, cols = d_in, init std)
            ("embed", dims.vocab_size, d, 1.0),
            ("enc_attn_q", d, d, xavier(d, d)),
            ("enc_attn_k", d, d, xavier(d, d)),
            ("enc_attn_v", d, d, xavier(d, d)),
            ("enc_attn_o", d, d, xavier(d, d)),
            ("enc_ffn_in", dims.d_ff, d, xavier(d, dims.d_ff)),
            ("enc_ffn_out", d, dims.d_ff, xavier(dims.d_ff, d)),
            ("dec_attn_q", d, d, xavier(d, d)),
            ("dec_attn_k", d, d, xavier(d, d)),
            ("dec_attn_v", d, d, xavier(d, d)),
            ("dec_attn_o", d, d, xavier(d, d)),
            ("cross_attn_q", d, d, xavier(d, d)),
            ("cross_attn_k", d, d, xavier(d, d)),
            ("cross_attn_v", d, d, xavier(d, d)),
            ("cross_attn_o", d, d, xavier(d, d)),
            ("dec_ffn_in", dims.d_ff, d, xavier(d, dims.d_ff)),
            ("dec_ffn_out", d, dims.d_ff, xavier(dims.d_ff, d)),
            ("output_proj", dims.vocab_size, d, xavier(d, dims.vocab_size)),
        ];
        let mut bases = IndexMap::new();
        for (name, rows, cols, std) in shapes {
            let w = Array2::from_shape_fn((rows, cols), |_| {
                rng.sample::<f64, _>(StandardNormal) * std
            });
            bases.insert(name.to_string(), FrozenMatrix::from_dense(&w)?);
        }
        let mut norms = IndexMap::new();
        for site in NORM_SITES {
            norms.insert(site.to_string(), LayerNorm::identity(d));
        }
        let pos = sinusoidal(dims.max_src_len.max(dims.max_tgt_len), d);
        Ok(SeqModel {
            dims,
            bases,
            norms,
            pos,
        })
    }

    /// Recomputes the dequantized caches and position table; required after
    /// deserialization.
    pub fn rebuild_caches(&mut self) {
        for fm in self.bases.values_mut() {
            fm.rebuild();
        }
        self.pos = sinusoidal(
            self.dims.max_src_len.max(self.dims.max_tgt_len),
            self.dims.d_model,
        );
    }

    pub fn base(&self, name: &str) -> &Array2<f64> {
        self.bases[name].dense()
    }

    pub fn base_quant(&self, name: &str) -> &QuantizedMatrix {
        &self.bases[name].quant
    }

    pub fn norm(&self, site: &str) -> &LayerNorm {
        &self.norms[site]
    }

    pub fn norms_mut(&mut self) -> &mut IndexMap<String, LayerNorm> {
        &mut self.norms
    }

    pub fn norm_table(&self) -> &IndexMap<String, LayerNorm> {
        &self.norms
    }

    pub fn base_names(&self) -> impl Iterator<Item = &str> {
        self.bases.keys().map(String::as_str)
    }

    fn embed_rows(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        let d = self.dims.d_model;
        let table = self.base("embed");
        let mut out = Array2::zeros((ids.len(), d));
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= self.dims.vocab_size {
                return Err(Error::Dims(format!(
                    "token id {id} outside vocabulary of {}",
                    self.dims.vocab_size
                )));
            }
            let row = table.row(id as usize);
            for c in 0..d {
                out[[p, c]] = row[c] + self.pos[[p, c]];
            }
        }
        Ok(out)
    }
}

fn xavier(d_in: usize, d_out: usize) -> f64 {
    (2.0 / (d_in + d_out) as f64).sqrt()
}

fn sinusoidal(max_len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, d));
    for p in 0..max_len {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[p, 2 * i]] = angle.sin();
            pe[[p, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// forward building blocks
// ---------------------------------------------------------------------------

/// `x · Wᵀ` with the adapter's low-rank delta added when B is nonzero, so a
/// freshly initialized adapter leaves outputs bitwise untouched.
fn linear_fwd(x: &Array2<f64>, base: &Array2<f64>, adapter: Option<&LoraAdapter>) -> Array2<f64> {
    let mut y = x.dot(&base.t());
    if let Some(ad) = adapter {
        if ad.b.iter().any(|&v| v != 0.0) {
            let xb = x.dot(&ad.b); // T×r
            y.scaled_add(ad.scale(), &xb.dot(&ad.a.t()));
        }
    }
    y
}

/// Backward through the adapted linear. Returns dX and accumulates adapter
/// gradients; the frozen base receives none.
fn linear_bwd(
    name: &str,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    base: &Array2<f64>,
    adapters: &AdapterSet,
    grads: &mut Gradients,
) -> Array2<f64> {
    let mut dx = dy.dot(base);
    if let Some(ad) = adapters.get(name) {
        let scale = ad.scale();
        let xb = x.dot(&ad.b); // T×r
        let dya = dy.dot(&ad.a); // T×r
        let (da, db) = grads.adapters.get_mut(name).expect("gradient slot");
        da.scaled_add(scale, &dy.t().dot(&xb));
        db.scaled_add(scale, &x.t().dot(&dya));
        dx.scaled_add(scale, &dya.dot(&ad.b.t()));
    }
    dx
}

struct LnCache {
    xhat: Array2<f64>,
    inv_sigma: Vec<f64>,
}

fn ln_fwd(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut inv_sigma = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma.push(inv);
        for c in 0..d {
            let h = (x[[r, c]] - mean) * inv;
            xhat[[r, c]] = h;
            out[[r, c]] = ln.gain[c] * h + ln.bias[c];
        }
    }
    (out, LnCache { xhat, inv_sigma })
}

fn ln_bwd(
    site: &str,
    dy: &Array2<f64>,
    ln: &LayerNorm,
    cache: &LnCache,
    grads: &mut Gradients,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for r in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let dxhat = dy[[r, c]] * ln.gain[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat[[r, c]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let dxhat = dy[[r, c]] * ln.gain[c];
            dx[[r, c]] = cache.inv_sigma[r]
                * (dxhat - mean_dxhat - cache.xhat[[r, c]] * mean_dxhat_xhat);
        }
    }
    if let Some(norms) = &mut grads.norms {
        let (dg, db) = norms.get_mut(site).expect("norm gradient slot");
        for r in 0..t {
            for c in 0..d {
                dg[c] += dy[[r, c]] * cache.xhat[[r, c]];
                db[c] += dy[[r, c]];
            }
        }
    }
    dx
}

/// Row-wise softmax with max subtraction; -inf entries become exact zeros.
fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let (t, s) = scores.dim();
    let mut out = Array2::zeros((t, s));
    for r in 0..t {
        let row = scores.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..s {
            let e = (scores[[r, c]] - max).exp();
            out[[r, c]] = e;
            denom += e;
        }
        for c in 0..s {
            out[[r, c]] /= denom;
        }
    }
    out
}

/// Backward through a row-wise softmax: `ds = p ⊙ (dp − ⟨dp, p⟩)`.
fn softmax_bwd(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let (t, s) = probs.dim();
    let mut ds = Array2::zeros((t, s));
    for r in 0..t {
        let dot: f64 = (0..s).map(|c| dprobs[[r, c]] * probs[[r, c]]).sum();
        for c in 0..s {
            ds[[r, c]] = probs[[r, c]] * (dprobs[[r, c]] - dot);
        }
    }
    ds
}

struct AttnCache {
    input_norm: Array2<f64>,
    ln: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    ctx: Array2<f64>,
}

struct FfnCache {
    input_norm: Array2<f64>,
    ln: LnCache,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct EncoderTrace {
    x0: Array2<f64>,
    attn: AttnCache,
    x1: Array2<f64>,
    ffn: FfnCache,
    x2: Array2<f64>,
    final_ln: LnCache,
    memory: Array2<f64>,
}

struct CrossCache {
    q_input_norm: Array2<f64>,
    ln: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    ctx: Array2<f64>,
}

struct DecoderTrace {
    y0: Array2<f64>,
    self_attn: AttnCache,
    y1: Array2<f64>,
    cross: CrossCache,
    y2: Array2<f64>,
    ffn: FfnCache,
    y3: Array2<f64>,
    final_ln: LnCache,
    final_norm: Array2<f64>,
}

pub struct ForwardTrace {
    encoder: EncoderTrace,
    decoder: DecoderTrace,
    pub logits: Array2<f64>,
}

fn attention_scores(q: &Array2<f64>, k: &Array2<f64>, scale: f64, causal: bool) -> Array2<f64> {
    let mut scores = q.dot(&k.t()) * scale;
    if causal {
        let (t, s) = scores.dim();
        for r in 0..t {
            for c in 0..s {
                if c > r {
                    scores[[r, c]] = f64::NEG_INFINITY;
                }
            }
        }
    }
    scores
}

impl SeqModel {
    fn self_attention(
        &self,
        prefix: &str,
        x: &Array2<f64>,
        adapters: &AdapterSet,
        causal: bool,
        ln_site: &str,
    ) -> (Array2<f64>, AttnCache) {
        let (normed, ln) = ln_fwd(x, self.norm(ln_site));
        let q = linear_fwd(
            &normed,
            self.base(&format!("{prefix}_q")),
            adapters.get(&format!("{prefix}_q")),
        );
        let k = linear_fwd(
            &normed,
            self.base(&format!("{prefix}_k")),
            adapters.get(&format!("{prefix}_k")),
        );
        let v = linear_fwd(
            &normed,
            self.base(&format!("{prefix}_v")),
            adapters.get(&format!("{prefix}_v")),
        );
        let scale = 1.0 / (self.dims.d_model as f64).sqrt();
        let probs = softmax_rows(&attention_scores(&q, &k, scale, causal));
        let ctx = probs.dot(&v);
        let out = linear_fwd(
            &ctx,
            self.base(&format!("{prefix}_o")),
            adapters.get(&format!("{prefix}_o")),
        );
        (
            out,
            AttnCache {
                input_norm: normed,
                ln,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    fn ffn(
        &self,
        x: &Array2<f64>,
        adapters: &AdapterSet,
        ln_site: &str,
        w_in: &str,
        w_out: &str,
    ) -> (Array2<f64>, FfnCache) {
        let (normed, ln) = ln_fwd(x, self.norm(ln_site));
        let pre = linear_fwd(&normed, self.base(w_in), adapters.get(w_in));
        let act = pre.mapv(|v| v.max(0.0));
        let out = linear_fwd(&act, self.base(w_out), adapters.get(w_out));
        (
            out,
            FfnCache {
                input_norm: normed,
                ln,
                pre,
                act,
            },
        )
    }

    fn encode(&self, src: &[TokenId], adapters: &AdapterSet) -> Result<EncoderTrace> {
        let x0 = self.embed_rows(src)?;
        let (attn_out, attn) = self.self_attention("enc_attn", &x0, adapters, false, "enc_ln_attn");
        let x1 = &x0 + &attn_out;
        let (ffn_out, ffn) = self.ffn(&x1, adapters, "enc_ln_ffn", "enc_ffn_in", "enc_ffn_out");
        let x2 = &x1 + &ffn_out;
        let (memory, final_ln) = ln_fwd(&x2, self.norm("enc_ln_final"));
        Ok(EncoderTrace {
            x0,
            attn,
            x1,
            ffn,
            x2,
            final_ln,
            memory,
        })
    }

    fn decode_prefix(
        &self,
        tgt_prefix: &[TokenId],
        memory: &Array2<f64>,
        adapters: &AdapterSet,
    ) -> Result<DecoderTrace> {
        let y0 = self.embed_rows(tgt_prefix)?;
        let (self_out, self_attn) =
            self.self_attention("dec_attn", &y0, adapters, true, "dec_ln_attn");
        let y1 = &y0 + &self_out;

        let (normed, ln) = ln_fwd(&y1, self.norm("dec_ln_cross"));
        let q = linear_fwd(&normed, self.base("cross_attn_q"), adapters.get("cross_attn_q"));
        let k = linear_fwd(memory, self.base("cross_attn_k"), adapters.get("cross_attn_k"));
        let v = linear_fwd(memory, self.base("cross_attn_v"), adapters.get("cross_attn_v"));
        let scale = 1.0 / (self.dims.d_model as f64).sqrt();
        let probs = softmax_rows(&attention_scores(&q, &k, scale, false));
        let ctx = probs.dot(&v);
        let cross_out = linear_fwd(&ctx, self.base("cross_attn_o"), adapters.get("cross_attn_o"));
        let y2 = &y1 + &cross_out;
        let cross = CrossCache {
            q_input_norm: normed,
            ln,
            q,
            k,
            v,
            probs,
            ctx,
        };

        let (ffn_out, ffn) = self.ffn(&y2, adapters, "dec_ln_ffn", "dec_ffn_in", "dec_ffn_out");
        let y3 = &y2 + &ffn_out;
        let (final_norm, final_ln) = ln_fwd(&y3, self.norm("dec_ln_final"));

        Ok(DecoderTrace {
            y0,
            self_attn,
            y1,
            cross,
            y2,
            ffn,
            y3,
            final_ln,
            final_norm,
        })
    }

    /// Full forward pass retaining every intermediate for backward.
    pub fn forward_trace(
        &self,
        adapters: &AdapterSet,
        src: &[TokenId],
        tgt_prefix: &[TokenId],
    ) -> Result<ForwardTrace> {
        if src.is_empty() {
            return Err(Error::Dims("forward: empty source sequence".into()));
        }
        if tgt_prefix.is_empty() {
            return Err(Error::Dims("forward: empty target prefix (pass BOS)".into()));
        }
        if src.len() > self.dims.max_src_len {
            return Err(Error::Dims(format!(
                "source length {} exceeds max {}",
                src.len(),
                self.dims.max_src_len
            )));
        }
        if tgt_prefix.len() > self.dims.max_tgt_len {
            return Err(Error::Dims(format!(
                "target length {} exceeds max {}",
                tgt_prefix.len(),
                self.dims.max_tgt_len
            )));
        }
        let encoder = self.encode(src, adapters)?;
        let decoder = self.decode_prefix(tgt_prefix, &encoder.memory, adapters)?;
        let logits = linear_fwd(
            &decoder.final_norm,
            self.base("output_proj"),
            adapters.get("output_proj"),
        );
        Ok(ForwardTrace {
            encoder,
            decoder,
            logits,
        })
    }

    /// Logits for each target prefix position; row p conditions on `src` and
    /// `tgt_prefix[0..=p]`.
    pub fn forward(
        &self,
        adapters: &AdapterSet,
        src: &[TokenId],
        tgt_prefix: &[TokenId],
    ) -> Result<Array2<f64>> {
        Ok(self.forward_trace(adapters, src, tgt_prefix)?.logits)
    }

    /// Encoder output alone, so decoding loops can reuse it across steps.
    pub fn encode_memory(&self, adapters: &AdapterSet, src: &[TokenId]) -> Result<Array2<f64>> {
        if src.is_empty() {
            return Err(Error::Dims("encode: empty source sequence".into()));
        }
        if src.len() > self.dims.max_src_len {
            return Err(Error::Dims(format!(
                "source length {} exceeds max {}",
                src.len(),
                self.dims.max_src_len
            )));
        }
        Ok(self.encode(src, adapters)?.memory)
    }

    /// Next-token logits given a precomputed encoder memory: the last row of
    /// the decoder logits for `tgt_prefix`.
    pub fn next_logits(
        &self,
        adapters: &AdapterSet,
        memory: &Array2<f64>,
        tgt_prefix: &[TokenId],
    ) -> Result<Vec<f64>> {
        if tgt_prefix.is_empty() {
            return Err(Error::Dims("decode: empty target prefix (pass BOS)".into()));
        }
        if tgt_prefix.len() > self.dims.max_tgt_len {
            return Err(Error::Dims(format!(
                "target length {} exceeds max {}",
                tgt_prefix.len(),
                self.dims.max_tgt_len
            )));
        }
        let trace = self.decode_prefix(tgt_prefix, memory, adapters)?;
        let logits = linear_fwd(
            &trace.final_norm,
            self.base("output_proj"),
            adapters.get("output_proj"),
        );
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }

    /// Gradients of `loss_scale × token-averaged cross-entropy` of `tgt`
    /// under teacher forcing, for every trainable tensor. The prefix is
    /// BOS followed by `tgt` minus its last token.
    pub fn backward(
        &self,
        adapters: &AdapterSet,
        src: &[TokenId],
        tgt: &[TokenId],
        loss_scale: f64,
    ) -> Result<(f64, Gradients)> {
        if tgt.is_empty() {
            return Err(Error::Dims("backward: empty target".into()));
        }
        let prefix = teacher_prefix(tgt);
        let trace = self.forward_trace(adapters, src, &prefix)?;
        let ce = crate::loss::cross_entropy(&trace.logits, tgt)?;

        // dCE/dlogits = (softmax − onehot) / T, then scaled
        let t = tgt.len();
        let probs = softmax_rows(&trace.logits);
        let mut dlogits = probs;
        for (p, &gold) in tgt.iter().enumerate() {
            dlogits[[p, gold as usize]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v * loss_scale / t as f64);

        let mut grads = Gradients::zeros(adapters, &self.norms);
        self.backprop(adapters, &trace, &dlogits, &mut grads);
        Ok((ce, grads))
    }

    /// One training step's worth of math: forward once, compute CE and the
    /// penalty factor of the teacher-forced greedy prediction, and return
    /// gradients of `P × CE` (P held constant under differentiation).
    /// Returns `(ce, p, gradients)`.
    pub fn backward_with_penalty(
        &self,
        adapters: &AdapterSet,
        src: &[TokenId],
        tgt: &[TokenId],
        weights: &crate::loss::PenaltyWeights,
    ) -> Result<(f64, f64, Gradients)> {
        if tgt.is_empty() {
            return Err(Error::Dims("backward: empty target".into()));
        }
        let prefix = teacher_prefix(tgt);
        let trace = self.forward_trace(adapters, src, &prefix)?;
        let ce = crate::loss::cross_entropy(&trace.logits, tgt)?;
        let p = if weights.is_zero() {
            1.0
        } else {
            let pred = crate::loss::greedy_prediction(&trace.logits);
            crate::loss::penalty_factor(&pred, tgt, weights)
        };

        let t = tgt.len();
        let mut dlogits = softmax_rows(&trace.logits);
        for (pos, &gold) in tgt.iter().enumerate() {
            dlogits[[pos, gold as usize]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v * p / t as f64);

        let mut grads = Gradients::zeros(adapters, &self.norms);
        self.backprop(adapters, &trace, &dlogits, &mut grads);
        Ok((ce, p, grads))
    }

    fn backprop(
        &self,
        adapters: &AdapterSet,
        trace: &ForwardTrace,
        dlogits: &Array2<f64>,
        grads: &mut Gradients,
    ) {
        let dec = &trace.decoder;
        let enc = &trace.encoder;
        let scale = 1.0 / (self.dims.d_model as f64).sqrt();

        // output projection
        let d_final_norm = linear_bwd(
            "output_proj",
            &dec.final_norm,
            dlogits,
            self.base("output_proj"),
            adapters,
            grads,
        );
        let mut d_y3 = ln_bwd(
            "dec_ln_final",
            &d_final_norm,
            self.norm("dec_ln_final"),
            &dec.final_ln,
            grads,
        );

        // decoder FFN
        let d_ffn_out = d_y3.clone();
        let d_act = linear_bwd(
            "dec_ffn_out",
            &dec.ffn.act,
            &d_ffn_out,
            self.base("dec_ffn_out"),
            adapters,
            grads,
        );
        let d_pre = relu_bwd(&d_act, &dec.ffn.pre);
        let d_norm = linear_bwd(
            "dec_ffn_in",
            &dec.ffn.input_norm,
            &d_pre,
            self.base("dec_ffn_in"),
            adapters,
            grads,
        );
        let mut d_y2 = ln_bwd("dec_ln_ffn", &d_norm, self.norm("dec_ln_ffn"), &dec.ffn.ln, grads);
        d_y2 += &d_y3; // residual

        // cross attention
        let d_cross_out = d_y2.clone();
        let d_ctx = linear_bwd(
            "cross_attn_o",
            &dec.cross.ctx,
            &d_cross_out,
            self.base("cross_attn_o"),
            adapters,
            grads,
        );
        let d_probs = d_ctx.dot(&dec.cross.v.t());
        let d_v = dec.cross.probs.t().dot(&d_ctx);
        let d_scores = softmax_bwd(&dec.cross.probs, &d_probs);
        let d_q = d_scores.dot(&dec.cross.k) * scale;
        let d_k = d_scores.t().dot(&dec.cross.q) * scale;

        let d_norm = linear_bwd(
            "cross_attn_q",
            &dec.cross.q_input_norm,
            &d_q,
            self.base("cross_attn_q"),
            adapters,
            grads,
        );
        let mut d_memory = linear_bwd(
            "cross_attn_k",
            &enc.memory,
            &d_k,
            self.base("cross_attn_k"),
            adapters,
            grads,
        );
        d_memory += &linear_bwd(
            "cross_attn_v",
            &enc.memory,
            &d_v,
            self.base("cross_attn_v"),
            adapters,
            grads,
        );
        let mut d_y1 = ln_bwd(
            "dec_ln_cross",
            &d_norm,
            self.norm("dec_ln_cross"),
            &dec.cross.ln,
            grads,
        );
        d_y1 += &d_y2; // residual

        // decoder self-attention (gradient stops at the frozen embedding)
        self.attention_bwd("dec_attn", "dec_ln_attn", &dec.self_attn, &d_y1, adapters, grads, scale);

        // encoder, fed by the accumulated memory gradient
        let d_x2 = ln_bwd(
            "enc_ln_final",
            &d_memory,
            self.norm("enc_ln_final"),
            &enc.final_ln,
            grads,
        );

        let d_ffn_out = d_x2.clone();
        let d_act = linear_bwd(
            "enc_ffn_out",
            &enc.ffn.act,
            &d_ffn_out,
            self.base("enc_ffn_out"),
            adapters,
            grads,
        );
        let d_pre = relu_bwd(&d_act, &enc.ffn.pre);
        let d_norm = linear_bwd(
            "enc_ffn_in",
            &enc.ffn.input_norm,
            &d_pre,
            self.base("enc_ffn_in"),
            adapters,
            grads,
        );
        let mut d_x1 = ln_bwd("enc_ln_ffn", &d_norm, self.norm("enc_ln_ffn"), &enc.ffn.ln, grads);
        d_x1 += &d_x2; // residual

        self.attention_bwd("enc_attn", "enc_ln_attn", &enc.attn, &d_x1, adapters, grads, scale);
    }

    /// Backward through one self-attention block, discarding the gradient at
    /// the (frozen) embedded input.
    #[allow(clippy::too_many_arguments)]
    fn attention_bwd(
        &self,
        prefix: &str,
        ln_site: &str,
        cache: &AttnCache,
        d_out_sum: &Array2<f64>,
        adapters: &AdapterSet,
        grads: &mut Gradients,
        scale: f64,
    ) {
        let d_attn_out = d_out_sum;
        let d_ctx = linear_bwd(
            &format!("{prefix}_o"),
            &cache.ctx,
            d_attn_out,
            self.base(&format!("{prefix}_o")),
            adapters,
            grads,
        );
        let d_probs = d_ctx.dot(&cache.v.t());
        let d_v = cache.probs.t().dot(&d_ctx);
        let d_scores = softmax_bwd(&cache.probs, &d_probs);
        let d_q = d_scores.dot(&cache.k) * scale;
        let d_k = d_scores.t().dot(&cache.q) * scale;

        let mut d_norm = linear_bwd(
            &format!("{prefix}_q"),
            &cache.input_norm,
            &d_q,
            self.base(&format!("{prefix}_q")),
            adapters,
            grads,
        );
        d_norm += &linear_bwd(
            &format!("{prefix}_k"),
            &cache.input_norm,
            &d_k,
            self.base(&format!("{prefix}_k")),
            adapters,
            grads,
        );
        d_norm += &linear_bwd(
            &format!("{prefix}_v"),
            &cache.input_norm,
            &d_v,
            self.base(&format!("{prefix}_v")),
            adapters,
            grads,
        );
        // d(embedded input) would be ln_bwd(d_norm) + residual; embeddings
        // are frozen, so it is computed for the norm gradients only.
        let _ = ln_bwd(ln_site, &d_norm, self.norm(ln_site), &cache.ln, grads);
    }
}

fn relu_bwd(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// BOS followed by all but the last target token: the decoder input whose
/// row p predicts `tgt[p]`.
pub fn teacher_prefix(tgt: &[TokenId]) -> Vec<TokenId> {
    let mut prefix = Vec::with_capacity(tgt.len());
    prefix.push(crate::tokenizer::BOS);
    prefix.extend_from_slice(&tgt[..tgt.len() - 1]);
    prefix
}

/// Softmax probabilities of each logits row; exposed for scoring.
pub fn softmax_probs(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}
