//! The transformer under measurement: frozen embeddings, multi-head
//! causal self-attention stacks, FFN blocks, a frozen output head, and
//! exact trainable-parameter accounting.
//!
//! Only the attention projections (W_Q, W_K, W_V per head, the head-merge
//! W_O) and the FFN weights train; token/positional embeddings and the
//! output head are drawn once per seed and never updated, so measured
//! capacity is attributable to the attention and FFN parameters alone.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HEAD_DIM: usize = 128;
pub const DEFAULT_FFN_MULT: usize = 4;

/// Architecture hyperparameters. `embed_dim`, `heads`, `seq_len` and
/// `layers` are the axes the capacity model is expressed in (B, H, N, L).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size T.
    pub vocab_size: usize,
    /// Maximum sequence length N.
    pub seq_len: usize,
    /// Token-vector dimension B.
    pub embed_dim: usize,
    /// Per-head projection dimension d_h.
    pub head_dim: usize,
    /// Heads per layer H.
    pub heads: usize,
    /// Layer count L.
    pub layers: usize,
    /// FFN hidden width = ffn_mult * embed_dim.
    pub ffn_mult: usize,
    /// Pin the FFN to an identity contribution (all FFN tensors zero,
    /// excluded from training), leaving the residual path untouched.
    pub freeze_ffn: bool,
    /// Replace V = X·W_V by a frozen slice projection of X.
    pub omit_wv: bool,
    /// Dropout rate on attention weights and sublayer outputs during
    /// training. Memorization only slows down with dropout; default 0.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seq_len: usize, embed_dim: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            seq_len,
            embed_dim,
            head_dim: DEFAULT_HEAD_DIM,
            heads,
            layers,
            ffn_mult: DEFAULT_FFN_MULT,
            freeze_ffn: false,
            omit_wv: false,
            dropout: 0.0,
        }
    }

    pub fn with_head_dim(mut self, head_dim: usize) -> Self {
        self.head_dim = head_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig(
                "seq_len must be >= 2 (a prefix and a target token)".into(),
            ));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig(
                "embed_dim must be >= 2 for layer normalization".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    /// Absent when `omit_wv`; the frozen slice projection is used instead.
    pub w_v: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    /// The frozen-FFN realization: with every tensor zero the block
    /// output is exactly zero and the residual path is the identity.
    fn identity(embed_dim: usize, ffn_mult: usize) -> Self {
        let hidden = ffn_mult * embed_dim;
        FfnWeights {
            w1: Tensor::zeros(&[embed_dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, embed_dim]),
            b2: Tensor::zeros(&[embed_dim]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// Head-merge projection, (H·d_h) × B.
    pub w_o: Tensor,
    pub ffn: FfnWeights,
}

/// Weight tensors of one model instance. Frozen tensors are drawn once
/// at init and must stay bit-identical through training.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub seed: u64,
    /// T × B, frozen.
    pub token_embedding: Tensor,
    /// N × B, frozen.
    pub positional_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    /// B × T, frozen.
    pub output_head: Tensor,
    /// B × d_h frozen slice projection; present when `omit_wv`.
    pub value_slice: Option<Tensor>,
}

/// Deterministic initialization: frozen embeddings and output head come
/// from one seed-derived stream, trainable weights from another.
/// Embeddings and trainable weights are Gaussian with variance 1/B.
///
/// The output head is Gaussian per column, then each column is
/// zero-meaned and normalized to unit length. The readout vector is
/// layer-normed (zero mean, fixed norm), so only the zero-mean part of
/// a column is visible to the argmax, and raw Gaussian columns leave a
/// few tokens with near-zero attainable logit margins. Equal-length
/// zero-mean columns make every token reachable with a healthy margin;
/// without this, roughly half of small shattering runs stall on one
/// unluckily-drawn target token.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let std = 1.0 / (cfg.embed_dim as f64).sqrt();

    let mut frozen = rng::stream(rng::mix(seed, rng::tag::FROZEN_WEIGHTS));
    let token_embedding = Tensor::randn(&[cfg.vocab_size, cfg.embed_dim], std, &mut frozen);
    let positional_embedding = Tensor::randn(&[cfg.seq_len, cfg.embed_dim], std, &mut frozen);
    let mut output_head = Tensor::randn(&[cfg.embed_dim, cfg.vocab_size], std, &mut frozen);
    normalize_head_columns(&mut output_head, cfg.embed_dim, cfg.vocab_size);

    let value_slice = cfg.omit_wv.then(|| {
        let mut p = Tensor::zeros(&[cfg.embed_dim, cfg.head_dim]);
        for i in 0..cfg.embed_dim.min(cfg.head_dim) {
            p.data_mut()[i * cfg.head_dim + i] = 1.0;
        }
        p
    });

    let mut trainable = rng::stream(rng::mix(seed, rng::tag::TRAINABLE_WEIGHTS));
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            heads.push(HeadWeights {
                w_q: Tensor::randn(&[cfg.embed_dim, cfg.head_dim], std, &mut trainable),
                w_k: Tensor::randn(&[cfg.embed_dim, cfg.head_dim], std, &mut trainable),
                w_v: (!cfg.omit_wv)
                    .then(|| Tensor::randn(&[cfg.embed_dim, cfg.head_dim], std, &mut trainable)),
            });
        }
        let w_o = Tensor::randn(&[cfg.heads * cfg.head_dim, cfg.embed_dim], std, &mut trainable);
        let ffn = if cfg.freeze_ffn {
            FfnWeights::identity(cfg.embed_dim, cfg.ffn_mult)
        } else {
            let hidden = cfg.ffn_mult * cfg.embed_dim;
            FfnWeights {
                w1: Tensor::randn(&[cfg.embed_dim, hidden], std, &mut trainable),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::randn(&[hidden, cfg.embed_dim], std, &mut trainable),
                b2: Tensor::zeros(&[cfg.embed_dim]),
            }
        };
        layers.push(LayerWeights { heads, w_o, ffn });
    }

    Ok(ModelParams {
        cfg: cfg.clone(),
        seed,
        token_embedding,
        positional_embedding,
        layers,
        output_head,
        value_slice,
    })
}

/// Exact count of trainable weight entries for a configuration.
///
/// attention: L · ((omit_wv ? 2 : 3)·H·B·d_h + H·d_h·B)
/// ffn:       freeze_ffn ? 0 : L · (2·ffn_mult·B² + ffn_mult·B + B)
pub fn count_trainable_params(cfg: &ModelConfig) -> u64 {
    let (b, dh, h, l, m) = (
        cfg.embed_dim as u64,
        cfg.head_dim as u64,
        cfg.heads as u64,
        cfg.layers as u64,
        cfg.ffn_mult as u64,
    );
    let qkv = if cfg.omit_wv { 2 } else { 3 };
    let attention = l * (qkv * h * b * dh + h * dh * b);
    let ffn = if cfg.freeze_ffn { 0 } else { l * (2 * m * b * b + m * b + b) };
    attention + ffn
}

impl ModelParams {
    /// Trainable tensors in their canonical (training) order. The list
    /// is the runtime census that `count_trainable_params` must match.
    pub fn trainable_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &head.w_q));
                out.push((format!("layer{l}.head{h}.wk"), &head.w_k));
                if let Some(wv) = &head.w_v {
                    out.push((format!("layer{l}.head{h}.wv"), wv));
                }
            }
            out.push((format!("layer{l}.wo"), &layer.w_o));
            if !self.cfg.freeze_ffn {
                out.push((format!("layer{l}.ffn.w1"), &layer.ffn.w1));
                out.push((format!("layer{l}.ffn.b1"), &layer.ffn.b1));
                out.push((format!("layer{l}.ffn.w2"), &layer.ffn.w2));
                out.push((format!("layer{l}.ffn.b2"), &layer.ffn.b2));
            }
        }
        out
    }

    /// Mutable view of the same tensors, same order.
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let freeze_ffn = self.cfg.freeze_ffn;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                if let Some(wv) = &mut head.w_v {
                    out.push(wv);
                }
            }
            out.push(&mut layer.w_o);
            if !freeze_ffn {
                out.push(&mut layer.ffn.w1);
                out.push(&mut layer.ffn.b1);
                out.push(&mut layer.ffn.w2);
                out.push(&mut layer.ffn.b2);
            }
        }
        out
    }

    /// Frozen tensors, for bit-identity checks around training.
    pub fn frozen_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("token_embedding", &self.token_embedding),
            ("positional_embedding", &self.positional_embedding),
            ("output_head", &self.output_head),
        ];
        if let Some(p) = &self.value_slice {
            out.push(("value_slice", p));
        }
        out
    }

    /// Embeds token sequences: X[s, i, :] = E[token] + P[i].
    /// All sequences must share one length in [1, seq_len].
    pub(crate) fn embed_sequences(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        let n = seqs.first().map_or(0, |s| s.len());
        if n == 0 || n > self.cfg.seq_len {
            return Err(Error::Contract(format!(
                "sequence length must be in [1, {}], got {n}",
                self.cfg.seq_len
            )));
        }
        let b = self.cfg.embed_dim;
        let mut x = Tensor::zeros(&[seqs.len(), n, b]);
        let (emb, pos) = (self.token_embedding.data(), self.positional_embedding.data());
        for (s, seq) in seqs.iter().enumerate() {
            if seq.len() != n {
                return Err(Error::Contract("ragged batch of sequences".into()));
            }
            for (i, &tok) in seq.iter().enumerate() {
                if tok as usize >= self.cfg.vocab_size {
                    return Err(Error::TokenOutOfRange { token: tok, vocab: self.cfg.vocab_size });
                }
                let dst = &mut x.data_mut()[(s * n + i) * b..(s * n + i + 1) * b];
                let e = &emb[tok as usize * b..(tok as usize + 1) * b];
                let p = &pos[i * b..(i + 1) * b];
                for (o, (&ev, &pv)) in dst.iter_mut().zip(e.iter().zip(p)) {
                    *o = ev + pv;
                }
            }
        }
        Ok(x)
    }

    /// Registers the weights on a graph. With `trainable` the trainable
    /// tensors become gradient leaves (in census order, returned in
    /// `leaves`); otherwise everything is constant.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> BoundWeights {
        let mut leaves = Vec::new();
        let reg = |g: &mut Graph, t: &Tensor, leaves: &mut Vec<NodeId>| -> NodeId {
            if trainable {
                let id = g.leaf(t.clone());
                leaves.push(id);
                id
            } else {
                g.constant(t.clone())
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let heads = layer
                .heads
                .iter()
                .map(|head| BoundHead {
                    w_q: reg(g, &head.w_q, &mut leaves),
                    w_k: reg(g, &head.w_k, &mut leaves),
                    w_v: head.w_v.as_ref().map(|wv| reg(g, wv, &mut leaves)),
                })
                .collect();
            let w_o = reg(g, &layer.w_o, &mut leaves);
            let ffn = (!self.cfg.freeze_ffn).then(|| BoundFfn {
                w1: reg(g, &layer.ffn.w1, &mut leaves),
                b1: reg(g, &layer.ffn.b1, &mut leaves),
                w2: reg(g, &layer.ffn.w2, &mut leaves),
                b2: reg(g, &layer.ffn.b2, &mut leaves),
            });
            layers.push(BoundLayer { heads, w_o, ffn });
        }
        let output_head = g.constant(self.output_head.clone());
        let value_slice = self.value_slice.as_ref().map(|p| g.constant(p.clone()));
        BoundWeights { layers, output_head, value_slice, leaves }
    }

    /// The block stack, pre-norm: each sublayer reads a normalized view
    /// of the residual stream and adds back into it, and a final layer
    /// norm closes the stack. Returns hidden states [S, N', B].
    pub(crate) fn hidden(
        &self,
        g: &mut Graph,
        x: NodeId,
        bound: &BoundWeights,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let scale = (self.cfg.head_dim as f64).sqrt();
        let mut h = x;
        for layer in &bound.layers {
            let normed = g.layer_norm(h, LAYER_NORM_EPS)?;
            let mut head_outputs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = g.matmul(normed, head.w_q)?;
                let k = g.matmul(normed, head.w_k)?;
                let v = match (head.w_v, bound.value_slice) {
                    (Some(wv), _) => g.matmul(normed, wv)?,
                    (None, Some(p)) => g.matmul(normed, p)?,
                    (None, None) => unreachable!("omit_wv without slice projection"),
                };
                let scores = g.bmm_nt(q, k)?;
                let mut probs = g.causal_softmax_rows(scores, scale)?;
                probs = self.apply_dropout(g, probs, &mut dropout);
                head_outputs.push(g.bmm(probs, v)?);
            }
            let merged = g.concat_last(&head_outputs)?;
            let mut attn = g.matmul(merged, layer.w_o)?;
            attn = self.apply_dropout(g, attn, &mut dropout);
            h = g.add(h, attn)?;

            // A frozen FFN contributes exactly zero: the residual
            // stream passes through untouched.
            if let Some(ffn) = &layer.ffn {
                let normed = g.layer_norm(h, LAYER_NORM_EPS)?;
                let pre = g.matmul(normed, ffn.w1)?;
                let pre = g.add_bias(pre, ffn.b1)?;
                let act = g.gelu(pre);
                let out = g.matmul(act, ffn.w2)?;
                let mut out = g.add_bias(out, ffn.b2)?;
                out = self.apply_dropout(g, out, &mut dropout);
                h = g.add(h, out)?;
            }
        }
        g.layer_norm(h, LAYER_NORM_EPS)
    }

    fn apply_dropout(&self, g: &mut Graph, x: NodeId, dropout: &mut Option<&mut ChaCha8Rng>) -> NodeId {
        let rate = self.cfg.dropout;
        match dropout {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mut mask = Tensor::zeros(g.value(x).shape());
                for v in mask.data_mut() {
                    *v = if rng::uniform(rng) < keep { 1.0 / keep } else { 0.0 };
                }
                let mask = g.constant(mask);
                g.mul(x, mask).expect("mask shape matches")
            }
            _ => x,
        }
    }

    /// Full forward pass: logits for every position, shape [N', T].
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let x = self.embed_sequences(&[tokens])?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let bound = self.bind(&mut g, false);
        let h = self.hidden(&mut g, xid, &bound, None)?;
        let logits = g.matmul(h, bound.output_head)?;
        let n = tokens.len();
        g.value(logits).clone().reshaped(vec![n, self.cfg.vocab_size])
    }

    /// Logits at one position for a batch of equal-length sequences,
    /// shape [S, T]. This is the measurement path: `target_pos` is the
    /// position whose next-token prediction is read out.
    pub fn position_logits_batch(&self, seqs: &[&[u32]], target_pos: usize) -> Result<Tensor> {
        let x = self.embed_sequences(seqs)?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let bound = self.bind(&mut g, false);
        let h = self.hidden(&mut g, xid, &bound, None)?;
        let last = g.take_position(h, target_pos)?;
        let logits = g.matmul(last, bound.output_head)?;
        Ok(g.value(logits).clone())
    }

    /// Greedy next-token prediction from a prefix: argmax over the
    /// logits at the last prefix position, ties broken by lowest id.
    pub fn predict_next(&self, prefix: &[u32]) -> Result<u32> {
        let logits = self.forward(prefix)?;
        let last = prefix.len() - 1;
        let row = &logits.data()[last * self.cfg.vocab_size..(last + 1) * self.cfg.vocab_size];
        Ok(argmax_lowest(row))
    }
}

/// Zero-means and unit-normalizes each B-length column of a B × T head.
fn normalize_head_columns(head: &mut Tensor, b: usize, t: usize) {
    let data = head.data_mut();
    for col in 0..t {
        let mean = (0..b).map(|row| data[row * t + col]).sum::<f64>() / b as f64;
        let mut norm_sq = 0.0;
        for row in 0..b {
            data[row * t + col] -= mean;
            norm_sq += data[row * t + col] * data[row * t + col];
        }
        let inv = 1.0 / norm_sq.sqrt().max(1e-12);
        for row in 0..b {
            data[row * t + col] *= inv;
        }
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax_lowest(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) struct BoundHead {
    w_q: NodeId,
    w_k: NodeId,
    w_v: Option<NodeId>,
}

pub(crate) struct BoundFfn {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

pub(crate) struct BoundLayer {
    heads: Vec<BoundHead>,
    w_o: NodeId,
    ffn: Option<BoundFfn>,
}

pub(crate) struct BoundWeights {
    layers: Vec<BoundLayer>,
    pub(crate) output_head: NodeId,
    value_slice: Option<NodeId>,
    /// Census-ordered gradient leaves when bound trainable.
    pub(crate) leaves: Vec<NodeId>,
}

/// One causally masked attention head on a single sequence:
/// softmax(Q·Kᵀ/√d_h)·V with Q = X·W_Q, K = X·W_K, V = X·W_V.
pub fn attention_head(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "attention_head",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = x.shape()[0];
    let d_h = w_q.shape().get(1).copied().unwrap_or(0);
    let mut g = Graph::new();
    let xid = g.constant(x.clone().reshaped(vec![1, n, x.last_dim()])?);
    let (wq, wk, wv) = (g.constant(w_q.clone()), g.constant(w_k.clone()), g.constant(w_v.clone()));
    let q = g.matmul(xid, wq)?;
    let k = g.matmul(xid, wk)?;
    let v = g.matmul(xid, wv)?;
    let scores = g.bmm_nt(q, k)?;
    let probs = g.causal_softmax_rows(scores, (d_h as f64).sqrt())?;
    let out = g.bmm(probs, v)?;
    g.value(out).clone().reshaped(vec![n, d_h])
}

/// The quadratic-form view of attention scores: X·W_A·Xᵀ. With
/// W_A = W_Q·W_Kᵀ this equals Q·Kᵀ before masking and softmax.
pub fn quadratic_form_scores(x: &Tensor, w_a: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w_a.ndim() != 2 || w_a.shape() != [x.last_dim(), x.last_dim()] {
        return Err(Error::ShapeMismatch {
            op: "quadratic_form_scores",
            lhs: x.shape().to_vec(),
            rhs: w_a.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xid = g.constant(x.clone());
    let wa = g.constant(w_a.clone());
    let xt = g.constant(x.transposed_2d()?);
    let xa = g.matmul(xid, wa)?;
    let scores = g.matmul(xa, xt)?;
    Ok(g.value(scores).clone())
}

// ── Checkpoint format ────────────────────────────────────────────────
//
// Self-describing little-endian container:
//   magic "ATNCKPT1", u32 version, u64 seed,
//   u32 config-JSON length + bytes,
//   u32 tensor count, then per tensor:
//     u16 name length + UTF-8 name, u8 ndim, u64 dims…, f64 data…

const CKPT_MAGIC: &[u8; 8] = b"ATNCKPT1";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = vec![
        ("token_embedding".into(), &params.token_embedding),
        ("positional_embedding".into(), &params.positional_embedding),
        ("output_head".into(), &params.output_head),
    ];
    if let Some(p) = &params.value_slice {
        named.push(("value_slice".into(), p));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            named.push((format!("layer{l}.head{h}.wq"), &head.w_q));
            named.push((format!("layer{l}.head{h}.wk"), &head.w_k));
            if let Some(wv) = &head.w_v {
                named.push((format!("layer{l}.head{h}.wv"), wv));
            }
        }
        named.push((format!("layer{l}.wo"), &layer.w_o));
        named.push((format!("layer{l}.ffn.w1"), &layer.ffn.w1));
        named.push((format!("layer{l}.ffn.b1"), &layer.ffn.b1));
        named.push((format!("layer{l}.ffn.w2"), &layer.ffn.w2));
        named.push((format!("layer{l}.ffn.b2"), &layer.ffn.b2));
    }

    let cfg_json = serde_json::to_vec(&params.cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&params.seed.to_le_bytes())?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in named {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.ndim() as u8).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    cfg.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }

    let mut take = |name: String| -> Result<Tensor> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
    };
    let token_embedding = take("token_embedding".into())?;
    let positional_embedding = take("positional_embedding".into())?;
    let output_head = take("output_head".into())?;
    let value_slice = if cfg.omit_wv { Some(take("value_slice".into())?) } else { None };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(HeadWeights {
                w_q: take(format!("layer{l}.head{h}.wq"))?,
                w_k: take(format!("layer{l}.head{h}.wk"))?,
                w_v: if cfg.omit_wv { None } else { Some(take(format!("layer{l}.head{h}.wv"))?) },
            });
        }
        layers.push(LayerWeights {
            heads,
            w_o: take(format!("layer{l}.wo"))?,
            ffn: FfnWeights {
                w1: take(format!("layer{l}.ffn.w1"))?,
                b1: take(format!("layer{l}.ffn.b1"))?,
                w2: take(format!("layer{l}.ffn.w2"))?,
                b2: take(format!("layer{l}.ffn.b2"))?,
            },
        });
    }
    Ok(ModelParams {
        cfg,
        seed,
        token_embedding,
        positional_embedding,
        layers,
        output_head,
        value_slice,
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
