//! A toy decoder-only transformer (RMS-normalized, causal multi-head
//! attention, gated-SiLU FFN) with three transformation injection points:
//! a global affine map on the residual stream, a per-layer affine map on the
//! concatenated value vectors, and an online block-Hadamard in front of the
//! FFN down-projection. The folding operations absorb the first two into
//! adjacent weights and biases exactly; the third keeps one online multiply
//! and folds its transpose into the down-projection.
//!
//! Two forward implementations exist on purpose. [`forward_fp`] is a plain
//! hand-written pass (the teacher, and the reference for equivalence
//! checks). [`forward_transformed`] runs on the differentiation tape so the
//! same graph serves training. They share no code beyond the weight structs,
//! which makes agreement between them a meaningful check.
//!
//! Normalization semantics: the transformed network applies the gainless RMS
//! body directly to the transformed stream (no re-normalization in original
//! coordinates). A general affine stream transform therefore changes the
//! function; training closes that gap through distillation. Folding
//! equivalence is always checked between the injected and folded forms of
//! the *same* transformed function, where it is exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diagonal, hadamard, matmul, Matrix};
use crate::mxquant::MxConfig;
use crate::tape::{NodeId, QuantMode, Tape};
use crate::transform::AffineTransform;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub has_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 64,
            has_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Biases are always materialized; `has_bias: false` only zero-initializes
/// them. Folding a shifted transform writes into them either way, which is
/// the "negligible extra cost" story for bias-free models.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub gain_attn: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub bo: Vec<f64>,
    pub gain_ffn: Vec<f64>,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
    pub b_up: Vec<f64>,
    pub b_gate: Vec<f64>,
    pub b_down: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub gain_final: Vec<f64>,
    pub w_head: Matrix,
    pub b_head: Vec<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for t in m.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *t = std * z;
    }
    m
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

impl ModelWeights {
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dff = config.d_ff;
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (dff as f64).sqrt();
        let b_std = if config.has_bias { 0.02 } else { 0.0 };
        let gain = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            normal_vec(rng, n, 0.05).into_iter().map(|g| 1.0 + g).collect()
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                gain_attn: gain(&mut rng, d),
                wq: normal_matrix(&mut rng, d, d, w_std),
                wk: normal_matrix(&mut rng, d, d, w_std),
                wv: normal_matrix(&mut rng, d, d, w_std),
                wo: normal_matrix(&mut rng, d, d, w_std),
                bq: normal_vec(&mut rng, d, b_std),
                bk: normal_vec(&mut rng, d, b_std),
                bv: normal_vec(&mut rng, d, b_std),
                bo: normal_vec(&mut rng, d, b_std),
                gain_ffn: gain(&mut rng, d),
                w_up: normal_matrix(&mut rng, dff, d, w_std),
                w_gate: normal_matrix(&mut rng, dff, d, w_std),
                w_down: normal_matrix(&mut rng, d, dff, ff_std),
                b_up: normal_vec(&mut rng, dff, b_std),
                b_gate: normal_vec(&mut rng, dff, b_std),
                b_down: normal_vec(&mut rng, d, b_std),
            })
            .collect();
        ModelWeights {
            embedding: normal_matrix(&mut rng, config.vocab_size, d, 1.0),
            layers,
            gain_final: gain(&mut rng, d),
            w_head: normal_matrix(&mut rng, config.vocab_size, d, w_std),
            b_head: normal_vec(&mut rng, config.vocab_size, b_std),
        }
    }

    /// Add a constant offset to a set of residual-stream channels at the
    /// embedding. The stream is additive, so the offset persists through
    /// every layer: the channels become near-constant massive activations,
    /// removable by a shift but not by any linear map.
    pub fn offset_stream_channels(&mut self, channels: &[usize], delta: f64) {
        let d = self.embedding.cols();
        for &c in channels {
            assert!(c < d, "channel {c} out of range");
            for r in 0..self.embedding.rows() {
                let v = self.embedding.get(r, c) + delta;
                self.embedding.set(r, c, v);
            }
        }
    }

    /// Amplify a set of residual-stream channels everywhere they are
    /// written: embedding columns and the output rows of both per-layer
    /// producers. This plants persistent outlier channels of the kind the
    /// transforms are meant to suppress.
    pub fn amplify_stream_channels(&mut self, channels: &[usize], scale: f64) {
        let d = self.embedding.cols();
        for &c in channels {
            assert!(c < d, "channel {c} out of range");
            for r in 0..self.embedding.rows() {
                let v = self.embedding.get(r, c) * scale;
                self.embedding.set(r, c, v);
            }
            for lw in &mut self.layers {
                for j in 0..lw.wo.cols() {
                    let v = lw.wo.get(c, j) * scale;
                    lw.wo.set(c, j, v);
                }
                lw.bo[c] *= scale;
                for j in 0..lw.w_down.cols() {
                    let v = lw.w_down.get(c, j) * scale;
                    lw.w_down.set(c, j, v);
                }
                lw.b_down[c] *= scale;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let vec_ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.embedding.all_finite()
            && self.w_head.all_finite()
            && vec_ok(&self.b_head)
            && vec_ok(&self.gain_final)
            && self.layers.iter().all(|lw| {
                lw.wq.all_finite()
                    && lw.wk.all_finite()
                    && lw.wv.all_finite()
                    && lw.wo.all_finite()
                    && lw.w_up.all_finite()
                    && lw.w_gate.all_finite()
                    && lw.w_down.all_finite()
                    && vec_ok(&lw.gain_attn)
                    && vec_ok(&lw.gain_ffn)
                    && vec_ok(&lw.bq)
                    && vec_ok(&lw.bk)
                    && vec_ok(&lw.bv)
                    && vec_ok(&lw.bo)
                    && vec_ok(&lw.b_up)
                    && vec_ok(&lw.b_gate)
                    && vec_ok(&lw.b_down)
            })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_model;
        let dff = config.d_ff;
        let shape_ok = (self.embedding.rows(), self.embedding.cols()) == (config.vocab_size, d)
            && (self.w_head.rows(), self.w_head.cols()) == (config.vocab_size, d)
            && self.b_head.len() == config.vocab_size
            && self.gain_final.len() == d
            && self.layers.len() == config.n_layers
            && self.layers.iter().all(|lw| {
                [&lw.wq, &lw.wk, &lw.wv, &lw.wo].iter().all(|w| (w.rows(), w.cols()) == (d, d))
                    && (lw.w_up.rows(), lw.w_up.cols()) == (dff, d)
                    && (lw.w_gate.rows(), lw.w_gate.cols()) == (dff, d)
                    && (lw.w_down.rows(), lw.w_down.cols()) == (d, dff)
                    && lw.gain_attn.len() == d
                    && lw.gain_ffn.len() == d
                    && [&lw.bq, &lw.bk, &lw.bv, &lw.bo, &lw.b_down].iter().all(|b| b.len() == d)
                    && lw.b_up.len() == dff
                    && lw.b_gate.len() == dff
            });
        if !shape_ok {
            return Err(Error::InvalidArgument("weight shapes inconsistent with model config".into()));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }
}

/// Pick `count` distinct channel indices in `0..d`, seeded.
pub fn pick_channels(d: usize, count: usize, seed: u64) -> Vec<usize> {
    assert!(count <= d, "cannot pick {count} of {d} channels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..d).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let mut picked: Vec<usize> = idx.into_iter().take(count).collect();
    picked.sort_unstable();
    picked
}

// ---------------------------------------------------------------------------
// Plain forward pass.

#[derive(Clone, Copy, PartialEq, Eq)]
enum NormMode {
    Rms,
    /// Drop the 1/rms scaling and keep only the gain multiply. Used by the
    /// folding harness to check the stream-transform algebra in isolation,
    /// where it must be exact for arbitrary invertible maps.
    Linearized,
}

fn validate_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {t} out of vocabulary (size {})",
            config.vocab_size
        )));
    }
    Ok(())
}

fn embed_rows(weights: &ModelWeights, tokens: &[u32]) -> Matrix {
    let d = weights.embedding.cols();
    let mut m = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        m.row_mut(i).copy_from_slice(weights.embedding.row(t as usize));
    }
    m
}

fn norm_gain(x: &Matrix, gain: &[f64], mode: NormMode) -> Matrix {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..out.rows() {
        let r = match mode {
            NormMode::Rms => {
                let ms = x.row(i).iter().map(|t| t * t).sum::<f64>() / d;
                1.0 / (ms + RMS_EPS).sqrt()
            }
            NormMode::Linearized => 1.0,
        };
        for (t, g) in out.row_mut(i).iter_mut().zip(gain) {
            *t *= r * g;
        }
    }
    out
}

/// `x · w^T + b` for row-major activations.
fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    assert_eq!(x.cols(), w.cols(), "linear input width mismatch");
    assert_eq!(w.rows(), b.len(), "bias length mismatch");
    let mut out = matmul(x, &w.transpose());
    for i in 0..out.rows() {
        for (t, bi) in out.row_mut(i).iter_mut().zip(b) {
            *t += bi;
        }
    }
    out
}

fn silu_gate(up: &Matrix, gate: &Matrix) -> Matrix {
    let mut out = gate.clone();
    for (t, u) in out.data_mut().iter_mut().zip(up.data()) {
        let s = 1.0 / (1.0 + (-*t).exp());
        *t = *t * s * u;
    }
    out
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Matrix, Vec<Matrix>) {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut probs_out = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let c0 = h * dh;
        let mut probs = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let dot: f64 = (0..dh).map(|t| q.get(i, c0 + t) * k.get(j, c0 + t)).sum();
                probs.set(i, j, dot * scale);
            }
            let m = (0..=i).map(|j| probs.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (probs.get(i, j) - m).exp();
                probs.set(i, j, e);
                z += e;
            }
            for j in 0..=i {
                let p = probs.get(i, j) / z;
                probs.set(i, j, p);
            }
            for t in 0..dh {
                let mix: f64 = (0..=i).map(|j| probs.get(i, j) * v.get(j, c0 + t)).sum();
                ctx.set(i, c0 + t, mix);
            }
        }
        probs_out.push(probs);
    }
    (ctx, probs_out)
}

/// Everything the plain forward pass can report: logits, per-layer residual
/// streams (after the layer), per-layer per-head attention probabilities,
/// and the gain-scaled norm outputs that feed each stream-transformable
/// linear (K/Q/V input and FFN input per layer, then the head input).
pub struct FpTrace {
    pub logits: Matrix,
    pub residual_streams: Vec<Matrix>,
    pub attn_probs: Vec<Vec<Matrix>>,
    pub t1_inputs: Vec<Matrix>,
}

fn forward_core(weights: &ModelWeights, config: &ModelConfig, tokens: &[u32], mode: NormMode) -> Result<FpTrace> {
    validate_tokens(config, tokens)?;
    let mut stream = embed_rows(weights, tokens);
    let mut residual_streams = Vec::with_capacity(config.n_layers);
    let mut attn_probs = Vec::with_capacity(config.n_layers);
    let mut t1_inputs = Vec::with_capacity(2 * config.n_layers + 1);
    for lw in &weights.layers {
        let a_in = norm_gain(&stream, &lw.gain_attn, mode);
        t1_inputs.push(a_in.clone());
        let q = linear(&a_in, &lw.wq, &lw.bq);
        let k = linear(&a_in, &lw.wk, &lw.bk);
        let v = linear(&a_in, &lw.wv, &lw.bv);
        let (ctx, probs) = causal_attention(&q, &k, &v, config.n_heads);
        attn_probs.push(probs);
        let o = linear(&ctx, &lw.wo, &lw.bo);
        stream = stream.add(&o);

        let f_in = norm_gain(&stream, &lw.gain_ffn, mode);
        t1_inputs.push(f_in.clone());
        let up = linear(&f_in, &lw.w_up, &lw.b_up);
        let gate = linear(&f_in, &lw.w_gate, &lw.b_gate);
        let act = silu_gate(&up, &gate);
        let down = linear(&act, &lw.w_down, &lw.b_down);
        stream = stream.add(&down);
        residual_streams.push(stream.clone());
    }
    let f_in = norm_gain(&stream, &weights.gain_final, mode);
    t1_inputs.push(f_in.clone());
    let logits = linear(&f_in, &weights.w_head, &weights.b_head);
    Ok(FpTrace { logits, residual_streams, attn_probs, t1_inputs })
}

/// Standard full-precision causal forward pass.
pub fn forward_fp(weights: &ModelWeights, config: &ModelConfig, tokens: &[u32]) -> Result<Matrix> {
    Ok(forward_core(weights, config, tokens, NormMode::Rms)?.logits)
}

pub fn forward_fp_detailed(weights: &ModelWeights, config: &ModelConfig, tokens: &[u32]) -> Result<FpTrace> {
    forward_core(weights, config, tokens, NormMode::Rms)
}

/// Forward pass with normalization replaced by its gain-only linearization.
/// Only meaningful for folding-algebra checks; not a model anyone deploys.
pub fn forward_fp_norm_linearized(weights: &ModelWeights, config: &ModelConfig, tokens: &[u32]) -> Result<Matrix> {
    Ok(forward_core(weights, config, tokens, NormMode::Linearized)?.logits)
}

/// All gain-scaled norm outputs feeding stream-consuming linears, stacked as
/// rows over the given sequences. This is the activation population the
/// stream transform is trained and evaluated on.
pub fn collect_t1_inputs(weights: &ModelWeights, config: &ModelConfig, seqs: &[Vec<u32>]) -> Result<Matrix> {
    let d = config.d_model;
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for seq in seqs {
        let trace = forward_core(weights, config, seq, NormMode::Rms)?;
        for m in &trace.t1_inputs {
            rows.extend_from_slice(m.data());
            count += m.rows();
        }
    }
    Ok(Matrix::from_vec(count, d, rows))
}

// ---------------------------------------------------------------------------
// Transform plumbing.

#[derive(Debug, Clone)]
pub struct TransformSet {
    pub t1: AffineTransform,
    /// One per layer, applied per token to the concatenated value vector.
    /// Must be block-diagonal at head granularity: attention mixes each head
    /// with its own softmax weights, so only per-head blocks commute with
    /// the mixing (the shift passes through because rows sum to one).
    pub t2: Vec<AffineTransform>,
    pub t3_enabled: bool,
}

impl TransformSet {
    pub fn identity(config: &ModelConfig) -> Self {
        TransformSet {
            t1: AffineTransform::identity(config.d_model),
            t2: (0..config.n_layers).map(|_| AffineTransform::identity(config.d_model)).collect(),
            t3_enabled: false,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        if self.t1.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "stream transform dim {} != d_model {d}",
                self.t1.dim()
            )));
        }
        if self.t2.len() != config.n_layers {
            return Err(Error::InvalidArgument(format!(
                "{} value transforms for {} layers",
                self.t2.len(),
                config.n_layers
            )));
        }
        let dh = config.d_head();
        for (l, t2) in self.t2.iter().enumerate() {
            if t2.dim() != d {
                return Err(Error::InvalidArgument(format!("value transform {l} has dim {}", t2.dim())));
            }
            for i in 0..d {
                for j in 0..d {
                    if i / dh != j / dh && t2.a().get(i, j).abs() > 1e-12 {
                        return Err(Error::InvalidArgument(format!(
                            "value transform {l} is not head-block-diagonal at ({i},{j})"
                        )));
                    }
                }
            }
        }
        let mut members: Vec<(String, &AffineTransform)> = vec![("stream transform".into(), &self.t1)];
        for (l, t) in self.t2.iter().enumerate() {
            members.push((format!("value transform {l}"), t));
        }
        for (name, t) in members {
            let res = t.max_inverse_residual();
            if !(res <= 1e-6) {
                return Err(Error::InvalidArgument(format!("{name} inverse residual {res:.3e} too large")));
            }
        }
        Ok(())
    }
}

/// Which linear inputs get MX quantize-dequantized in the transformed
/// forward pass, and with what format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPoints {
    pub mx: MxConfig,
    pub kqv_input: bool,
    pub oproj_input: bool,
    pub ffn_input: bool,
    pub down_input: bool,
    pub head_input: bool,
}

impl QuantPoints {
    pub fn all(mx: MxConfig) -> Self {
        QuantPoints { mx, kqv_input: true, oproj_input: true, ffn_input: true, down_input: true, head_input: true }
    }

    pub fn none(mx: MxConfig) -> Self {
        QuantPoints { mx, kqv_input: false, oproj_input: false, ffn_input: false, down_input: false, head_input: false }
    }

    fn any(&self) -> bool {
        self.kqv_input || self.oproj_input || self.ffn_input || self.down_input || self.head_input
    }
}

/// A general-position random transform set: full affine stream transform
/// with shift, head-block-diagonal affine value transforms with shifts.
pub fn random_transform_set(config: &ModelConfig, seed: u64, t3_enabled: bool) -> TransformSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let dh = config.d_head();
    let near_identity = |rng: &mut ChaCha8Rng, n: usize| -> Matrix {
        Matrix::identity(n).add(&normal_matrix(rng, n, n, 0.2 / (n as f64).sqrt()))
    };
    let t1 = AffineTransform::new(near_identity(&mut rng, d), normal_vec(&mut rng, d, 0.3))
        .expect("near-identity matrix is invertible");
    let t2 = (0..config.n_layers)
        .map(|_| {
            let blocks: Vec<Matrix> = (0..config.n_heads).map(|_| near_identity(&mut rng, dh)).collect();
            AffineTransform::new(block_diagonal(&blocks), normal_vec(&mut rng, d, 0.3))
                .expect("near-identity blocks are invertible")
        })
        .collect();
    TransformSet { t1, t2, t3_enabled }
}

// ---------------------------------------------------------------------------
// Tape-side transformed forward.

pub(crate) struct TransformNodes {
    pub a1: NodeId,
    pub a1_inv: NodeId,
    /// 1 x d row.
    pub v1: NodeId,
    /// Per layer: (a2, a2_inv, v2-row).
    pub t2: Vec<(NodeId, NodeId, NodeId)>,
}

pub(crate) fn constant_transform_nodes(tape: &mut Tape, set: &TransformSet) -> TransformNodes {
    let row = |tape: &mut Tape, v: &[f64]| tape.constant(Matrix::from_vec(1, v.len(), v.to_vec()));
    let a1 = tape.constant(set.t1.a().clone());
    let a1_inv = tape.constant(set.t1.a_inv().clone());
    let v1 = row(tape, set.t1.v());
    let t2 = set
        .t2
        .iter()
        .map(|t| {
            let a2 = tape.constant(t.a().clone());
            let a2_inv = tape.constant(t.a_inv().clone());
            let v2 = row(tape, t.v());
            (a2, a2_inv, v2)
        })
        .collect();
    TransformNodes { a1, a1_inv, v1, t2 }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum T3Mode {
    Off,
    /// Online transform plus its inverse (weights unfolded): training and
    /// injection view.
    Paired(usize),
    /// Online transform only (transpose already folded into the
    /// down-projection): deployed view.
    OnlineOnly(usize),
}

pub(crate) struct GraphOut {
    pub logits: NodeId,
    /// Per-layer residual stream mapped back to original coordinates.
    pub block_streams: Vec<NodeId>,
}

struct LayerConsts {
    wq_t: NodeId,
    wk_t: NodeId,
    wv_t: NodeId,
    wo_t: NodeId,
    wup_t: NodeId,
    wgate_t: NodeId,
    wdown_t: NodeId,
    bq: NodeId,
    bk: NodeId,
    bv: NodeId,
    bo: NodeId,
    bup: NodeId,
    bgate: NodeId,
    bdown: NodeId,
}

/// `diag(gain) · w^T`: the right-multiplication matrix for a consumer linear
/// with its preceding norm gain folded in.
fn folded_weight_t(w: &Matrix, gain: &[f64]) -> Matrix {
    assert_eq!(w.cols(), gain.len(), "gain length mismatch");
    let mut out = Matrix::zeros(w.cols(), w.rows());
    for i in 0..w.cols() {
        for j in 0..w.rows() {
            out.set(i, j, gain[i] * w.get(j, i));
        }
    }
    out
}

fn lin_node(tape: &mut Tape, x: NodeId, w_t: NodeId, b: NodeId) -> NodeId {
    let m = tape.matmul(x, w_t);
    tape.add_row_broadcast(m, b)
}

/// `A^{-1}(y - v)` in row form given precomputed `transpose(a_inv)` and
/// `-(v · a_inv^T)`.
fn affine_unapply(tape: &mut Tape, y: NodeId, a_inv_t: NodeId, neg_shift: NodeId) -> NodeId {
    let m = tape.matmul(y, a_inv_t);
    tape.add_row_broadcast(m, neg_shift)
}

pub(crate) fn build_transformed_graph(
    tape: &mut Tape,
    weights: &ModelWeights,
    config: &ModelConfig,
    tn: &TransformNodes,
    qp: &QuantPoints,
    mode: QuantMode,
    t3: T3Mode,
    tokens: &[u32],
) -> Result<GraphOut> {
    validate_tokens(config, tokens)?;
    let d = config.d_model;
    let dh = config.d_head();
    let b = qp.mx.block_size;
    if qp.any() || matches!(t3, T3Mode::Paired(_) | T3Mode::OnlineOnly(_)) {
        if d % b != 0 {
            return Err(Error::InvalidConfig(format!("d_model {d} not divisible by block size {b}")));
        }
        if config.d_ff % b != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_ff {} not divisible by block size {b}",
                config.d_ff
            )));
        }
    }
    let h3_nodes = match t3 {
        T3Mode::Off => None,
        T3Mode::Paired(hb) | T3Mode::OnlineOnly(hb) => {
            let h = hadamard(hb, false, 0)?;
            if config.d_ff % hb != 0 {
                return Err(Error::InvalidConfig(format!(
                    "d_ff {} not divisible by online-transform block {hb}",
                    config.d_ff
                )));
            }
            let full = block_diagonal(&vec![h; config.d_ff / hb]);
            let h3_t = tape.constant(full.transpose());
            let h3 = tape.constant(full);
            Some((h3_t, h3))
        }
    };

    let a1_t = tape.transpose(tn.a1);
    let a1_inv_t = tape.transpose(tn.a1_inv);
    let v1_rot = tape.matmul(tn.v1, a1_inv_t);
    let neg_v1 = tape.scale(v1_rot, -1.0);

    let layer_consts: Vec<LayerConsts> = weights
        .layers
        .iter()
        .map(|lw| {
            let row = |tape: &mut Tape, v: &[f64]| tape.constant(Matrix::from_vec(1, v.len(), v.to_vec()));
            LayerConsts {
                wq_t: tape.constant(folded_weight_t(&lw.wq, &lw.gain_attn)),
                wk_t: tape.constant(folded_weight_t(&lw.wk, &lw.gain_attn)),
                wv_t: tape.constant(folded_weight_t(&lw.wv, &lw.gain_attn)),
                wo_t: tape.constant(lw.wo.transpose()),
                wup_t: tape.constant(folded_weight_t(&lw.w_up, &lw.gain_ffn)),
                wgate_t: tape.constant(folded_weight_t(&lw.w_gate, &lw.gain_ffn)),
                wdown_t: tape.constant(lw.w_down.transpose()),
                bq: row(tape, &lw.bq),
                bk: row(tape, &lw.bk),
                bv: row(tape, &lw.bv),
                bo: row(tape, &lw.bo),
                bup: row(tape, &lw.b_up),
                bgate: row(tape, &lw.b_gate),
                bdown: row(tape, &lw.b_down),
            }
        })
        .collect();
    let whead_t = tape.constant(folded_weight_t(&weights.w_head, &weights.gain_final));
    let bhead = tape.constant(Matrix::from_vec(1, weights.b_head.len(), weights.b_head.clone()));

    // Residual stream in transformed coordinates from the first node on.
    let emb = tape.constant(embed_rows(weights, tokens));
    let emb_rot = tape.matmul(emb, a1_t);
    let mut stream = tape.add_row_broadcast(emb_rot, tn.v1);
    let mut block_streams = Vec::with_capacity(config.n_layers);

    for (lc, &(a2, a2_inv, v2)) in layer_consts.iter().zip(&tn.t2) {
        let a2_t = tape.transpose(a2);
        let a2_inv_t = tape.transpose(a2_inv);
        let v2_rot = tape.matmul(v2, a2_inv_t);
        let neg_v2 = tape.scale(v2_rot, -1.0);

        let n1 = tape.rmsnorm_rows(stream, RMS_EPS);
        let n1q = if qp.kqv_input { tape.ste_quantize(n1, &qp.mx, mode) } else { n1 };
        let x = affine_unapply(tape, n1q, a1_inv_t, neg_v1);
        let q = lin_node(tape, x, lc.wq_t, lc.bq);
        let k = lin_node(tape, x, lc.wk_t, lc.bk);
        let v = lin_node(tape, x, lc.wv_t, lc.bv);
        let v_rot = tape.matmul(v, a2_t);
        let vt = tape.add_row_broadcast(v_rot, v2);

        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(vt, h * dh, (h + 1) * dh);
            let kh_t = tape.transpose(kh);
            let sc = tape.matmul(qh, kh_t);
            let scs = tape.scale(sc, 1.0 / (dh as f64).sqrt());
            let p = tape.causal_softmax_rows(scs);
            heads.push(tape.matmul(p, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let ctxq = if qp.oproj_input { tape.ste_quantize(ctx, &qp.mx, mode) } else { ctx };
        let o_in = affine_unapply(tape, ctxq, a2_inv_t, neg_v2);
        let o = lin_node(tape, o_in, lc.wo_t, lc.bo);
        let o_rot = tape.matmul(o, a1_t);
        stream = tape.add(stream, o_rot);

        let n2 = tape.rmsnorm_rows(stream, RMS_EPS);
        let n2q = if qp.ffn_input { tape.ste_quantize(n2, &qp.mx, mode) } else { n2 };
        let fx = affine_unapply(tape, n2q, a1_inv_t, neg_v1);
        let up = lin_node(tape, fx, lc.wup_t, lc.bup);
        let gate = lin_node(tape, fx, lc.wgate_t, lc.bgate);
        let sg = tape.silu(gate);
        let act = tape.mul_elem(sg, up);
        let pre_down = match (t3, h3_nodes) {
            (T3Mode::Off, _) | (_, None) => {
                if qp.down_input {
                    tape.ste_quantize(act, &qp.mx, mode)
                } else {
                    act
                }
            }
            (T3Mode::Paired(_), Some((h3_t, h3))) => {
                let rot = tape.matmul(act, h3_t);
                let rq = if qp.down_input { tape.ste_quantize(rot, &qp.mx, mode) } else { rot };
                tape.matmul(rq, h3)
            }
            (T3Mode::OnlineOnly(_), Some((h3_t, _))) => {
                let rot = tape.matmul(act, h3_t);
                if qp.down_input {
                    tape.ste_quantize(rot, &qp.mx, mode)
                } else {
                    rot
                }
            }
        };
        let down = lin_node(tape, pre_down, lc.wdown_t, lc.bdown);
        let down_rot = tape.matmul(down, a1_t);
        stream = tape.add(stream, down_rot);
        block_streams.push(affine_unapply(tape, stream, a1_inv_t, neg_v1));
    }

    let nf = tape.rmsnorm_rows(stream, RMS_EPS);
    let nfq = if qp.head_input { tape.ste_quantize(nf, &qp.mx, mode) } else { nf };
    let hx = affine_unapply(tape, nfq, a1_inv_t, neg_v1);
    let logits = lin_node(tape, hx, whead_t, bhead);
    Ok(GraphOut { logits, block_streams })
}

/// Forward pass with the transforms injected and real MX
/// quantize-dequantize at the selected points. The online block transform
/// (when enabled) uses the MX block size.
pub fn forward_transformed(
    weights: &ModelWeights,
    config: &ModelConfig,
    transforms: &TransformSet,
    qpoints: &QuantPoints,
    tokens: &[u32],
) -> Result<Matrix> {
    transforms.validate(config)?;
    let mut tape = Tape::new();
    let tn = constant_transform_nodes(&mut tape, transforms);
    let t3 = if transforms.t3_enabled { T3Mode::Paired(qpoints.mx.block_size) } else { T3Mode::Off };
    let out = build_transformed_graph(&mut tape, weights, config, &tn, qpoints, QuantMode::Real, t3, tokens)?;
    Ok(tape.value(out.logits).clone())
}

/// Forward pass of an already-folded model: identity transforms, optional
/// online block transform in front of the (already transpose-folded)
/// down-projection, MX quantize-dequantize at the selected points.
pub fn forward_deployed(
    weights: &ModelWeights,
    config: &ModelConfig,
    qpoints: &QuantPoints,
    tokens: &[u32],
    t3_online: bool,
) -> Result<Matrix> {
    let set = TransformSet::identity(config);
    let mut tape = Tape::new();
    let tn = constant_transform_nodes(&mut tape, &set);
    let t3 = if t3_online { T3Mode::OnlineOnly(qpoints.mx.block_size) } else { T3Mode::Off };
    let out = build_transformed_graph(&mut tape, weights, config, &tn, qpoints, QuantMode::Real, t3, tokens)?;
    Ok(tape.value(out.logits).clone())
}

// ---------------------------------------------------------------------------
// Folding.

fn scale_cols(w: &Matrix, g: &[f64]) -> Matrix {
    assert_eq!(w.cols(), g.len(), "gain length mismatch");
    let mut out = w.clone();
    for i in 0..out.rows() {
        for (t, gi) in out.row_mut(i).iter_mut().zip(g) {
            *t *= gi;
        }
    }
    out
}

/// Absorb every norm gain into the following linear layer(s); gains become
/// ones. Output is unchanged because the gain commutes past the
/// normalization body.
pub fn fold_rmsnorm(weights: &ModelWeights) -> ModelWeights {
    let mut out = weights.clone();
    for lw in &mut out.layers {
        lw.wq = scale_cols(&lw.wq, &lw.gain_attn);
        lw.wk = scale_cols(&lw.wk, &lw.gain_attn);
        lw.wv = scale_cols(&lw.wv, &lw.gain_attn);
        lw.gain_attn = vec![1.0; lw.gain_attn.len()];
        lw.w_up = scale_cols(&lw.w_up, &lw.gain_ffn);
        lw.w_gate = scale_cols(&lw.w_gate, &lw.gain_ffn);
        lw.gain_ffn = vec![1.0; lw.gain_ffn.len()];
    }
    out.w_head = scale_cols(&out.w_head, &out.gain_final);
    out.gain_final = vec![1.0; out.gain_final.len()];
    out
}

fn gains_folded(weights: &ModelWeights) -> bool {
    weights.gain_final.iter().all(|&g| g == 1.0)
        && weights
            .layers
            .iter()
            .all(|lw| lw.gain_attn.iter().all(|&g| g == 1.0) && lw.gain_ffn.iter().all(|&g| g == 1.0))
}

/// Consumer side of the stream-transform fold: `W <- W A^{-1}`,
/// `b <- b - (W A^{-1}) v`.
fn fold_consumer(w: &Matrix, bias: &[f64], t: &AffineTransform) -> (Matrix, Vec<f64>) {
    let wa = matmul(w, t.a_inv());
    let shift = wa.matvec(t.v());
    let b = bias.iter().zip(&shift).map(|(b, s)| b - s).collect();
    (wa, b)
}

/// Producer side: `W <- A W`, `b <- A b + v_extra` (no shift for the stream
/// transform itself; the shift enters once at the embedding).
fn fold_producer(w: &Matrix, bias: &[f64], a: &Matrix) -> (Matrix, Vec<f64>) {
    (matmul(a, w), a.matvec(bias))
}

/// Fold the stream transform: consumers (K/Q/V, FFN inputs, head) absorb the
/// inverse, producers (attention output, FFN down) absorb the forward map,
/// the embedding absorbs the full affine transform. Requires norm gains to
/// be ones; with gains present the consumer-side algebra would silently
/// change the function for non-orthogonal maps.
pub fn fold_t1(weights: &ModelWeights, t1: &AffineTransform) -> Result<ModelWeights> {
    let d = weights.embedding.cols();
    if t1.dim() != d {
        return Err(Error::InvalidArgument(format!("transform dim {} != d_model {d}", t1.dim())));
    }
    if !gains_folded(weights) {
        return Err(Error::InvalidArgument(
            "norm gains must be folded before the stream transform (fold_rmsnorm first)".into(),
        ));
    }
    let mut out = weights.clone();
    for lw in &mut out.layers {
        let (w, b) = fold_consumer(&lw.wq, &lw.bq, t1);
        lw.wq = w;
        lw.bq = b;
        let (w, b) = fold_consumer(&lw.wk, &lw.bk, t1);
        lw.wk = w;
        lw.bk = b;
        let (w, b) = fold_consumer(&lw.wv, &lw.bv, t1);
        lw.wv = w;
        lw.bv = b;
        let (w, b) = fold_consumer(&lw.w_up, &lw.b_up, t1);
        lw.w_up = w;
        lw.b_up = b;
        let (w, b) = fold_consumer(&lw.w_gate, &lw.b_gate, t1);
        lw.w_gate = w;
        lw.b_gate = b;
        let (w, b) = fold_producer(&lw.wo, &lw.bo, t1.a());
        lw.wo = w;
        lw.bo = b;
        let (w, b) = fold_producer(&lw.w_down, &lw.b_down, t1.a());
        lw.w_down = w;
        lw.b_down = b;
    }
    let (w, b) = fold_consumer(&out.w_head, &out.b_head, t1);
    out.w_head = w;
    out.b_head = b;
    for r in 0..out.embedding.rows() {
        let folded = t1.apply(out.embedding.row(r));
        out.embedding.row_mut(r).copy_from_slice(&folded);
    }
    Ok(out)
}

/// Fold a value-path transform of one layer: the value projection absorbs
/// the forward map and shift, the output projection absorbs the inverse.
/// Exact because each head's softmax weights sum to one and the transform
/// is head-block-diagonal.
pub fn fold_t2(weights: &ModelWeights, layer: usize, t2: &AffineTransform) -> Result<ModelWeights> {
    let d = weights.embedding.cols();
    if t2.dim() != d {
        return Err(Error::InvalidArgument(format!("transform dim {} != d_model {d}", t2.dim())));
    }
    if layer >= weights.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range ({} layers)",
            weights.layers.len()
        )));
    }
    let mut out = weights.clone();
    let lw = &mut out.layers[layer];
    lw.wv = matmul(t2.a(), &lw.wv);
    lw.bv = t2.a().matvec(&lw.bv).iter().zip(t2.v()).map(|(b, v)| b + v).collect();
    let wa = matmul(&lw.wo, t2.a_inv());
    let shift = wa.matvec(t2.v());
    lw.bo = lw.bo.iter().zip(&shift).map(|(b, s)| b - s).collect();
    lw.wo = wa;
    Ok(out)
}

/// Fold the transpose of the online block transform into the
/// down-projection. The runtime must then apply the online transform to the
/// down-projection input.
pub fn fold_t3(weights: &ModelWeights, block: usize) -> Result<ModelWeights> {
    let d_ff = weights.layers.first().map(|lw| lw.w_down.cols()).unwrap_or(0);
    if d_ff == 0 || d_ff % block != 0 {
        return Err(Error::InvalidConfig(format!("d_ff {d_ff} not divisible by block {block}")));
    }
    let h = hadamard(block, false, 0)?;
    let full_t = block_diagonal(&vec![h; d_ff / block]).transpose();
    let mut out = weights.clone();
    for lw in &mut out.layers {
        lw.w_down = matmul(&lw.w_down, &full_t);
    }
    Ok(out)
}

/// The full deployment fold: norm gains, then the stream transform, then
/// every per-layer value transform, then (if enabled) the online-transform
/// transpose. `mx_block` sets the online transform's block size.
pub fn fold_all(weights: &ModelWeights, set: &TransformSet, mx_block: usize) -> Result<ModelWeights> {
    let mut out = fold_rmsnorm(weights);
    out = fold_t1(&out, &set.t1)?;
    for (layer, t2) in set.t2.iter().enumerate() {
        out = fold_t2(&out, layer, t2)?;
    }
    if set.t3_enabled {
        out = fold_t3(&out, mx_block)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Equivalence checks.

/// `max |a - b| / (1 + max |a|)` over all entries.
pub fn logits_deviation(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b) / (1.0 + a.max_abs())
}

/// Max relative logit deviation between two weight sets over token batches;
/// errors if it exceeds `tol`.
pub fn check_equivalence(
    weights_a: &ModelWeights,
    weights_b: &ModelWeights,
    config: &ModelConfig,
    token_batches: &[Vec<u32>],
    tol: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for batch in token_batches {
        let la = forward_fp(weights_a, config, batch)?;
        let lb = forward_fp(weights_b, config, batch)?;
        worst = worst.max(logits_deviation(&la, &lb));
    }
    if worst > tol {
        return Err(Error::Verification(format!(
            "logit deviation {worst:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    Ok(worst)
}

/// Injected-vs-folded agreement for one transform set: the transformed
/// forward pass (quantization off) against the plain forward pass of the
/// fully folded weights. Exact up to roundoff for any invertible set.
pub fn check_fold_equivalence(
    weights: &ModelWeights,
    config: &ModelConfig,
    set: &TransformSet,
    mx_block: usize,
    token_batches: &[Vec<u32>],
    tol: f64,
) -> Result<f64> {
    set.validate(config)?;
    let folded = fold_all(weights, set, mx_block)?;
    let qp_off = QuantPoints::none(MxConfig::new(crate::mxquant::ElementFormatKind::Fp4E2m1, mx_block));
    let mut worst = 0.0f64;
    for batch in token_batches {
        let injected = forward_transformed(weights, config, set, &qp_off, batch)?;
        let deployed = forward_deployed(&folded, config, &qp_off, batch, set.t3_enabled)?;
        worst = worst.max(logits_deviation(&injected, &deployed));
    }
    if worst > tol {
        return Err(Error::Verification(format!(
            "fold deviation {worst:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    Ok(worst)
}
