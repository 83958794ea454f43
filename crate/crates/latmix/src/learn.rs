//! Learning the transformation parameters against a frozen teacher model.
//!
//! The teacher is the full-precision forward pass; the student runs the
//! transformed forward with real MX quantize-dequantize at the selected
//! activation points and a clipped straight-through estimator on the way
//! back. Only transform parameters train; model weights never move.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    build_transformed_graph, forward_fp_detailed, ModelConfig, ModelWeights, QuantPoints,
    T3Mode, TransformNodes, TransformSet,
};
use crate::mxquant::{block_scale_exponent, mx_quantize_dequantize, MxConfig};
use crate::tape::{softmax_rows, NodeId, Tape};
use crate::transform::{
    off_block_diag_norm, orthogonality_deviation, init_transform, InitOptions, InitScheme,
    Parameterization, TransformParams,
};

pub use crate::tape::QuantMode;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Distillation objective choices. All three are plumbed end to end; KL is
/// the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    Ce,
    BlockMse,
}

/// Which parameters train. `OrthogonalOnly` keeps the QR path's R, log_s and
/// shift frozen at zero so the learned map stays a pure rotation; `NoShift`
/// freezes only the shift, leaving a learned invertible linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    Full,
    OrthogonalOnly,
    NoShift,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of `steps` spent in linear warmup from 0.1x to 1x base_lr.
    pub warmup_frac: f64,
    /// Weight of the volume regularizer.
    pub lambda: f64,
    /// Distillation temperature.
    pub temperature: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            base_lr: 5e-5,
            weight_decay: 1e-2,
            warmup_frac: 0.1,
            lambda: 1e-2,
            temperature: 1.0,
            batch_size: 8,
            loss: LossKind::Kl,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the step budget adjusted per parameterization: the QR
    /// path converges slower and gets 2.5x the steps.
    pub fn for_parameterization(p: Parameterization) -> Self {
        let mut cfg = TrainConfig::default();
        if p == Parameterization::Qr {
            cfg.steps = 2500;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig("warmup_frac must lie in [0, 1]".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// How to set up the learnable transforms for a run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub parameterization: Parameterization,
    pub scheme: InitScheme,
    pub init: InitOptions,
    pub variant: MethodVariant,
    pub t3_enabled: bool,
}

impl TrainSetup {
    pub fn new(parameterization: Parameterization, scheme: InitScheme) -> Self {
        TrainSetup {
            parameterization,
            scheme,
            init: InitOptions::default(),
            variant: MethodVariant::Full,
            t3_enabled: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter set: the stream transform plus one value transform per layer,
// with a flat named-tensor view for the optimizer and checkpointing.

#[derive(Debug, Clone)]
pub struct ParamSet {
    pub t1: TransformParams,
    pub t2: Vec<TransformParams>,
}

const TENSORS_PER_TRANSFORM: usize = 4;

fn tensor_names(p: &TransformParams) -> [&'static str; TENSORS_PER_TRANSFORM] {
    match p {
        TransformParams::Lu(_) => ["l", "u", "log_s", "v"],
        TransformParams::Qr(_) => ["g", "r", "log_s", "v"],
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec())
}

fn tensor_value(p: &TransformParams, k: usize) -> Matrix {
    match (p, k) {
        (TransformParams::Lu(q), 0) => q.l_strict.clone(),
        (TransformParams::Lu(q), 1) => q.u_strict.clone(),
        (TransformParams::Qr(q), 0) => q.g.clone(),
        (TransformParams::Qr(q), 1) => q.r_strict.clone(),
        (_, 2) => row(p.log_s()),
        (_, 3) => row(p.shift()),
        _ => unreachable!("tensor index out of range"),
    }
}

fn tensor_set(p: &mut TransformParams, k: usize, m: &Matrix) {
    let to_vec = |m: &Matrix| m.data().to_vec();
    match (p, k) {
        (TransformParams::Lu(q), 0) => q.l_strict = m.clone(),
        (TransformParams::Lu(q), 1) => q.u_strict = m.clone(),
        (TransformParams::Qr(q), 0) => q.g = m.clone(),
        (TransformParams::Qr(q), 1) => q.r_strict = m.clone(),
        (TransformParams::Lu(q), 2) => q.log_s = to_vec(m),
        (TransformParams::Qr(q), 2) => q.log_s = to_vec(m),
        (TransformParams::Lu(q), 3) => q.v = to_vec(m),
        (TransformParams::Qr(q), 3) => q.v = to_vec(m),
        _ => unreachable!("tensor index out of range"),
    }
}

impl ParamSet {
    pub fn assemble(&self, t3_enabled: bool) -> Result<TransformSet> {
        Ok(TransformSet {
            t1: self.t1.assemble()?,
            t2: self.t2.iter().map(|p| p.assemble()).collect::<Result<_>>()?,
            t3_enabled,
        })
    }

    fn transform(&self, ti: usize) -> &TransformParams {
        if ti == 0 {
            &self.t1
        } else {
            &self.t2[ti - 1]
        }
    }

    fn transform_mut(&mut self, ti: usize) -> &mut TransformParams {
        if ti == 0 {
            &mut self.t1
        } else {
            &mut self.t2[ti - 1]
        }
    }

    fn transform_count(&self) -> usize {
        1 + self.t2.len()
    }

    pub fn slot_count(&self) -> usize {
        TENSORS_PER_TRANSFORM * self.transform_count()
    }

    /// Names in slot order: `t1.l`, `t1.u`, `t1.log_s`, `t1.v`, then
    /// `t2.<layer>.<tensor>` per layer (`g`/`r` on the QR path).
    pub fn slot_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.slot_count());
        for ti in 0..self.transform_count() {
            let names = tensor_names(self.transform(ti));
            for name in names {
                if ti == 0 {
                    out.push(format!("t1.{name}"));
                } else {
                    out.push(format!("t2.{}.{name}", ti - 1));
                }
            }
        }
        out
    }

    pub fn slot_value(&self, slot: usize) -> Matrix {
        tensor_value(self.transform(slot / TENSORS_PER_TRANSFORM), slot % TENSORS_PER_TRANSFORM)
    }

    pub fn slot_set(&mut self, slot: usize, m: &Matrix) {
        tensor_set(self.transform_mut(slot / TENSORS_PER_TRANSFORM), slot % TENSORS_PER_TRANSFORM, m);
    }

    fn slot_nudge(&mut self, slot: usize, entry: usize, delta: f64) {
        let mut m = self.slot_value(slot);
        m.data_mut()[entry] += delta;
        self.slot_set(slot, &m);
    }

    pub fn all_finite(&self) -> bool {
        (0..self.slot_count()).all(|s| self.slot_value(s).all_finite())
    }
}

/// Per-slot freeze flags for a variant. Frozen slots are skipped entirely by
/// the optimizer (no moment update, no weight decay).
pub fn freeze_mask(params: &ParamSet, variant: MethodVariant) -> Vec<bool> {
    let mut mask = vec![false; params.slot_count()];
    for (s, flag) in mask.iter_mut().enumerate() {
        let k = s % TENSORS_PER_TRANSFORM;
        *flag = match variant {
            MethodVariant::Full => false,
            MethodVariant::OrthogonalOnly => k != 0,
            MethodVariant::NoShift => k == 3,
        };
    }
    mask
}

// ---------------------------------------------------------------------------
// Loss functions on plain matrices. The tape has its own fused versions; the
// ones here are the reference definitions used by evaluation code and tests.

/// Mean over positions of KL(softmax(teacher/tau) || softmax(student/tau)).
pub fn kl_distill_loss(teacher_logits: &Matrix, student_logits: &Matrix, temperature: f64) -> f64 {
    assert_eq!(
        (teacher_logits.rows(), teacher_logits.cols()),
        (student_logits.rows(), student_logits.cols()),
        "logit shape mismatch"
    );
    assert!(temperature > 0.0, "temperature must be positive");
    let p = softmax_rows(teacher_logits, temperature);
    let q = softmax_rows(student_logits, temperature);
    let mut acc = 0.0;
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let pij = p.get(i, j);
            if pij > 0.0 {
                acc += pij * (pij.ln() - q.get(i, j).max(1e-300).ln());
            }
        }
    }
    acc / p.rows() as f64
}

/// Mean negative log-softmax of the target class, one target per logits row.
pub fn ce_loss(student_logits: &Matrix, next_tokens: &[u32]) -> Result<f64> {
    if student_logits.rows() != next_tokens.len() {
        return Err(Error::InvalidArgument("one target per logits row required".into()));
    }
    if next_tokens.iter().any(|&t| t as usize >= student_logits.cols()) {
        return Err(Error::InvalidArgument("target id outside vocabulary".into()));
    }
    let q = softmax_rows(student_logits, 1.0);
    let mut acc = 0.0;
    for (i, &t) in next_tokens.iter().enumerate() {
        acc -= q.get(i, t as usize).max(1e-300).ln();
    }
    Ok(acc / next_tokens.len() as f64)
}

/// Mean over layers of the per-layer mean squared deviation between teacher
/// and student block outputs.
pub fn blockwise_mse_loss(teacher_blocks: &[Matrix], student_blocks: &[Matrix]) -> f64 {
    assert_eq!(teacher_blocks.len(), student_blocks.len(), "layer count mismatch");
    assert!(!teacher_blocks.is_empty(), "no block outputs");
    let mut acc = 0.0;
    for (t, s) in teacher_blocks.iter().zip(student_blocks) {
        assert_eq!((t.rows(), t.cols()), (s.rows(), s.cols()), "block shape mismatch");
        let n = (t.rows() * t.cols()) as f64;
        let d: f64 = t.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        acc += d / n;
    }
    acc / teacher_blocks.len() as f64
}

/// Forward quantize-dequantize with the straight-through pass mask: true
/// where the scaled magnitude stays on the grid, false where it saturates.
pub fn ste_quantize(x: &[f64], cfg: &MxConfig) -> Result<(Vec<f64>, Vec<bool>)> {
    if x.len() % cfg.block_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "length {} not divisible by block size {}",
            x.len(),
            cfg.block_size
        )));
    }
    let value = mx_quantize_dequantize(x, cfg)?;
    let gmax = cfg.format.grid_max();
    let mut mask = Vec::with_capacity(x.len());
    for chunk in x.chunks(cfg.block_size) {
        let e = block_scale_exponent(chunk, &cfg.format)?;
        let s = 2.0_f64.powi(e);
        for &t in chunk {
            mask.push((t / s).abs() <= gmax);
        }
    }
    Ok((value, mask))
}

/// Combined objective: distillation term plus lambda times the summed volume
/// regularizers of every learned transform.
pub fn total_loss(dist_loss: f64, volume_regs: &[f64], lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    dist_loss + lambda * volume_regs.iter().sum::<f64>()
}

// ---------------------------------------------------------------------------
// Schedule.

fn warmup_span(cfg: &TrainConfig) -> usize {
    ((cfg.warmup_frac * cfg.steps as f64).round() as usize).max(1)
}

/// Learning rate at a 0-based step: linear warmup from 0.1x to 1x over the
/// warmup span, multiplied by cosine decay over the full budget. Monotone up
/// then down for warmup fractions up to ~0.25.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let steps = cfg.steps.max(1);
    let span = warmup_span(cfg);
    let warm = if step >= span { 1.0 } else { 0.1 + 0.9 * step as f64 / span as f64 };
    let cosine = 0.5 * (1.0 + (PI * step as f64 / steps as f64).cos());
    cfg.base_lr * warm * cosine
}

// ---------------------------------------------------------------------------
// Teacher cache and the training graph.

struct TeacherItem {
    tokens: Vec<u32>,
    /// Teacher softmax at the distillation temperature.
    probs: Matrix,
    /// Per-layer residual streams; filled only for the blockwise loss.
    streams: Vec<Matrix>,
}

fn teacher_item(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[u32],
    temperature: f64,
    want_streams: bool,
) -> Result<TeacherItem> {
    let trace = forward_fp_detailed(weights, config, tokens)?;
    Ok(TeacherItem {
        tokens: tokens.to_vec(),
        probs: softmax_rows(&trace.logits, temperature),
        streams: if want_streams { trace.residual_streams } else { Vec::new() },
    })
}

fn teacher_items(
    weights: &ModelWeights,
    config: &ModelConfig,
    seqs: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<Vec<TeacherItem>> {
    if cfg.loss == LossKind::Ce {
        if let Some(seq) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::InvalidArgument(format!(
                "next-token loss needs sequences of length >= 2, got {}",
                seq.len()
            )));
        }
    }
    seqs.iter()
        .map(|s| teacher_item(weights, config, s, cfg.temperature, cfg.loss == LossKind::BlockMse))
        .collect()
}

struct LeafIds {
    ids: [NodeId; TENSORS_PER_TRANSFORM],
}

/// Push every parameter tensor onto the tape as a leaf, in slot order.
fn push_leaves(tape: &mut Tape, params: &ParamSet) -> Vec<LeafIds> {
    (0..params.transform_count())
        .map(|ti| {
            let mut ids = [NodeId::default(); TENSORS_PER_TRANSFORM];
            for (k, id) in ids.iter_mut().enumerate() {
                *id = tape.param(tensor_value(params.transform(ti), k));
            }
            LeafIds { ids }
        })
        .collect()
}

/// Tape-side mirror of the assembly in the transform module. The inverse is
/// taken with a general LU solve instead of the triangular shortcuts; the
/// values agree to rounding and the gradient flows through both factors.
fn assemble_on_tape(tape: &mut Tape, p: &TransformParams, leaves: &LeafIds) -> (NodeId, NodeId) {
    let [main, upper, log_s, _v] = leaves.ids;
    match p {
        TransformParams::Lu(lu) => {
            let d = lu.log_s.len();
            let lm = tape.mask_strict_lower(main, lu.structure_block);
            let eye = tape.constant(Matrix::identity(d));
            let l = tape.add(eye, lm);
            let um = tape.mask_strict_upper(upper, lu.structure_block);
            let dg = tape.diag_from_log(log_s, lu.sign_s.clone());
            let m = tape.add(um, dg);
            let prod = tape.matmul(l, m);
            let a = tape.permute_rows(prod, lu.p.clone());
            let a_inv = tape.mat_inv(a);
            (a, a_inv)
        }
        TransformParams::Qr(qr) => {
            let gm = tape.mask_block_diag(main, qr.structure_block);
            let skew = tape.skew_half(gm);
            let q = tape.mat_exp(skew);
            let rm = tape.mask_strict_upper(upper, qr.structure_block);
            let dg = tape.diag_from_log(log_s, qr.sign_s.clone());
            let m = tape.add(rm, dg);
            let a = tape.matmul(q, m);
            let a_inv = tape.mat_inv(a);
            (a, a_inv)
        }
    }
}

/// Parameters must be finite and the log scales bounded well below exp
/// overflow, otherwise assembly would poison the graph or panic inside the
/// inverse. A diverging run trips this check instead.
fn check_trainable(params: &ParamSet) -> Result<()> {
    let names = params.slot_names();
    for (s, name) in names.iter().enumerate() {
        let m = params.slot_value(s);
        if !m.all_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        if s % TENSORS_PER_TRANSFORM == 2 && m.data().iter().any(|x| x.abs() > 300.0) {
            return Err(Error::NonFinite(format!("parameter {name} (log scale overflow)")));
        }
    }
    Ok(())
}

struct LossNodes {
    total: NodeId,
    dist: NodeId,
    vol: NodeId,
}

fn build_loss_graph(
    tape: &mut Tape,
    weights: &ModelWeights,
    config: &ModelConfig,
    params: &ParamSet,
    leaves: &[LeafIds],
    qpoints: &QuantPoints,
    t3_enabled: bool,
    items: &[&TeacherItem],
    cfg: &TrainConfig,
    mode: QuantMode,
) -> Result<LossNodes> {
    assert!(!items.is_empty(), "empty batch");
    assert_eq!(params.t2.len(), config.n_layers, "one value transform per layer");
    if cfg.loss == LossKind::BlockMse && config.n_layers == 0 {
        return Err(Error::InvalidConfig("blockwise loss needs at least one layer".into()));
    }

    let (a1, a1_inv) = assemble_on_tape(tape, &params.t1, &leaves[0]);
    let v1 = leaves[0].ids[3];
    let mut t2 = Vec::with_capacity(params.t2.len());
    for (i, p2) in params.t2.iter().enumerate() {
        let (a2, a2_inv) = assemble_on_tape(tape, p2, &leaves[1 + i]);
        t2.push((a2, a2_inv, leaves[1 + i].ids[3]));
    }
    let tn = TransformNodes { a1, a1_inv, v1, t2 };

    let t3 = if t3_enabled { T3Mode::Paired(qpoints.mx.block_size) } else { T3Mode::Off };
    let inv_batch = 1.0 / items.len() as f64;
    let mut dist_terms = Vec::with_capacity(items.len());
    for item in items {
        let out = build_transformed_graph(tape, weights, config, &tn, qpoints, mode, t3, &item.tokens)?;
        let term = match cfg.loss {
            LossKind::Kl => tape.kl_from_logits(out.logits, item.probs.clone(), cfg.temperature),
            LossKind::Ce => {
                let n = item.tokens.len();
                let pred = tape.slice_rows(out.logits, 0, n - 1);
                let targets: Vec<usize> = item.tokens[1..].iter().map(|&t| t as usize).collect();
                tape.ce_from_logits(pred, targets)
            }
            LossKind::BlockMse => {
                assert_eq!(item.streams.len(), out.block_streams.len(), "teacher stream cache mismatch");
                let w = 1.0 / config.n_layers as f64;
                let mut terms = Vec::with_capacity(config.n_layers);
                for (&node, target) in out.block_streams.iter().zip(&item.streams) {
                    let mse = tape.mean_sq_diff(node, target.clone());
                    terms.push((mse, w));
                }
                tape.weighted_sum(&terms)
            }
        };
        dist_terms.push((term, inv_batch));
    }
    let dist = tape.weighted_sum(&dist_terms);

    let mut vol_terms = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        let s = tape.sum(leaf.ids[2]);
        let sq = tape.mul_elem(s, s);
        vol_terms.push((sq, 1.0));
    }
    let vol = tape.weighted_sum(&vol_terms);
    let total = tape.weighted_sum(&[(dist, 1.0), (vol, cfg.lambda)]);
    Ok(LossNodes { total, dist, vol })
}

// ---------------------------------------------------------------------------
// Gradients.

#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub loss_total: f64,
    pub loss_dist: f64,
    /// Raw summed volume regularizers, before the lambda weight.
    pub loss_vol: f64,
    /// One gradient per parameter tensor, in `ParamSet` slot order.
    pub tensors: Vec<(String, Matrix)>,
}

fn scalar(tape: &Tape, id: NodeId) -> f64 {
    tape.value(id).get(0, 0)
}

fn gradients_impl(
    weights: &ModelWeights,
    config: &ModelConfig,
    params: &ParamSet,
    qpoints: &QuantPoints,
    t3_enabled: bool,
    items: &[&TeacherItem],
    cfg: &TrainConfig,
    mode: QuantMode,
) -> Result<GradientRecord> {
    check_trainable(params)?;
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let nodes = build_loss_graph(
        &mut tape, weights, config, params, &leaves, qpoints, t3_enabled, items, cfg, mode,
    )?;
    let total = scalar(&tape, nodes.total);
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let grads = tape.backward(nodes.total);
    let names = params.slot_names();
    let mut tensors = Vec::with_capacity(names.len());
    for (s, name) in names.into_iter().enumerate() {
        let leaf = leaves[s / TENSORS_PER_TRANSFORM].ids[s % TENSORS_PER_TRANSFORM];
        let g = match Tape::grad_of(&grads, leaf) {
            Some(m) => m.clone(),
            None => {
                let shape = params.slot_value(s);
                Matrix::zeros(shape.rows(), shape.cols())
            }
        };
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        tensors.push((name, g));
    }
    Ok(GradientRecord {
        loss_total: total,
        loss_dist: scalar(&tape, nodes.dist),
        loss_vol: scalar(&tape, nodes.vol),
        tensors,
    })
}

fn eval_losses(
    weights: &ModelWeights,
    config: &ModelConfig,
    params: &ParamSet,
    qpoints: &QuantPoints,
    t3_enabled: bool,
    items: &[&TeacherItem],
    cfg: &TrainConfig,
    mode: QuantMode,
) -> Result<(f64, f64, f64)> {
    check_trainable(params)?;
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let nodes = build_loss_graph(
        &mut tape, weights, config, params, &leaves, qpoints, t3_enabled, items, cfg, mode,
    )?;
    Ok((scalar(&tape, nodes.total), scalar(&tape, nodes.dist), scalar(&tape, nodes.vol)))
}

/// Reverse-mode gradients of the combined objective with respect to every
/// transform parameter tensor, on the given token batch.
pub fn gradients(
    weights: &ModelWeights,
    config: &ModelConfig,
    params: &ParamSet,
    qpoints: &QuantPoints,
    t3_enabled: bool,
    batch: &[Vec<u32>],
    cfg: &TrainConfig,
    mode: QuantMode,
) -> Result<GradientRecord> {
    let items = teacher_items(weights, config, batch, cfg)?;
    let refs: Vec<&TeacherItem> = items.iter().collect();
    gradients_impl(weights, config, params, qpoints, t3_enabled, &refs, cfg, mode)
}

// ---------------------------------------------------------------------------
// Gradient check.

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    /// Analytic and finite-difference gradient at the worst entry.
    pub analytic: f64,
    pub finite_diff: f64,
    pub max_rel_dev: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel_dev: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_dev <= tol
    }
}

const FD_STEP: f64 = 1e-5;
// Relative deviation floors at this scale, which makes a 1e-4 relative
// tolerance behave as a 1e-6 absolute tolerance for near-zero gradients.
const FD_FLOOR: f64 = 1e-2;

/// Central finite differences of the composite loss against the analytic
/// gradients, entry by entry. Use `QuantMode::Off` for the plain path, or
/// `QuantMode::Surrogate` so the compared forward is the differentiable
/// clamp surrogate rather than the staircase.
pub fn grad_check(
    weights: &ModelWeights,
    config: &ModelConfig,
    params: &ParamSet,
    qpoints: &QuantPoints,
    t3_enabled: bool,
    batch: &[Vec<u32>],
    cfg: &TrainConfig,
    mode: QuantMode,
) -> Result<GradCheckReport> {
    let items = teacher_items(weights, config, batch, cfg)?;
    let refs: Vec<&TeacherItem> = items.iter().collect();
    let record = gradients_impl(weights, config, params, qpoints, t3_enabled, &refs, cfg, mode)?;

    let mut rows = Vec::with_capacity(record.tensors.len());
    let mut overall = 0.0_f64;
    for (s, (name, analytic)) in record.tensors.iter().enumerate() {
        let mut worst = GradCheckRow {
            name: name.clone(),
            analytic: 0.0,
            finite_diff: 0.0,
            max_rel_dev: 0.0,
        };
        for e in 0..analytic.data().len() {
            let mut plus = params.clone();
            plus.slot_nudge(s, e, FD_STEP);
            let (fp, _, _) =
                eval_losses(weights, config, &plus, qpoints, t3_enabled, &refs, cfg, mode)?;
            let mut minus = params.clone();
            minus.slot_nudge(s, e, -FD_STEP);
            let (fm, _, _) =
                eval_losses(weights, config, &minus, qpoints, t3_enabled, &refs, cfg, mode)?;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
            if rel > worst.max_rel_dev {
                worst.analytic = a;
                worst.finite_diff = fd;
                worst.max_rel_dev = rel;
            }
        }
        overall = overall.max(worst.max_rel_dev);
        rows.push(worst);
    }
    Ok(GradCheckReport { rows, max_rel_dev: overall })
}

// ---------------------------------------------------------------------------
// Optimizer.

/// AdamW first and second moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = (0..params.slot_count())
            .map(|s| {
                let shape = params.slot_value(s);
                Matrix::zeros(shape.rows(), shape.cols())
            })
            .collect();
        AdamState { m: zeros.clone(), v: zeros }
    }
}

/// One AdamW step with decoupled weight decay and bias correction.
/// `frozen` is indexed like the slots; an empty slice freezes nothing.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &GradientRecord,
    state: &mut AdamState,
    step_index: usize,
    cfg: &TrainConfig,
    frozen: &[bool],
) {
    assert_eq!(grads.tensors.len(), params.slot_count(), "gradient record shape mismatch");
    let lr = lr_at(cfg, step_index);
    let bc1 = 1.0 - ADAM_BETA1.powi(step_index as i32 + 1);
    let bc2 = 1.0 - ADAM_BETA2.powi(step_index as i32 + 1);
    for s in 0..params.slot_count() {
        if frozen.get(s).copied().unwrap_or(false) {
            continue;
        }
        let g = &grads.tensors[s].1;
        let mut theta = params.slot_value(s);
        let m = &mut state.m[s];
        let v = &mut state.v[s];
        for ((t, gi), (mi, vi)) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *t -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + cfg.weight_decay * *t);
        }
        params.slot_set(s, &theta);
    }
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dist: f64,
    /// Raw summed volume regularizers (unweighted).
    pub loss_vol: f64,
    /// Largest singular-value deviation from 1 of the assembled stream
    /// transform.
    pub orth_dev: f64,
    /// Spectral norm of the stream transform outside its quantization-block
    /// diagonal.
    pub offblock_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn initial(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Stable column set; values printed with shortest round-trip formatting
    /// so identical runs produce identical bytes.
    pub fn csv(&self) -> String {
        let mut out = String::from("step,lr,loss_total,loss_dist,loss_vol,orth_dev,offblock_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.lr, r.loss_total, r.loss_dist, r.loss_vol, r.orth_dev, r.offblock_norm
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub transforms: TransformSet,
    pub params: ParamSet,
    pub trace: TrainTrace,
    /// Step at which a non-finite loss or gradient appeared. When set, the
    /// returned parameters are from the last step with a finite loss.
    pub diverged_at: Option<usize>,
}

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut c = BatchCycler { order: (0..n).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        c.order.shuffle(&mut c.rng);
        c
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn init_params(config: &ModelConfig, setup: &TrainSetup, seed: u64) -> Result<ParamSet> {
    let d = config.d_model;
    let t1_opts = InitOptions {
        bd_block: setup.init.bd_block,
        noise_std: setup.init.noise_std,
        structure_block: None,
    };
    let t1 = init_transform(setup.scheme, d, seed, setup.parameterization, &t1_opts)?;
    // Value transforms start at (noisy) identity regardless of the stream
    // scheme; they are structured per head, so full-rank schemes make no
    // sense there.
    let t2_scheme = if setup.scheme == InitScheme::Identity {
        InitScheme::Identity
    } else {
        InitScheme::IdentityNoise
    };
    let dh = config.d_head();
    let t2 = (0..config.n_layers)
        .map(|l| {
            let opts = InitOptions {
                bd_block: dh,
                noise_std: setup.init.noise_std,
                structure_block: Some(dh),
            };
            init_transform(t2_scheme, d, splitmix(seed ^ (l as u64 + 1)), setup.parameterization, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { t1, t2 })
}

/// Learn the transforms by distilling the quantized transformed student
/// against the full-precision teacher. Deterministic for a fixed config.
pub fn train_transforms(
    weights: &ModelWeights,
    config: &ModelConfig,
    setup: &TrainSetup,
    qpoints: &QuantPoints,
    calibration: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    config.validate()?;
    weights.validate(config)?;
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    if setup.variant == MethodVariant::OrthogonalOnly && setup.parameterization != Parameterization::Qr {
        return Err(Error::InvalidConfig(
            "the orthogonal-only variant requires the QR parameterization".into(),
        ));
    }

    let mut params = init_params(config, setup, cfg.seed)?;
    let items = teacher_items(weights, config, calibration, cfg)?;
    let frozen = freeze_mask(&params, setup.variant);
    let mut state = AdamState::new(&params);
    let mut cycler = BatchCycler::new(items.len(), splitmix(cfg.seed ^ 0x6261746368));

    // Trace rows are evaluated on a fixed prefix batch so successive rows
    // are comparable; training batches themselves rotate.
    let eval_count = cfg.batch_size.min(items.len());
    let eval_refs: Vec<&TeacherItem> = items[..eval_count].iter().collect();
    let mx_block = qpoints.mx.block_size;

    let mut trace = TrainTrace::default();
    let log_row = |params: &ParamSet, step: usize, lr: f64, losses: (f64, f64, f64)| -> Result<TraceRow> {
        let a1 = params.t1.assemble()?;
        Ok(TraceRow {
            step,
            lr,
            loss_total: losses.0,
            loss_dist: losses.1,
            loss_vol: losses.2,
            orth_dev: orthogonality_deviation(a1.a()),
            offblock_norm: off_block_diag_norm(a1.a(), mx_block)?,
        })
    };

    let init_losses = eval_losses(
        weights, config, &params, qpoints, setup.t3_enabled, &eval_refs, cfg, QuantMode::Real,
    )?;
    trace.rows.push(log_row(&params, 0, lr_at(cfg, 0), init_losses)?);

    let mut diverged_at = None;
    let mut good_params = params.clone();
    for t in 0..cfg.steps {
        let batch = cycler.next_batch(cfg.batch_size);
        let refs: Vec<&TeacherItem> = batch.iter().map(|&i| &items[i]).collect();
        let record = match gradients_impl(
            weights, config, &params, qpoints, setup.t3_enabled, &refs, cfg, QuantMode::Real,
        ) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        good_params = params.clone();
        optimizer_step(&mut params, &record, &mut state, t, cfg, &frozen);

        if (t + 1) % cfg.log_every == 0 || t + 1 == cfg.steps {
            match eval_losses(
                weights, config, &params, qpoints, setup.t3_enabled, &eval_refs, cfg, QuantMode::Real,
            ) {
                Ok(l) if l.0.is_finite() => {
                    trace.rows.push(log_row(&params, t + 1, lr_at(cfg, t), l)?);
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    diverged_at = Some(t + 1);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let final_params = if diverged_at.is_some() { good_params } else { params };
    let transforms = final_params.assemble(setup.t3_enabled)?;
    Ok(TrainRun { transforms, params: final_params, trace, diverged_at })
}
