//! Experiment orchestration: JSON experiment configs, checkpoint and model
//! containers, and the command bodies behind the CLI binary.
//!
//! Every command is a pure function of (config, seed) and writes
//! byte-identical artifacts on identical inputs. All calibration data here is
//! synthetic; reports carry a note saying so, to keep toy numbers from being
//! mistaken for published results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{
    dirac_hadamard_demo, lemma_max_check, proposition2_check, random_scenario, theorem1_check,
    BoundReport, DiracHadamardReport, LemmaReport,
};
use crate::calib::{generate_calibration, CalibrationData, SyntheticCalibSpec, VectorDist};
use crate::container::{read_container, write_container, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::learn::{
    kl_distill_loss, train_transforms, MethodVariant, ParamSet, TrainConfig, TrainSetup,
};
use crate::linalg::{matmul, Matrix, Permutation};
use crate::model::{
    check_fold_equivalence, collect_t1_inputs, fold_all, forward_fp, forward_fp_detailed,
    forward_transformed, pick_channels, ModelConfig, ModelWeights, QuantPoints, TransformSet,
};
use crate::mxquant::{
    gptq_quantize_weights, rtn_quantize_weights, transformation_mse, MxConfig,
};
use crate::transform::{
    preset_transform, AffineTransform, InitOptions, InitScheme, LuParams, Parameterization,
    PresetTransform, QrParams, TransformParams,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Gate for folded-vs-injected logit agreement before any weight is touched.
pub const FOLD_GATE_TOL: f64 = 1e-5;
const GPTQ_DAMPING: f64 = 0.01;
/// Sequences used for the fold gate, reconstruction inputs and logit metrics.
const GATE_SEQS: usize = 4;
const HESSIAN_SEQS: usize = 64;
const EVAL_SEQS: usize = 8;

const DATA_NOTE: &str =
    "synthetic calibration data; toy-model numbers, not comparable to published benchmarks";

// ---------------------------------------------------------------------------
// Experiment configuration.

/// Scale a seeded set of residual-stream channels in the generated toy
/// weights, turning on the outlier regime the transforms are meant to fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplifySpec {
    pub channels: usize,
    pub scale: f64,
}

/// Add a constant to a seeded set of residual-stream channels in the
/// generated toy weights. Produces near-constant massive activations, the
/// case where the learned shift beats every linear transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSpec {
    pub channels: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightQuantMethod {
    Rtn,
    #[default]
    Gptq,
}

/// Where calibration data comes from: exactly one of a tensor container on
/// disk or a synthetic generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticCalibSpec>,
}

impl Default for CalibrationSource {
    fn default() -> Self {
        CalibrationSource {
            file: None,
            synthetic: Some(SyntheticCalibSpec::TokenSequences {
                vocab_size: 256,
                n_sequences: 256,
                seq_len: 64,
            }),
        }
    }
}

/// File names of every artifact, resolved relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub transforms: String,
    pub trace: String,
    pub quantized_model: String,
    pub metrics: String,
    pub ablation: String,
    pub sweep: String,
    pub bounds: String,
    pub data: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            transforms: "transforms.mxtd".into(),
            trace: "trace.csv".into(),
            quantized_model: "quantized.mxtd".into(),
            metrics: "metrics.json".into(),
            ablation: "ablation.csv".into(),
            sweep: "sweep.csv".into(),
            bounds: "bounds.json".into(),
            data: "calib.mxtd".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: ModelConfig,
    /// Optional outlier-channel amplification of the generated weights.
    pub amplify: Option<AmplifySpec>,
    /// Optional constant-offset outlier channels in the generated weights.
    pub offset: Option<OffsetSpec>,
    pub mx: MxConfig,
    pub parameterization: Parameterization,
    pub init: InitScheme,
    pub variant: MethodVariant,
    pub t3_enabled: bool,
    /// Fake-quantize activations at the five insertion points during
    /// training and evaluation. Off is only useful for algebra checks.
    pub quantize_activations: bool,
    /// Explicit training hyperparameters; absent means the
    /// per-parameterization defaults. The seed inside is overridden by
    /// the experiment seed.
    pub train: Option<TrainConfig>,
    pub calibration: CalibrationSource,
    pub weight_quant: WeightQuantMethod,
    pub outputs: OutputPaths,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            model: ModelConfig::default(),
            amplify: None,
            offset: None,
            mx: MxConfig::new(crate::mxquant::ElementFormatKind::Fp4E2m1, 32),
            parameterization: Parameterization::Lu,
            init: InitScheme::BdOrthogonal,
            variant: MethodVariant::Full,
            t3_enabled: true,
            quantize_activations: true,
            train: None,
            calibration: CalibrationSource::default(),
            weight_quant: WeightQuantMethod::default(),
            outputs: OutputPaths::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema {} unsupported, expected {SCHEMA_VERSION}",
                self.schema
            )));
        }
        self.model.validate()?;
        if self.model.d_model % self.mx.block_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "block size {} does not divide d_model {}",
                self.mx.block_size, self.model.d_model
            )));
        }
        if self.t3_enabled && self.model.d_ff % self.mx.block_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "block size {} does not divide d_ff {} (required with the online transform)",
                self.mx.block_size, self.model.d_ff
            )));
        }
        if let Some(a) = self.amplify {
            if a.channels > self.model.d_model {
                return Err(Error::InvalidConfig(format!(
                    "cannot amplify {} of {} channels",
                    a.channels, self.model.d_model
                )));
            }
            if !(a.scale.is_finite() && a.scale > 0.0) {
                return Err(Error::InvalidConfig("amplify scale must be finite and positive".into()));
            }
        }
        if let Some(o) = self.offset {
            if o.channels > self.model.d_model {
                return Err(Error::InvalidConfig(format!(
                    "cannot offset {} of {} channels",
                    o.channels, self.model.d_model
                )));
            }
            if !o.delta.is_finite() {
                return Err(Error::InvalidConfig("offset delta must be finite".into()));
            }
        }
        match (&self.calibration.file, &self.calibration.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "calibration needs exactly one of `file` or `synthetic`".into(),
                ))
            }
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }

    /// Training hyperparameters with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self
            .train
            .clone()
            .unwrap_or_else(|| TrainConfig::for_parameterization(self.parameterization));
        t.seed = self.seed;
        t
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            parameterization: self.parameterization,
            scheme: self.init,
            init: InitOptions { bd_block: self.mx.block_size, ..InitOptions::default() },
            variant: self.variant,
            t3_enabled: self.t3_enabled,
        }
    }

    pub fn quant_points(&self) -> QuantPoints {
        if self.quantize_activations {
            QuantPoints::all(self.mx.clone())
        } else {
            QuantPoints::none(self.mx.clone())
        }
    }

    /// The toy model this experiment runs on, seeded and optionally given
    /// outlier channels.
    pub fn build_model(&self) -> Result<ModelWeights> {
        let mut w = ModelWeights::random(&self.model, self.seed);
        if let Some(a) = self.amplify {
            let ch = pick_channels(self.model.d_model, a.channels, self.seed);
            w.amplify_stream_channels(&ch, a.scale);
        }
        if let Some(o) = self.offset {
            let ch = pick_channels(self.model.d_model, o.channels, self.seed);
            w.offset_stream_channels(&ch, o.delta);
        }
        Ok(w)
    }
}

// ---------------------------------------------------------------------------
// Calibration plumbing.

pub fn load_calibration(cfg: &ExperimentConfig) -> Result<CalibrationData> {
    match (&cfg.calibration.file, &cfg.calibration.synthetic) {
        (Some(path), None) => calibration_from_container(&read_container(path)?),
        (None, Some(spec)) => generate_calibration(spec, cfg.seed),
        _ => Err(Error::InvalidConfig(
            "calibration needs exactly one of `file` or `synthetic`".into(),
        )),
    }
}

pub fn calibration_to_container(data: &CalibrationData) -> TensorContainer {
    let mut c = TensorContainer::new();
    match data {
        CalibrationData::Vectors(m) => c.push(Tensor::from_matrix("samples", m)),
        CalibrationData::Tokens(seqs) => {
            for (i, s) in seqs.iter().enumerate() {
                c.push(Tensor::u32(format!("seq.{i}"), vec![s.len()], s.clone()));
            }
        }
    }
    c
}

pub fn calibration_from_container(c: &TensorContainer) -> Result<CalibrationData> {
    if let Some(t) = c.get("samples") {
        return Ok(CalibrationData::Vectors(t.to_matrix()?));
    }
    let mut seqs = Vec::new();
    while let Some(t) = c.get(&format!("seq.{}", seqs.len())) {
        seqs.push(t.as_u32()?.to_vec());
    }
    if seqs.is_empty() {
        return Err(Error::Container(
            "no calibration tensors: expected `samples` or `seq.0`, `seq.1`, ...".into(),
        ));
    }
    Ok(CalibrationData::Tokens(seqs))
}

fn require_tokens(config: &ModelConfig, data: CalibrationData) -> Result<Vec<Vec<u32>>> {
    let seqs = match data {
        CalibrationData::Tokens(s) => s,
        CalibrationData::Vectors(_) => {
            return Err(Error::InvalidConfig(
                "this command needs token calibration, got vector samples".into(),
            ))
        }
    };
    for (i, s) in seqs.iter().enumerate() {
        if s.is_empty() || s.len() > config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "calibration sequence {i} has length {}, model takes 1..={}",
                s.len(),
                config.max_seq_len
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::InvalidConfig(format!(
                "calibration sequence {i} has token {t} outside vocab {}",
                config.vocab_size
            )));
        }
    }
    Ok(seqs)
}

/// Residual-stream samples for transform error metrics: vector calibration is
/// used directly, token calibration goes through the model.
fn activation_samples(
    weights: &ModelWeights,
    config: &ModelConfig,
    data: &CalibrationData,
) -> Result<Matrix> {
    match data {
        CalibrationData::Vectors(m) => {
            if m.cols() != config.d_model {
                return Err(Error::InvalidConfig(format!(
                    "vector calibration has dimension {}, model stream is {}",
                    m.cols(),
                    config.d_model
                )));
            }
            Ok(m.clone())
        }
        CalibrationData::Tokens(seqs) => collect_t1_inputs(weights, config, seqs),
    }
}

// ---------------------------------------------------------------------------
// Containers for checkpoints and models.

fn push_f64(c: &mut TensorContainer, name: String, v: &[f64]) {
    c.push(Tensor::f64(name, vec![v.len()], v.to_vec()));
}

fn get_f64(c: &TensorContainer, name: &str) -> Result<Vec<f64>> {
    Ok(c.require(name)?.as_f64()?.to_vec())
}

fn get_mat(c: &TensorContainer, name: &str) -> Result<Matrix> {
    c.require(name)?.to_matrix()
}

fn get_u32_scalar(c: &TensorContainer, name: &str) -> Result<u32> {
    let t = c.require(name)?.as_u32()?.to_vec();
    if t.len() != 1 {
        return Err(Error::Container(format!("tensor '{name}' is not a scalar")));
    }
    Ok(t[0])
}

fn transform_into_container(c: &mut TensorContainer, prefix: &str, p: &TransformParams) {
    match p {
        TransformParams::Lu(q) => {
            c.push(Tensor::u32(format!("{prefix}.kind"), vec![1], vec![0]));
            c.push(Tensor::u32(
                format!("{prefix}.p"),
                vec![q.p.len()],
                q.p.map().iter().map(|&m| m as u32).collect(),
            ));
            c.push(Tensor::from_matrix(format!("{prefix}.l"), &q.l_strict));
            c.push(Tensor::from_matrix(format!("{prefix}.u"), &q.u_strict));
            push_f64(c, format!("{prefix}.log_s"), &q.log_s);
            push_f64(c, format!("{prefix}.sign_s"), &q.sign_s);
            push_f64(c, format!("{prefix}.v"), &q.v);
            c.push(Tensor::u32(format!("{prefix}.structure"), vec![1], vec![q.structure_block as u32]));
        }
        TransformParams::Qr(q) => {
            c.push(Tensor::u32(format!("{prefix}.kind"), vec![1], vec![1]));
            c.push(Tensor::from_matrix(format!("{prefix}.g"), &q.g));
            c.push(Tensor::from_matrix(format!("{prefix}.r"), &q.r_strict));
            push_f64(c, format!("{prefix}.log_s"), &q.log_s);
            push_f64(c, format!("{prefix}.sign_s"), &q.sign_s);
            push_f64(c, format!("{prefix}.v"), &q.v);
            c.push(Tensor::u32(format!("{prefix}.structure"), vec![1], vec![q.structure_block as u32]));
        }
    }
}

fn transform_from_container(c: &TensorContainer, prefix: &str) -> Result<TransformParams> {
    let kind = get_u32_scalar(c, &format!("{prefix}.kind"))?;
    let structure = get_u32_scalar(c, &format!("{prefix}.structure"))? as usize;
    let log_s = get_f64(c, &format!("{prefix}.log_s"))?;
    let sign_s = get_f64(c, &format!("{prefix}.sign_s"))?;
    let v = get_f64(c, &format!("{prefix}.v"))?;
    match kind {
        0 => {
            let map: Vec<usize> =
                c.require(&format!("{prefix}.p"))?.as_u32()?.iter().map(|&m| m as usize).collect();
            Ok(TransformParams::Lu(LuParams {
                p: Permutation::from_map(map)?,
                l_strict: get_mat(c, &format!("{prefix}.l"))?,
                u_strict: get_mat(c, &format!("{prefix}.u"))?,
                log_s,
                sign_s,
                v,
                structure_block: structure,
            }))
        }
        1 => Ok(TransformParams::Qr(QrParams {
            g: get_mat(c, &format!("{prefix}.g"))?,
            r_strict: get_mat(c, &format!("{prefix}.r"))?,
            log_s,
            sign_s,
            v,
            structure_block: structure,
        })),
        k => Err(Error::Container(format!("unknown transform kind {k} at '{prefix}'"))),
    }
}

pub fn params_to_container(params: &ParamSet) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.push(Tensor::u32("t2_count", vec![1], vec![params.t2.len() as u32]));
    transform_into_container(&mut c, "t1", &params.t1);
    for (i, t) in params.t2.iter().enumerate() {
        transform_into_container(&mut c, &format!("t2.{i}"), t);
    }
    c
}

pub fn params_from_container(c: &TensorContainer) -> Result<ParamSet> {
    let n = get_u32_scalar(c, "t2_count")? as usize;
    let t1 = transform_from_container(c, "t1")?;
    let t2 = (0..n)
        .map(|i| transform_from_container(c, &format!("t2.{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { t1, t2 })
}

pub fn model_to_container(w: &ModelWeights) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.push(Tensor::from_matrix("embedding", &w.embedding));
    push_f64(&mut c, "gain_final".into(), &w.gain_final);
    c.push(Tensor::from_matrix("w_head", &w.w_head));
    push_f64(&mut c, "b_head".into(), &w.b_head);
    for (i, lw) in w.layers.iter().enumerate() {
        let p = format!("layer{i}");
        push_f64(&mut c, format!("{p}.gain_attn"), &lw.gain_attn);
        c.push(Tensor::from_matrix(format!("{p}.wq"), &lw.wq));
        c.push(Tensor::from_matrix(format!("{p}.wk"), &lw.wk));
        c.push(Tensor::from_matrix(format!("{p}.wv"), &lw.wv));
        c.push(Tensor::from_matrix(format!("{p}.wo"), &lw.wo));
        push_f64(&mut c, format!("{p}.bq"), &lw.bq);
        push_f64(&mut c, format!("{p}.bk"), &lw.bk);
        push_f64(&mut c, format!("{p}.bv"), &lw.bv);
        push_f64(&mut c, format!("{p}.bo"), &lw.bo);
        push_f64(&mut c, format!("{p}.gain_ffn"), &lw.gain_ffn);
        c.push(Tensor::from_matrix(format!("{p}.w_up"), &lw.w_up));
        c.push(Tensor::from_matrix(format!("{p}.w_gate"), &lw.w_gate));
        c.push(Tensor::from_matrix(format!("{p}.w_down"), &lw.w_down));
        push_f64(&mut c, format!("{p}.b_up"), &lw.b_up);
        push_f64(&mut c, format!("{p}.b_gate"), &lw.b_gate);
        push_f64(&mut c, format!("{p}.b_down"), &lw.b_down);
    }
    c
}

pub fn model_from_container(c: &TensorContainer, config: &ModelConfig) -> Result<ModelWeights> {
    let layers = (0..config.n_layers)
        .map(|i| {
            let p = format!("layer{i}");
            Ok(crate::model::LayerWeights {
                gain_attn: get_f64(c, &format!("{p}.gain_attn"))?,
                wq: get_mat(c, &format!("{p}.wq"))?,
                wk: get_mat(c, &format!("{p}.wk"))?,
                wv: get_mat(c, &format!("{p}.wv"))?,
                wo: get_mat(c, &format!("{p}.wo"))?,
                bq: get_f64(c, &format!("{p}.bq"))?,
                bk: get_f64(c, &format!("{p}.bk"))?,
                bv: get_f64(c, &format!("{p}.bv"))?,
                bo: get_f64(c, &format!("{p}.bo"))?,
                gain_ffn: get_f64(c, &format!("{p}.gain_ffn"))?,
                w_up: get_mat(c, &format!("{p}.w_up"))?,
                w_gate: get_mat(c, &format!("{p}.w_gate"))?,
                w_down: get_mat(c, &format!("{p}.w_down"))?,
                b_up: get_f64(c, &format!("{p}.b_up"))?,
                b_gate: get_f64(c, &format!("{p}.b_gate"))?,
                b_down: get_f64(c, &format!("{p}.b_down"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let w = ModelWeights {
        embedding: get_mat(c, "embedding")?,
        layers,
        gain_final: get_f64(c, "gain_final")?,
        w_head: get_mat(c, "w_head")?,
        b_head: get_f64(c, "b_head")?,
    };
    w.validate(config)?;
    Ok(w)
}

// ---------------------------------------------------------------------------
// learn

#[derive(Debug, Clone, Serialize)]
pub struct LearnOutcome {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub diverged_at: Option<usize>,
}

pub fn cmd_learn(cfg: &ExperimentConfig, out_dir: &Path) -> Result<LearnOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let weights = cfg.build_model()?;
    let seqs = require_tokens(&cfg.model, load_calibration(cfg)?)?;
    let train = cfg.train_config();
    let run = train_transforms(&weights, &cfg.model, &cfg.setup(), &cfg.quant_points(), &seqs, &train)?;
    let trace = out_dir.join(&cfg.outputs.trace);
    fs::write(&trace, run.trace.csv())?;
    let checkpoint = out_dir.join(&cfg.outputs.transforms);
    write_container(&params_to_container(&run.params), &checkpoint)?;
    Ok(LearnOutcome {
        checkpoint,
        trace,
        initial_loss: run.trace.initial().map_or(f64::NAN, |r| r.loss_total),
        final_loss: run.trace.last().map_or(f64::NAN, |r| r.loss_total),
        steps: train.steps,
        diverged_at: run.diverged_at,
    })
}

// ---------------------------------------------------------------------------
// quantize

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizeMetrics {
    pub schema_version: u32,
    pub method: WeightQuantMethod,
    pub fold_deviation: f64,
    pub fold_tolerance: f64,
    /// Mean squared error between folded and quantized entries, per weight.
    pub weight_mse: BTreeMap<String, f64>,
    /// Transform quantization error of the stream transform on calibration
    /// activations, with its per-block decomposition.
    pub activation_mse: f64,
    pub per_block_activation_mse: Vec<f64>,
    /// Mean squared logit deviation of the weight-quantized folded model
    /// against the folded full-precision model.
    pub logits_mse: f64,
    pub data_note: String,
}

fn mean_sq_diff(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len();
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
}

fn vstack(mats: &[Matrix]) -> Matrix {
    let cols = mats[0].cols();
    let rows: usize = mats.iter().map(Matrix::rows).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        for i in 0..m.rows() {
            out.row_mut(r).copy_from_slice(m.row(i));
            r += 1;
        }
    }
    out
}

fn add_bias(mut m: Matrix, b: &[f64]) -> Matrix {
    for i in 0..m.rows() {
        for (t, bi) in m.row_mut(i).iter_mut().zip(b) {
            *t += bi;
        }
    }
    m
}

/// Inputs seen by each quantized weight in one model, stacked over sequences.
struct WeightInputs {
    attn_in: Vec<Matrix>,
    ctx: Vec<Matrix>,
    ffn_in: Vec<Matrix>,
    act: Vec<Matrix>,
    head_in: Matrix,
}

fn collect_weight_inputs(
    weights: &ModelWeights,
    config: &ModelConfig,
    seqs: &[Vec<u32>],
) -> Result<WeightInputs> {
    let l_count = config.n_layers;
    let dh = config.d_head();
    let mut attn_in = vec![Vec::new(); l_count];
    let mut ctx = vec![Vec::new(); l_count];
    let mut ffn_in = vec![Vec::new(); l_count];
    let mut act = vec![Vec::new(); l_count];
    let mut head_in = Vec::new();
    for seq in seqs {
        let trace = forward_fp_detailed(weights, config, seq)?;
        for (l, lw) in weights.layers.iter().enumerate() {
            let a_in = &trace.t1_inputs[2 * l];
            let v = add_bias(matmul(a_in, &lw.wv.transpose()), &lw.bv);
            let mut c = Matrix::zeros(v.rows(), v.cols());
            for (h, probs) in trace.attn_probs[l].iter().enumerate() {
                for i in 0..v.rows() {
                    for j in 0..v.rows() {
                        let p = probs.get(i, j);
                        if p != 0.0 {
                            for t in 0..dh {
                                let col = h * dh + t;
                                let s = c.get(i, col) + p * v.get(j, col);
                                c.set(i, col, s);
                            }
                        }
                    }
                }
            }
            let f_in = &trace.t1_inputs[2 * l + 1];
            let up = add_bias(matmul(f_in, &lw.w_up.transpose()), &lw.b_up);
            let gate = add_bias(matmul(f_in, &lw.w_gate.transpose()), &lw.b_gate);
            let mut a = gate;
            for (t, u) in a.data_mut().iter_mut().zip(up.data()) {
                let s = 1.0 / (1.0 + (-*t).exp());
                *t = *t * s * u;
            }
            attn_in[l].push(a_in.clone());
            ctx[l].push(c);
            ffn_in[l].push(f_in.clone());
            act[l].push(a);
        }
        head_in.push(trace.t1_inputs[2 * l_count].clone());
    }
    Ok(WeightInputs {
        attn_in: attn_in.iter().map(|v| vstack(v)).collect(),
        ctx: ctx.iter().map(|v| vstack(v)).collect(),
        ffn_in: ffn_in.iter().map(|v| vstack(v)).collect(),
        act: act.iter().map(|v| vstack(v)).collect(),
        head_in: vstack(&head_in),
    })
}

/// Fold the learned transforms into the weights and quantize the folded
/// linear layers. The fold-equivalence gate runs first; a model whose folded
/// form does not reproduce the injected form is refused, so algebra bugs can
/// never hide behind quantization noise.
pub fn quantize_model(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    set: &TransformSet,
    seqs: &[Vec<u32>],
) -> Result<(ModelWeights, QuantizeMetrics)> {
    let gate: Vec<Vec<u32>> = seqs.iter().take(GATE_SEQS).cloned().collect();
    let fold_deviation =
        check_fold_equivalence(weights, &cfg.model, set, cfg.mx.block_size, &gate, FOLD_GATE_TOL)?;
    let folded = fold_all(weights, set, cfg.mx.block_size)?;

    let hessian_seqs: Vec<Vec<u32>> = seqs.iter().take(HESSIAN_SEQS).cloned().collect();
    let inputs = collect_weight_inputs(&folded, &cfg.model, &hessian_seqs)?;
    let quant = |w: &Matrix, x: &Matrix| -> Result<Matrix> {
        match cfg.weight_quant {
            WeightQuantMethod::Rtn => rtn_quantize_weights(w, &cfg.mx),
            WeightQuantMethod::Gptq => gptq_quantize_weights(w, x, &cfg.mx, GPTQ_DAMPING),
        }
    };

    let mut quantized = folded.clone();
    let mut weight_mse = BTreeMap::new();
    for (l, lw) in folded.layers.iter().enumerate() {
        let slots: [(&str, &Matrix, &Matrix); 7] = [
            ("wq", &lw.wq, &inputs.attn_in[l]),
            ("wk", &lw.wk, &inputs.attn_in[l]),
            ("wv", &lw.wv, &inputs.attn_in[l]),
            ("wo", &lw.wo, &inputs.ctx[l]),
            ("w_up", &lw.w_up, &inputs.ffn_in[l]),
            ("w_gate", &lw.w_gate, &inputs.ffn_in[l]),
            ("w_down", &lw.w_down, &inputs.act[l]),
        ];
        for (name, w, x) in slots {
            let q = quant(w, x)?;
            weight_mse.insert(format!("layer{l}.{name}"), mean_sq_diff(w, &q));
            let target = &mut quantized.layers[l];
            match name {
                "wq" => target.wq = q,
                "wk" => target.wk = q,
                "wv" => target.wv = q,
                "wo" => target.wo = q,
                "w_up" => target.w_up = q,
                "w_gate" => target.w_gate = q,
                "w_down" => target.w_down = q,
                _ => unreachable!(),
            }
        }
    }
    let qh = quant(&folded.w_head, &inputs.head_in)?;
    weight_mse.insert("head".into(), mean_sq_diff(&folded.w_head, &qh));
    quantized.w_head = qh;

    let t1_inputs = collect_t1_inputs(weights, &cfg.model, &hessian_seqs)?;
    let act_report = transformation_mse(&set.t1, &cfg.mx, &t1_inputs)?;
    let mut logits_mse = 0.0;
    let eval: Vec<&Vec<u32>> = seqs.iter().take(EVAL_SEQS).collect();
    for seq in &eval {
        let a = forward_fp(&folded, &cfg.model, seq)?;
        let b = forward_fp(&quantized, &cfg.model, seq)?;
        logits_mse += mean_sq_diff(&a, &b) / eval.len() as f64;
    }

    let metrics = QuantizeMetrics {
        schema_version: SCHEMA_VERSION,
        method: cfg.weight_quant,
        fold_deviation,
        fold_tolerance: FOLD_GATE_TOL,
        weight_mse,
        activation_mse: act_report.mse,
        per_block_activation_mse: act_report.per_block_mse,
        logits_mse,
        data_note: DATA_NOTE.into(),
    };
    Ok((quantized, metrics))
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizeOutcome {
    pub model: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: QuantizeMetrics,
}

pub fn cmd_quantize(cfg: &ExperimentConfig, out_dir: &Path) -> Result<QuantizeOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let weights = cfg.build_model()?;
    let seqs = require_tokens(&cfg.model, load_calibration(cfg)?)?;
    let ckpt = out_dir.join(&cfg.outputs.transforms);
    if !ckpt.exists() {
        return Err(Error::InvalidConfig(format!(
            "missing transform checkpoint {}; run learn first",
            ckpt.display()
        )));
    }
    let params = params_from_container(&read_container(&ckpt)?)?;
    let set = params.assemble(cfg.t3_enabled)?;
    let (quantized, metrics) = quantize_model(cfg, &weights, &set, &seqs)?;
    let model = out_dir.join(&cfg.outputs.quantized_model);
    write_container(&model_to_container(&quantized), &model)?;
    let metrics_path = out_dir.join(&cfg.outputs.metrics);
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    Ok(QuantizeOutcome { model, metrics_path, metrics })
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateMethod {
    None,
    HadamardFull,
    HadamardBlock,
    LearnedOrthogonal,
    LearnedInvertible,
    LatmixLu,
    LatmixQr,
}

impl AblateMethod {
    pub const ALL: [AblateMethod; 7] = [
        AblateMethod::None,
        AblateMethod::HadamardFull,
        AblateMethod::HadamardBlock,
        AblateMethod::LearnedOrthogonal,
        AblateMethod::LearnedInvertible,
        AblateMethod::LatmixLu,
        AblateMethod::LatmixQr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblateMethod::None => "none",
            AblateMethod::HadamardFull => "hadamard_full",
            AblateMethod::HadamardBlock => "hadamard_block",
            AblateMethod::LearnedOrthogonal => "learned_orthogonal",
            AblateMethod::LearnedInvertible => "learned_invertible",
            AblateMethod::LatmixLu => "latmix_lu",
            AblateMethod::LatmixQr => "latmix_qr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblateMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation method '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub method: String,
    pub activation_mse: f64,
    pub kl_to_teacher: f64,
    pub per_block_mse: Vec<f64>,
}

/// The transform set an ablation method stands for. Learned methods run the
/// full training loop; the online transform stays off for every method so
/// the rows differ only in the transform under study.
fn ablate_transform_set(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    method: AblateMethod,
    seqs: &[Vec<u32>],
) -> Result<TransformSet> {
    let d = cfg.model.d_model;
    let fixed = |kind: PresetTransform| -> Result<TransformSet> {
        let mut set = TransformSet::identity(&cfg.model);
        set.t1 = preset_transform(kind, d, cfg.mx.block_size, cfg.seed)?;
        Ok(set)
    };
    let learned = |parameterization: Parameterization, variant: MethodVariant| -> Result<TransformSet> {
        let setup = TrainSetup {
            parameterization,
            scheme: cfg.init,
            init: InitOptions { bd_block: cfg.mx.block_size, ..InitOptions::default() },
            variant,
            t3_enabled: false,
        };
        let mut train = cfg
            .train
            .clone()
            .unwrap_or_else(|| TrainConfig::for_parameterization(parameterization));
        train.seed = cfg.seed;
        let run = train_transforms(weights, &cfg.model, &setup, &cfg.quant_points(), seqs, &train)?;
        Ok(run.transforms)
    };
    match method {
        AblateMethod::None => fixed(PresetTransform::None),
        AblateMethod::HadamardFull => fixed(PresetTransform::HadamardFull),
        AblateMethod::HadamardBlock => fixed(PresetTransform::HadamardBlock),
        AblateMethod::LearnedOrthogonal => learned(Parameterization::Qr, MethodVariant::OrthogonalOnly),
        AblateMethod::LearnedInvertible => learned(Parameterization::Lu, MethodVariant::NoShift),
        AblateMethod::LatmixLu => learned(Parameterization::Lu, MethodVariant::Full),
        AblateMethod::LatmixQr => learned(Parameterization::Qr, MethodVariant::Full),
    }
}

pub fn ablate_rows(
    cfg: &ExperimentConfig,
    methods: &[AblateMethod],
) -> Result<Vec<AblateRow>> {
    let weights = cfg.build_model()?;
    let seqs = require_tokens(&cfg.model, load_calibration(cfg)?)?;
    let t1_inputs = collect_t1_inputs(&weights, &cfg.model, &seqs)?;
    let eval: Vec<Vec<u32>> = seqs.iter().take(16).cloned().collect();
    let teacher: Vec<Matrix> = eval
        .iter()
        .map(|s| forward_fp(&weights, &cfg.model, s))
        .collect::<Result<Vec<_>>>()?;
    let qp = QuantPoints::all(cfg.mx.clone());
    let mut rows = Vec::new();
    for &method in methods {
        let set = ablate_transform_set(cfg, &weights, method, &seqs)?;
        let report = transformation_mse(&set.t1, &cfg.mx, &t1_inputs)?;
        let mut kl = 0.0;
        for (seq, t) in eval.iter().zip(&teacher) {
            let s = forward_transformed(&weights, &cfg.model, &set, &qp, seq)?;
            kl += kl_distill_loss(t, &s, 1.0) / eval.len() as f64;
        }
        rows.push(AblateRow {
            method: method.name().into(),
            activation_mse: report.mse,
            kl_to_teacher: kl,
            per_block_mse: report.per_block_mse,
        });
    }
    Ok(rows)
}

fn ablate_csv(rows: &[AblateRow]) -> String {
    let nb = rows.first().map_or(0, |r| r.per_block_mse.len());
    let mut out = String::from("method,activation_mse,kl_to_teacher");
    for i in 0..nb {
        out.push_str(&format!(",block_mse_{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.method, r.activation_mse, r.kl_to_teacher));
        for b in &r.per_block_mse {
            out.push_str(&format!(",{b}"));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    methods: &[AblateMethod],
    out_dir: &Path,
) -> Result<(PathBuf, Vec<AblateRow>)> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no ablation methods requested".into()));
    }
    fs::create_dir_all(out_dir)?;
    let rows = ablate_rows(cfg, methods)?;
    let path = out_dir.join(&cfg.outputs.ablation);
    fs::write(&path, ablate_csv(&rows))?;
    Ok((path, rows))
}

// ---------------------------------------------------------------------------
// sweep-blocksize

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub block_size: usize,
    pub mse: f64,
    /// MSE is no smaller than at every previous (smaller) size for this
    /// method; the expected shape of the curve.
    pub nondecreasing: bool,
}

pub fn sweep_rows(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no block sizes requested".into()));
    }
    let d = cfg.model.d_model;
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    for &b in &sizes {
        if b == 0 || d % b != 0 {
            return Err(Error::InvalidConfig(format!("block size {b} does not divide d_model {d}")));
        }
    }
    let weights = cfg.build_model()?;
    let samples = activation_samples(&weights, &cfg.model, &load_calibration(cfg)?)?;
    let methods = [
        PresetTransform::None,
        PresetTransform::HadamardFull,
        PresetTransform::HadamardBlock,
    ];
    let names = ["none", "hadamard_full", "hadamard_block"];
    let mut rows = Vec::new();
    for (kind, name) in methods.into_iter().zip(names) {
        let mut prev = f64::NEG_INFINITY;
        for &b in &sizes {
            let mx = MxConfig::new(cfg.mx.format.kind(), b);
            let t = preset_transform(kind, d, b, cfg.seed)?;
            let mse = transformation_mse(&t, &mx, &samples)?.mse;
            rows.push(SweepRow {
                method: name.into(),
                block_size: b,
                mse,
                nondecreasing: mse >= prev,
            });
            prev = prev.max(mse);
        }
    }
    Ok(rows)
}

pub fn cmd_sweep_blocksize(
    cfg: &ExperimentConfig,
    sizes: &[usize],
    out_dir: &Path,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let rows = sweep_rows(cfg, sizes)?;
    let mut csv = String::from("method,block_size,mse,nondecreasing\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.method, r.block_size, r.mse, r.nondecreasing));
    }
    let path = out_dir.join(&cfg.outputs.sweep);
    fs::write(&path, csv)?;
    Ok((path, rows))
}

// ---------------------------------------------------------------------------
// verify-bounds

#[derive(Debug, Clone, Serialize)]
pub struct LabeledBound {
    pub transform: String,
    pub dist: String,
    pub report: BoundReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaGridEntry {
    pub b: usize,
    pub sigma: f64,
    pub mu: String,
    pub report: LemmaReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Proposition2Summary {
    pub scenarios: usize,
    pub all_hold: bool,
    pub min_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsBundle {
    pub schema_version: u32,
    pub data_note: String,
    pub theorem1: Vec<LabeledBound>,
    pub lemma: Vec<LemmaGridEntry>,
    pub proposition2: Proposition2Summary,
    pub dirac: DiracHadamardReport,
    pub dirac_exact: bool,
    pub all_hold: bool,
}

fn random_affine(d: usize, seed: u64) -> Result<AffineTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            a.set(i, j, a.get(i, j) + 0.2 / (d as f64).sqrt() * z);
        }
    }
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    AffineTransform::new(a, v)
}

pub fn verify_bounds(cfg: &ExperimentConfig) -> Result<BoundsBundle> {
    let d = cfg.model.d_model;
    let outliers = VectorDist::OutlierChannels { count: (d / 16).max(1), scale: 20.0 };
    let transforms: Vec<(&str, AffineTransform)> = vec![
        ("identity", AffineTransform::identity(d)),
        ("hadamard", preset_transform(PresetTransform::HadamardFull, d, cfg.mx.block_size, cfg.seed)?),
        ("random_affine", random_affine(d, cfg.seed ^ 0xb0)?),
    ];
    let dists: [(&str, VectorDist); 2] = [("gaussian", VectorDist::Gaussian), ("outlier_channels", outliers)];
    let mut theorem1 = Vec::new();
    let mut seed = cfg.seed;
    for (tname, t) in &transforms {
        for (dname, dist) in &dists {
            seed += 1;
            theorem1.push(LabeledBound {
                transform: (*tname).into(),
                dist: (*dname).into(),
                report: theorem1_check(t, &cfg.mx, dist, 10_000, seed)?,
            });
        }
    }

    let mut lemma = Vec::new();
    for &b in &[2usize, 8, 32, 128] {
        for &sigma in &[0.5, 1.0, 2.0] {
            for mu_kind in ["zero", "random"] {
                seed += 1;
                let mu: Vec<f64> = if mu_kind == "zero" {
                    vec![0.0; b]
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..b).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z }).collect()
                };
                lemma.push(LemmaGridEntry {
                    b,
                    sigma,
                    mu: mu_kind.into(),
                    report: lemma_max_check(&mu, sigma, 100_000, seed),
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70726f70);
    let mut prop_all = true;
    let mut min_slack = f64::INFINITY;
    let scenarios = 1000;
    for i in 0..scenarios {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(2..=8);
        let eps = if i % 2 == 0 { 0.01 } else { 0.05 };
        let r = proposition2_check(&random_scenario(n, m, eps, rng.random())?);
        prop_all &= r.holds;
        min_slack = min_slack.min(r.slack);
    }

    let dirac = dirac_hadamard_demo()?;
    let dirac_exact = dirac.transformed == vec![6.0, 4.5, 5.0, 4.5];

    let all_hold = theorem1.iter().all(|t| t.report.holds && t.report.per_sample_holds)
        && lemma.iter().all(|l| l.report.holds)
        && prop_all
        && dirac_exact;
    Ok(BoundsBundle {
        schema_version: SCHEMA_VERSION,
        data_note: DATA_NOTE.into(),
        theorem1,
        lemma,
        proposition2: Proposition2Summary { scenarios, all_hold: prop_all, min_slack },
        dirac,
        dirac_exact,
        all_hold,
    })
}

pub fn cmd_verify_bounds(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, BoundsBundle)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let bundle = verify_bounds(cfg)?;
    let path = out_dir.join(&cfg.outputs.bounds);
    fs::write(&path, serde_json::to_string_pretty(&bundle)?)?;
    if !bundle.all_hold {
        let mut failures = Vec::new();
        for t in &bundle.theorem1 {
            if !(t.report.holds && t.report.per_sample_holds) {
                failures.push(format!("error bound ({}, {})", t.transform, t.dist));
            }
        }
        for l in &bundle.lemma {
            if !l.report.holds {
                failures.push(format!("max bound (B={}, sigma={}, mu={})", l.b, l.sigma, l.mu));
            }
        }
        if !bundle.proposition2.all_hold {
            failures.push("categorical KL bound".into());
        }
        if !bundle.dirac_exact {
            failures.push("worked example".into());
        }
        return Err(Error::Verification(format!("bound checks failed: {}", failures.join("; "))));
    }
    Ok((path, bundle))
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let spec = cfg.calibration.synthetic.as_ref().ok_or_else(|| {
        Error::InvalidConfig("gen-data needs a synthetic calibration spec, not a file".into())
    })?;
    fs::create_dir_all(out_dir)?;
    let data = generate_calibration(spec, cfg.seed)?;
    let path = out_dir.join(&cfg.outputs.data);
    write_container(&calibration_to_container(&data), &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::LossKind;
    use crate::model::check_equivalence;
    use crate::mxquant::ElementFormatKind;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                vocab_size: 32,
                max_seq_len: 16,
                has_bias: true,
            },
            mx: MxConfig::new(ElementFormatKind::Fp4E2m1, 8),
            calibration: CalibrationSource {
                file: None,
                synthetic: Some(SyntheticCalibSpec::TokenSequences {
                    vocab_size: 32,
                    n_sequences: 24,
                    seq_len: 12,
                }),
            },
            train: Some(TrainConfig {
                steps: 2,
                batch_size: 4,
                log_every: 1,
                loss: LossKind::Kl,
                ..TrainConfig::default()
            }),
            seed: 7,
            ..ExperimentConfig::default()
        }
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let p = std::env::temp_dir().join(format!("latmix-pipeline-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&p);
        fs::create_dir_all(&p).unwrap();
        p
    }

    #[test]
    fn config_roundtrips_and_rejects_bad_input() {
        let cfg = ExperimentConfig::default();
        let js = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&js).unwrap();
        back.validate().unwrap();
        assert_eq!(back.seed, cfg.seed);

        let unknown: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"schema":1,"frobnicate":3}"#);
        assert!(unknown.is_err());

        let mut bad = ExperimentConfig::default();
        bad.schema = 99;
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.mx = MxConfig::new(ElementFormatKind::Fp4E2m1, 48);
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.calibration = CalibrationSource { file: None, synthetic: None };
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.amplify = Some(AmplifySpec { channels: 1000, scale: 20.0 });
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.offset = Some(OffsetSpec { channels: 1000, delta: 8.0 });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn offset_channels_shift_embedding_column_means() {
        let mut cfg = tiny_config();
        cfg.offset = Some(OffsetSpec { channels: 2, delta: 9.0 });
        cfg.validate().unwrap();
        let plain = ExperimentConfig { offset: None, ..cfg.clone() }.build_model().unwrap();
        let shifted = cfg.build_model().unwrap();
        let d = cfg.model.d_model;
        let col_mean = |w: &ModelWeights, c: usize| {
            (0..w.embedding.rows()).map(|r| w.embedding.get(r, c)).sum::<f64>()
                / w.embedding.rows() as f64
        };
        let moved: Vec<usize> =
            (0..d).filter(|&c| (col_mean(&shifted, c) - col_mean(&plain, c)).abs() > 4.0).collect();
        assert_eq!(moved.len(), 2);
        for c in moved {
            let delta = col_mean(&shifted, c) - col_mean(&plain, c);
            assert!((delta - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_from_file_maps_parse_errors_to_config_errors() {
        let dir = tmpdir("cfg");
        let path = dir.join("bad.json");
        fs::write(&path, "{not json").unwrap();
        match ExperimentConfig::from_file(&path) {
            Err(Error::InvalidConfig(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn params_container_roundtrip_both_kinds() {
        let cfg = tiny_config();
        let weights = cfg.build_model().unwrap();
        let seqs = require_tokens(&cfg.model, load_calibration(&cfg).unwrap()).unwrap();
        for parameterization in [Parameterization::Lu, Parameterization::Qr] {
            let mut c2 = cfg.clone();
            c2.parameterization = parameterization;
            c2.train.as_mut().unwrap().steps = 1;
            let run = train_transforms(
                &weights,
                &c2.model,
                &c2.setup(),
                &c2.quant_points(),
                &seqs,
                &c2.train_config(),
            )
            .unwrap();
            let c = params_to_container(&run.params);
            let back = params_from_container(&c).unwrap();
            let a = run.params.assemble(c2.t3_enabled).unwrap();
            let b = back.assemble(c2.t3_enabled).unwrap();
            assert_eq!(a.t1.a(), b.t1.a());
            assert_eq!(a.t2.len(), b.t2.len());
            for (x, y) in a.t2.iter().zip(&b.t2) {
                assert_eq!(x.a(), y.a());
            }
        }
    }

    #[test]
    fn model_container_roundtrip_is_exact() {
        let cfg = tiny_config();
        let w = cfg.build_model().unwrap();
        let c = model_to_container(&w);
        let bytes = c.to_bytes();
        let back = model_from_container(&TensorContainer::from_bytes(&bytes).unwrap(), &cfg.model).unwrap();
        assert_eq!(w.embedding, back.embedding);
        assert_eq!(w.gain_final, back.gain_final);
        assert_eq!(w.w_head, back.w_head);
        assert_eq!(w.layers[0].wq, back.layers[0].wq);
        assert_eq!(w.layers[0].b_down, back.layers[0].b_down);
        check_equivalence(&w, &back, &cfg.model, &[vec![1, 2, 3]], 0.0).unwrap();
    }

    #[test]
    fn calibration_container_roundtrip() {
        let tokens = CalibrationData::Tokens(vec![vec![1, 2, 3], vec![4, 5]]);
        let back = calibration_from_container(&calibration_to_container(&tokens)).unwrap();
        assert_eq!(tokens, back);
        let vectors = CalibrationData::Vectors(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let back = calibration_from_container(&calibration_to_container(&vectors)).unwrap();
        assert_eq!(vectors, back);
        assert!(calibration_from_container(&TensorContainer::new()).is_err());
    }

    #[test]
    fn learn_command_is_deterministic_and_loads_back() {
        let cfg = tiny_config();
        let d1 = tmpdir("learn1");
        let d2 = tmpdir("learn2");
        let o1 = cmd_learn(&cfg, &d1).unwrap();
        let o2 = cmd_learn(&cfg, &d2).unwrap();
        assert!(o1.diverged_at.is_none());
        assert_eq!(fs::read(&o1.trace).unwrap(), fs::read(&o2.trace).unwrap());
        assert_eq!(fs::read(&o1.checkpoint).unwrap(), fs::read(&o2.checkpoint).unwrap());
        let trace = fs::read_to_string(&o1.trace).unwrap();
        assert!(trace.starts_with("step,lr,loss_total,loss_dist,loss_vol,orth_dev,offblock_norm\n"));
        let params = params_from_container(&read_container(&o1.checkpoint).unwrap()).unwrap();
        params.assemble(cfg.t3_enabled).unwrap();
    }

    #[test]
    fn learn_zero_steps_checkpoints_the_initialization() {
        let mut cfg = tiny_config();
        cfg.train.as_mut().unwrap().steps = 0;
        cfg.init = InitScheme::Identity;
        cfg.quantize_activations = false;
        let dir = tmpdir("learn0");
        let out = cmd_learn(&cfg, &dir).unwrap();
        // Identity init, no quantization: the student is the teacher.
        assert!(out.initial_loss.abs() < 1e-8, "loss {}", out.initial_loss);
        assert_eq!(out.initial_loss, out.final_loss);
        let params = params_from_container(&read_container(&out.checkpoint).unwrap()).unwrap();
        let set = params.assemble(cfg.t3_enabled).unwrap();
        assert!(set.t1.a().max_abs_diff(&Matrix::identity(16)) < 1e-12);
    }

    #[test]
    fn quantize_without_checkpoint_is_a_config_error() {
        let cfg = tiny_config();
        let dir = tmpdir("noq");
        match cmd_quantize(&cfg, &dir) {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("learn")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn quantize_identity_rtn_on_grid_weights_has_zero_weight_mse() {
        let mut cfg = tiny_config();
        cfg.weight_quant = WeightQuantMethod::Rtn;
        cfg.t3_enabled = false;
        let mut w = cfg.build_model().unwrap();
        // Unit gains keep the rmsnorm fold from rescaling anything, and
        // pre-quantized weights are fixed points of RTN.
        w.gain_final = vec![1.0; 16];
        for lw in &mut w.layers {
            lw.gain_attn = vec![1.0; 16];
            lw.gain_ffn = vec![1.0; 16];
            for m in [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo, &mut lw.w_up, &mut lw.w_gate, &mut lw.w_down] {
                *m = rtn_quantize_weights(m, &cfg.mx).unwrap();
            }
        }
        w.w_head = rtn_quantize_weights(&w.w_head, &cfg.mx).unwrap();
        let seqs = require_tokens(&cfg.model, load_calibration(&cfg).unwrap()).unwrap();
        let set = TransformSet::identity(&cfg.model);
        let (quantized, metrics) = quantize_model(&cfg, &w, &set, &seqs).unwrap();
        for (name, mse) in &metrics.weight_mse {
            assert_eq!(*mse, 0.0, "{name} changed");
        }
        assert_eq!(metrics.logits_mse, 0.0);
        assert!(metrics.fold_deviation <= FOLD_GATE_TOL);
        assert_eq!(quantized.layers[0].wq, fold_all(&w, &set, cfg.mx.block_size).unwrap().layers[0].wq);
    }

    #[test]
    fn quantize_full_flow_writes_model_and_metrics() {
        let cfg = tiny_config();
        let dir = tmpdir("qflow");
        cmd_learn(&cfg, &dir).unwrap();
        let out = cmd_quantize(&cfg, &dir).unwrap();
        assert!(out.model.exists());
        let metrics: QuantizeMetrics =
            serde_json::from_str(&fs::read_to_string(&out.metrics_path).unwrap()).unwrap();
        assert_eq!(metrics.schema_version, SCHEMA_VERSION);
        assert_eq!(metrics.weight_mse.len(), 7 * cfg.model.n_layers + 1);
        assert!(metrics.weight_mse.values().all(|m| m.is_finite() && *m >= 0.0));
        assert!(metrics.logits_mse > 0.0);
        assert!(metrics.data_note.contains("synthetic"));
        let m = model_from_container(&read_container(&out.model).unwrap(), &cfg.model).unwrap();
        m.validate(&cfg.model).unwrap();
    }

    #[test]
    fn ablate_fixed_methods_produce_rows_and_csv() {
        let cfg = tiny_config();
        let dir = tmpdir("ablate");
        let methods = [AblateMethod::None, AblateMethod::HadamardFull, AblateMethod::HadamardBlock];
        let (path, rows) = cmd_ablate(&cfg, &methods, &dir).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].method, "none");
        assert_eq!(rows[0].per_block_mse.len(), 2);
        for r in &rows {
            assert!(r.activation_mse.is_finite() && r.activation_mse >= 0.0);
            assert!(r.kl_to_teacher.is_finite() && r.kl_to_teacher >= 0.0);
        }
        let csv = fs::read_to_string(&path).unwrap();
        assert!(csv.starts_with("method,activation_mse,kl_to_teacher,block_mse_0,block_mse_1\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn ablate_method_parsing() {
        assert_eq!(AblateMethod::parse("latmix_lu").unwrap(), AblateMethod::LatmixLu);
        assert!(AblateMethod::parse("banana").is_err());
        for m in AblateMethod::ALL {
            assert_eq!(AblateMethod::parse(m.name()).unwrap(), m);
        }
    }

    #[test]
    fn sweep_identity_mse_is_nondecreasing_on_outlier_vectors() {
        // A sparse outlier channel is what makes bigger blocks worse: one hot
        // channel inflates the shared scale for everything in its block.
        let mut cfg = tiny_config();
        cfg.calibration = CalibrationSource {
            file: None,
            synthetic: Some(SyntheticCalibSpec::GaussianOutlierChannels {
                dim: 16,
                n_samples: 2000,
                outlier_channels: 1,
                outlier_scale: 20.0,
            }),
        };
        let dir = tmpdir("sweep");
        let (path, rows) = cmd_sweep_blocksize(&cfg, &[16, 4, 8], &dir).unwrap();
        let none: Vec<&SweepRow> = rows.iter().filter(|r| r.method == "none").collect();
        assert_eq!(none.len(), 3);
        assert_eq!(none[0].block_size, 4);
        assert!(none.iter().all(|r| r.nondecreasing));
        assert!(none[0].mse <= none[2].mse);
        let csv = fs::read_to_string(&path).unwrap();
        assert!(csv.starts_with("method,block_size,mse,nondecreasing\n"));
        assert_eq!(csv.lines().count(), 10);
        let again = cmd_sweep_blocksize(&cfg, &[16, 4, 8], &dir).unwrap();
        assert_eq!(fs::read_to_string(&again.0).unwrap(), csv);
    }

    #[test]
    fn sweep_rejects_nondividing_size() {
        let cfg = tiny_config();
        let dir = tmpdir("sweepbad");
        assert!(cmd_sweep_blocksize(&cfg, &[5], &dir).is_err());
        assert!(cmd_sweep_blocksize(&cfg, &[], &dir).is_err());
    }

    #[test]
    fn gen_data_roundtrips_through_load() {
        let mut cfg = tiny_config();
        let dir = tmpdir("gendata");
        let path = cmd_gen_data(&cfg, &dir).unwrap();
        let direct = load_calibration(&cfg).unwrap();
        cfg.calibration = CalibrationSource { file: Some(path), synthetic: None };
        let via_file = load_calibration(&cfg).unwrap();
        assert_eq!(direct, via_file);
    }

    #[test]
    fn gen_data_requires_a_synthetic_spec() {
        let mut cfg = tiny_config();
        cfg.calibration =
            CalibrationSource { file: Some(PathBuf::from("x.mxtd")), synthetic: None };
        let dir = tmpdir("gendata2");
        assert!(matches!(cmd_gen_data(&cfg, &dir), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn verify_bounds_all_hold_on_small_model() {
        let mut cfg = tiny_config();
        cfg.model.d_model = 32;
        cfg.model.n_heads = 2;
        cfg.mx = MxConfig::new(ElementFormatKind::Fp4E2m1, 8);
        let dir = tmpdir("bounds");
        let (path, bundle) = cmd_verify_bounds(&cfg, &dir).unwrap();
        assert!(bundle.all_hold);
        assert!(bundle.dirac_exact);
        assert_eq!(bundle.theorem1.len(), 6);
        assert_eq!(bundle.lemma.len(), 24);
        assert_eq!(bundle.proposition2.scenarios, 1000);
        let js: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(js["schema_version"], 1);
        assert_eq!(js["dirac"]["transformed"][0], 6.0);
    }
}
