//! The function-composition model: a shared image encoder, per-layer
//! pseudo-output maps, key/value functional memories and an MLP or NICE
//! backbone whose weights are composed per task.
//!
//! Batches are evaluated in one pass: all `7·B` images of a batch go through
//! the encoder together, and every backbone layer works on `[B, ·]` rows.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IQTask;
use crate::pinv::{PinvError, DEGENERATE_NORM_FLOOR};
use crate::tape::{ParamSet, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::transform::Image;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};

/// Channel widths of the three stride-2 convolutions.
pub const ENCODER_CHANNELS: [usize; 3] = [8, 16, 32];
/// Layers of the MLP backbone.
pub const MLP_LAYERS: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {layer}: {source}")]
    Degenerate {
        layer: usize,
        #[source]
        source: PinvError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mlp,
    Nice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_side: usize,
    pub embed_dim: usize,
    pub backbone: BackboneKind,
    /// NICE coupling layers (even). The MLP backbone always has two.
    pub nice_layers: usize,
    /// Entries per memory; 0 uses the query matrices as weights directly.
    pub memories: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            embed_dim: 32,
            backbone: BackboneKind::Nice,
            nice_layers: 4,
            memories: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.image_side < 2 {
            return bad(format!("image_side {} too small", self.image_side));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.backbone == BackboneKind::Nice {
            if !self.embed_dim.is_multiple_of(2) {
                return bad(format!("NICE needs an even embed_dim, got {}", self.embed_dim));
            }
            if self.nice_layers == 0 || !self.nice_layers.is_multiple_of(2) {
                return bad(format!("nice_layers must be even and positive, got {}", self.nice_layers));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        match self.backbone {
            BackboneKind::Mlp => MLP_LAYERS,
            BackboneKind::Nice => self.nice_layers,
        }
    }

    /// `(d_out, d_in)` of every backbone layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.embed_dim;
        match self.backbone {
            BackboneKind::Mlp => vec![(d, d); MLP_LAYERS],
            BackboneKind::Nice => vec![(d / 2, d / 2); self.nice_layers],
        }
    }

    /// Memory used by layer `t`. NICE couplings `2k` and `2k+1` share one.
    pub fn memory_of(&self, t: usize) -> usize {
        match self.backbone {
            BackboneKind::Mlp => t,
            BackboneKind::Nice => t / 2,
        }
    }

    pub fn memory_count(&self) -> usize {
        match self.backbone {
            BackboneKind::Mlp => MLP_LAYERS,
            BackboneKind::Nice => self.nice_layers / 2,
        }
    }

    /// Length of the φ-vector: the sum of `d_in·d_out` over layers.
    pub fn phi_len(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i).sum()
    }

    fn feature_side(&self) -> usize {
        (0..ENCODER_CHANNELS.len()).fold(self.image_side, |s, _| s.div_ceil(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIndex {
    conv: Vec<(usize, usize)>,
    proj: (usize, usize),
    gamma: Vec<(usize, usize)>,
    /// `(keys, values)` per memory.
    memory: Vec<(Vec<usize>, Vec<usize>)>,
    alpha: usize,
}

/// Result of a batched forward pass. Vars refer to the tape it ran on.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Mean cross-entropy of the answers.
    pub loss: Var,
    pub loss_value: f64,
    /// Per-task losses.
    pub losses: Vec<f64>,
    pub probabilities: Vec<[f64; 4]>,
    pub predictions: Vec<u8>,
    /// Composed weights per layer, each `[B, d_out, d_in]`.
    pub weights: Vec<Var>,
}

impl BatchOutput {
    /// φ-vector of task `b`: all composed weights, flattened and concatenated.
    pub fn phi(&self, tape: &Tape, b: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for &w in &self.weights {
            let t = tape.value(w);
            let n = t.shape()[1] * t.shape()[2];
            out.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub probabilities: [f64; 4],
    pub predicted_index: u8,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineModel {
    config: ModelConfig,
    pub params: ParamSet,
    index: ParamIndex,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn argmax_first(p: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u8
}

impl FineModel {
    /// Builds a freshly initialised model.
    ///
    /// The encoder's output projection starts at zero, so every image embeds
    /// to the same vector and an untrained model assigns equal probability
    /// to all choices.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let mut conv = Vec::new();
        let mut cin = 1;
        for (k, &cout) in ENCODER_CHANNELS.iter().enumerate() {
            let fan = cin * 9;
            let w = p.insert(format!("encoder.conv{}.weight", k + 1), uniform_tensor(&mut rng, &[cout, cin, 3, 3], fan));
            let b = p.insert(format!("encoder.conv{}.bias", k + 1), uniform_tensor(&mut rng, &[cout], fan));
            conv.push((w, b));
            cin = cout;
        }
        let fs = config.feature_side();
        let feat = cin * fs * fs;
        let d = config.embed_dim;
        let proj = (
            p.insert("encoder.proj.weight", Tensor::zeros(&[feat, d])),
            p.insert("encoder.proj.bias", uniform_tensor(&mut rng, &[d], feat)),
        );
        let dims = config.layer_dims();
        let mut gamma = Vec::new();
        for (t, &(dout, _)) in dims.iter().enumerate() {
            gamma.push((
                p.insert(format!("gamma.{t}.weight"), uniform_tensor(&mut rng, &[d, dout], d)),
                p.insert(format!("gamma.{t}.bias"), uniform_tensor(&mut rng, &[dout], d)),
            ));
        }
        let mut memory = Vec::new();
        if config.memories > 0 {
            for m in 0..config.memory_count() {
                let t = (0..dims.len()).find(|&t| config.memory_of(t) == m).expect("memory has a layer");
                let (dout, din) = dims[t];
                let normal = Normal::new(0.0, 1.0 / ((dout * din) as f64).sqrt()).expect("finite std");
                let draw = |rng: &mut ChaCha8Rng| {
                    let data = (0..dout * din).map(|_| normal.sample(rng)).collect();
                    Tensor::new(vec![dout, din], data).expect("shape matches data")
                };
                let keys = (0..config.memories)
                    .map(|i| p.insert(format!("memory.{m}.key.{i}"), draw(&mut rng)))
                    .collect();
                let values = (0..config.memories)
                    .map(|i| p.insert(format!("memory.{m}.value.{i}"), draw(&mut rng)))
                    .collect();
                memory.push((keys, values));
            }
        }
        // softplus⁻¹(1) = ln(e − 1)
        let alpha_init = (std::f64::consts::E - 1.0).ln();
        let alpha = p.insert("head.alpha_raw", Tensor::vector(vec![alpha_init; d]));
        Ok(Self {
            config,
            params: p,
            index: ParamIndex {
                conv,
                proj,
                gamma,
                memory,
                alpha,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Effective similarity weights `softplus(alpha_raw)`.
    pub fn alpha(&self) -> Vec<f64> {
        self.params
            .get(self.index.alpha)
            .data()
            .iter()
            .map(|&v| crate::tensor::softplus(v))
            .collect()
    }

    /// Keys and values of memory `m`, or `None` in query-as-weights mode.
    pub fn memory(&self, m: usize) -> Option<(Vec<&Tensor>, Vec<&Tensor>)> {
        let (k, v) = self.index.memory.get(m)?;
        Some((
            k.iter().map(|&i| self.params.get(i)).collect(),
            v.iter().map(|&i| self.params.get(i)).collect(),
        ))
    }

    fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect()
    }

    fn image_stack(&self, images: &[&Image]) -> Result<Tensor> {
        let side = self.config.image_side;
        let mut data = Vec::with_capacity(images.len() * side * side);
        for img in images {
            if img.side() != side {
                return Err(ModelError::Shape(format!(
                    "image side {} but model expects {side}",
                    img.side()
                )));
            }
            data.extend(img.pixels().iter().map(|&p| p as f64));
        }
        Ok(Tensor::new(vec![images.len(), 1, side, side], data)?)
    }

    fn encode_var(&self, tape: &mut Tape, pv: &[Var], imgs: Var) -> Result<Var> {
        let mut h = imgs;
        for &(w, b) in &self.index.conv {
            let c = tape.conv2d(h, pv[w], pv[b], 2, 1)?;
            h = tape.relu(c)?;
        }
        let n = tape.value(h).shape()[0];
        let feat = tape.value(h).numel() / n;
        let flat = tape.reshape(h, &[n, feat])?;
        let (w, b) = self.index.proj;
        let z = tape.matmul(flat, pv[w])?;
        Ok(tape.add(z, pv[b])?)
    }

    /// Embeds images; one row per image.
    pub fn encode(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pv = self.record_params(&mut tape);
        let x = tape.constant(self.image_stack(images)?);
        let e = self.encode_var(&mut tape, &pv, x)?;
        let d = self.config.embed_dim;
        Ok(tape.value(e).data().chunks(d).map(|r| r.to_vec()).collect())
    }

    /// Activation entering the linear map of layer `t`, plus the half that
    /// a NICE coupling adds to.
    fn layer_input(&self, tape: &mut Tape, cur: Var, t: usize) -> Result<(Var, Option<Var>)> {
        match self.config.backbone {
            BackboneKind::Mlp => {
                if t == 0 {
                    Ok((cur, None))
                } else {
                    Ok((tape.tanh(cur)?, None))
                }
            }
            BackboneKind::Nice => {
                let h = self.config.embed_dim / 2;
                let (c0, o0) = if t.is_multiple_of(2) { (0, h) } else { (h, 0) };
                let cond = tape.slice_cols(cur, c0, h)?;
                let other = tape.slice_cols(cur, o0, h)?;
                Ok((tape.tanh(cond)?, Some(other)))
            }
        }
    }

    fn layer_output(&self, tape: &mut Tape, cur: Var, t: usize, xt: Var, other: Option<Var>, w: Var) -> Result<Var> {
        let m = tape.batch_matvec(w, xt)?;
        match other {
            None => Ok(m),
            Some(other) => {
                let h = self.config.embed_dim / 2;
                let updated = tape.add(other, m)?;
                let c0 = if t.is_multiple_of(2) { 0 } else { h };
                let cond = tape.slice_cols(cur, c0, h)?;
                Ok(if t.is_multiple_of(2) {
                    tape.concat_cols(cond, updated)?
                } else {
                    tape.concat_cols(updated, cond)?
                })
            }
        }
    }

    /// Composes the weight of layer `t` from its input `xt` and the target
    /// embedding `y`: query `W^q = y_t x_t⁺`, analogy coefficients against
    /// the value memory, then a mix of the key memory.
    fn compose_layer(&self, tape: &mut Tape, pv: &[Var], t: usize, xt: Var, y: Var) -> Result<Var> {
        let (dout, din) = self.config.layer_dims()[t];
        let b = tape.value(xt).shape()[0];
        let (gw, gb) = self.index.gamma[t];
        let yw = tape.matmul(y, pv[gw])?;
        let yt = tape.add(yw, pv[gb])?;

        let sq = tape.mul(xt, xt)?;
        let n2 = tape.row_sum(sq)?;
        let min = tape.value(n2).data().iter().cloned().fold(f64::INFINITY, f64::min);
        if min.sqrt() < DEGENERATE_NORM_FLOOR {
            return Err(ModelError::Degenerate {
                layer: t,
                source: PinvError::NearZeroVector(min.sqrt()),
            });
        }
        let inv = tape.recip(n2)?;
        let xt_t = tape.transpose(xt)?;
        let scaled = tape.mul(xt_t, inv)?;
        let xplus = tape.transpose(scaled)?;
        let query = tape.batch_outer(yt, xplus)?;
        if self.config.memories == 0 {
            return Ok(query);
        }

        let s = self.config.memories;
        let (keys, values) = &self.index.memory[self.config.memory_of(t)];
        let qf = tape.reshape(query, &[b, dout * din])?;
        let vs: Vec<Var> = values.iter().map(|&i| pv[i]).collect();
        let vcat = tape.concat(&vs)?;
        let vflat = tape.reshape(vcat, &[s, dout * din])?;
        let vt = tape.transpose(vflat)?;
        let dots = tape.matmul(qf, vt)?;
        let a = tape.scale(dots, 1.0 / ((dout * din) as f64).sqrt())?;
        let ks: Vec<Var> = keys.iter().map(|&i| pv[i]).collect();
        let kcat = tape.concat(&ks)?;
        let kflat = tape.reshape(kcat, &[s, dout * din])?;
        let wf = tape.matmul(a, kflat)?;
        Ok(tape.reshape(wf, &[b, dout, din])?)
    }

    /// Runs the backbone on the hint input `x`, composing each layer's
    /// weight from the activation reaching it. Returns the weights.
    fn compose_var(&self, tape: &mut Tape, pv: &[Var], x: Var, y: Var) -> Result<Vec<Var>> {
        let mut cur = x;
        let mut weights = Vec::new();
        for t in 0..self.config.layer_count() {
            let (xt, other) = self.layer_input(tape, cur, t)?;
            let w = self.compose_layer(tape, pv, t, xt, y)?;
            cur = self.layer_output(tape, cur, t, xt, other, w)?;
            weights.push(w);
        }
        Ok(weights)
    }

    fn apply_var(&self, tape: &mut Tape, weights: &[Var], v: Var) -> Result<Var> {
        let mut cur = v;
        for (t, &w) in weights.iter().enumerate() {
            let (xt, other) = self.layer_input(tape, cur, t)?;
            cur = self.layer_output(tape, cur, t, xt, other, w)?;
        }
        Ok(cur)
    }

    /// `[B,4]` log-probabilities of the choices given the prediction `ystar`.
    fn head_var(&self, tape: &mut Tape, pv: &[Var], ystar: Var, choices: &[Var]) -> Result<Var> {
        let b = tape.value(ystar).shape()[0];
        let alpha = tape.softplus(pv[self.index.alpha])?;
        let mut etas = Vec::with_capacity(4);
        for &c in choices {
            let diff = tape.sub(c, ystar)?;
            let sq = tape.mul(diff, diff)?;
            let w = tape.mul(sq, alpha)?;
            etas.push(tape.row_sum(w)?);
        }
        let cat = tape.concat(&etas)?;
        let grid = tape.reshape(cat, &[4, b])?;
        let eta = tape.transpose(grid)?;
        let logits = tape.neg(eta)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// Batched forward pass with mean cross-entropy loss on `tape`.
    pub fn forward_batch(&self, tape: &mut Tape, tasks: &[&IQTask]) -> Result<BatchOutput> {
        let b = tasks.len();
        if b == 0 {
            return Err(ModelError::Config("empty batch".into()));
        }
        let pv = self.record_params(tape);
        let images: Vec<&Image> = (0..7).flat_map(|role| tasks.iter().map(move |t| t.images()[role])).collect();
        let stack = tape.constant(self.image_stack(&images)?);
        let emb = self.encode_var(tape, &pv, stack)?;
        let parts = tape.split(emb, &[b; 7])?;
        let weights = self.compose_var(tape, &pv, parts[0], parts[1])?;
        let ystar = self.apply_var(tape, &weights, parts[2])?;
        let logp = self.head_var(tape, &pv, ystar, &parts[3..7])?;

        let mut onehot = vec![0.0; b * 4];
        for (i, t) in tasks.iter().enumerate() {
            onehot[i * 4 + t.answer_index as usize] = 1.0;
        }
        let mask = tape.constant(Tensor::new(vec![b, 4], onehot)?);
        let picked = tape.mul(logp, mask)?;
        let total = tape.sum(picked)?;
        let loss = tape.scale(total, -1.0 / b as f64)?;

        let lp = tape.value(logp).data();
        let mut probabilities = Vec::with_capacity(b);
        let mut predictions = Vec::with_capacity(b);
        let mut losses = Vec::with_capacity(b);
        for (row, t) in lp.chunks(4).zip(tasks) {
            let p = [row[0].exp(), row[1].exp(), row[2].exp(), row[3].exp()];
            predictions.push(argmax_first(row));
            losses.push(-row[t.answer_index as usize]);
            probabilities.push(p);
        }
        Ok(BatchOutput {
            loss,
            loss_value: tape.value(loss).item(),
            losses,
            probabilities,
            predictions,
            weights,
        })
    }

    /// Solves one task: choice probabilities, predicted index (lowest on
    /// ties) and the φ-vector of composed weights.
    pub fn solve_task(&self, task: &IQTask) -> Result<Solution> {
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &[task])?;
        Ok(Solution {
            probabilities: out.probabilities[0],
            predicted_index: out.predictions[0],
            phi: out.phi(&tape, 0),
        })
    }

    /// Composed per-layer weights for a hint pair of embeddings.
    pub fn compose_function(&self, x_emb: &[f64], y_emb: &[f64]) -> Result<Vec<Tensor>> {
        let d = self.config.embed_dim;
        if x_emb.len() != d || y_emb.len() != d {
            return Err(ModelError::Shape(format!(
                "embeddings of length {} and {}, expected {d}",
                x_emb.len(),
                y_emb.len()
            )));
        }
        let mut tape = Tape::new();
        let pv = self.record_params(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, d], x_emb.to_vec())?);
        let y = tape.constant(Tensor::new(vec![1, d], y_emb.to_vec())?);
        let ws = self.compose_var(&mut tape, &pv, x, y)?;
        let dims = self.config.layer_dims();
        ws.iter()
            .zip(dims)
            .map(|(&w, (o, i))| Ok(Tensor::new(vec![o, i], tape.value(w).data().to_vec())?))
            .collect()
    }

    /// Applies the backbone with fixed weights to one embedding.
    pub fn apply_backbone(&self, weights: &[Tensor], v: &[f64]) -> Result<Vec<f64>> {
        match self.config.backbone {
            BackboneKind::Nice => nice_forward(v, weights),
            BackboneKind::Mlp => {
                let d = self.config.embed_dim;
                if v.len() != d || weights.len() != MLP_LAYERS {
                    return Err(ModelError::Shape("MLP expects two d×d weights and a d-vector".into()));
                }
                let h = matvec(&weights[0], v)?;
                let a: Vec<f64> = h.iter().map(|x| x.tanh()).collect();
                matvec(&weights[1], &a)
            }
        }
    }
}

fn matvec(w: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape()[1] != v.len() {
        return Err(ModelError::Shape(format!("{:?} x [{}]", w.shape(), v.len())));
    }
    Ok(w.data()
        .chunks(v.len())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

/// Analogy coefficients `a_i = ⟨V_i, W^q⟩ / √(d_in·d_out)` (no softmax).
pub fn analogy_weights(query: &Tensor, values: &[&Tensor]) -> Result<Vec<f64>> {
    let scale = (query.numel() as f64).sqrt();
    values
        .iter()
        .map(|v| {
            if v.shape() != query.shape() {
                return Err(ModelError::Shape(format!("value {:?} vs query {:?}", v.shape(), query.shape())));
            }
            Ok(v.data().iter().zip(query.data()).map(|(a, b)| a * b).sum::<f64>() / scale)
        })
        .collect()
}

/// `W = Σ a_i K_i`.
pub fn compose_weight(a: &[f64], keys: &[&Tensor]) -> Result<Tensor> {
    if a.len() != keys.len() || keys.is_empty() {
        return Err(ModelError::Shape(format!("{} coefficients for {} keys", a.len(), keys.len())));
    }
    let shape = keys[0].shape().to_vec();
    let mut out = vec![0.0; keys[0].numel()];
    for (&c, k) in a.iter().zip(keys) {
        if k.shape() != shape.as_slice() {
            return Err(ModelError::Shape(format!("key {:?} vs {:?}", k.shape(), shape)));
        }
        for (o, v) in out.iter_mut().zip(k.data()) {
            *o += c * v;
        }
    }
    Ok(Tensor::new(shape, out)?)
}

fn nice_check(v: &[f64], weights: &[Tensor]) -> Result<usize> {
    if !v.len().is_multiple_of(2) {
        return Err(ModelError::Shape(format!("NICE needs an even dimension, got {}", v.len())));
    }
    let h = v.len() / 2;
    if let Some(w) = weights.iter().find(|w| w.shape() != [h, h]) {
        return Err(ModelError::Shape(format!("coupling weight {:?}, expected [{h}, {h}]", w.shape())));
    }
    Ok(h)
}

fn coupling(v: &mut [f64], t: usize, w: &Tensor, sign: f64) -> Result<()> {
    let h = v.len() / 2;
    let (lo, hi) = v.split_at_mut(h);
    let (cond, other) = if t.is_multiple_of(2) { (lo, hi) } else { (hi, lo) };
    let a: Vec<f64> = cond.iter().map(|x| x.tanh()).collect();
    for (o, m) in other.iter_mut().zip(matvec(w, &a)?) {
        *o += sign * m;
    }
    Ok(())
}

/// Additive couplings `(u1, u2) → (u1, u2 + W·tanh(u1))`, alternating which
/// half conditions.
pub fn nice_forward(v: &[f64], weights: &[Tensor]) -> Result<Vec<f64>> {
    nice_check(v, weights)?;
    let mut out = v.to_vec();
    for (t, w) in weights.iter().enumerate() {
        coupling(&mut out, t, w, 1.0)?;
    }
    Ok(out)
}

/// Exact inverse of [`nice_forward`] with the same weights.
pub fn nice_inverse(v: &[f64], weights: &[Tensor]) -> Result<Vec<f64>> {
    nice_check(v, weights)?;
    let mut out = v.to_vec();
    for (t, w) in weights.iter().enumerate().rev() {
        coupling(&mut out, t, w, -1.0)?;
    }
    Ok(out)
}

/// `p_i ∝ exp(−Σ_k α_k (c_i,k − y*_k)²)`.
pub fn choice_probabilities(y_star: &[f64], choices: [&[f64]; 4], alpha: &[f64]) -> Result<[f64; 4]> {
    let d = y_star.len();
    if alpha.len() != d || choices.iter().any(|c| c.len() != d) {
        return Err(ModelError::Shape("choice, prediction and alpha dimensions differ".into()));
    }
    let eta = choices.map(|c| {
        c.iter()
            .zip(y_star)
            .zip(alpha)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
    });
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(ModelError::Tensor(TensorError::NonFinite { op: "weighted-distance" }));
    }
    let lo = eta.iter().cloned().fold(f64::INFINITY, f64::min);
    let e = eta.map(|v| (lo - v).exp());
    let z: f64 = e.iter().sum();
    Ok(e.map(|v| v / z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_task, gen_glyphs, TaskSampler};
    use crate::transform::{Family, SampleMode, TransformSpec};

    fn tiny(backbone: BackboneKind, memories: usize) -> ModelConfig {
        ModelConfig {
            image_side: 8,
            embed_dim: 8,
            backbone,
            nice_layers: 2,
            memories,
            seed: 3,
        }
    }

    fn tasks(n: usize, side: usize) -> Vec<IQTask> {
        let src = gen_glyphs(6, 2, side, 1).unwrap();
        let sampler = TaskSampler::new(vec![Family::Translation], SampleMode::PaperGrid);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (0..n)
            .map(|k| {
                let rule = TransformSpec::Translation { dx: 1 + k as i32 % 2, dy: 0 };
                assemble_task(&src, &rule, &sampler, &mut rng).unwrap()
            })
            .collect()
    }

    fn randomise(m: &mut FineModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn parameter_names() {
        let m = FineModel::new(tiny(BackboneKind::Nice, 3)).unwrap();
        let names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
        for n in [
            "encoder.conv1.weight",
            "encoder.proj.bias",
            "gamma.1.weight",
            "memory.0.key.2",
            "memory.0.value.0",
            "head.alpha_raw",
        ] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(!names.contains(&"memory.1.key.0"));
        assert!((m.alpha()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_odd_nice() {
        let mut c = tiny(BackboneKind::Nice, 1);
        c.nice_layers = 3;
        assert!(FineModel::new(c).is_err());
        let mut c = tiny(BackboneKind::Nice, 1);
        c.embed_dim = 7;
        assert!(FineModel::new(c).is_err());
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = FineModel::new(tiny(BackboneKind::Nice, 3)).unwrap();
        let ts = tasks(3, 8);
        for t in &ts {
            let s = m.solve_task(t).unwrap();
            for p in s.probabilities {
                assert!((p - 0.25).abs() < 1e-12);
            }
            assert_eq!(s.predicted_index, 0);
            assert_eq!(s.phi.len(), 2 * 16);
        }
    }

    #[test]
    fn batched_forward_matches_reference_functions() {
        for (kind, s) in [(BackboneKind::Nice, 3), (BackboneKind::Mlp, 2), (BackboneKind::Nice, 0)] {
            let mut m = FineModel::new(tiny(kind, s)).unwrap();
            randomise(&mut m, 9);
            let ts = tasks(4, 8);
            let refs: Vec<&IQTask> = ts.iter().collect();
            let mut tape = Tape::new();
            let out = m.forward_batch(&mut tape, &refs).unwrap();
            for (b, t) in ts.iter().enumerate() {
                let e = m.encode(&t.images()).unwrap();
                let ws = m.compose_function(&e[0], &e[1]).unwrap();
                let ystar = m.apply_backbone(&ws, &e[2]).unwrap();
                let p = choice_probabilities(&ystar, [&e[3], &e[4], &e[5], &e[6]], &m.alpha()).unwrap();
                for (a, c) in p.iter().zip(&out.probabilities[b]) {
                    assert!((a - c).abs() < 1e-12);
                }
                let phi: Vec<f64> = ws.iter().flat_map(|w| w.data().to_vec()).collect();
                assert_eq!(phi, out.phi(&tape, b));
            }
        }
    }

    #[test]
    fn composition_uses_memory_identities() {
        let mut m = FineModel::new(tiny(BackboneKind::Nice, 3)).unwrap();
        randomise(&mut m, 4);
        let x = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1];
        let y = vec![0.1, 0.2, -0.3, 0.4, 0.0, -0.5, 0.2, 0.3];
        let ws = m.compose_function(&x, &y).unwrap();
        // layer 0: recompute the query and mix by hand
        let (gw, gb) = m.index.gamma[0];
        let (gw, gb) = (m.params.get(gw), m.params.get(gb));
        let yt: Vec<f64> = (0..4)
            .map(|j| gb.data()[j] + (0..8).map(|i| y[i] * gw.data()[i * 4 + j]).sum::<f64>())
            .collect();
        let xt: Vec<f64> = x[..4].iter().map(|v| v.tanh()).collect();
        let q = crate::pinv::build_query(&Tensor::vector(xt), &Tensor::vector(yt)).unwrap();
        let (keys, values) = m.memory(0).unwrap();
        let a = analogy_weights(&q, &values).unwrap();
        let w = compose_weight(&a, &keys).unwrap();
        for (u, v) in w.data().iter().zip(ws[0].data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn query_as_weights_maps_input_to_pseudo_output() {
        let mut m = FineModel::new(tiny(BackboneKind::Mlp, 0)).unwrap();
        randomise(&mut m, 5);
        let x = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1];
        let y = vec![0.1, 0.2, -0.3, 0.4, 0.0, -0.5, 0.2, 0.3];
        let ws = m.compose_function(&x, &y).unwrap();
        let (gw, gb) = m.index.gamma[0];
        let (gw, gb) = (m.params.get(gw), m.params.get(gb));
        let y0: Vec<f64> = (0..8)
            .map(|j| gb.data()[j] + (0..8).map(|i| y[i] * gw.data()[i * 8 + j]).sum::<f64>())
            .collect();
        let out = matvec(&ws[0], &x).unwrap();
        for (a, b) in out.iter().zip(&y0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_image_side_is_a_shape_error() {
        let m = FineModel::new(tiny(BackboneKind::Nice, 1)).unwrap();
        let ts = tasks(1, 12);
        assert!(matches!(m.solve_task(&ts[0]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn probabilities_examples() {
        let y = [0.0, 0.0];
        let near: [f64; 2] = [0.0, 0.0];
        let far: [f64; 2] = [27f64.ln().sqrt(), 0.0];
        let p = choice_probabilities(&y, [&far, &near, &far, &far], &[1.0, 1.0]).unwrap();
        assert!(p[1] > 0.9);
        let p = choice_probabilities(&y, [&far; 4], &[1.0, 1.0]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn nice_single_layer_by_hand() {
        let w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let v = nice_forward(&[0.5, 1.0], std::slice::from_ref(&w)).unwrap();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - (1.0 + 2.0 * 0.5f64.tanh())).abs() < 1e-15);
        let back = nice_inverse(&v, &[w]).unwrap();
        assert!((back[1] - 1.0).abs() < 1e-15);
        assert!(nice_forward(&[1.0, 2.0, 3.0], &[]).is_err());
    }
}
