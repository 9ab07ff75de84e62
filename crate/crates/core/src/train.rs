//! Training, evaluation, φ-vector export and the memory/layer ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, IQTask};
use crate::model::{save_checkpoint, BackboneKind, FineModel, ModelConfig, ModelError};
use crate::optim::{adam_step, clip_param_grads, AdamConfig, AdamState};
use crate::seed::derive_seed;
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::transform::Family;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Overrides applied on top of a base model configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Use the query matrices as layer weights (no memory).
    #[serde(default)]
    pub query_as_weights: bool,
    #[serde(default)]
    pub memories: Option<usize>,
    /// NICE coupling count; 0 selects the MLP backbone.
    #[serde(default)]
    pub layers: Option<usize>,
}

impl AblationFlags {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if let Some(s) = self.memories {
            cfg.memories = s;
        }
        if self.query_as_weights {
            cfg.memories = 0;
        }
        match self.layers {
            Some(0) => cfg.backbone = BackboneKind::Mlp,
            Some(l) => {
                cfg.backbone = BackboneKind::Nice;
                cfg.nice_layers = l;
            }
            None => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub lr: f64,
    pub clip_threshold: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size_train: 32,
            batch_size_eval: 100,
            lr: 3e-4,
            clip_threshold: 10.0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return bad("clip_threshold must be positive");
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_mean: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_accuracy: f64,
}

pub fn loss_curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss_mean,train_accuracy\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss_mean, e.train_accuracy);
    }
    s
}

fn diverged(e: ModelError, epoch: usize, batch: usize) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged { epoch, batch },
        other => other.into(),
    }
}

/// Trains `model` in place; returns the per-epoch loss curve.
pub fn train(model: &mut FineModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>, TrainError> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut FineModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let side = model.config().image_side;
    if data.manifest.image_side != side {
        return Err(ModelError::Shape(format!(
            "dataset image side {} but model expects {side}",
            data.manifest.image_side
        ))
        .into());
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params, adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size_train).enumerate() {
            let batch: Vec<&IQTask> = chunk.iter().map(|&i| &data.tasks[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward_batch(&mut tape, &batch).map_err(|e| diverged(e, epoch, bi))?;
            if !out.loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            loss_sum += out.loss_value * batch.len() as f64;
            correct += out
                .predictions
                .iter()
                .zip(&batch)
                .filter(|(p, t)| **p == t.answer_index)
                .count();
            let grads = tape.backward(out.loss).map_err(|e| diverged(e.into(), epoch, bi))?;
            grads.accumulate_into(&mut model.params);
            clip_param_grads(&mut model.params, cfg.clip_threshold);
            adam_step(&mut model.params, &mut state).map_err(|e| diverged(e.into(), epoch, bi))?;
            if model.params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
        }
        curve.push(EpochStats {
            epoch: epoch + 1,
            loss_mean: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
        on_epoch(curve.last().expect("just pushed"));
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            save_checkpoint(model, &dir.join(format!("epoch-{:04}.json", epoch + 1)))?;
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyStats {
    pub count: usize,
    pub correct: usize,
    pub loss_sum: f64,
}

impl FamilyStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss_mean: f64,
    pub count: usize,
    pub per_family: BTreeMap<Family, FamilyStats>,
    pub seed: u64,
    /// FNV-1a 64 of the dataset payload, hex.
    pub dataset_digest: String,
    pub predictions: Vec<u8>,
}

impl EvalReport {
    /// One row per family plus an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,count,correct,accuracy,loss_mean,seed,dataset_digest\n");
        for (f, st) in &self.per_family {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                f.name(),
                st.count,
                st.correct,
                st.accuracy(),
                st.loss_sum / st.count.max(1) as f64,
                self.seed,
                self.dataset_digest
            );
        }
        let correct: usize = self.per_family.values().map(|s| s.correct).sum();
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{}",
            self.count, correct, self.accuracy, self.loss_mean, self.seed, self.dataset_digest
        );
        s
    }
}

/// Scores `model` on every task; parameters are not touched.
pub fn evaluate(model: &FineModel, data: &Dataset, batch_size: usize, seed: u64) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    let mut per_family: BTreeMap<Family, FamilyStats> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in data.tasks.chunks(batch_size) {
        let batch: Vec<&IQTask> = chunk.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, &batch)?;
        for ((t, &p), &l) in chunk.iter().zip(&out.predictions).zip(&out.losses) {
            let st = per_family.entry(t.rule.family()).or_default();
            st.count += 1;
            st.correct += (p == t.answer_index) as usize;
            st.loss_sum += l;
            loss_sum += l;
            predictions.push(p);
        }
    }
    let correct: usize = per_family.values().map(|s| s.correct).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss_mean: loss_sum / data.len() as f64,
        count: data.len(),
        per_family,
        seed,
        dataset_digest: data.manifest.payload_fnv1a64.clone(),
        predictions,
    })
}

/// Layout of a φ export: `PHI1`, row count (u32 LE), φ length (u32 LE),
/// then per row the family id (u8), six f32 rule parameters and the φ-vector,
/// all little-endian.
pub const PHI_MAGIC: &[u8; 4] = b"PHI1";

#[derive(Debug, Clone, PartialEq)]
pub struct PhiRow {
    pub family: Family,
    pub params: [f32; 6],
    pub phi: Vec<f32>,
}

pub fn export_phi(model: &FineModel, data: &Dataset, out_path: &Path, batch_size: usize) -> Result<usize, TrainError> {
    let phi_len = model.config().phi_len();
    let mut buf = Vec::new();
    buf.extend_from_slice(PHI_MAGIC);
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(phi_len as u32).to_le_bytes());
    for chunk in data.tasks.chunks(batch_size.max(1)) {
        let batch: Vec<&IQTask> = chunk.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, &batch)?;
        for (b, t) in chunk.iter().enumerate() {
            buf.push(t.rule.family().id());
            for p in t.rule.encode_params() {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            for v in out.phi(&tape, b) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(out_path, &buf).map_err(|e| io(out_path, e))?;
    Ok(data.len())
}

/// Parses a file written by [`export_phi`].
pub fn read_phi(path: &Path) -> Result<Vec<PhiRow>, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    let bad = || TrainError::Config(format!("{} is not a φ export", path.display()));
    if bytes.len() < 12 || &bytes[..4] != PHI_MAGIC {
        return Err(bad());
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let (rows, len) = (u32_at(4), u32_at(8));
    let row_bytes = 1 + 24 + 4 * len;
    if bytes.len() != 12 + rows * row_bytes {
        return Err(bad());
    }
    (0..rows)
        .map(|r| {
            let at = 12 + r * row_bytes;
            let family = Family::from_id(bytes[at]).ok_or_else(bad)?;
            let params = std::array::from_fn(|k| f32_at(at + 1 + 4 * k));
            let phi = (0..len).map(|k| f32_at(at + 25 + 4 * k)).collect();
            Ok(PhiRow { family, params, phi })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Entries per memory; 0 is the query-as-weights mode.
    pub memories: Vec<usize>,
    /// NICE coupling counts; 0 is the MLP backbone.
    pub layers: Vec<usize>,
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub memories: usize,
    pub layers: usize,
    pub train_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub cell_mean: f64,
    pub cell_std: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("memories,layers,train_size,repeat,seed,accuracy,cell_mean,cell_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.memories, r.layers, r.train_size, r.repeat, r.seed, r.accuracy, r.cell_mean, r.cell_std
        );
    }
    s
}

/// Trains and evaluates one model per grid cell and repeat. Repeat `r` uses
/// the same seed in every cell, so cells differ only in the ablated setting.
pub fn run_ablation(
    grid: &AblationGrid,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<AblationRow>, TrainError> {
    if grid.memories.is_empty() || grid.layers.is_empty() || grid.train_sizes.is_empty() || grid.repeats == 0 {
        return Err(TrainError::Config("ablation grid is empty".into()));
    }
    let mut rows = Vec::new();
    for &s in &grid.memories {
        for &l in &grid.layers {
            for &n in &grid.train_sizes {
                if n == 0 || n > train_set.len() {
                    return Err(TrainError::Config(format!(
                        "train size {n} outside 1..={}",
                        train_set.len()
                    )));
                }
                let subset = train_set.truncated(n);
                let flags = AblationFlags {
                    query_as_weights: s == 0,
                    memories: Some(s),
                    layers: Some(l),
                };
                let mut cell = Vec::with_capacity(grid.repeats);
                for r in 0..grid.repeats {
                    let seed = derive_seed(base_train.seed, r as u64);
                    let mut mcfg = flags.apply(base_model);
                    mcfg.seed = seed;
                    let mut model = FineModel::new(mcfg)?;
                    let tcfg = TrainConfig {
                        seed,
                        checkpoint_every: 0,
                        ablation: flags.clone(),
                        ..base_train.clone()
                    };
                    train(&mut model, &subset, &tcfg)?;
                    let rep = evaluate(&model, test_set, tcfg.batch_size_eval, seed)?;
                    cell.push((r, seed, rep.accuracy));
                }
                let mean = cell.iter().map(|c| c.2).sum::<f64>() / cell.len() as f64;
                let var = cell.iter().map(|c| (c.2 - mean).powi(2)).sum::<f64>() / cell.len() as f64;
                for (r, seed, acc) in cell {
                    rows.push(AblationRow {
                        memories: s,
                        layers: l,
                        train_size: n,
                        repeat: r,
                        seed,
                        accuracy: acc,
                        cell_mean: mean,
                        cell_std: var.sqrt(),
                    });
                }
            }
        }
    }
    Ok(rows)
}
