//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use fine_core::data::{build_dataset, Dataset, DatasetConfig, SourceConfig, SplitSide};
use fine_core::data::IQTask;
use fine_core::model::{BackboneKind, FineModel, ModelConfig};
use fine_core::tape::Tape;
use fine_core::tensor::Tensor;
use fine_core::transform::{Family, Image, SampleMode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Glyph-backed dataset written under `dir`.
#[allow(clippy::too_many_arguments)]
pub fn glyph_dataset(
    dir: &Path,
    name: &str,
    families: &[Family],
    mode: SampleMode,
    count: usize,
    side: usize,
    split: SplitSide,
    seed: u64,
) -> Dataset {
    let cfg = DatasetConfig {
        source: SourceConfig::ProceduralGlyph {
            class_count: 40,
            per_class: 4,
            seed: 1,
        },
        image_side: side,
        families: families.to_vec(),
        mode,
        task_count: count,
        side: split,
        train_classes: Vec::new(),
        test_classes: Vec::new(),
        probe_same_class: false,
        seed,
    };
    build_dataset(&cfg, &dir.join(name)).expect("dataset builds")
}

fn gram_schmidt(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Random `m×n` full-rank matrix `U Σ Vᵀ` with condition number `cond`.
pub fn conditioned_matrix(rng: &mut impl Rng, m: usize, n: usize, cond: f64) -> Tensor {
    let k = m.min(n);
    let u = gram_schmidt(rng, m);
    let v = gram_schmidt(rng, n);
    let scale = rng.random_range(0.1..10.0);
    let sigma: Vec<f64> = (0..k)
        .map(|i| {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            scale * cond.powf(-t)
        })
        .collect();
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[r * n + c] = (0..k).map(|i| u[i][r] * sigma[i] * v[i][c]).sum();
        }
    }
    Tensor::matrix(m, n, data).unwrap()
}

/// The small model used by gradient checks: `d = 8`, `s = 3`, two NICE
/// couplings on 8×8 images. The projection is randomised because it starts
/// at zero, which would hide every encoder gradient.
pub fn tiny_model(seed: u64) -> FineModel {
    let mut model = FineModel::new(ModelConfig {
        image_side: 8,
        embed_dim: 8,
        backbone: BackboneKind::Nice,
        nice_layers: 2,
        memories: 3,
        seed,
    })
    .unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let idx = model.params.index_of("encoder.proj.weight").unwrap();
    let p = model.params.get_mut(idx);
    for v in p.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    model
}

fn loss_of(model: &FineModel, tasks: &[&IQTask]) -> f64 {
    let mut tape = Tape::new();
    model.forward_batch(&mut tape, tasks).unwrap().loss_value
}

/// Per parameter group, `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the analytic
/// gradient and central differences on up to `per_group` sampled entries.
pub fn model_gradient_errors(model: &FineModel, tasks: &[&IQTask], h: f64, per_group: usize) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, tasks).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let mut with_grads = model.clone();
    with_grads.params.zero_grads();
    grads.accumulate_into(&mut with_grads.params);

    let mut r = rng(17);
    let mut probe = model.clone();
    let mut report = Vec::new();
    for idx in 0..model.params.len() {
        let name = model.params.name(idx).to_string();
        let n = model.params.get(idx).numel();
        let analytic = with_grads.params.get(idx).grad.clone().unwrap();
        let picks = sample(&mut r, n, per_group.min(n)).into_vec();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for j in picks {
            let orig = model.params.get(idx).data()[j];
            probe.params.get_mut(idx).data_mut()[j] = orig + h;
            let up = loss_of(&probe, tasks);
            probe.params.get_mut(idx).data_mut()[j] = orig - h;
            let down = loss_of(&probe, tasks);
            probe.params.get_mut(idx).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        report.push((name, rel));
    }
    report
}

/// Smooth blob used by interpolation tests.
pub fn blob(side: usize) -> Image {
    let c = (side as f64 - 1.0) / 2.0;
    let s = side as f64 / 4.0;
    Image::from_fn(side, |r, col| {
        let (dy, dx) = (r as f64 - c, col as f64 - c * 0.8);
        (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
    })
}

/// Largest pixel difference inside the disc of radius `side/2 − margin`.
pub fn interior_max_error(a: &Image, b: &Image, margin: f64) -> f64 {
    let side = a.side();
    let c = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 2.0 - margin;
    let mut worst = 0.0f64;
    for r in 0..side {
        for col in 0..side {
            let (dy, dx) = (r as f64 - c, col as f64 - c);
            if (dx * dx + dy * dy).sqrt() <= radius {
                worst = worst.max((a.get(r, col) - b.get(r, col)).abs() as f64);
            }
        }
    }
    worst
}
