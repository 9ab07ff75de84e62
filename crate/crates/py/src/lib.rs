//! Python bindings: dataset generation and loading, the model (train,
//! evaluate, solve, checkpoints), transforms and pseudo-inverses.

use std::path::PathBuf;

use fine_core::data::{build_dataset, read_dataset, Dataset, DatasetConfig, SourceConfig, SplitSide};
use fine_core::model::{load_checkpoint, save_checkpoint, BackboneKind, FineModel, ModelConfig};
use fine_core::pinv::{self as mp, PinvConfig};
use fine_core::tensor::Tensor;
use fine_core::train::{evaluate, export_phi, train, TrainConfig};
use fine_core::transform::{self as tf, Family, Image, OodSide, SampleMode, TransformSpec};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn data_err(e: fine_core::data::DataError) -> PyErr {
    match e {
        fine_core::data::DataError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn parse_families(names: &[String]) -> PyResult<Vec<Family>> {
    names
        .iter()
        .map(|n| Family::parse(n).ok_or_else(|| value_err(format!("unknown family `{n}`"))))
        .collect()
}

fn parse_side(s: &str) -> PyResult<OodSide> {
    match s {
        "train" => Ok(OodSide::Train),
        "test" => Ok(OodSide::Test),
        _ => Err(value_err(format!("expected `train` or `test`, got `{s}`"))),
    }
}

/// A loaded task dataset.
#[pyclass(name = "Dataset", module = "finenet")]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_dataset(&path).map_err(data_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn image_side(&self) -> usize {
        self.inner.manifest.image_side
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.manifest.payload_fnv1a64.clone()
    }

    fn manifest_json(&self) -> String {
        serde_json::to_string(&self.inner.manifest).expect("manifest serialises")
    }

    /// Task `i` as a dict: images (x, y, x_prime, choices) as flat pixel
    /// lists, answer index, rule family and rule as JSON.
    fn task<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let t = self
            .inner
            .tasks
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("task {i} of {}", self.inner.len())))?;
        let d = PyDict::new(py);
        d.set_item("x", t.x.pixels().to_vec())?;
        d.set_item("y", t.y.pixels().to_vec())?;
        d.set_item("x_prime", t.x_prime.pixels().to_vec())?;
        let choices: Vec<Vec<f32>> = t.choices.iter().map(|c| c.pixels().to_vec()).collect();
        d.set_item("choices", choices)?;
        d.set_item("answer_index", t.answer_index)?;
        d.set_item("family", t.rule.family().name())?;
        d.set_item("rule", serde_json::to_string(&t.rule).expect("spec serialises"))?;
        Ok(d)
    }
}

/// Generates a dataset at `out` (manifest plus `.bin` payload) and loads it.
#[pyfunction]
#[pyo3(signature = (out, families=vec!["translation".to_string()], count=100, side=16, constraint=None, split="train", seed=0, glyph_classes=40, glyph_per_class=4))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    out: PathBuf,
    families: Vec<String>,
    count: usize,
    side: usize,
    constraint: Option<&str>,
    split: &str,
    seed: u64,
    glyph_classes: usize,
    glyph_per_class: usize,
) -> PyResult<PyDataset> {
    let mode = match constraint {
        None => SampleMode::PaperGrid,
        Some(s) => SampleMode::Constrained(parse_side(s)?),
    };
    let cfg = DatasetConfig {
        source: SourceConfig::ProceduralGlyph {
            class_count: glyph_classes,
            per_class: glyph_per_class,
            seed,
        },
        image_side: side,
        families: parse_families(&families)?,
        mode,
        task_count: count,
        side: match parse_side(split)? {
            OodSide::Train => SplitSide::Train,
            OodSide::Test => SplitSide::Test,
        },
        train_classes: Vec::new(),
        test_classes: Vec::new(),
        probe_same_class: false,
        seed,
    };
    Ok(PyDataset {
        inner: build_dataset(&cfg, &out).map_err(data_err)?,
    })
}

/// The function-composition model.
#[pyclass(name = "Model", module = "finenet")]
pub struct PyModel {
    inner: FineModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (image_side=16, embed_dim=32, backbone="nice", nice_layers=4, memories=16, seed=0))]
    fn new(
        image_side: usize,
        embed_dim: usize,
        backbone: &str,
        nice_layers: usize,
        memories: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let backbone = match backbone {
            "nice" => BackboneKind::Nice,
            "mlp" => BackboneKind::Mlp,
            other => return Err(value_err(format!("unknown backbone `{other}`"))),
        };
        let cfg = ModelConfig {
            image_side,
            embed_dim,
            backbone,
            nice_layers,
            memories,
            seed,
        };
        Ok(Self {
            inner: FineModel::new(cfg).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(value_err)?;
        Ok(())
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    #[getter]
    fn phi_len(&self) -> usize {
        self.inner.config().phi_len()
    }

    /// Trains in place; returns `(epoch, loss_mean, running_accuracy)` rows.
    #[pyo3(signature = (dataset, epochs=50, lr=3e-4, batch_size=32, seed=0))]
    fn train(
        &mut self,
        dataset: &PyDataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let cfg = TrainConfig {
            epochs,
            lr,
            batch_size_train: batch_size,
            seed,
            ..TrainConfig::default()
        };
        let curve = train(&mut self.inner, &dataset.inner, &cfg).map_err(value_err)?;
        Ok(curve.iter().map(|e| (e.epoch, e.loss_mean, e.train_accuracy)).collect())
    }

    /// Accuracy report as a dict, with per-family accuracies.
    #[pyo3(signature = (dataset, batch_size=100))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, batch_size: usize) -> PyResult<Bound<'py, PyDict>> {
        let rep = evaluate(&self.inner, &dataset.inner, batch_size, self.inner.config().seed).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", rep.accuracy)?;
        d.set_item("loss_mean", rep.loss_mean)?;
        d.set_item("count", rep.count)?;
        let fam = PyDict::new(py);
        for (f, st) in &rep.per_family {
            fam.set_item(f.name(), st.accuracy())?;
        }
        d.set_item("per_family", fam)?;
        d.set_item("csv", rep.to_csv())?;
        Ok(d)
    }

    /// `(probabilities, predicted_index, phi)` for task `i`.
    fn solve(&self, dataset: &PyDataset, i: usize) -> PyResult<(Vec<f64>, u8, Vec<f64>)> {
        let t = dataset
            .inner
            .tasks
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("task {i} of {}", dataset.inner.len())))?;
        let s = self.inner.solve_task(t).map_err(value_err)?;
        Ok((s.probabilities.to_vec(), s.predicted_index, s.phi))
    }

    #[pyo3(signature = (dataset, out, batch_size=100))]
    fn export_phi(&self, dataset: &PyDataset, out: PathBuf, batch_size: usize) -> PyResult<usize> {
        export_phi(&self.inner, &dataset.inner, &out, batch_size).map_err(value_err)
    }
}

/// Applies a transform given as JSON (e.g. `{"family":"rotation","angle_deg":90}`)
/// to a square image given as flat row-major pixels.
#[pyfunction]
fn apply_transform(pixels: Vec<f32>, side: usize, spec_json: &str) -> PyResult<Vec<f32>> {
    let spec: TransformSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    let img = Image::new(side, pixels).map_err(value_err)?;
    Ok(tf::apply_transform(&img, &spec).map_err(value_err)?.pixels().to_vec())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(value_err("ragged matrix"));
    }
    Tensor::matrix(r, c, rows.into_iter().flatten().collect()).map_err(value_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// Moore–Penrose pseudo-inverse by hyperpower iteration. Returns the
/// inverse and the largest relative Penrose residual.
#[pyfunction]
#[pyo3(signature = (a, tol=1e-12, max_iters=200))]
fn pinv(a: Vec<Vec<f64>>, tol: f64, max_iters: usize) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let cfg = PinvConfig {
        max_iters,
        residual_tol: tol,
        ..PinvConfig::default()
    };
    let out = mp::pinv_iterate(&matrix(a)?, &cfg).map_err(value_err)?;
    Ok((rows(&out.pinv), out.residuals.max()))
}

/// Rank-one query `y x⁺`, shape `len(y) × len(x)`.
#[pyfunction]
fn build_query(x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let q = mp::build_query(&Tensor::vector(x), &Tensor::vector(y)).map_err(value_err)?;
    Ok(rows(&q))
}

#[pymodule]
fn finenet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(apply_transform, m)?)?;
    m.add_function(wrap_pyfunction!(pinv, m)?)?;
    m.add_function(wrap_pyfunction!(build_query, m)?)?;
    Ok(())
}
