//! Python bindings: losses, retrieval, datasets, checkpoints and the
//! generate / train / evaluate pipeline.
//!
//! Configs and reports cross the boundary as plain dicts, converted through
//! the same serde types the command line reads.

use std::path::PathBuf;

use ccreid_core::checkpoint::Checkpoint as CoreCheckpoint;
use ccreid_core::eval::{self, EmbedOptions};
use ccreid_core::losses::{self, LossParts, LossWeights, ResizeMode};
use ccreid_core::synth::{self, CategoryTable, GenConfig, Protocol, Split};
use ccreid_core::trainer::{self, JointModel, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(ccreid, CcreidError, PyException, "Raised for every library error; `args[1]` is the CLI exit code.");

fn err(e: ccreid_core::Error) -> PyErr {
    CcreidError::new_err((e.to_string(), e.exit_code()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ccreid_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn config_err(msg: impl std::fmt::Display) -> PyErr {
    err(ccreid_core::Error::Config(msg.to_string()))
}

/// A dict (or `None` for defaults) into a serde config type.
fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = d else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(config_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(config_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| config_err(format!("unknown {what} '{s}'")))
}

// ---- losses ----

/// Cloth-irrelevant target for a parsing mask given as rows of category codes.
/// Returns `(full_grid, resized_grid)`, both as rows.
#[pyfunction]
#[pyo3(signature = (mask, target, epsilon=0.1, mode="area"))]
fn cloth_irrelevant_mask(mask: Vec<Vec<u8>>, target: (usize, usize), epsilon: f64, mode: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let h = mask.len();
    let w = mask.first().map_or(0, Vec::len);
    if mask.iter().any(|r| r.len() != w) {
        return Err(err(ccreid_core::Error::Shape("mask rows differ in length".into())));
    }
    let mode: ResizeMode = parse("resize mode", mode)?;
    let flat: Vec<u8> = mask.concat();
    let m = losses::cloth_irrelevant_mask(&flat, h, w, &CategoryTable::default(), epsilon, target, mode).py()?;
    let rows = |v: &[f64], w: usize| v.chunks(w.max(1)).map(<[f64]>::to_vec).collect();
    Ok((rows(&m.data, m.width), rows(&m.resized, m.resized_width)))
}

#[pyfunction]
fn attention_loss(attention: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    losses::attention_loss(&attention, &target).py()
}

#[pyfunction]
#[pyo3(signature = (z, temperature=1.0))]
fn softmax_with_temperature(z: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    losses::softmax_with_temperature(&z, temperature).py()
}

/// `KL(S(teacher, τ) ‖ S(student, τ))`.
#[pyfunction]
#[pyo3(signature = (teacher, student, temperature=1.0))]
fn kl_divergence(teacher: Vec<f64>, student: Vec<f64>, temperature: f64) -> PyResult<f64> {
    losses::kl_divergence(&teacher, &student, temperature).py()
}

#[pyfunction]
#[pyo3(signature = (student, teacher, temperature=5.0))]
fn fkp_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    losses::fkp_loss(&student, &teacher, temperature).py()
}

#[pyfunction]
fn cross_entropy_sum(logits: Vec<Vec<f64>>, label: usize) -> PyResult<f64> {
    losses::cross_entropy_sum(&logits, label).py()
}

/// Batch-hard triplet on one feature matrix given as rows.
#[pyfunction]
#[pyo3(signature = (features, labels, margin=0.3))]
fn batch_hard_triplet(features: Vec<Vec<f64>>, labels: Vec<usize>, margin: f64) -> PyResult<f64> {
    let d = features.first().map_or(0, Vec::len);
    let t = ccreid_core::Tensor::new(vec![features.len(), d], features.concat()).py()?;
    losses::batch_hard_triplet(&[&t], &labels, margin).py()
}

#[pyfunction]
#[pyo3(signature = (l_att, l_trip, l_fkp, l_ce_s, l_ce_g, lambda_att=7.0, alpha=0.7))]
fn total_loss(l_att: f64, l_trip: f64, l_fkp: f64, l_ce_s: f64, l_ce_g: f64, lambda_att: f64, alpha: f64) -> PyResult<f64> {
    let parts = LossParts { l_att, l_trip, l_fkp, l_ce_s, l_ce_g };
    let weights = LossWeights { lambda_att, alpha, ..Default::default() };
    losses::total_loss(&parts, &weights).py()
}

// ---- retrieval ----

#[pyclass(module = "ccreid", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PersonEmbedding {
    vector: Vec<f64>,
    global_len: usize,
    has_face: bool,
    identity_id: usize,
    clothing_id: usize,
}

#[pymethods]
impl PersonEmbedding {
    #[new]
    #[pyo3(signature = (vector, identity_id, clothing_id, global_len=None, has_face=false))]
    fn new(vector: Vec<f64>, identity_id: usize, clothing_id: usize, global_len: Option<usize>, has_face: bool) -> Self {
        let global_len = global_len.unwrap_or(vector.len());
        Self { vector, global_len, has_face, identity_id, clothing_id }
    }

    /// The same embedding with the face part dropped.
    fn without_face(&self) -> Self {
        Self::from(self.core().without_face())
    }

    fn __repr__(&self) -> String {
        format!(
            "PersonEmbedding(len={}, global_len={}, has_face={}, identity_id={}, clothing_id={})",
            self.vector.len(),
            self.global_len,
            self.has_face,
            self.identity_id,
            self.clothing_id
        )
    }
}

impl PersonEmbedding {
    fn core(&self) -> eval::PersonEmbedding {
        eval::PersonEmbedding {
            vector: self.vector.clone(),
            global_len: self.global_len,
            has_face: self.has_face,
            identity_id: self.identity_id,
            clothing_id: self.clothing_id,
        }
    }
}

impl From<eval::PersonEmbedding> for PersonEmbedding {
    fn from(e: eval::PersonEmbedding) -> Self {
        Self {
            vector: e.vector,
            global_len: e.global_len,
            has_face: e.has_face,
            identity_id: e.identity_id,
            clothing_id: e.clothing_id,
        }
    }
}

#[pyclass(module = "ccreid", from_py_object)]
#[derive(Clone)]
struct RetrievalResult {
    inner: eval::RetrievalResult,
}

#[pymethods]
impl RetrievalResult {
    #[getter]
    fn query_identity(&self) -> usize {
        self.inner.query_identity
    }

    #[getter]
    fn query_clothing(&self) -> usize {
        self.inner.query_clothing
    }

    /// Gallery indices by descending score.
    #[getter]
    fn indices(&self) -> Vec<usize> {
        self.inner.ranking.iter().map(|e| e.gallery_index).collect()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.ranking.iter().map(|e| e.score).collect()
    }

    #[getter]
    fn matches(&self) -> Vec<bool> {
        self.inner.matches()
    }

    fn __len__(&self) -> usize {
        self.inner.ranking.len()
    }
}

#[pyfunction]
fn cosine_rank(query: PersonEmbedding, gallery: Vec<PersonEmbedding>) -> PyResult<RetrievalResult> {
    let gallery: Vec<eval::PersonEmbedding> = gallery.iter().map(PersonEmbedding::core).collect();
    Ok(RetrievalResult { inner: eval::cosine_rank(&query.core(), &gallery).py()? })
}

fn core_results(results: Vec<RetrievalResult>) -> Vec<eval::RetrievalResult> {
    results.into_iter().map(|r| r.inner).collect()
}

/// `CMC(k)` for `k = 1..=|gallery|`.
#[pyfunction]
#[pyo3(signature = (results, protocol="cross_clothes"))]
fn cmc(results: Vec<RetrievalResult>, protocol: &str) -> PyResult<Vec<f64>> {
    eval::cmc(&core_results(results), parse("protocol", protocol)?).py()
}

#[pyfunction]
#[pyo3(signature = (results, protocol="cross_clothes"))]
fn mean_average_precision(results: Vec<RetrievalResult>, protocol: &str) -> PyResult<f64> {
    eval::mean_average_precision(&core_results(results), parse("protocol", protocol)?).py()
}

// ---- datasets and checkpoints ----

#[pyclass(module = "ccreid")]
struct Dataset {
    inner: synth::Dataset,
}

#[pymethods]
impl Dataset {
    /// Load a generated dataset directory.
    #[staticmethod]
    #[pyo3(signature = (root, protocol=None))]
    fn load(root: PathBuf, protocol: Option<&str>) -> PyResult<Self> {
        let mut inner = synth::Dataset::load(&root).py()?;
        if let Some(p) = protocol {
            inner = inner.with_protocol(parse("protocol", p)?).py()?;
        }
        Ok(Self { inner })
    }

    /// Render in memory without touching disk.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthesize(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: GenConfig = from_dict(py, config)?;
        Ok(Self { inner: synth::Dataset::from_synthetic(&cfg).py()? })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.inner.num_identities()
    }

    #[getter]
    fn dataset_seed(&self) -> u64 {
        self.inner.manifest.dataset_seed
    }

    #[getter]
    fn image_dims(&self) -> [usize; 2] {
        self.inner.manifest.image_dims
    }

    #[getter]
    fn face_dims(&self) -> [usize; 2] {
        self.inner.manifest.face_dims
    }

    /// Sample indices of a split: "train", "query", "gallery" or "unused".
    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        let split: Split = parse("split", split)?;
        Ok(self.inner.indices(split))
    }

    /// Manifest record of one sample as a dict.
    fn record<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| err(ccreid_core::Error::Data(format!("no sample {index}"))))?;
        to_py(py, r)
    }

    /// The image of one sample as row-major HWC values in `[0, 1]`.
    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| err(ccreid_core::Error::Data(format!("no sample {index}"))))?;
        let [h, w] = self.inner.manifest.image_dims;
        let chw = s.image.data();
        Ok((0..h * w * 3).map(|i| chw[(i % 3) * h * w + i / 3]).collect())
    }
}

#[pyclass(module = "ccreid")]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(&path).py()? })
    }

    /// Content hash of the serialized checkpoint.
    #[getter]
    fn id(&self) -> PyResult<String> {
        self.inner.id().py()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.meta.step
    }

    /// Metadata, including the training config, as a dict.
    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.meta)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().cloned().collect()
    }

    /// `(shape, values)` of one parameter tensor.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .params
            .get(name)
            .ok_or_else(|| err(ccreid_core::Error::Data(format!("no parameter '{name}'"))))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

// ---- pipeline ----

/// Render a dataset to `root`. Returns the number of samples written.
#[pyfunction]
#[pyo3(signature = (root, config=None))]
fn generate_dataset(py: Python<'_>, root: PathBuf, config: Option<&Bound<'_, PyDict>>) -> PyResult<usize> {
    let cfg: GenConfig = from_dict(py, config)?;
    Ok(synth::generate_dataset(&cfg, &root).py()?.samples.len())
}

/// Pretrain the face teacher and save it to `out`.
#[pyfunction]
#[pyo3(signature = (dataset, out, config=None))]
fn pretrain_teacher(py: Python<'_>, dataset: &Dataset, out: PathBuf, config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let outcome = py.detach(|| trainer::pretrain_teacher(&dataset.inner, &cfg)).py()?;
    outcome.checkpoint.save(&out).py()?;
    outcome.checkpoint.id().py()
}

/// Train a model and save its checkpoint to `out`. Returns the per-step metrics.
#[pyfunction]
#[pyo3(signature = (dataset, out, config=None, teacher=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    out: PathBuf,
    config: Option<&Bound<'py, PyDict>>,
    teacher: Option<&Checkpoint>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let teacher = teacher.map(|t| &t.inner);
    let outcome = py.detach(|| trainer::train_joint(&dataset.inner, teacher, &cfg)).py()?;
    outcome.checkpoint.save(&out).py()?;
    to_py(py, &outcome.metrics)
}

/// Evaluate a checkpoint on the dataset's query/gallery split. Returns the report.
#[pyfunction]
#[pyo3(signature = (dataset, checkpoint, protocol="cross_clothes", normalize_streams=false))]
fn evaluate<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    checkpoint: &Checkpoint,
    protocol: &str,
    normalize_streams: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let protocol: Protocol = parse("protocol", protocol)?;
    let model = JointModel::from_checkpoint(&checkpoint.inner).py()?;
    let id = checkpoint.inner.id().py()?;
    let ds = dataset.inner.clone().with_protocol(protocol).py()?;
    let opts = EmbedOptions { normalize_streams };
    let report = py.detach(|| eval::evaluate(&ds, &model, protocol, opts, &id, false)).py()?;
    to_py(py, &report)
}

/// Run the command line in-process, e.g. `run_cli(["train", "--config", "run.toml"])`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("ccreid".to_string()).chain(args).collect();
    py.detach(|| ccreid_core::cli::run(argv))
}

#[pymodule]
fn ccreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CcreidError", m.py().get_type::<CcreidError>())?;
    m.add_class::<PersonEmbedding>()?;
    m.add_class::<RetrievalResult>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(cloth_irrelevant_mask, m)?)?;
    m.add_function(wrap_pyfunction!(attention_loss, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_with_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(fkp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy_sum, m)?)?;
    m.add_function(wrap_pyfunction!(batch_hard_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_rank, m)?)?;
    m.add_function(wrap_pyfunction!(cmc, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
