//! Python bindings for the fairness-aware representation-learning toolkit:
//! dataset synthesis, bias-capturing encoders, model training with the
//! probability-matching loss, evaluation reports, and the loss/diagnostic
//! primitives (pair sets, kernels, quadratic mutual information).
//!
//! The module mirrors the Rust API with Pythonic spellings: enums are
//! strings (`"ce"`, `"student_t"`, `"jeffreys"`, `"full"`,
//! `"attribute_supervised"`), matrices are lists of equal-length rows, and
//! reports are plain dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use flac_core::autodiff::{Tape, Tensor};
use flac_core::data::{self, ColorGridDataset, DataError};
use flac_core::flac::{self, attribute_equality_from_labels, FlacConfig, FlacError};
use flac_core::metrics::{self, MetricsError, QmiConfig};
use flac_core::model::Mlp;
use flac_core::train::{self, BiasCapturingMode, FrozenEncoder, HistoryRow, TrainError, TrainSets};

// ---------------------------------------------------------------------------
// Error mapping
// ---------------------------------------------------------------------------

fn data_err(e: DataError) -> PyErr {
    match e {
        DataError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn train_err(e: TrainError) -> PyErr {
    match &e {
        TrainError::InvalidConfig(_) | TrainError::MissingBiasEncoder => {
            PyValueError::new_err(e.to_string())
        }
        TrainError::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        TrainError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn flac_err(e: FlacError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn metrics_err(e: MetricsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_enum<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> PyResult<T> {
    s.parse()
        .map_err(|msg| PyValueError::new_err(format!("{what}: {msg}")))
}

/// Rectangular list-of-rows → row-major tensor.
fn matrix_from_rows(what: &str, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!(
            "{what} must have at least one row"
        )));
    }
    let width = rows[0].len();
    if width == 0 {
        return Err(PyValueError::new_err(format!(
            "{what} rows must be nonempty"
        )));
    }
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(PyValueError::new_err(format!(
                "{what} row {i} has length {} but row 0 has length {width}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows.len(), width], data).map_err(|e| PyValueError::new_err(e.to_string()))
}

// ---------------------------------------------------------------------------
// DatasetSpec
// ---------------------------------------------------------------------------

/// Recipe for one synthetic dataset: grid images whose background color is
/// spuriously linked to the class label with strength `q`.
#[pyclass(module = "flac_py", skip_from_py_object)]
#[derive(Clone)]
struct DatasetSpec {
    inner: data::DatasetSpec,
}

#[pymethods]
impl DatasetSpec {
    #[new]
    #[pyo3(signature = (n_classes=10, grid=8, q=0.99, n_per_class=100, seed=0, noise_std=0.05))]
    fn new(
        n_classes: usize,
        grid: usize,
        q: f64,
        n_per_class: usize,
        seed: u64,
        noise_std: f64,
    ) -> PyResult<Self> {
        let inner = data::DatasetSpec {
            n_classes,
            grid,
            q,
            n_per_class,
            seed,
            noise_std,
        };
        inner.validate().map_err(data_err)?;
        Ok(DatasetSpec { inner })
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn grid(&self) -> usize {
        self.inner.grid
    }

    #[getter]
    fn q(&self) -> f64 {
        self.inner.q
    }

    #[getter]
    fn n_per_class(&self) -> usize {
        self.inner.n_per_class
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.inner.noise_std
    }

    /// The value of `q` at which color carries no class information.
    fn unbiased_q(&self) -> f64 {
        self.inner.unbiased_q()
    }

    /// A copy of this spec with a different seed.
    fn with_seed(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            inner: data::DatasetSpec {
                seed,
                ..self.inner.clone()
            },
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "DatasetSpec(n_classes={}, grid={}, q={}, n_per_class={}, seed={}, noise_std={})",
            self.inner.n_classes,
            self.inner.grid,
            self.inner.q,
            self.inner.n_per_class,
            self.inner.seed,
            self.inner.noise_std
        )
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A synthesized dataset: pixel grids with class labels `y` and color
/// attributes `t`.
#[pyclass(module = "flac_py")]
struct Dataset {
    inner: ColorGridDataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn grid(&self) -> usize {
        self.inner.grid
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// All class labels, in sample order.
    fn labels(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.y).collect()
    }

    /// All color attributes, in sample order.
    fn attributes(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.t).collect()
    }

    /// Flattened RGB pixels of sample `i`.
    fn pixels(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .samples
            .get(i)
            .map(|s| s.pixels.clone())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    /// Fraction of samples whose color matches their class's linked color.
    fn bias_alignment(&self) -> PyResult<f64> {
        data::empirical_bias_ratio(&self.inner.samples).map_err(data_err)
    }

    /// Write the dataset to a binary file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&path, &self.inner).map_err(data_err)
    }

    /// Read a dataset written by `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::read_dataset(&path).map_err(data_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, n_classes={}, grid={})",
            self.inner.len(),
            self.inner.n_classes,
            self.inner.grid
        )
    }
}

/// Synthesize a dataset from a spec.
#[pyfunction]
fn generate(spec: &DatasetSpec) -> PyResult<Dataset> {
    Ok(Dataset {
        inner: data::generate(&spec.inner).map_err(data_err)?,
    })
}

/// The three-way experimental split: biased train set, unbiased test set,
/// and bias-conflicting test set.
#[pyfunction]
fn split_for_protocol(spec: &DatasetSpec) -> PyResult<(Dataset, Dataset, Dataset)> {
    let splits = data::split_for_protocol(&spec.inner).map_err(data_err)?;
    Ok((
        Dataset {
            inner: splits.train,
        },
        Dataset {
            inner: splits.test_unbiased,
        },
        Dataset {
            inner: splits.test_bias_conflict,
        },
    ))
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

/// Training hyperparameters. `alpha` weights the probability-matching term;
/// 0 trains a plain (Vanilla) classifier.
#[pyclass(module = "flac_py", skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: train::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (
        alpha=0.0, epochs=10, batch_size=128, lr=1e-3, weight_decay=1e-4,
        task_loss="ce", temperature=0.1, kernel="student_t",
        divergence="jeffreys", condition="full", seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: f64,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        task_loss: &str,
        temperature: f64,
        kernel: &str,
        divergence: &str,
        condition: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = train::TrainConfig {
            alpha,
            epochs,
            batch_size,
            lr,
            weight_decay,
            task_loss: parse_enum("task_loss", task_loss)?,
            temperature,
            kernel: parse_enum("kernel", kernel)?,
            divergence: parse_enum("divergence", divergence)?,
            condition: parse_enum("condition", condition)?,
            seed,
        };
        inner.validate().map_err(train_err)?;
        Ok(TrainConfig { inner })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// A copy of this config with a different loss weight.
    fn with_alpha(&self, alpha: f64) -> TrainConfig {
        TrainConfig {
            inner: train::TrainConfig {
                alpha,
                ..self.inner
            },
        }
    }

    /// A copy of this config with a different seed.
    fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            inner: train::TrainConfig { seed, ..self.inner },
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(alpha={}, epochs={}, batch_size={}, lr={}, task_loss={}, \
             kernel={}, divergence={}, condition={}, seed={})",
            self.inner.alpha,
            self.inner.epochs,
            self.inner.batch_size,
            self.inner.lr,
            self.inner.task_loss,
            self.inner.kernel,
            self.inner.divergence,
            self.inner.condition,
            self.inner.seed
        )
    }
}

// ---------------------------------------------------------------------------
// BiasEncoder
// ---------------------------------------------------------------------------

/// A frozen bias-capturing encoder whose similarity structure the matching
/// loss penalizes in the main model.
#[pyclass(module = "flac_py")]
struct BiasEncoder {
    inner: FrozenEncoder,
}

#[pymethods]
impl BiasEncoder {
    /// Train an encoder: `mode` is `"attribute_supervised"` (predict the
    /// color attribute) or `"vanilla_task"` (predict the class label and let
    /// the shortcut do the capturing).
    #[staticmethod]
    fn train(mode: &str, dataset: &Dataset, config: &TrainConfig) -> PyResult<BiasEncoder> {
        let mode: BiasCapturingMode = parse_enum("mode", mode)?;
        let inner =
            train::train_bias_capturing(mode, &dataset.inner, &config.inner).map_err(train_err)?;
        Ok(BiasEncoder { inner })
    }

    /// The encoder's bias representations for a matrix of flattened pixels.
    fn representations(&self, pixels: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from_rows("pixels", pixels)?;
        let reprs = self.inner.representations(&x).map_err(train_err)?;
        let width = reprs.shape[1];
        Ok(reprs.data.chunks(width).map(<[f64]>::to_vec).collect())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

fn history_dicts(history: &[HistoryRow]) -> Vec<BTreeMap<&'static str, f64>> {
    history
        .iter()
        .map(|row| {
            BTreeMap::from([
                ("epoch", row.epoch as f64),
                ("lr", row.lr),
                ("task_loss", row.task_loss),
                ("flac_loss", row.flac_loss),
                ("train_acc", row.train_acc),
                ("unbiased_acc", row.unbiased_acc),
                ("conflict_acc", row.conflict_acc),
            ])
        })
        .collect()
}

fn report_dict(report: &metrics::EvalReport) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("acc_overall", report.acc_overall),
        ("acc_unbiased", report.acc_unbiased),
        ("acc_bias_conflict", report.acc_bias_conflict),
        ("qmi", report.qmi),
        ("p_rule", report.p_rule),
        ("dfpr", report.dfpr),
        ("dfnr", report.dfnr),
        ("mistreatment", report.mistreatment),
    ])
}

/// A trained classifier plus its per-epoch training history.
#[pyclass(module = "flac_py")]
struct Model {
    inner: Mlp,
    history: Vec<HistoryRow>,
}

#[pymethods]
impl Model {
    /// Train a model. A bias encoder is required whenever
    /// `config.alpha > 0`; the optional evaluation splits populate the
    /// per-epoch accuracy columns of the history.
    #[staticmethod]
    #[pyo3(signature = (config, train_set, bias_encoder=None, eval_unbiased=None, eval_conflict=None))]
    fn train(
        config: &TrainConfig,
        train_set: &Dataset,
        bias_encoder: Option<&BiasEncoder>,
        eval_unbiased: Option<&Dataset>,
        eval_conflict: Option<&Dataset>,
    ) -> PyResult<Model> {
        let sets = TrainSets {
            train: &train_set.inner,
            eval_unbiased: eval_unbiased.map(|d| &d.inner),
            eval_conflict: eval_conflict.map(|d| &d.inner),
        };
        let outcome = train::train_main(&config.inner, sets, bias_encoder.map(|b| &b.inner))
            .map_err(train_err)?;
        Ok(Model {
            inner: outcome.model,
            history: outcome.history,
        })
    }

    /// Predicted class per row of flattened pixels.
    fn predict(&self, pixels: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = matrix_from_rows("pixels", pixels)?;
        self.inner
            .predict(&x)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Full evaluation report on a dataset, as a dict.
    fn evaluate(&self, dataset: &Dataset) -> PyResult<BTreeMap<&'static str, f64>> {
        let report = metrics::evaluate(&self.inner, &dataset.inner, &QmiConfig::default())
            .map_err(metrics_err)?;
        Ok(report_dict(&report))
    }

    /// Per-epoch training history, one dict per epoch.
    fn history(&self) -> Vec<BTreeMap<&'static str, f64>> {
        history_dicts(&self.history)
    }

    /// Write model weights and the training config to a checkpoint file.
    fn save(&self, path: PathBuf, config: &TrainConfig) -> PyResult<()> {
        train::save_checkpoint(&path, &self.inner, &config.inner).map_err(train_err)
    }

    /// Read a checkpoint; returns the model and its training config.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Model, TrainConfig)> {
        let (mlp, cfg) = train::load_checkpoint(&path).map_err(train_err)?;
        Ok((
            Model {
                inner: mlp,
                history: Vec::new(),
            },
            TrainConfig { inner: cfg },
        ))
    }
}

// ---------------------------------------------------------------------------
// Loss and diagnostic primitives
// ---------------------------------------------------------------------------

/// Kernel similarity between two vectors, in [0, 1].
#[pyfunction]
#[pyo3(signature = (a, b, kernel="student_t"))]
fn kernel_similarity(a: Vec<f64>, b: Vec<f64>, kernel: &str) -> PyResult<f64> {
    let kind = parse_enum("kernel", kernel)?;
    flac::kernel_similarity(kind, &a, &b).map_err(flac_err)
}

/// Partition all ordered index pairs by target/attribute agreement:
/// `a10` same target + different attribute, `a01` different target + same
/// attribute, `a11` both same, `a00` both different.
#[pyfunction]
fn pair_sets(
    y: Vec<usize>,
    t: Vec<usize>,
) -> PyResult<BTreeMap<&'static str, Vec<(usize, usize)>>> {
    if y.len() != t.len() {
        return Err(PyValueError::new_err(format!(
            "y has {} entries but t has {}",
            y.len(),
            t.len()
        )));
    }
    let sets = flac::build_pair_sets(&y, &attribute_equality_from_labels(&t)).map_err(flac_err)?;
    Ok(BTreeMap::from([
        ("a10", sets.a10),
        ("a01", sets.a01),
        ("a11", sets.a11),
        ("a00", sets.a00),
    ]))
}

/// Evaluate the probability-matching loss for one batch: model
/// representations `h`, frozen bias representations `bias_reprs`, and
/// targets `y`. Returns a dict with the loss value, the number of
/// qualifying pairs/anchors, and the pair-set counts.
#[pyfunction]
#[pyo3(signature = (h, bias_reprs, y, kernel="student_t", divergence="jeffreys", condition="full"))]
fn flac_loss_value<'py>(
    py: Python<'py>,
    h: Vec<Vec<f64>>,
    bias_reprs: Vec<Vec<f64>>,
    y: Vec<usize>,
    kernel: &str,
    divergence: &str,
    condition: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let h = matrix_from_rows("h", h)?;
    let b = matrix_from_rows("bias_reprs", bias_reprs)?;
    let cfg = FlacConfig {
        kernel: parse_enum("kernel", kernel)?,
        divergence: parse_enum("divergence", divergence)?,
        condition: parse_enum("condition", condition)?,
    };
    let mut tape = Tape::new();
    let h_var = tape.constant(h);
    let out = flac::flac_loss(&mut tape, h_var, &b, &y, &cfg).map_err(flac_err)?;
    let dict = PyDict::new(py);
    dict.set_item("loss", tape.value(out.loss).data[0])?;
    dict.set_item("n_pairs", out.n_pairs)?;
    dict.set_item("n_anchors", out.n_anchors)?;
    dict.set_item("pair_counts", out.pair_counts.to_vec())?;
    dict.set_item("degenerate_threshold", out.degenerate_threshold)?;
    Ok(dict)
}

/// Quadratic mutual information between representations and a discrete
/// attribute (student-t kernel estimate on attribute-balanced data).
#[pyfunction]
fn qmi(h: Vec<Vec<f64>>, t: Vec<usize>) -> PyResult<f64> {
    let h = matrix_from_rows("h", h)?;
    metrics::qmi(&h, &t, &QmiConfig::default()).map_err(metrics_err)
}

#[pymodule]
fn flac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<DatasetSpec>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<BiasEncoder>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(split_for_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(pair_sets, m)?)?;
    m.add_function(wrap_pyfunction!(flac_loss_value, m)?)?;
    m.add_function(wrap_pyfunction!(qmi, m)?)?;
    Ok(())
}
