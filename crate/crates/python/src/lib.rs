use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use esc::arch::{
    compute_theoretical_erf, count_params, ArchitectureSpec, ComposedModel, FollowupKind, PermutationMap, ScrambleKind,
    Variant,
};
use esc::checkpoint::Checkpoint;
use esc::data::{generate_dataset, Dataset, GenConfig};
use esc::experiment::{evaluate_modes, ScrambleMode};
use esc::mirc::{mirc_search, side_sequence, ModelPatchClassifier};
use esc::plan::ExperimentPlan;
use esc::rsa::{compute_rdm, rdm_r2, Rdm, ZeroVariance};
use esc::stats::{wilcoxon_signed_rank, Alternative};
use esc::tensor::Tensor;
use esc::EscError;

fn err(e: EscError) -> PyErr {
    match e {
        EscError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn followup(name: Option<&str>) -> PyResult<Option<FollowupKind>> {
    match name {
        None => Ok(None),
        Some("aggregating") => Ok(Some(FollowupKind::Aggregating)),
        Some("one_by_one") => Ok(Some(FollowupKind::OneByOne)),
        Some(other) => Err(PyValueError::new_err(format!("unknown follow-up {other:?}"))),
    }
}

/// Network architecture with a fixed theoretical ERF.
#[pyclass(name = "ArchitectureSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySpec(ArchitectureSpec);

#[pymethods]
impl PySpec {
    #[staticmethod]
    #[pyo3(signature = (erf, classes = 10, in_channels = 1))]
    fn desk(erf: usize, classes: usize, in_channels: usize) -> PyResult<Self> {
        ArchitectureSpec::desk(erf, classes, in_channels).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (erf, classes = 1000))]
    fn full(erf: usize, classes: usize) -> PyResult<Self> {
        ArchitectureSpec::full(erf, classes).map(Self).map_err(err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.input_size
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.head.classes
    }

    #[pyo3(signature = (followup = None))]
    fn theoretical_erf(&self, followup: Option<&str>) -> PyResult<usize> {
        Ok(compute_theoretical_erf(&self.0, self::followup(followup)?))
    }

    fn param_count(&self) -> usize {
        count_params(&self.0)
    }

    fn widened(&self, multiplier: f64) -> Self {
        Self(self.0.widened(multiplier))
    }

    fn to_json(&self) -> String {
        self.0.to_canonical_json()
    }

    fn __repr__(&self) -> String {
        format!("ArchitectureSpec({:?}, erf={})", self.0.name, compute_theoretical_erf(&self.0, None))
    }
}

/// A base network, optionally composed with a frozen-base follow-up.
#[pyclass(name = "Model", unsendable)]
struct PyModel(ComposedModel);

fn variant(name: &str) -> PyResult<Variant> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &PySpec, seed: u64) -> PyResult<Self> {
        ComposedModel::new_base(&spec.0, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).and_then(|c| c.to_model()).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.0, None).save(&path).map_err(err)
    }

    /// Compose a follow-up variant ("base_followup", "base_one_by_one",
    /// "base_followup_scrambled") on top of this base.
    #[pyo3(signature = (variant, seed = 0))]
    fn compose(&self, variant: &str, seed: u64) -> PyResult<Self> {
        let v = self::variant(variant)?;
        let scrambler = if v.scrambled_training() {
            let side = self.0.descriptor.base.output_size();
            Some(PermutationMap::random((side, side), ScrambleKind::Global, seed).map_err(err)?)
        } else {
            None
        };
        ComposedModel::compose(&self.0, v, scrambler, seed).map(Self).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes()
    }

    #[getter]
    fn variant(&self) -> String {
        serde_json::to_value(self.0.variant()).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
    }

    /// Class probabilities for a flat batch of images with shape `[n, c, h, w]`.
    fn predict(&mut self, data: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let x = Tensor::new(shape, data).map_err(err)?;
        let y = self.0.predict(&x, None).map_err(err)?;
        let k = y.shape()[1];
        Ok(y.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Test-split metrics under the given scrambling mode ("none", "global", "local").
    #[pyo3(signature = (dataset, scramble = "none", window = 2, seed = 0))]
    fn evaluate<'py>(
        &mut self,
        py: Python<'py>,
        dataset: PathBuf,
        scramble: &str,
        window: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mode = match scramble {
            "none" => ScrambleMode::None,
            "global" => ScrambleMode::Global,
            "local" => ScrambleMode::Local { window },
            other => return Err(PyValueError::new_err(format!("unknown scramble mode {other:?}"))),
        };
        let data = Dataset::load(&dataset).map_err(err)?;
        let evs = evaluate_modes(&mut self.0, &data.test, &data.preprocess_config(), &[mode], seed, None).map_err(err)?;
        to_py(py, &evs[0].metrics)
    }

    /// MIRC search on one test image; returns the tree as nested dicts.
    #[pyo3(signature = (dataset, index, cap = esc::mirc::DEFAULT_CAP))]
    fn mirc<'py>(&mut self, py: Python<'py>, dataset: PathBuf, index: usize, cap: usize) -> PyResult<Bound<'py, PyAny>> {
        let data = Dataset::load(&dataset).map_err(err)?;
        if index >= data.test.len() {
            return Err(PyValueError::new_err(format!("index {index} out of range")));
        }
        let x = data.test.eval_batch(&[index], &data.preprocess_config()).map_err(err)?;
        let image = Tensor::new(x.shape()[1..].to_vec(), x.data().to_vec()).map_err(err)?;
        let side = image.shape()[1];
        let mut clf = ModelPatchClassifier { model: &mut self.0, image };
        let outcome = mirc_search(&mut clf, side, side, data.test.labels[index], cap, &data.test.ids[index], "model")
            .map_err(err)?;
        to_py(py, &outcome)
    }
}

#[pyfunction]
#[pyo3(signature = (regime, out, classes = 10, train_per_class = 100, test_per_class = 30, size = 64, seed = 0))]
fn generate<'py>(
    py: Python<'py>,
    regime: &str,
    out: PathBuf,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = GenConfig {
        regime: parse(regime)?,
        classes,
        train_per_class,
        test_per_class,
        size,
        seed,
    };
    let manifest = generate_dataset(&cfg, &out).map_err(err)?;
    to_py(py, &manifest)
}

fn rdm_from(matrix: Vec<Vec<f64>>) -> PyResult<Rdm> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("RDM must be square"));
    }
    Ok(Rdm {
        n,
        values: matrix.into_iter().flatten().collect(),
        provenance: Default::default(),
    })
}

/// Correlation-distance RDM of activation vectors.
#[pyfunction]
fn rdm(vectors: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let ids: Vec<String> = (0..vectors.len()).map(|i| i.to_string()).collect();
    let r = compute_rdm(&vectors, &ids, ZeroVariance::Strict).map_err(err)?;
    Ok(r.values.chunks(r.n).map(<[f64]>::to_vec).collect())
}

/// Squared Pearson correlation between the upper triangles of two RDMs.
#[pyfunction]
fn r2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    rdm_r2(&rdm_from(a)?, &rdm_from(b)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, y, alternative = "two-sided"))]
fn wilcoxon<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>, alternative: &str) -> PyResult<Bound<'py, PyAny>> {
    let alt = match alternative {
        "two-sided" => Alternative::TwoSided,
        "greater" => Alternative::Greater,
        "less" => Alternative::Less,
        other => return Err(PyValueError::new_err(format!("unknown alternative {other:?}"))),
    };
    to_py(py, &wilcoxon_signed_rank(&x, &y, alt).map_err(err)?)
}

#[pyfunction]
fn mirc_sides(start: usize, levels: usize) -> Vec<usize> {
    side_sequence(start, levels)
}

#[pyfunction]
fn derive_seed(root: u64, label: &str) -> u64 {
    esc::rng::derive_seed(root, label)
}

/// Run a plan ("desk", "smoke" or a JSON document) into `out`.
#[pyfunction]
#[pyo3(signature = (plan, out, seed = None))]
fn run_plan<'py>(py: Python<'py>, plan: &str, out: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut p = match plan {
        "desk" => ExperimentPlan::desk(),
        "smoke" => ExperimentPlan::smoke(),
        json => ExperimentPlan::from_json(json).map_err(err)?,
    };
    if let Some(s) = seed {
        p.seed = s;
    }
    let status = esc::plan::run_plan(&p, &out).map_err(err)?;
    to_py(py, &status)
}

#[pymodule]
fn esc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(rdm, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(mirc_sides, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_plan, m)?)?;
    Ok(())
}
