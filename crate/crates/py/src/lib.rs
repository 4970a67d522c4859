//! Python bindings: cohort synthesis, ROI reports and tokens, Haar
//! transforms, metrics, model forward passes and gradient checks.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rtgmff::harness::{self, auc_mann_whitney, evaluate_scores, Dataset, Normalizer, ThresholdMap, TrainConfig};
use rtgmff::hwm::{haar_dwt_level, haar_idwt_level, multiscale_decompose, reconstruct, WaveletPyramid};
use rtgmff::model::{patient_probabilities, Model, ModelConfig};
use rtgmff::numcore::{BnMode, GradCheckOpts, Graph, ParamGroup, ParamStore, Tensor};
use rtgmff::rftg::{self, Thresholds};
use rtgmff::synthgen::{CohortSpec, Gender, Label};

fn err(e: rtgmff::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn thresholds(tau1: f64, tau2: f64) -> PyResult<Thresholds> {
    Thresholds::new(tau1, tau2).map_err(err)
}

fn gender(name: &str) -> PyResult<Gender> {
    match name.to_ascii_lowercase().as_str() {
        "m" | "male" => Ok(Gender::Male),
        "f" | "female" => Ok(Gender::Female),
        other => Err(PyValueError::new_err(format!("unknown gender {other:?}; use \"male\" or \"female\""))),
    }
}

fn model_config(name: &str) -> PyResult<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "desk" => Ok(ModelConfig::desk()),
        "default" => Ok(ModelConfig::default()),
        other => Err(PyValueError::new_err(format!("unknown model config {other:?}; use toy, desk or default"))),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(&shape, data).map_err(err)
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A synthetic cohort rendered as RGB images.
#[pyclass(name = "Dataset", module = "pyrtgmff")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (n_subjects=200, n_sites=5, effect_size=3.0, seed=42, height=32, width=32, timepoints=200, voxels=8))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_subjects: usize,
        n_sites: usize,
        effect_size: f64,
        seed: u64,
        height: usize,
        width: usize,
        timepoints: usize,
        voxels: usize,
    ) -> PyResult<Self> {
        let spec = CohortSpec {
            n_subjects,
            n_sites,
            effect_size,
            seed,
            timepoints,
            voxels,
            ..CohortSpec::default()
        };
        Ok(Self {
            inner: Dataset::generate(&spec, height, width).map_err(err)?,
        })
    }

    /// Small cohort on the toy canvas used by the tests.
    #[staticmethod]
    #[pyo3(signature = (n=8, seed=42))]
    fn toy(n: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: harness::toy_dataset(n, seed).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.inner.height, self.inner.width)
    }

    /// Subject metadata and ΔBOLD vectors as a dict.
    fn subject<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .inner
            .subjects
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("subject {index} out of range")))?;
        json(
            py,
            &serde_json::json!({
                "id": s.id,
                "site": s.site,
                "label": s.label.index(),
                "age_years": s.age_years,
                "gender": s.gender,
                "delta_bold": s.delta_bold,
                "clean_delta_bold": s.clean_delta_bold,
            }),
        )
    }

    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner
            .subjects
            .get(index)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("subject {index} out of range")))
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().into_iter().map(Label::index).collect()
    }

    fn sites(&self) -> Vec<usize> {
        self.inner.sites()
    }

    /// Writes `<id>.report.txt` and `<id>.tokens.json` for every subject.
    #[pyo3(signature = (directory, tau1=0.15, tau2=0.30))]
    fn write_reports(&self, directory: std::path::PathBuf, tau1: f64, tau2: f64) -> PyResult<usize> {
        harness::write_reports(&self.inner, &thresholds(tau1, tau2)?, &directory).map_err(err)
    }

    /// Leave-one-site-out training; returns the per-fold metrics and summary.
    #[pyo3(signature = (model="toy", max_epochs=3, seed=42))]
    fn cross_validate<'py>(&self, py: Python<'py>, model: &str, max_epochs: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let cfg = TrainConfig {
            model: model_config(model)?,
            max_epochs,
            warmup_epochs: TrainConfig::default().warmup_epochs.min(max_epochs.saturating_sub(1)),
            freeze_backbone_epochs: TrainConfig::default().freeze_backbone_epochs.min(max_epochs.saturating_sub(1)),
            seed,
            ..TrainConfig::default()
        };
        let data = &self.inner;
        let (report, _) = py
            .detach(|| harness::cross_validate(data, &cfg, &ThresholdMap::new(), None, None))
            .map_err(err)?;
        json(py, &report)
    }
}

/// A freshly initialized model and its parameters.
#[pyclass(name = "Model", module = "pyrtgmff")]
struct PyModel {
    model: Model,
    params: ParamStore,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config="toy", seed=42))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let mut params = ParamStore::new();
        let model = Model::new(&mut params, model_config(config)?, seed).map_err(err)?;
        Ok(Self { model, params })
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.model.cfg.height, self.model.cfg.width)
    }

    /// Number of trainable scalars.
    #[getter]
    fn n_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.group != ParamGroup::Buffer)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Eval-mode patient probabilities for the given subjects (all by default).
    #[pyo3(signature = (dataset, indices=None, tau1=0.15, tau2=0.30))]
    fn predict(&self, dataset: &PyDataset, indices: Option<Vec<usize>>, tau1: f64, tau2: f64) -> PyResult<Vec<f64>> {
        let ds = &dataset.inner;
        if (ds.height, ds.width) != (self.model.cfg.height, self.model.cfg.width) {
            return Err(PyValueError::new_err(format!(
                "dataset images are {}x{}, model expects {}x{}",
                ds.height, ds.width, self.model.cfg.height, self.model.cfg.width
            )));
        }
        let indices = indices.unwrap_or_else(|| (0..ds.len()).collect());
        let norm = Normalizer::fit(ds, &indices, thresholds(tau1, tau2)?).map_err(err)?;
        let items = harness::encode(ds, &indices, &norm, &self.model.embedder).map_err(err)?;
        let batch = harness::make_batch(&items.iter().collect::<Vec<_>>()).map_err(err)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let out = self.model.forward(&mut g, &p, &batch, BnMode::Eval).map_err(err)?;
        Ok(patient_probabilities(g.value(out.logits)))
    }
}

/// Strength and polarity for each of the 116 regions.
#[pyfunction]
#[pyo3(signature = (values, tau1=0.15, tau2=0.30))]
fn discretize(values: Vec<f64>, tau1: f64, tau2: f64) -> PyResult<Vec<(String, String, String)>> {
    let triplets = rftg::discretize(&values, &thresholds(tau1, tau2)?).map_err(err)?;
    Ok(triplets
        .into_iter()
        .map(|t| (t.roi_name.to_string(), t.strength.to_string(), t.polarity.to_string()))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (values, age_years, gender, tau1=0.15, tau2=0.30))]
fn render_report(values: Vec<f64>, age_years: f64, gender: &str, tau1: f64, tau2: f64) -> PyResult<String> {
    let triplets = rftg::discretize(&values, &thresholds(tau1, tau2)?).map_err(err)?;
    rftg::render_report(&triplets, age_years, self::gender(gender)?).map_err(err)
}

#[pyfunction]
fn parse_report<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let parsed = rftg::parse_report(text).map_err(err)?;
    json(
        py,
        &serde_json::json!({
            "age": parsed.age,
            "subject_noun": parsed.subject_noun,
            "clauses": parsed.clauses,
        }),
    )
}

#[pyfunction]
#[pyo3(signature = (values, age_years, gender, tau1=0.15, tau2=0.30))]
fn tokens(values: Vec<f64>, age_years: f64, gender: &str, tau1: f64, tau2: f64) -> PyResult<Vec<String>> {
    let triplets = rftg::discretize(&values, &thresholds(tau1, tau2)?).map_err(err)?;
    Ok(rftg::serialize_tokens(&triplets, age_years, self::gender(gender)?).map_err(err)?.tokens)
}

/// One analysis level of `[N, C, H, W]` data; returns `(data, shape)`.
#[pyfunction]
fn haar_dwt(data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let out = haar_dwt_level(&tensor(data, shape)?).map_err(err)?;
    Ok((out.data().to_vec(), out.shape().to_vec()))
}

#[pyfunction]
fn haar_idwt(data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let out = haar_idwt_level(&tensor(data, shape)?).map_err(err)?;
    Ok((out.data().to_vec(), out.shape().to_vec()))
}

/// Multi-level decomposition followed by reconstruction; returns the
/// reconstructed data and the energy kept by the pyramid.
#[pyfunction]
fn wavelet_roundtrip(data: Vec<f64>, shape: Vec<usize>, levels: usize) -> PyResult<(Vec<f64>, f64)> {
    let pyr: WaveletPyramid = multiscale_decompose(&tensor(data, shape)?, levels).map_err(err)?;
    let energy = pyr.retained_energy().map_err(err)?;
    Ok((reconstruct(&pyr).map_err(err)?.data().to_vec(), energy))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<usize>) -> Option<f64> {
    auc_mann_whitney(&scores, &labels)
}

/// Accuracy, sensitivity, specificity, AUC and the confusion counts.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, probabilities: Vec<f64>, labels: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    json(py, &evaluate_scores(&probabilities, &labels).map_err(err)?)
}

/// Finite-difference check of the full toy-model loss.
#[pyfunction]
#[pyo3(signature = (n_subjects=4, seed=42, max_entries=Some(4)))]
fn grad_check(py: Python<'_>, n_subjects: usize, seed: u64, max_entries: Option<usize>) -> PyResult<(f64, bool, usize)> {
    let opts = GradCheckOpts {
        max_entries,
        ..GradCheckOpts::default()
    };
    let report = py.detach(|| harness::full_model_grad_check(n_subjects, seed, opts)).map_err(err)?;
    Ok((report.max_rel_error(), report.passed(), report.leaves.len()))
}

#[pymodule]
fn pyrtgmff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("N_ROIS", rtgmff::N_ROIS)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(discretize, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(parse_report, m)?)?;
    m.add_function(wrap_pyfunction!(tokens, m)?)?;
    m.add_function(wrap_pyfunction!(haar_dwt, m)?)?;
    m.add_function(wrap_pyfunction!(haar_idwt, m)?)?;
    m.add_function(wrap_pyfunction!(wavelet_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
