//! Python bindings. Vectors cross the boundary as lists of floats; run
//! records and metrics come back as plain dicts.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use alignins::defenses::{self, AggregationOutcome, AlignInsConfig, ClientUpdate, Defense, LabeledUpdate, RoundContext};
use alignins::kappa_check::{run_kappa_check, KappaCheckConfig};
use alignins::model::{init_model, MlpModel};
use alignins::sim::{self, ExperimentConfig};
use alignins::{attacks, data, eval, vecops, Error, ParamVector, SignVector};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Idx { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for alignins::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_updates(updates: Vec<Vec<f64>>) -> PyResult<Vec<ClientUpdate>> {
    updates
        .into_iter()
        .enumerate()
        .map(|(i, u)| Ok(ClientUpdate::new(i, ParamVector::new(u).py()?)))
        .collect()
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Result of one aggregation.
#[pyclass(name = "Outcome", get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyOutcome {
    aggregated: Vec<f64>,
    selected: Vec<usize>,
    clip_threshold: Option<f64>,
    flagged: bool,
    tda: Option<Vec<f64>>,
    mpsa: Option<Vec<f64>>,
    mz_tda: Option<Vec<f64>>,
    mz_mpsa: Option<Vec<f64>>,
}

impl From<AggregationOutcome> for PyOutcome {
    fn from(o: AggregationOutcome) -> Self {
        let s = o.scores;
        PyOutcome {
            aggregated: o.aggregated.into_inner(),
            selected: o.selected,
            clip_threshold: o.clip_threshold,
            flagged: o.flagged,
            tda: s.as_ref().map(|s| s.tda.clone()),
            mpsa: s.as_ref().map(|s| s.mpsa.clone()),
            mz_tda: s.as_ref().map(|s| s.mz_tda.clone()),
            mz_mpsa: s.map(|s| s.mz_mpsa),
        }
    }
}

#[pymethods]
impl PyOutcome {
    fn __repr__(&self) -> String {
        format!(
            "Outcome(selected={:?}, clip_threshold={:?}, flagged={})",
            self.selected, self.clip_threshold, self.flagged
        )
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    vecops::cosine_similarity(&a, &b).py()
}

#[pyfunction]
fn sign_alignment_ratio(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    vecops::sign_alignment_ratio(&x, &y).py()
}

#[pyfunction]
fn top_k_mask(v: Vec<f64>, k: usize) -> PyResult<Vec<bool>> {
    Ok(vecops::top_k_mask(&v, k).py()?.bits().to_vec())
}

#[pyfunction]
fn mz_scores(values: Vec<f64>) -> PyResult<Vec<f64>> {
    vecops::mz_scores(&values).py()
}

#[pyfunction]
fn principal_sign(updates: Vec<Vec<f64>>) -> PyResult<Vec<i8>> {
    Ok(defenses::principal_sign(&to_updates(updates)?).py()?.as_slice().to_vec())
}

/// Filter-and-clip aggregation of `updates` (client ids are list positions).
#[pyfunction]
#[pyo3(name = "alignins", signature = (updates, global_model, lambda_c=1.0, lambda_s=1.0, k_fraction=0.3))]
fn alignins_aggregate(
    updates: Vec<Vec<f64>>,
    global_model: Vec<f64>,
    lambda_c: f64,
    lambda_s: f64,
    k_fraction: f64,
) -> PyResult<PyOutcome> {
    let cfg = AlignInsConfig {
        lambda_c,
        lambda_s,
        k_fraction,
    };
    Ok(defenses::alignins(&to_updates(updates)?, &global_model, &cfg).py()?.into())
}

/// Aggregates with any rule by name. `malicious` flags are only read by
/// `fedavg_star`.
#[pyfunction]
#[pyo3(signature = (defense, updates, global_model, malicious=None, expected_malicious=0))]
fn aggregate(
    defense: &str,
    updates: Vec<Vec<f64>>,
    global_model: Vec<f64>,
    malicious: Option<Vec<bool>>,
    expected_malicious: usize,
) -> PyResult<PyOutcome> {
    let rule = Defense::from_name(defense).py()?;
    let flags = malicious.unwrap_or_else(|| vec![false; updates.len()]);
    if flags.len() != updates.len() {
        return Err(PyValueError::new_err("malicious flags must match the number of updates"));
    }
    let labeled: Vec<LabeledUpdate> = to_updates(updates)?
        .into_iter()
        .zip(flags)
        .map(|(update, is_malicious)| LabeledUpdate { update, is_malicious })
        .collect();
    let ctx = RoundContext {
        global_model: &global_model,
        last_layer: None,
    };
    Ok(rule.aggregate(&labeled, &ctx, expected_malicious).py()?.into())
}

#[pyfunction]
fn kappa_bound(n: usize, m: usize, epsilon: f64, nu_bar: f64, zeta_bar: f64, clip_c: f64) -> PyResult<f64> {
    eval::kappa_bound(n, m, epsilon, nu_bar, zeta_bar, clip_c).py()
}

#[pyfunction]
fn propagation_error_bound(alphas: Vec<f64>, mu: f64, kappa: f64, nu_bar: f64) -> PyResult<f64> {
    eval::propagation_error_bound(&alphas, mu, kappa, nu_bar).py()
}

#[pyfunction]
fn scaling_attack(update: Vec<f64>, factor: f64) -> PyResult<Vec<f64>> {
    Ok(attacks::scaling_attack(&update, factor).py()?.into_inner())
}

#[pyfunction]
fn pgd_project(local_model: Vec<f64>, global_model: Vec<f64>, radius: f64) -> PyResult<Vec<f64>> {
    Ok(attacks::pgd_project(&local_model, &global_model, radius).py()?.into_inner())
}

#[pyfunction]
#[pyo3(signature = (update, prev_aggregate=None, bottom_frac=0.75))]
fn neurotoxin_mask(update: Vec<f64>, prev_aggregate: Option<Vec<f64>>, bottom_frac: f64) -> PyResult<Vec<f64>> {
    Ok(attacks::neurotoxin_mask(&update, prev_aggregate.as_deref(), bottom_frac).py()?.into_inner())
}

#[pyfunction]
fn ada_b(principal: Vec<i8>, magnitude: f64) -> PyResult<Vec<f64>> {
    let p = SignVector::new(principal).py()?;
    Ok(attacks::ada_b(&p, magnitude).py()?.into_inner())
}

/// Runs a JSON experiment config and returns the run record as a dict.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<Py<PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).py()?;
    let record = py.detach(|| sim::run_experiment(&cfg)).py()?;
    serialize(py, &record)
}

#[pyfunction]
#[pyo3(signature = (trials=200, seed=0, lambda_=1.5, epsilon=0.1))]
fn kappa_check(py: Python<'_>, trials: usize, seed: u64, lambda_: f64, epsilon: f64) -> PyResult<Py<PyAny>> {
    let cfg = KappaCheckConfig {
        trials,
        seed,
        lambda: lambda_,
        epsilon,
        ..Default::default()
    };
    let report = run_kappa_check(&cfg).py()?;
    serialize(py, &report)
}

/// A fully connected ReLU network with a softmax output.
#[pyclass(name = "Mlp")]
pub struct PyMlp {
    inner: MlpModel,
}

fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, model: &MlpModel) -> PyResult<data::LabeledDataset> {
    let d = model.input_dim();
    let flat: Vec<f64> = features.into_iter().flatten().collect();
    data::LabeledDataset::new(flat, labels, d, model.num_classes()).py()
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (layer_sizes, seed=0))]
    fn new(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyMlp {
            inner: init_model(&layer_sizes, seed).py()?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().as_slice().to_vec()
    }

    #[setter]
    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner = self.inner.with_params(ParamVector::new(params).py()?).py()?;
        Ok(())
    }

    /// Class label and softmax probabilities for one input.
    fn predict(&self, features: Vec<f64>) -> PyResult<(usize, Vec<f64>)> {
        let p = self.inner.predict(&features).py()?;
        Ok((p.label, p.probs))
    }

    /// Mean cross-entropy over the given samples.
    fn loss(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let data = dataset(features, labels, &self.inner)?;
        self.inner.loss(&data, None).py()
    }

    /// Gradient of the mean cross-entropy with respect to the flat parameters.
    fn gradient(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        let data = dataset(features, labels, &self.inner)?;
        self.inner.gradient(&data, None).py()
    }
}

/// A federated run that can be stepped one round at a time.
#[pyclass(name = "Simulation", unsendable)]
pub struct PySimulation {
    inner: sim::Simulation,
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_json(config_json).py()?;
        Ok(PySimulation {
            inner: sim::Simulation::new(cfg).py()?,
        })
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.round()
    }

    #[getter]
    fn malicious_ids(&self) -> Vec<usize> {
        self.inner.malicious_ids()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.model().params().as_slice().to_vec()
    }

    /// Runs one round; returns its metrics and the aggregation outcome.
    fn run_round(&mut self, py: Python<'_>) -> PyResult<(Py<PyAny>, PyOutcome)> {
        let report = self.inner.run_round().py()?;
        Ok((serialize(py, &report.metrics)?, report.outcome.into()))
    }

    /// Current MA/BA/RA in percent.
    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.inner.evaluate().py()?)
    }
}

#[pymodule]
fn alignins_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOutcome>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(sign_alignment_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mz_scores, m)?)?;
    m.add_function(wrap_pyfunction!(principal_sign, m)?)?;
    m.add_function(wrap_pyfunction!(alignins_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_bound, m)?)?;
    m.add_function(wrap_pyfunction!(propagation_error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_attack, m)?)?;
    m.add_function(wrap_pyfunction!(pgd_project, m)?)?;
    m.add_function(wrap_pyfunction!(neurotoxin_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ada_b, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_check, m)?)?;
    Ok(())
}
