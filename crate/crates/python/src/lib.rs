//! Python bindings. Specifications and configurations cross the boundary as
//! JSON strings, numeric results as lists.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pamm::benchmark::{run_benchmark, BenchmarkConfig};
use pamm::inference::{predict_hazards, term_effect as effect_of};
use pamm::metrics::{ibs_at_quartiles, kaplan_meier_from};
use pamm::simulate::{make_scenario_dataset, Scenario};
use pamm::{io, make_cut_points, CifSet, CutStrategy, ModelSpec, SurvivalRecord, TrainConfig};

fn to_py(e: pamm::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Survival records: one row per subject (or per spell with delayed entry).
#[pyclass(module = "pypamm")]
#[derive(Clone)]
struct Dataset {
    inner: pamm::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (ids, exit, cause, features, feature_names, entry=None, cluster=None))]
    fn new(
        ids: Vec<String>,
        exit: Vec<f64>,
        cause: Vec<usize>,
        features: Vec<Vec<f64>>,
        feature_names: Vec<String>,
        entry: Option<Vec<f64>>,
        cluster: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let n = ids.len();
        if exit.len() != n || cause.len() != n || features.len() != n {
            return Err(PyValueError::new_err("ids, exit, cause and features differ in length"));
        }
        if entry.as_ref().is_some_and(|e| e.len() != n) || cluster.as_ref().is_some_and(|c| c.len() != n) {
            return Err(PyValueError::new_err("entry and cluster must match ids in length"));
        }
        if features.iter().any(|f| f.len() != feature_names.len()) {
            return Err(PyValueError::new_err("feature rows must match feature_names"));
        }
        let records = (0..n)
            .map(|i| {
                let mut r = SurvivalRecord::new(ids[i].clone(), exit[i], cause[i], features[i].clone());
                if let Some(e) = &entry {
                    r = r.with_entry(e[i]);
                }
                if let Some(c) = &cluster {
                    r = r.with_cluster(c[i].clone());
                }
                r
            })
            .collect();
        Ok(Self {
            inner: pamm::Dataset::new(feature_names, records),
        })
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_records(path).map_err(to_py)?,
        })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        io::write_records(path, &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    #[getter]
    fn n_causes(&self) -> usize {
        self.inner.n_causes()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn exit(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.exit).collect()
    }

    #[getter]
    fn cause(&self) -> Vec<usize> {
        self.inner.records.iter().map(|r| r.cause).collect()
    }

    /// Piecewise-exponential expansion as a dict of columns.
    #[pyo3(signature = (cuts="quantiles:20", max_intervals=100))]
    fn to_ped<'py>(&self, py: Python<'py>, cuts: &str, max_intervals: usize) -> PyResult<Bound<'py, PyDict>> {
        let strategy: CutStrategy = cuts.parse().map_err(to_py)?;
        let kappa = make_cut_points(&self.inner.records, strategy, max_intervals).map_err(to_py)?;
        let ped = self.inner.to_ped(&kappa).map_err(to_py)?;
        let out = PyDict::new(py);
        let col = |f: &dyn Fn(&pamm::PedRow) -> f64| ped.rows.iter().map(f).collect::<Vec<f64>>();
        out.set_item(
            "id",
            ped.rows.iter().map(|r| ped.subjects[r.subject].id.clone()).collect::<Vec<_>>(),
        )?;
        out.set_item("j", ped.rows.iter().map(|r| r.interval).collect::<Vec<_>>())?;
        out.set_item("tj", col(&|r| r.tj))?;
        out.set_item("delta", ped.rows.iter().map(|r| r.status).collect::<Vec<_>>())?;
        out.set_item("exposure", col(&|r| r.exposure))?;
        out.set_item("offset", col(&|r| r.offset))?;
        out.set_item("cuts", kappa.as_slice().to_vec())?;
        Ok(out)
    }
}

/// A fitted hazard model.
#[pyclass(module = "pypamm")]
struct Model {
    inner: pamm::HazardModel,
}

#[pymethods]
impl Model {
    /// Fits `spec` (JSON) on `data`; returns the model and the training
    /// report as JSON.
    #[staticmethod]
    #[pyo3(signature = (data, spec, config=None))]
    fn fit(py: Python<'_>, data: &Dataset, spec: &str, config: Option<&str>) -> PyResult<(Model, String)> {
        let spec: ModelSpec = from_json(spec)?;
        let config: TrainConfig = from_json(config.unwrap_or("{}"))?;
        let data = data.inner.clone();
        let (model, report) = py
            .detach(move || {
                let cuts = make_cut_points(&data.records, spec.cuts.strategy, spec.cuts.max_intervals)?;
                let ped = data.to_ped(&cuts)?;
                pamm::tune(&ped, &spec, &config)
            })
            .map_err(to_py)?;
        let report = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((Model { inner: model }, report))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pamm::HazardModel::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn cuts(&self) -> Vec<f64> {
        self.inner.cuts.as_slice().to_vec()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    #[getter]
    fn n_causes(&self) -> usize {
        self.inner.n_causes
    }

    /// Per-interval hazards, indexed `[subject][cause][interval]`.
    fn hazards(&self, data: &Dataset) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let data = data.inner.select_features(&self.inner.feature_names).map_err(to_py)?;
        let h = predict_hazards(&self.inner, &data.records).map_err(to_py)?;
        Ok(h.into_iter().map(|s| s.hazards).collect())
    }

    /// Survival at `times` for every subject.
    fn survival(&self, data: &Dataset, times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .curves(data)?
            .iter()
            .map(|c| times.iter().map(|&t| c.survival(t)).collect())
            .collect())
    }

    /// Cumulative incidence of `cause` (1-based) at `times`.
    fn cif(&self, data: &Dataset, cause: usize, times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.curves(data)?
            .iter()
            .map(|c| times.iter().map(|&t| c.cif(cause, t).map_err(to_py)).collect())
            .collect()
    }

    /// Partial effect of the term at `term` (index into the model's terms).
    #[pyo3(signature = (term, grid, cause=1))]
    fn term_effect(&self, term: usize, grid: Vec<f64>, cause: usize) -> PyResult<Vec<f64>> {
        effect_of(&self.inner, term, cause, &grid).map_err(to_py)
    }

    /// Integrated Brier scores at the event-time quartiles of `data`.
    #[pyo3(signature = (data, cause=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset, cause: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let curves = self.curves(data)?;
        let cause = cause.or((self.inner.n_causes > 1).then_some(1));
        let times: Vec<f64> = data.inner.records.iter().map(|r| r.exit).collect();
        let causes: Vec<usize> = data.inner.records.iter().map(|r| r.cause).collect();
        let r = ibs_at_quartiles(&times, &causes, cause, |i, tau| match cause {
            None => curves[i].survival(tau),
            Some(k) => 1.0 - curves[i].cif(k, tau).unwrap_or(f64::NAN),
        })
        .map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("q25", r.ibs_q25)?;
        out.set_item("q50", r.ibs_q50)?;
        out.set_item("q75", r.ibs_q75)?;
        out.set_item("quartiles", r.quartiles.to_vec())?;
        out.set_item("n_events", r.n_events)?;
        Ok(out)
    }
}

impl Model {
    fn curves(&self, data: &Dataset) -> PyResult<Vec<CifSet>> {
        let data = data.inner.select_features(&self.inner.feature_names).map_err(to_py)?;
        predict_hazards(&self.inner, &data.records)
            .map_err(to_py)?
            .iter()
            .map(|h| h.cifs(&self.inner.cuts).map_err(to_py))
            .collect()
    }
}

/// Draws a dataset from a built-in scenario.
#[pyfunction]
#[pyo3(signature = (scenario, n=None, seed=0))]
fn simulate(scenario: &str, n: Option<usize>, seed: u64) -> PyResult<Dataset> {
    let mut s = Scenario::named(scenario).map_err(to_py)?;
    if let Some(n) = n {
        s = s.with_subjects(n);
    }
    let sim = make_scenario_dataset(&s, seed).map_err(to_py)?;
    Ok(Dataset { inner: sim.dataset })
}

/// Kaplan–Meier estimate as `(times, survival)` step values.
#[pyfunction]
fn kaplan_meier(times: Vec<f64>, events: Vec<bool>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if times.len() != events.len() {
        return Err(PyValueError::new_err("times and events differ in length"));
    }
    let km = kaplan_meier_from(&times, &events);
    Ok((km.times, km.values))
}

/// Runs a replicated benchmark; returns the summary and table CSV text.
#[pyfunction]
#[pyo3(signature = (scenario, config=None))]
fn benchmark(py: Python<'_>, scenario: &str, config: Option<&str>) -> PyResult<(String, String)> {
    let mut cfg = match config {
        Some(text) => from_json::<BenchmarkConfig>(text)?,
        None => BenchmarkConfig::new(scenario),
    };
    cfg.scenario = scenario.to_string();
    let result = py.detach(move || run_benchmark(&cfg)).map_err(to_py)?;
    Ok((result.summary_csv(), result.table_csv()))
}

#[pymodule]
fn pypamm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(kaplan_meier, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
