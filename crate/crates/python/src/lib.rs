//! Python bindings: scenarios, simulation, trajectories and verification.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use taskreg_core::config::{load_scenario, load_scenario_str, reference_scenario, ConfigError};
use taskreg_core::simulation::{self, ControllerKind, RunMetrics, Scenario, SimError, TrajectoryLog};
use taskreg_core::trajectory_csv::{read_csv, write_csv};
use taskreg_core::verify::{parse_selector, run_suite};

create_exception!(taskreg, DivergenceError, PyRuntimeError);

fn config_err(e: ConfigError) -> PyErr {
    match e {
        ConfigError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::Diverged { .. } => DivergenceError::new_err(e.to_string()),
        SimError::InvalidScenario(_) | SimError::Dynamics(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<ControllerKind> {
    name.parse()
        .map_err(|e: simulation::UnknownController| PyValueError::new_err(e.to_string()))
}

/// A closed-loop scenario: arm, disturbances, internal models, gains and
/// initial conditions.
#[pyclass(name = "Scenario", module = "taskreg")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    /// The bundled reference scenario, optionally with another controller.
    #[staticmethod]
    #[pyo3(signature = (controller = None))]
    fn reference(controller: Option<&str>) -> PyResult<Self> {
        let mut inner = reference_scenario();
        if let Some(c) = controller {
            inner.controller = parse_kind(c)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        load_scenario(&path).map(|inner| Self { inner }).map_err(config_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        load_scenario_str(text).map(|inner| Self { inner }).map_err(config_err)
    }

    #[getter]
    fn controller(&self) -> &'static str {
        self.inner.controller.as_str()
    }

    #[setter]
    fn set_controller(&mut self, name: &str) -> PyResult<()> {
        self.inner.controller = parse_kind(name)?;
        Ok(())
    }

    #[getter]
    fn kp(&self) -> f64 {
        self.inner.gains.kp
    }

    #[setter]
    fn set_kp(&mut self, v: f64) {
        self.inner.gains.kp = v;
    }

    #[getter]
    fn kd(&self) -> f64 {
        self.inner.gains.kd
    }

    #[setter]
    fn set_kd(&mut self, v: f64) {
        self.inner.gains.kd = v;
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.gains.h
    }

    #[setter]
    fn set_h(&mut self, v: f64) {
        self.inner.gains.h = v;
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[setter]
    fn set_dt(&mut self, v: f64) {
        self.inner.dt = v;
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }

    #[setter]
    fn set_t_end(&mut self, v: f64) {
        self.inner.t_end = v;
    }

    #[getter]
    fn q0(&self) -> Vec<f64> {
        self.inner.q0.as_slice().to_vec()
    }

    #[getter]
    fn x_d(&self) -> Vec<f64> {
        self.inner.x_d.as_slice().to_vec()
    }

    /// Raise `ValueError` if the scenario cannot be simulated.
    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(sim_err)
    }

    fn simulate(&self) -> PyResult<Trajectory> {
        simulate(self)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "Scenario(controller='{}', kp={}, kd={}, h={}, dt={}, t_end={})",
            s.controller, s.gains.kp, s.gains.kd, s.gains.h, s.dt, s.t_end
        )
    }
}

/// A logged run with its metrics.
#[pyclass(module = "taskreg")]
struct Trajectory {
    log: TrajectoryLog,
    metrics: RunMetrics,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn controller(&self) -> &'static str {
        self.log.controller.as_str()
    }

    #[getter]
    fn storage_function(&self) -> String {
        self.log.storage_kind.to_string()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.log.times().collect()
    }

    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = &self.metrics;
        let d = PyDict::new(py);
        d.set_item("settling_time", m.settling_time)?;
        d.set_item("steady_state_error", m.steady_state_error)?;
        d.set_item("peak_torque", m.peak_torque)?;
        d.set_item("min_abs_det_j", m.min_abs_det_j)?;
        d.set_item("dissipation_defect", m.dissipation_defect)?;
        d.set_item("peak_xi_hat", m.peak_xi_hat)?;
        d.set_item("final_time", m.final_time)?;
        Ok(d)
    }

    /// All CSV columns keyed by header name.
    fn columns(&self) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let mut buf = Vec::new();
        write_csv(&self.log, &mut buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let table = read_csv(buf.as_slice()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(table
            .header
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), table.rows.iter().map(|r| r[i]).collect()))
            .collect())
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        write_csv(&self.log, std::io::BufWriter::new(file)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.log.records.len()
    }
}

#[pyfunction]
fn simulate(scenario: &PyScenario) -> PyResult<Trajectory> {
    scenario.inner.validate().map_err(sim_err)?;
    let (log, metrics) = simulation::simulate(&scenario.inner).map_err(|f| sim_err(f.error))?;
    Ok(Trajectory { log, metrics })
}

/// Run verification suites; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (suite = "all"))]
fn verify<'py>(py: Python<'py>, suite: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let suites = parse_selector(suite).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let checks: Vec<_> = py.detach(|| suites.into_iter().flat_map(run_suite).collect());
    checks
        .into_iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("suite", c.suite.as_str())?;
            d.set_item("check", c.name)?;
            d.set_item("measured", c.measured)?;
            d.set_item("tolerance", c.bound.to_string())?;
            d.set_item("passed", c.pass)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn taskreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
