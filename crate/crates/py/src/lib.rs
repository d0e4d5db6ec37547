use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nlmpc::controller::{default_constraints, default_weights, ControllerConfig};
use nlmpc::dynamics::{integrate_step, IntegratorConfig, Method};
use nlmpc::ftocp::{InputConstraints, Weights};
use nlmpc::model::{builtin_kbm, parse_model, ModelSpec};
use nlmpc::sim::{apply_config, ScenarioKind, SimSetup};

fn value_error<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A vehicle model parsed from the derivative DSL.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Arc<ModelSpec>,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let inner = parse_model(text).map_err(value_error)?;
        Ok(PyModel { inner: Arc::new(inner) })
    }

    /// The built-in kinematic bicycle model.
    #[staticmethod]
    fn kbm() -> Self {
        PyModel {
            inner: Arc::new(builtin_kbm()),
        }
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.inner.state_names().to_vec()
    }

    #[getter]
    fn inputs(&self) -> Vec<String> {
        self.inner.input_names().to_vec()
    }

    fn parameter(&self, name: &str) -> Option<f64> {
        self.inner.parameter(name)
    }

    fn eval(&self, z: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.eval_ode(&z, &u).map_err(value_error)
    }

    fn to_dsl(&self) -> String {
        self.inner.to_dsl()
    }

    fn __repr__(&self) -> String {
        format!("Model(states={:?}, inputs={:?})", self.inner.state_names(), self.inner.input_names())
    }
}

/// Advances `z` by one interval `dt`; `method` uses the integer codes 1..7.
#[pyfunction]
#[pyo3(signature = (model, z, u, dt, method=4, supnds=1))]
fn integrate(model: &PyModel, z: Vec<f64>, u: Vec<f64>, dt: f64, method: u32, supnds: usize) -> PyResult<Vec<f64>> {
    let method = Method::from_code(method).ok_or_else(|| PyValueError::new_err(format!("unknown method {method}")))?;
    let cfg = IntegratorConfig::new(method, dt).with_supnds(supnds);
    integrate_step(&model.inner, &z, &u, &cfg).map_err(value_error)
}

#[pyclass(name = "Controller", unsendable)]
struct PyController {
    inner: nlmpc::controller::Controller,
    weights: Weights,
    constraints: InputConstraints,
}

#[pymethods]
impl PyController {
    #[new]
    #[pyo3(signature = (model=None, npar=30, dt=0.05))]
    fn new(model: Option<&PyModel>, npar: usize, dt: f64) -> PyResult<Self> {
        let model = model.map(|m| m.inner.clone()).unwrap_or_else(|| Arc::new(builtin_kbm()));
        let mut cfg = ControllerConfig {
            npar,
            dt,
            ..Default::default()
        };
        cfg.integrator.dt = dt;
        let inner = nlmpc::controller::Controller::new(model, cfg).map_err(value_error)?;
        Ok(PyController {
            inner,
            weights: default_weights(),
            constraints: default_constraints(),
        })
    }

    /// Offers a flat trajectory array; returns whether it replaced the stored one.
    fn submit_trajectory(&mut self, raw: Vec<f64>) -> PyResult<bool> {
        self.inner.submit_trajectory(&raw).map_err(value_error)
    }

    fn step<'py>(&mut self, py: Python<'py>, z: Vec<f64>, now: f64) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.step(&z, &self.weights, &self.constraints, now);
        let d = PyDict::new(py);
        d.set_item("drivmode", out.drivmode.code())?;
        d.set_item("u0", &out.u0)?;
        d.set_item("useq", &out.useq)?;
        d.set_item("refs", &out.refs)?;
        d.set_item("zseq", &out.zseq)?;
        d.set_item("cost", out.cost)?;
        d.set_item("iterations", out.iterations)?;
        d.set_item("fault", out.fault.map(|f| format!("{f:?}")))?;
        Ok(d)
    }
}

/// Runs a closed-loop scenario and returns the log as columns.
#[pyfunction]
#[pyo3(signature = (scenario, steps=None, seed=0, config=None))]
fn simulate<'py>(
    py: Python<'py>,
    scenario: &str,
    steps: Option<usize>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = ScenarioKind::parse(scenario).ok_or_else(|| PyValueError::new_err(format!("unknown scenario {scenario:?}")))?;
    let mut setup = SimSetup::new(kind);
    if let Some(text) = config {
        apply_config(text, &mut setup).map_err(value_error)?;
    }
    let steps = steps.unwrap_or_else(|| kind.default_steps());
    let (_, log) = py.detach(|| setup.run(steps, seed)).map_err(value_error)?;

    let d = PyDict::new(py);
    d.set_item("t", log.rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
    for (i, name) in log.state_names.iter().enumerate() {
        d.set_item(name, log.rows.iter().map(|r| r.z[i]).collect::<Vec<_>>())?;
    }
    for (i, name) in log.input_names.iter().enumerate() {
        d.set_item(format!("u_{name}"), log.rows.iter().map(|r| r.u0[i]).collect::<Vec<_>>())?;
    }
    d.set_item("drivmode", log.rows.iter().map(|r| r.drivmode.code()).collect::<Vec<_>>())?;
    d.set_item("eps", log.rows.iter().map(|r| r.eps).collect::<Vec<_>>())?;
    d.set_item("iterations", log.rows.iter().map(|r| r.iterations).collect::<Vec<_>>())?;
    d.set_item("final_state", &log.final_state)?;
    Ok(d)
}

#[pymodule]
fn nlmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
