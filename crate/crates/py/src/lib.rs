//! Python bindings: scenario loading, barrier evaluation, the three QP
//! filters, closed-loop simulation, and the dense QP solver.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nscbf_core::controllers::{sample_boundary_states, verify_boundary_feasibility};
use nscbf_core::qp;
use nscbf_core::scenario::{self, dump_config, load_scenario, ControllerKind};
use nscbf_core::sim::{self, SlidingMode, StepStatus};

fn vec_to_state(x: Vec<f64>, dim: usize, what: &str) -> PyResult<DVector<f64>> {
    if x.len() != dim {
        return Err(PyValueError::new_err(format!(
            "{what} has length {}, expected {dim}",
            x.len()
        )));
    }
    Ok(DVector::from_vec(x))
}

fn parse_kind(kind: &str) -> PyResult<ControllerKind> {
    match kind {
        "act" => Ok(ControllerKind::Act),
        "all" => Ok(ControllerKind::All),
        "adp" => Ok(ControllerKind::Adp),
        other => Err(PyValueError::new_err(format!(
            "unknown controller `{other}` (expected act, all, or adp)"
        ))),
    }
}

/// Result of one controller evaluation.
#[pyclass]
pub struct ControlOutput {
    #[pyo3(get)]
    pub input: Option<Vec<f64>>,
    #[pyo3(get)]
    pub alpha: Option<f64>,
    #[pyo3(get)]
    pub m: Option<f64>,
    #[pyo3(get)]
    pub feasible: bool,
    #[pyo3(get)]
    pub active_components: Vec<usize>,
    #[pyo3(get)]
    pub active_clauses: Vec<usize>,
    #[pyo3(get)]
    pub pieces: Vec<usize>,
    #[pyo3(get)]
    pub min_margin: f64,
}

/// Recorded closed-loop run.
#[pyclass]
pub struct SimResult {
    #[pyo3(get)]
    pub times: Vec<f64>,
    #[pyo3(get)]
    pub states: Vec<Vec<f64>>,
    #[pyo3(get)]
    pub inputs: Vec<Vec<f64>>,
    #[pyo3(get)]
    pub h_values: Vec<f64>,
    #[pyo3(get)]
    pub min_h: f64,
    #[pyo3(get)]
    pub first_violation_time: Option<f64>,
    #[pyo3(get)]
    pub infeasible_steps: usize,
    #[pyo3(get)]
    pub sliding_steps: usize,
    #[pyo3(get)]
    pub statuses: Vec<String>,
}

/// A validated scenario: safe set in normal form, piecewise dynamics,
/// controller and integrator configuration.
#[pyclass]
pub struct Scenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl Scenario {
    /// Load a built-in scenario by name or a TOML config by path.
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        let inner = load_scenario(source).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// Build a scenario from a TOML string.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let config =
            scenario::parse_config(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = scenario::Scenario::from_config(config)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Clauses of the union-of-intersections normal form, as component ids.
    fn clauses(&self) -> Vec<Vec<usize>> {
        self.inner.dnf.clauses().iter().map(|c| c.iter().copied().collect()).collect()
    }

    /// Barrier value `h(x) = max over clauses of min over components`.
    fn h(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        Ok(self.inner.dnf.h(&x))
    }

    /// Min/max recursion over the original expression tree (oracle for `h`).
    fn tree_value(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        self.inner
            .expr
            .eval(&self.inner.registry, &x)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn active_components(&self, x: Vec<f64>) -> PyResult<Vec<usize>> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        Ok(self.inner.dnf.active_components(&x, &self.inner.tolerances()))
    }

    fn active_clauses(&self, x: Vec<f64>) -> PyResult<Vec<usize>> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        Ok(self.inner.dnf.active_clauses(&x, &self.inner.tolerances()))
    }

    fn upper_active_components(&self, x: Vec<f64>) -> PyResult<Vec<usize>> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        Ok(self.inner.dnf.upper_active_components(&x, &self.inner.tolerances()))
    }

    /// Transition function value `beta_i(x) = M (h - max over clauses of i)`.
    fn transition_beta(&self, component: usize, x: Vec<f64>, m: f64) -> PyResult<f64> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        self.inner
            .dnf
            .transition_beta(component, &x, m)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Evaluate a filter at a state; `controller` overrides the configured
    /// kind ("act", "all", or "adp").
    #[pyo3(signature = (x, controller=None))]
    fn control(&self, x: Vec<f64>, controller: Option<&str>) -> PyResult<ControlOutput> {
        let x = vec_to_state(x, self.inner.state_dim(), "state")?;
        let kind = match controller {
            Some(k) => parse_kind(k)?,
            None => self.inner.config.controller.kind,
        };
        let ctrl = self.inner.controller_of_kind(kind);
        let res = ctrl.control(&x).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let min_margin = res.min_margin();
        Ok(ControlOutput {
            input: res.input.map(|u| u.iter().copied().collect()),
            alpha: res.adaptive_alpha,
            m: res.adaptive_m,
            feasible: res.status == nscbf_core::qp::QpStatus::Optimal,
            active_components: res.components,
            active_clauses: res.clauses,
            pieces: res.pieces,
            min_margin,
        })
    }

    /// Simulate the closed loop from `x0` (default: the scenario's first
    /// initial state). Optional overrides: controller kind, dt, t_final,
    /// sliding ("chatter" or "equivalent").
    #[pyo3(signature = (x0=None, controller=None, dt=None, t_final=None, sliding=None))]
    fn simulate(
        &self,
        x0: Option<Vec<f64>>,
        controller: Option<&str>,
        dt: Option<f64>,
        t_final: Option<f64>,
        sliding: Option<&str>,
    ) -> PyResult<SimResult> {
        let x0 = match x0 {
            Some(v) => vec_to_state(v, self.inner.state_dim(), "x0")?,
            None => self
                .inner
                .initial_states()
                .into_iter()
                .next()
                .ok_or_else(|| PyValueError::new_err("scenario has no initial states"))?,
        };
        let kind = match controller {
            Some(k) => parse_kind(k)?,
            None => self.inner.config.controller.kind,
        };
        let ctrl = self.inner.controller_of_kind(kind);
        let mut cfg = self.inner.integrator();
        if let Some(dt) = dt {
            cfg.dt = dt;
        }
        if let Some(tf) = t_final {
            cfg.t_final = tf;
        }
        if let Some(mode) = sliding {
            cfg.sliding_mode = match mode {
                "chatter" => SlidingMode::Chatter,
                "equivalent" | "equiv" => SlidingMode::EquivalentControl,
                other => {
                    return Err(PyValueError::new_err(format!("unknown sliding mode `{other}`")))
                }
            };
        }
        let out = sim::simulate(&x0, ctrl.as_ref(), &self.inner.dnf, &self.inner.dynamics, &cfg)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        if let Some(failure) = out.solver_failure {
            return Err(PyRuntimeError::new_err(format!("solver failure: {failure}")));
        }
        let traj = out.trajectory;
        Ok(SimResult {
            times: traj.times.clone(),
            states: traj.states.iter().map(|s| s.iter().copied().collect()).collect(),
            inputs: traj.inputs.iter().map(|u| u.iter().copied().collect()).collect(),
            h_values: traj.h_values.clone(),
            min_h: out.report.min_h,
            first_violation_time: out.report.first_violation_time,
            infeasible_steps: out.report.infeasible_steps,
            sliding_steps: traj.sliding.iter().filter(|s| **s).count(),
            statuses: traj
                .statuses
                .iter()
                .map(|s| match s {
                    StepStatus::Optimal => "optimal".to_string(),
                    StepStatus::InfeasibleFallback => "infeasible_fallback".to_string(),
                })
                .collect(),
        })
    }

    /// Strict-feasibility margin of the boundary condition over sampled
    /// boundary states; positive means every sample admits an input pushing
    /// all nearly-active components inward.
    #[pyo3(signature = (samples=200, seed=0))]
    fn verify_boundary(&self, samples: usize, seed: u64) -> PyResult<(f64, bool)> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let states = sample_boundary_states(
            &self.inner.dnf,
            &self.inner.domain(),
            samples,
            1e-3,
            &mut rng,
        );
        if states.is_empty() {
            return Err(PyRuntimeError::new_err("no boundary samples found"));
        }
        let report = verify_boundary_feasibility(
            &self.inner.dnf,
            &self.inner.dynamics,
            &states,
            &self.inner.tolerances(),
            &self.inner.bounds(),
            1e-3,
        )
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((report.min_margin, report.pass()))
    }

    /// Scenario configuration serialized as TOML.
    fn dump_toml(&self) -> PyResult<String> {
        dump_config(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name='{}', state_dim={}, clauses={})",
            self.inner.config.name,
            self.inner.state_dim(),
            self.inner.dnf.clauses().len()
        )
    }
}

/// Built-in scenario names.
#[pyfunction]
fn list_scenarios() -> Vec<String> {
    scenario::BUILTIN_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Solve `min z'Pz + q'z s.t. A z >= c, lo <= z <= hi`. Returns
/// `(z, duals, feasible)`; `lo`/`hi` entries may be infinite.
#[pyfunction]
#[pyo3(signature = (p, q, a, c, lower=None, upper=None))]
fn solve_qp(
    p: Vec<Vec<f64>>,
    q: Vec<f64>,
    a: Vec<Vec<f64>>,
    c: Vec<f64>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>, bool)> {
    let d = q.len();
    if p.len() != d || p.iter().any(|row| row.len() != d) {
        return Err(PyValueError::new_err(format!("cost matrix must be {d}x{d}")));
    }
    let k = a.len();
    if a.iter().any(|row| row.len() != d) || c.len() != k {
        return Err(PyValueError::new_err("constraint shapes do not match"));
    }
    let cost = DMatrix::from_fn(d, d, |i, j| p[i][j]);
    let amat = DMatrix::from_fn(k, d, |i, j| a[i][j]);
    let problem = qp::QpProblem::new(cost, DVector::from_vec(q), amat, DVector::from_vec(c))
        .map_err(|e| PyValueError::new_err(e.to_string()))?
        .with_bounds(lower.map(DVector::from_vec), upper.map(DVector::from_vec))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let s = qp::solve_qp(&problem, qp::DEFAULT_TOL)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((
        s.minimizer.iter().copied().collect(),
        s.duals.iter().copied().collect(),
        s.status == qp::QpStatus::Optimal,
    ))
}

#[pymodule]
fn nscbf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<ControlOutput>()?;
    m.add_class::<SimResult>()?;
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    Ok(())
}
