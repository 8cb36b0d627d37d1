use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hho_wave::cli::{self, ProblemKind};
use hho_wave::errors::{self, ConvergenceReport};
use hho_wave::local_ops::{Discretization, Variant};
use hho_wave::mesh::{Rectangle, SimplicialMesh};
use hho_wave::semidisc::{ode_rhs, IcMode};
use hho_wave::timeint::{self, Scheme, TimeLoopConfig};
use hho_wave::Error;
use nalgebra::DVector;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::InvalidMesh(_) | Error::Schema { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Triangulation of the unit square.
#[pyclass(name = "Mesh", module = "hho_wave_py", frozen)]
struct PyMesh {
    inner: SimplicialMesh,
}

#[pymethods]
impl PyMesh {
    /// Structured mesh with `n` subdivisions per side (two triangles per square).
    #[new]
    fn new(n: usize) -> PyResult<Self> {
        let inner = SimplicialMesh::build_structured(n, Rectangle::unit_square()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: SimplicialMesh::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    /// Red refinement: every triangle split into four.
    fn refine(&self) -> Self {
        Self { inner: self.inner.refine_uniform() }
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.n_cells()
    }

    #[getter]
    fn n_faces(&self) -> usize {
        self.inner.n_faces()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h()
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.inner.vertices().iter().map(|p| (p.x, p.y)).collect()
    }

    fn cells(&self) -> Vec<[usize; 3]> {
        self.inner.cells().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(cells={}, faces={}, h={:.4e})", self.inner.n_cells(), self.inner.n_faces(), self.inner.h())
    }
}

/// Assembled discretization on a structured mesh: local operators, the
/// global coupling and the factored skeleton solver.
#[pyclass(name = "Level", module = "hho_wave_py", frozen)]
struct PyLevel {
    inner: cli::Level,
    problem: ProblemKind,
}

#[pymethods]
impl PyLevel {
    #[new]
    #[pyo3(signature = (n, degree=1, variant="mixed", problem="standing-wave"))]
    fn new(n: usize, degree: usize, variant: &str, problem: &str) -> PyResult<Self> {
        let variant: Variant = parse(variant)?;
        let problem: ProblemKind = parse(problem)?;
        if degree > 3 {
            return Err(PyValueError::new_err(format!("degree must be at most 3, got {degree}")));
        }
        let inner = cli::Level::build(n, Discretization::new(degree, variant)).map_err(py_err)?;
        Ok(Self { inner, problem })
    }

    #[getter]
    fn n_dofs(&self) -> usize {
        self.inner.bundle.n_dofs()
    }

    #[getter]
    fn state_len(&self) -> usize {
        self.inner.bundle.state_len()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.mesh.h()
    }

    /// Dimension of the kernel of the face matrix (zero for mixed order).
    #[getter]
    fn kernel_dim(&self) -> usize {
        self.inner.skeleton.kernel_dim()
    }

    /// Cell state `[σ; v]` at `t = 0` for `ic` in {"h-interp", "l2"}.
    #[pyo3(signature = (ic="h-interp"))]
    fn initial_state(&self, ic: &str) -> PyResult<Vec<f64>> {
        let ic: IcMode = parse(ic)?;
        let y = self.inner.initial_state(&self.problem.build(), ic).map_err(py_err)?;
        Ok(y.as_slice().to_vec())
    }

    /// Right-hand side `L y` of the reduced ODE without source.
    fn rhs(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = self.state(state)?;
        Ok(ode_rhs(&self.inner.bundle, &self.inner.skeleton, &y, 0.0, None).as_slice().to_vec())
    }

    /// `(‖σ − σ_T‖, ‖v − v_T‖)` at time `t` for the level's problem.
    fn energy_error(&self, state: Vec<f64>, t: f64) -> PyResult<(f64, f64)> {
        let y = self.state(state)?;
        let e = errors::energy_error(&self.inner.bundle, &y, &self.problem.build(), t);
        Ok((e.sigma, e.v))
    }

    /// Marches the H-interpolated initial data to `t_final`; returns the final
    /// state and the discrete energy after every step.
    #[pyo3(signature = (t_final, scheme="rk4"))]
    fn run(&self, py: Python<'_>, t_final: f64, scheme: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let scheme: Scheme = parse(scheme)?;
        let problem = self.problem.build();
        let cfg = TimeLoopConfig { scheme, t_final, ..TimeLoopConfig::default() };
        let level = &self.inner;
        let traj = py
            .detach(|| {
                let y0 = level.initial_state(&problem, IcMode::HInterp)?;
                let dt = timeint::choose_dt(&level.bundle, &level.skeleton, level.mesh.h(), level.mesh.h_min(), &cfg);
                let source = |p: &nalgebra::Point2<f64>, t: f64| (problem.f)(p, t);
                let f = (self.problem == ProblemKind::Polynomial).then_some(&source as hho_wave::semidisc::Source<'_>);
                timeint::run(&level.bundle, &level.skeleton, &cfg, dt, y0, f)
            })
            .map_err(py_err)?;
        Ok((traj.final_state.as_slice().to_vec(), traj.energy))
    }

    fn __repr__(&self) -> String {
        let d = self.inner.bundle.disc;
        format!("Level(k={}, variant={}, dofs={})", d.k, d.variant, self.inner.bundle.n_dofs())
    }
}

impl PyLevel {
    fn state(&self, state: Vec<f64>) -> PyResult<DVector<f64>> {
        let n = self.inner.bundle.state_len();
        if state.len() != n {
            return Err(PyValueError::new_err(format!("state has length {}, expected {n}", state.len())));
        }
        Ok(DVector::from_vec(state))
    }
}

/// Convergence-study configuration.
#[pyclass(name = "StudyConfig", module = "hho_wave_py", from_py_object)]
#[derive(Clone)]
struct PyStudyConfig {
    inner: cli::StudyConfig,
}

#[pymethods]
impl PyStudyConfig {
    #[new]
    #[pyo3(signature = (degree=1, variant="mixed", mesh=4, refinements=3, scheme="rk4", t_final=1.0, ic="h-interp", problem="standing-wave"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        degree: usize,
        variant: &str,
        mesh: usize,
        refinements: usize,
        scheme: &str,
        t_final: f64,
        ic: &str,
        problem: &str,
    ) -> PyResult<Self> {
        let inner = cli::StudyConfig {
            degree,
            variant: parse(variant)?,
            mesh,
            refinements,
            scheme: parse(scheme)?,
            t_final,
            ic: parse(ic)?,
            problem: parse(problem)?,
            ..cli::StudyConfig::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = cli::StudyConfig::from_json(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn levels(&self) -> Vec<usize> {
        self.inner.levels()
    }

    fn __repr__(&self) -> String {
        format!(
            "StudyConfig(degree={}, variant={}, levels={:?}, scheme={}, ic={})",
            self.inner.degree,
            self.inner.variant,
            self.inner.levels(),
            self.inner.scheme,
            self.inner.ic
        )
    }
}

/// Result of a convergence study.
#[pyclass(name = "Report", module = "hho_wave_py", frozen)]
struct PyReport {
    config: cli::StudyConfig,
    inner: ConvergenceReport,
}

#[pymethods]
impl PyReport {
    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    /// Values of an error column, one per level.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner
            .rows
            .iter()
            .map(|r| r.column(name).ok_or_else(|| PyValueError::new_err(format!("unknown column '{name}'"))))
            .collect()
    }

    /// Experimental orders of convergence of a column (`None` on the first level).
    fn eoc(&self, name: &str) -> PyResult<Vec<Option<f64>>> {
        self.inner.eoc(name).ok_or_else(|| PyValueError::new_err(format!("unknown column '{name}'")))
    }

    /// `(column, observed, target, passed)` for every asserted rate.
    fn rate_checks(&self) -> Vec<(String, Option<f64>, f64, bool)> {
        cli::rate_checks(&self.config, &self.inner)
            .into_iter()
            .map(|c| (c.column, c.observed, c.target, c.passed))
            .collect()
    }

    fn csv(&self) -> PyResult<String> {
        cli::report_csv(&self.config, &self.inner).map_err(py_err)
    }

    fn json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&cli::json_report(&self.config, &self.inner))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Runs a convergence study; the GIL is released while it runs.
#[pyfunction]
fn run_study(py: Python<'_>, config: PyStudyConfig) -> PyResult<PyReport> {
    let cfg = config.inner;
    let inner = py.detach(|| cli::run_study(&cfg)).map_err(py_err)?;
    Ok(PyReport { config: cfg, inner })
}

/// Machine-precision identity suite; returns `(name, value, tolerance, passed, detail)` rows.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(String, f64, f64, bool, String)> {
    let report = py.detach(|| cli::run_selftest(cli::SelftestOptions::default()));
    report.checks.into_iter().map(|c| (c.name, c.value, c.tolerance, c.passed, c.detail)).collect()
}

/// `(‖Π^σ − Π^k σ‖, ‖Π^v − Π^{k'} v‖)` for `(σ, v) = (∇u, u)` with
/// `u = sin(πx) sin(πy)` on the structured mesh with `n` subdivisions.
#[pyfunction]
#[pyo3(signature = (n, degree=1, variant="mixed"))]
fn h_interp_distance(n: usize, degree: usize, variant: &str) -> PyResult<(f64, f64)> {
    let variant: Variant = parse(variant)?;
    let mesh = SimplicialMesh::build_structured(n, Rectangle::unit_square()).map_err(py_err)?;
    let packs = hho_wave::local_ops::build_packs(&mesh, Discretization::new(degree, variant)).map_err(py_err)?;
    let problem = errors::standing_wave();
    let d = errors::h_interp_distance(&packs, |p| (problem.grad_v)(p, 0.0), problem.v0()).map_err(py_err)?;
    Ok((d.sigma, d.v))
}

/// Experimental orders of convergence `log(e_{i-1}/e_i) / log(h_{i-1}/h_i)`.
#[pyfunction]
fn compute_eoc(h: Vec<f64>, errors: Vec<f64>) -> PyResult<Vec<Option<f64>>> {
    if h.len() != errors.len() {
        return Err(PyValueError::new_err("h and errors must have the same length"));
    }
    Ok(errors::compute_eoc(&h, &errors))
}

#[pymodule]
fn hho_wave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyLevel>()?;
    m.add_class::<PyStudyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(h_interp_distance, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eoc, m)?)?;
    Ok(())
}
