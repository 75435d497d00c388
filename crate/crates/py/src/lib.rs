//! Python bindings for `latentpde`.
//!
//! Arrays cross the boundary as flat lists of floats in row-major order,
//! with shapes passed alongside.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use latentpde::ansatz::{self, AnsatzSpec};
use latentpde::data::{self, TrajectoryDataset};
use latentpde::dmd;
use latentpde::evaluation;
use latentpde::spectral::{self, EquationKind, EquationSpec};
use latentpde::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Config(_) | Error::ConfigList(_) | Error::Dimension { .. } | Error::Shape(_) | Error::Structural(_) => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn kind(name: &str) -> PyResult<EquationKind> {
    EquationKind::parse(name).map_err(to_py)
}

/// Uniform periodic grid on `[x_min, x_min + length)`.
#[pyclass(name = "Grid", module = "latentpde_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: spectral::Grid1D,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(x_min: f64, length: f64, num_points: usize) -> PyResult<Self> {
        Ok(Self {
            inner: spectral::Grid1D::new(x_min, length, num_points).map_err(to_py)?,
        })
    }

    /// Default domain for an equation name.
    #[staticmethod]
    fn for_equation(equation: &str, num_points: usize) -> PyResult<Self> {
        let (x_min, length) = kind(equation)?.default_domain();
        Self::new(x_min, length, num_points)
    }

    #[getter]
    fn x_min(&self) -> f64 {
        self.inner.x_min
    }

    #[getter]
    fn length(&self) -> f64 {
        self.inner.length
    }

    #[getter]
    fn num_points(&self) -> usize {
        self.inner.num_points
    }

    fn points(&self) -> Vec<f64> {
        self.inner.points()
    }

    fn wavenumbers(&self) -> Vec<f64> {
        self.inner.wavenumbers()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(x_min={}, length={}, num_points={})",
            self.inner.x_min, self.inner.length, self.inner.num_points
        )
    }
}

/// Spectral derivative of order `order` of a grid field.
#[pyfunction]
fn fourier_derivative(u: Vec<f64>, order: u32, grid: &PyGrid) -> PyResult<Vec<f64>> {
    let g = &grid.inner;
    let s = spectral::to_spectral(&u, g).map_err(to_py)?;
    spectral::to_physical(&spectral::fourier_derivative(&s, order, g).map_err(to_py)?, g).map_err(to_py)
}

/// `u * u_x`, dealiased by the 2/3 rule unless `dealias` is false.
#[pyfunction]
#[pyo3(signature = (u, grid, dealias = true))]
fn convective_term(u: Vec<f64>, grid: &PyGrid, dealias: bool) -> PyResult<Vec<f64>> {
    spectral::convective_term(&u, &grid.inner, dealias).map_err(to_py)
}

/// Integrates the named equation and returns `num_saves` snapshots
/// (the first is `u0`).
#[pyfunction]
#[pyo3(signature = (u0, equation, grid, dt_solver, dt_save, num_saves))]
fn solve_trajectory(
    py: Python<'_>,
    u0: Vec<f64>,
    equation: &str,
    grid: &PyGrid,
    dt_solver: f64,
    dt_save: f64,
    num_saves: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let eq = EquationSpec::default_for(kind(equation)?);
    let g = grid.inner;
    py.detach(|| spectral::solve_trajectory(&u0, &eq, &g, dt_solver, dt_save, num_saves))
        .map_err(to_py)
}

/// Fitted latent vectors and per-snapshot relRMSE.
type FitResult = (Vec<Vec<f64>>, Vec<Option<f64>>);

/// The Fourier ansatz `u(x) = Psi_theta(x)`.
#[pyclass(name = "Ansatz", module = "latentpde_py", frozen)]
struct PyAnsatz {
    inner: ansatz::Ansatz,
}

#[pymethods]
impl PyAnsatz {
    /// Default ansatz for an equation; `spec_json` overrides it entirely.
    #[new]
    #[pyo3(signature = (equation, domain_length = None, spec_json = None))]
    fn new(equation: &str, domain_length: Option<f64>, spec_json: Option<&str>) -> PyResult<Self> {
        let k = kind(equation)?;
        let spec = match spec_json {
            Some(s) => serde_json::from_str::<AnsatzSpec>(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => AnsatzSpec::default_for(k, domain_length.unwrap_or(k.default_domain().1)),
        };
        Ok(Self {
            inner: ansatz::Ansatz::new(spec).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.spec()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn frequencies(&self) -> Vec<f64> {
        self.inner.spec().frequencies()
    }

    fn init_theta(&self, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        self.inner
            .spec()
            .init_theta(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn evaluate(&self, theta: Vec<f64>, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.eval_points(&theta, &xs).map_err(to_py)
    }

    /// Fits one latent vector per snapshot; returns `(thetas, rel_rmse)`.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (snapshots, grid, steps = 10_000, lr = 1e-2, lr_decay = 0.9, steps_per_decay = 1_000, batch = 16, seed = 0))]
    fn fit(
        &self,
        py: Python<'_>,
        snapshots: Vec<f64>,
        grid: &PyGrid,
        steps: usize,
        lr: f64,
        lr_decay: f64,
        steps_per_decay: usize,
        batch: usize,
        seed: u64,
    ) -> PyResult<FitResult> {
        let cfg = ansatz::AutoDecoderConfig {
            steps,
            lr,
            lr_decay,
            steps_per_decay,
            batch,
            seed,
        };
        let spec = self.inner.spec().clone();
        let g = grid.inner;
        let fit = py
            .detach(|| ansatz::fit_auto_decoder(&snapshots, &g, &spec, &cfg))
            .map_err(to_py)?;
        Ok((fit.thetas, fit.rel_rmse))
    }
}

/// Rank-K linear one-step model fitted on snapshot pairs.
#[pyclass(name = "DmdModel", module = "latentpde_py", frozen)]
struct PyDmd {
    inner: dmd::DmdModel,
}

#[pymethods]
impl PyDmd {
    /// `u` holds `num_traj * num_steps` snapshots of `grid.num_points` values.
    #[staticmethod]
    fn fit(u: Vec<f64>, num_traj: usize, num_steps: usize, grid: &PyGrid, rank: usize) -> PyResult<Self> {
        let ds = TrajectoryDataset::new(u, num_traj, num_steps, grid.inner, EquationSpec::kdv(), 1.0).map_err(to_py)?;
        Ok(Self {
            inner: dmd::fit_dmd(&ds, rank).map_err(to_py)?,
        })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    #[getter]
    fn effective_rank(&self) -> usize {
        self.inner.effective_rank
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values.clone()
    }

    fn spectral_radius(&self) -> f64 {
        self.inner.spectral_radius()
    }

    /// `steps + 1` snapshots starting from the projection of `u0`.
    fn rollout(&self, u0: Vec<f64>, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let flat = self.inner.rollout(&u0, steps).map_err(to_py)?;
        Ok(flat.chunks(self.inner.grid_len).map(<[f64]>::to_vec).collect())
    }
}

#[pyfunction]
fn rel_rmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evaluation::rel_rmse(&pred, &truth).map_err(to_py)
}

/// Log ratio of magnitude spectra, `None` at masked frequencies.
#[pyfunction]
fn energy_ratio(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<Vec<Option<f64>>> {
    Ok(evaluation::energy_ratio(&pred, &truth).map_err(to_py)?.values)
}

/// `latent` is `[num_traj, num_steps, dim]` flattened.
#[pyfunction]
fn tv_norm(latent: Vec<f64>, num_traj: usize, num_steps: usize, dim: usize, dt: f64) -> PyResult<f64> {
    evaluation::tv_norm(&latent, num_traj, num_steps, dim, dt).map_err(to_py)
}

#[pyfunction]
fn working_gate(curve: Vec<f64>) -> PyResult<bool> {
    evaluation::working_gate(&curve).map_err(to_py)
}

/// Reads a dataset directory into a dict with `u` (flat), `shape`,
/// `x_min`, `length`, `equation` and `dt_save`.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ds = data::load_dataset(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("shape", ds.shape().to_vec())?;
    d.set_item("x_min", ds.grid.x_min)?;
    d.set_item("length", ds.grid.length)?;
    d.set_item("equation", ds.eq.kind.name())?;
    d.set_item("dt_save", ds.dt_save)?;
    d.set_item("u", ds.u)?;
    Ok(d)
}

/// Fills defaults into a user configuration and returns the resolved JSON.
#[pyfunction]
fn resolve_config(config_json: &str) -> PyResult<String> {
    let value: serde_json::Value =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = latentpde::config::resolve(&value).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    let out = cfg.to_value();
    serde_json::to_string_pretty(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs the command-line interface with `args` (without the program
/// name) and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("latentpde".to_string()).chain(args).collect();
    py.detach(|| latentpde::cli::run(argv))
}

#[pymodule]
pub fn latentpde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyAnsatz>()?;
    m.add_class::<PyDmd>()?;
    m.add_function(wrap_pyfunction!(fourier_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(convective_term, m)?)?;
    m.add_function(wrap_pyfunction!(solve_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(rel_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(energy_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(tv_norm, m)?)?;
    m.add_function(wrap_pyfunction!(working_gate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
