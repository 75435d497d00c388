//! Initial-condition sampling, trajectory datasets and their on-disk format.
//!
//! A dataset directory holds `metadata.json` and `u.bin`; the latter is a
//! headerless little-endian `f64` array laid out row-major as
//! `[traj, step, grid]`.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{solve_trajectory, EquationKind, EquationSpec, Grid1D, Transform};

pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";
pub const DATA_FILE: &str = "u.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConditionSpec {
    /// Zero-mean periodic Gaussian process with a squared-exponential kernel
    /// of the circular distance, sampled by circulant embedding.
    GaussianProcess { length_scale: f64, variance: f64 },
    /// `sum_j a_j sin(w_j x + phi_j)` over `3 n_c` terms, `w_j = 2 pi m / L`
    /// with `m` drawn from `1..=max_mode`, `a_j ~ U[-amplitude, amplitude]`,
    /// `phi_j ~ U[0, 2 pi)`.
    SineSum {
        num_components: usize,
        #[serde(default = "default_max_mode")]
        max_mode: u32,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

fn default_max_mode() -> u32 {
    3
}

fn default_amplitude() -> f64 {
    0.5
}

impl InitialConditionSpec {
    pub fn default_for(kind: EquationKind, domain_length: f64) -> Self {
        match kind {
            EquationKind::ViscidBurgers => InitialConditionSpec::GaussianProcess {
                length_scale: 0.4 * domain_length,
                variance: 0.25,
            },
            EquationKind::KuramotoSivashinsky => InitialConditionSpec::sine_sum(30),
            EquationKind::Kdv => InitialConditionSpec::sine_sum(10),
        }
    }

    pub fn sine_sum(num_components: usize) -> Self {
        InitialConditionSpec::SineSum {
            num_components,
            max_mode: default_max_mode(),
            amplitude: default_amplitude(),
        }
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("initial condition: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialConditionSpec::GaussianProcess { length_scale, variance } => {
                if !(length_scale > 0.0) || !(variance >= 0.0) {
                    return Err(Error::Config(format!(
                        "gaussian process needs length_scale > 0 and variance >= 0, got {length_scale}, {variance}"
                    )));
                }
            }
            InitialConditionSpec::SineSum {
                max_mode, amplitude, ..
            } => {
                if max_mode == 0 || !(amplitude >= 0.0) {
                    return Err(Error::Config("sine sum needs max_mode >= 1 and amplitude >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn sample_initial_condition(spec: &InitialConditionSpec, grid: &Grid1D, rng_seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let xs = grid.points();
    match *spec {
        InitialConditionSpec::SineSum {
            num_components,
            max_mode,
            amplitude,
        } => {
            let mut u = vec![0.0; grid.num_points];
            for _ in 0..3 * num_components {
                let m = rng.random_range(1..=max_mode) as f64;
                let a = amplitude * (2.0 * rng.random::<f64>() - 1.0);
                let phi = 2.0 * PI * rng.random::<f64>();
                let w = 2.0 * PI * m / grid.length;
                for (ui, &x) in u.iter_mut().zip(&xs) {
                    *ui += a * (w * x + phi).sin();
                }
            }
            Ok(u)
        }
        InitialConditionSpec::GaussianProcess { length_scale, variance } => {
            let n = grid.num_points;
            let dx = grid.spacing();
            let kernel: Vec<f64> = (0..n)
                .map(|j| {
                    let d = (j as f64 * dx).min(grid.length - j as f64 * dx);
                    variance * (-0.5 * (d / length_scale).powi(2)).exp()
                })
                .collect();
            let transform = Transform::new(n);
            // forward() divides by N, so these are lambda_k / N.
            let eig = transform.forward(&kernel);
            let coeffs: Vec<num_complex::Complex64> = eig
                .iter()
                .map(|l| {
                    let s = l.re.max(0.0).sqrt();
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    num_complex::Complex64::new(s * re, s * im)
                })
                .collect();
            // inverse() is the unnormalised sum, which is what the embedding needs.
            Ok(transform.inverse(&coeffs))
        }
    }
}

/// On-disk metadata; field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub equation: EquationKind,
    pub nu: f64,
    pub domain_length: f64,
    pub num_grid: usize,
    pub dt_save: f64,
    pub dt_solver: f64,
    pub num_traj: usize,
    pub num_steps: usize,
    pub seed: u64,
    pub ic_spec: serde_json::Value,
}

/// `x_min` is not stored: KS lives on `[0, L]`, the others on `[-L/2, L/2]`.
pub fn domain_origin(kind: EquationKind, length: f64) -> f64 {
    match kind {
        EquationKind::KuramotoSivashinsky => 0.0,
        EquationKind::ViscidBurgers | EquationKind::Kdv => -0.5 * length,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    /// Row-major `[traj, step, grid]`.
    pub u: Vec<f64>,
    pub num_traj: usize,
    pub num_steps: usize,
    pub grid: Grid1D,
    pub eq: EquationSpec,
    pub dt_save: f64,
    pub dt_solver: f64,
    pub seed: u64,
    pub ic_spec: serde_json::Value,
}

impl TrajectoryDataset {
    pub fn new(
        u: Vec<f64>,
        num_traj: usize,
        num_steps: usize,
        grid: Grid1D,
        eq: EquationSpec,
        dt_save: f64,
    ) -> Result<Self> {
        let ds = Self {
            u,
            num_traj,
            num_steps,
            grid,
            eq,
            dt_save,
            dt_solver: dt_save,
            seed: 0,
            ic_spec: serde_json::Value::Null,
        };
        ds.check_shape()?;
        Ok(ds)
    }

    fn check_shape(&self) -> Result<()> {
        let expected = self.num_traj * self.num_steps * self.grid.num_points;
        if self.u.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: self.u.len(),
            });
        }
        Ok(())
    }

    pub fn num_grid(&self) -> usize {
        self.grid.num_points
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.num_traj, self.num_steps, self.grid.num_points]
    }

    pub fn snapshot(&self, traj: usize, step: usize) -> &[f64] {
        let n = self.grid.num_points;
        let start = (traj * self.num_steps + step) * n;
        &self.u[start..start + n]
    }

    pub fn trajectory(&self, traj: usize) -> &[f64] {
        let len = self.num_steps * self.grid.num_points;
        &self.u[traj * len..(traj + 1) * len]
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            format_version: FORMAT_VERSION,
            equation: self.eq.kind,
            nu: self.eq.nu,
            domain_length: self.grid.length,
            num_grid: self.grid.num_points,
            dt_save: self.dt_save,
            dt_solver: self.dt_solver,
            num_traj: self.num_traj,
            num_steps: self.num_steps,
            seed: self.seed,
            ic_spec: self.ic_spec.clone(),
        }
    }

    /// Largest `|u|` per trajectory; fails on the first non-finite value.
    pub fn validate(&self) -> Result<Vec<f64>> {
        if self.num_steps < 2 {
            return Err(Error::InsufficientData(format!(
                "datasets need at least 2 steps, got {}",
                self.num_steps
            )));
        }
        self.check_shape()?;
        let mut out = Vec::with_capacity(self.num_traj);
        for t in 0..self.num_traj {
            let mut max = 0.0f64;
            for (i, &v) in self.trajectory(t).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Shape(format!(
                        "non-finite value in trajectory {t} at flat index {i}"
                    )));
                }
                max = max.max(v.abs());
            }
            out.push(max);
        }
        Ok(out)
    }

    /// Writes into `dir`, which must not exist yet or be empty.
    pub fn save(&self, dir: &Path) -> Result<()> {
        prepare_output_dir(dir)?;
        self.write_files(dir)
    }

    /// Writes `metadata.json` and `u.bin` into an existing directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::to_string_pretty(&self.metadata())?;
        fs::write(dir.join(METADATA_FILE), meta)?;
        let mut w = BufWriter::new(File::create(dir.join(DATA_FILE))?);
        for v in &self.u {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Creates `dir`, refusing to reuse one that already has contents.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn load_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

pub fn load_metadata(dir: &Path) -> Result<Metadata> {
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path)?;
    let meta: Metadata =
        serde_json::from_str(&text).map_err(|e| load_err(&path, e.column() as u64, format!("bad metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(load_err(
            &path,
            0,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    Ok(meta)
}

pub fn load_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let meta = load_metadata(dir)?;
    let origin = domain_origin(meta.equation, meta.domain_length);
    let grid = Grid1D::new(origin, meta.domain_length, meta.num_grid)?;
    let bin = dir.join(DATA_FILE);
    if !bin.exists() {
        return Err(Error::MissingArtifact(bin));
    }
    let expected_values = meta.num_traj * meta.num_steps * meta.num_grid;
    let expected_bytes = (expected_values * 8) as u64;
    let actual = fs::metadata(&bin)?.len();
    if actual != expected_bytes {
        return Err(load_err(
            &bin,
            actual.min(expected_bytes),
            format!("expected {expected_bytes} bytes, found {actual}"),
        ));
    }
    let mut bytes = Vec::with_capacity(expected_bytes as usize);
    File::open(&bin)?.read_to_end(&mut bytes)?;
    let mut u = Vec::with_capacity(expected_values);
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        if !v.is_finite() {
            return Err(load_err(&bin, (i * 8) as u64, "non-finite value"));
        }
        u.push(v);
    }
    let mut eq = EquationSpec::default_for(meta.equation);
    eq.nu = meta.nu;
    Ok(TrajectoryDataset {
        u,
        num_traj: meta.num_traj,
        num_steps: meta.num_steps,
        grid,
        eq,
        dt_save: meta.dt_save,
        dt_solver: meta.dt_solver,
        seed: meta.seed,
        ic_spec: meta.ic_spec,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub eq: EquationSpec,
    pub ic: InitialConditionSpec,
    pub grid: Grid1D,
    pub num_traj: usize,
    pub num_steps: usize,
    pub dt_save: f64,
    pub dt_solver: f64,
    pub seed: u64,
}

/// Solves every trajectory (in parallel) without touching the filesystem.
/// Trajectory `i` uses the initial-condition seed `seed ^ i`.
pub fn generate_trajectories(cfg: &GenerateConfig) -> Result<TrajectoryDataset> {
    if cfg.num_steps < 2 {
        return Err(Error::Config("num_steps must be at least 2".into()));
    }
    cfg.ic.validate()?;
    let solve_one = |i: usize| -> Result<Vec<f64>> {
        let u0 = sample_initial_condition(&cfg.ic, &cfg.grid, cfg.seed ^ i as u64)?;
        let snaps =
            solve_trajectory(&u0, &cfg.eq, &cfg.grid, cfg.dt_solver, cfg.dt_save, cfg.num_steps).map_err(|e| {
                Error::Trajectory {
                    index: i,
                    source: Box::new(e),
                }
            })?;
        Ok(snaps.concat())
    };
    let trajs: Vec<Vec<f64>> = crate::runtime::install(|| {
        (0..cfg.num_traj)
            .into_par_iter()
            .map(solve_one)
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TrajectoryDataset {
        u: trajs.concat(),
        num_traj: cfg.num_traj,
        num_steps: cfg.num_steps,
        grid: cfg.grid,
        eq: cfg.eq,
        dt_save: cfg.dt_save,
        dt_solver: cfg.dt_solver,
        seed: cfg.seed,
        ic_spec: serde_json::to_value(&cfg.ic)?,
    })
}

/// Generates and persists a dataset. On failure nothing is left behind in
/// `out_dir` beyond what existed before the call.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<TrajectoryDataset> {
    let existed = out_dir.exists();
    prepare_output_dir(out_dir)?;
    let result = generate_trajectories(cfg).and_then(|ds| {
        ds.validate()?;
        ds.write_files(out_dir)?;
        Ok(ds)
    });
    if result.is_err() {
        cleanup(out_dir, existed);
    }
    result
}

fn cleanup(dir: &Path, keep_dir: bool) {
    for name in [METADATA_FILE, DATA_FILE] {
        let _ = fs::remove_file(dir.join(name));
    }
    if !keep_dir {
        let _ = fs::remove_dir(dir);
    }
}

/// One batch of windows: `data` is `[batch, window_len, grid]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(trajectory, first step)` for each window.
    pub windows: Vec<(usize, usize)>,
    pub window_len: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn shape(&self, num_grid: usize) -> [usize; 3] {
        [self.windows.len(), self.window_len, num_grid]
    }
}

/// Enumerates all in-trajectory windows of length `window_len`.
pub fn window_starts(num_traj: usize, num_steps: usize, window_len: usize) -> Vec<(usize, usize)> {
    if window_len == 0 || window_len > num_steps {
        return Vec::new();
    }
    (0..num_traj)
        .flat_map(|t| (0..=num_steps - window_len).map(move |s| (t, s)))
        .collect()
}

/// Seeded shuffle of window positions, cut into full batches (the remainder
/// that does not fill a batch is dropped).
pub struct BatchIter<'a> {
    ds: &'a TrajectoryDataset,
    order: Vec<(usize, usize)>,
    batch_size: usize,
    window_len: usize,
    cursor: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let windows = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let n = self.ds.num_grid();
        let mut data = Vec::with_capacity(windows.len() * self.window_len * n);
        for &(t, s) in &windows {
            for k in 0..self.window_len {
                data.extend_from_slice(self.ds.snapshot(t, s + k));
            }
        }
        Some(Batch {
            windows,
            window_len: self.window_len,
            data,
        })
    }
}

pub fn iterate_batches(
    ds: &TrajectoryDataset,
    batch_size: usize,
    window_len: usize,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 || window_len == 0 {
        return Err(Error::Config("batch_size and window_len must be positive".into()));
    }
    if window_len > ds.num_steps {
        return Err(Error::Config(format!(
            "window_len {window_len} exceeds trajectory length {}",
            ds.num_steps
        )));
    }
    let mut order = window_starts(ds.num_traj, ds.num_steps, window_len);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        window_len,
        cursor: 0,
    })
}

pub fn dataset_dir_exists(dir: &Path) -> bool {
    dir.join(METADATA_FILE).exists()
}

pub fn data_path(dir: &Path) -> PathBuf {
    dir.join(DATA_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_grid(n: usize) -> Grid1D {
        Grid1D::new(0.0, 64.0, n).unwrap()
    }

    #[test]
    fn zero_amplitude_sine_sum_is_zero() {
        let spec = InitialConditionSpec::SineSum {
            num_components: 30,
            max_mode: 3,
            amplitude: 0.0,
        };
        let u = sample_initial_condition(&spec, &ks_grid(64), 7).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_sum_obeys_triangle_bound() {
        let spec = InitialConditionSpec::sine_sum(30);
        for seed in 0..20 {
            let u = sample_initial_condition(&spec, &ks_grid(128), seed).unwrap();
            assert!(u.iter().all(|v| v.abs() <= 45.0));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        for spec in [
            InitialConditionSpec::sine_sum(10),
            InitialConditionSpec::default_for(EquationKind::ViscidBurgers, 2.0),
        ] {
            let g = Grid1D::new(-1.0, 2.0, 64).unwrap();
            let a = sample_initial_condition(&spec, &g, 3).unwrap();
            let b = sample_initial_condition(&spec, &g, 3).unwrap();
            let c = sample_initial_condition(&spec, &g, 4).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn unknown_ic_kind_is_config_error() {
        let v = serde_json::json!({"kind": "white_noise"});
        assert!(matches!(InitialConditionSpec::from_json(&v), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_process_variance_is_close_to_target() {
        // Pointwise variance pooled over grid points and seeds.
        let spec = InitialConditionSpec::GaussianProcess {
            length_scale: 0.8,
            variance: 0.25,
        };
        let g = Grid1D::new(-1.0, 2.0, 64).unwrap();
        let mut sum2 = 0.0;
        let mut count = 0.0;
        for seed in 0..400 {
            let u = sample_initial_condition(&spec, &g, seed).unwrap();
            sum2 += u.iter().map(|v| v * v).sum::<f64>();
            count += u.len() as f64;
        }
        let var = sum2 / count;
        assert!((var - 0.25).abs() < 0.05, "variance {var}");
    }

    fn toy_dataset(num_traj: usize, num_steps: usize, n: usize) -> TrajectoryDataset {
        let g = ks_grid(n);
        let u = (0..num_traj * num_steps * n).map(|i| i as f64).collect();
        TrajectoryDataset::new(
            u,
            num_traj,
            num_steps,
            g,
            EquationSpec::default_for(EquationKind::KuramotoSivashinsky),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let ds = toy_dataset(4, 300, 8);
        let batches: Vec<Batch> = iterate_batches(&ds, 16, 1, 11).unwrap().collect();
        assert_eq!(batches.len(), 1200 / 16);
        assert!(batches
            .iter()
            .all(|b| b.shape(8) == [16, 1, 8] && b.data.len() == 16 * 8));
        let again: Vec<Batch> = iterate_batches(&ds, 16, 1, 11).unwrap().collect();
        assert_eq!(batches, again);
        let other: Vec<Batch> = iterate_batches(&ds, 16, 1, 12).unwrap().collect();
        assert_ne!(batches, other);
    }

    #[test]
    fn windows_stay_inside_one_trajectory() {
        let ds = toy_dataset(3, 25, 4);
        for b in iterate_batches(&ds, 5, 20, 1).unwrap() {
            for (w, &(t, s)) in b.windows.iter().enumerate() {
                assert!(t < 3 && s + 20 <= 25);
                for k in 0..20 {
                    let got = &b.data[(w * 20 + k) * 4..(w * 20 + k + 1) * 4];
                    assert_eq!(got, ds.snapshot(t, s + k));
                }
            }
        }
    }

    #[test]
    fn validator_reports_max_per_trajectory() {
        let ds = toy_dataset(2, 3, 4);
        let m = ds.validate().unwrap();
        assert_eq!(m, vec![11.0, 23.0]);
    }
}
