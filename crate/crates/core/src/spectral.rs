//! Fourier pseudo-spectral machinery for periodic 1D problems of the form
//! `u_t = D u + N(u)`, with `D` diagonal in Fourier space and `N` the
//! convective term `c_N u u_x`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equi-spaced periodic grid on `[x_min, x_min + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub length: f64,
    pub num_points: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, length: f64, num_points: usize) -> Result<Self> {
        if num_points < 2 || !num_points.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid size must be a power of two >= 2, got {num_points}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) || !x_min.is_finite() {
            return Err(Error::Config(format!(
                "grid needs a finite positive length, got {length}"
            )));
        }
        Ok(Self {
            x_min,
            length,
            num_points,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.num_points as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.num_points).map(|i| self.point(i)).collect()
    }

    /// Integer wavenumber index for FFT slot `j` (`-N/2` sits at `j = N/2`).
    pub fn mode_index(&self, j: usize) -> i64 {
        let n = self.num_points as i64;
        let j = j as i64;
        if j < n / 2 {
            j
        } else {
            j - n
        }
    }

    /// Angular wavenumbers `2 pi k / L` in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.num_points)
            .map(|j| 2.0 * PI * self.mode_index(j) as f64 / self.length)
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.num_points {
            return Err(Error::Dimension {
                expected: self.num_points,
                got: len,
            });
        }
        Ok(())
    }
}

/// Normalised Fourier coefficients `u_hat = FFT(u) / N` in FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub coeffs: Vec<Complex64>,
    pub time: f64,
}

impl SpectralState {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Cached forward/inverse FFT plans for one grid size.
#[derive(Clone)]
pub struct Transform {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transform").field("n", &self.n).finish()
    }
}

impl Transform {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward_into(&self, u: &[f64], out: &mut Vec<Complex64>) {
        out.clear();
        out.extend(u.iter().map(|&v| Complex64::new(v, 0.0)));
        self.forward.process(out);
        let scale = 1.0 / self.n as f64;
        out.iter_mut().for_each(|c| *c *= scale);
    }

    pub fn inverse_into(&self, coeffs: &[Complex64], buf: &mut Vec<Complex64>, out: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(coeffs);
        self.inverse.process(buf);
        out.clear();
        out.extend(buf.iter().map(|c| c.re));
    }

    pub fn forward(&self, u: &[f64]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.n);
        self.forward_into(u, &mut out);
        out
    }

    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.n);
        let mut out = Vec::with_capacity(self.n);
        self.inverse_into(coeffs, &mut buf, &mut out);
        out
    }
}

pub fn to_spectral(u: &[f64], grid: &Grid1D) -> Result<SpectralState> {
    grid.check_len(u.len())?;
    Ok(SpectralState {
        coeffs: Transform::new(grid.num_points).forward(u),
        time: 0.0,
    })
}

pub fn to_physical(state: &SpectralState, grid: &Grid1D) -> Result<Vec<f64>> {
    grid.check_len(state.len())?;
    Ok(Transform::new(grid.num_points).inverse(&state.coeffs))
}

/// Multiplier `(i k)^order` for one mode. The Nyquist mode is dropped for odd
/// orders so that real fields stay real.
fn derivative_factor(k: f64, order: u32, nyquist: bool) -> Complex64 {
    if nyquist && order % 2 == 1 {
        return Complex64::new(0.0, 0.0);
    }
    Complex64::new(0.0, k).powu(order)
}

pub fn fourier_derivative(state: &SpectralState, order: u32, grid: &Grid1D) -> Result<SpectralState> {
    grid.check_len(state.len())?;
    if order == 0 {
        return Err(Error::Config("derivative order must be >= 1".into()));
    }
    let n = grid.num_points;
    let ks = grid.wavenumbers();
    let coeffs = state
        .coeffs
        .iter()
        .zip(&ks)
        .enumerate()
        .map(|(j, (c, &k))| c * derivative_factor(k, order, j == n / 2))
        .collect();
    Ok(SpectralState {
        coeffs,
        time: state.time,
    })
}

/// 2/3-rule mask: keeps modes with `|k| <= N/3`.
pub fn dealias_mask(grid: &Grid1D) -> Vec<bool> {
    let cutoff = grid.num_points as i64 / 3;
    (0..grid.num_points)
        .map(|j| grid.mode_index(j).abs() <= cutoff)
        .collect()
}

/// Pseudo-spectral `u u_x` evaluated on the grid.
pub fn convective_term(u: &[f64], grid: &Grid1D, dealias: bool) -> Result<Vec<f64>> {
    grid.check_len(u.len())?;
    let mut work = ConvectiveWork::new(grid, dealias);
    let hat = work.transform.forward(u);
    let mut out_hat = vec![Complex64::new(0.0, 0.0); grid.num_points];
    work.apply(&hat, 1.0, &mut out_hat);
    Ok(work.transform.inverse(&out_hat))
}

/// Scratch space for the spectral convective term.
#[derive(Debug, Clone)]
struct ConvectiveWork {
    transform: Transform,
    ik: Vec<Complex64>,
    mask: Option<Vec<bool>>,
    u_hat: Vec<Complex64>,
    ux_hat: Vec<Complex64>,
    buf: Vec<Complex64>,
    u: Vec<f64>,
    ux: Vec<f64>,
    prod: Vec<f64>,
}

impl ConvectiveWork {
    fn new(grid: &Grid1D, dealias: bool) -> Self {
        let n = grid.num_points;
        let ik = grid
            .wavenumbers()
            .iter()
            .enumerate()
            .map(|(j, &k)| derivative_factor(k, 1, j == n / 2))
            .collect();
        Self {
            transform: Transform::new(n),
            ik,
            mask: dealias.then(|| dealias_mask(grid)),
            u_hat: Vec::with_capacity(n),
            ux_hat: Vec::with_capacity(n),
            buf: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            ux: Vec::with_capacity(n),
            prod: Vec::with_capacity(n),
        }
    }

    /// Writes `coeff * FFT(u u_x)` for the field with coefficients `hat`.
    fn apply(&mut self, hat: &[Complex64], coeff: f64, out: &mut [Complex64]) {
        self.u_hat.clear();
        self.u_hat.extend_from_slice(hat);
        if let Some(mask) = &self.mask {
            for (c, &keep) in self.u_hat.iter_mut().zip(mask) {
                if !keep {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
        self.ux_hat.clear();
        self.ux_hat
            .extend(self.u_hat.iter().zip(&self.ik).map(|(c, ik)| c * ik));
        self.transform.inverse_into(&self.u_hat, &mut self.buf, &mut self.u);
        self.transform.inverse_into(&self.ux_hat, &mut self.buf, &mut self.ux);
        self.prod.clear();
        self.prod.extend(self.u.iter().zip(&self.ux).map(|(a, b)| a * b));
        self.transform.forward_into(&self.prod, &mut self.buf);
        for (j, (o, c)) in out.iter_mut().zip(&self.buf).enumerate() {
            let keep = self.mask.as_ref().is_none_or(|m| m[j]);
            *o = if keep { c * coeff } else { Complex64::new(0.0, 0.0) };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationKind {
    ViscidBurgers,
    KuramotoSivashinsky,
    Kdv,
}

impl EquationKind {
    pub fn name(&self) -> &'static str {
        match self {
            EquationKind::ViscidBurgers => "viscid_burgers",
            EquationKind::KuramotoSivashinsky => "kuramoto_sivashinsky",
            EquationKind::Kdv => "kdv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "viscid_burgers" | "vb" => Ok(EquationKind::ViscidBurgers),
            "kuramoto_sivashinsky" | "ks" => Ok(EquationKind::KuramotoSivashinsky),
            "kdv" => Ok(EquationKind::Kdv),
            other => Err(Error::Config(format!("unknown equation {other:?}"))),
        }
    }

    /// Default periodic domain `(x_min, L)`.
    pub fn default_domain(&self) -> (f64, f64) {
        match self {
            EquationKind::ViscidBurgers => (-1.0, 2.0),
            EquationKind::KuramotoSivashinsky => (0.0, 64.0),
            EquationKind::Kdv => (-16.0, 32.0),
        }
    }

    pub fn default_dt_solver(&self) -> f64 {
        match self {
            EquationKind::ViscidBurgers => 1e-3,
            EquationKind::KuramotoSivashinsky => 1e-3,
            EquationKind::Kdv => 1e-5,
        }
    }
}

/// One member of the PDE family: `u_t = D(k) u_hat + c_N u u_x`.
///
/// * viscid Burgers: `D = -nu k^2`, `c_N = -1`
/// * Kuramoto-Sivashinsky: `D = nu k^2 - nu k^4`, `c_N = -1`
/// * KdV: `D = i nu k^3`, `c_N = 6` (`u_t = 6 u u_x - nu u_xxx`)
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquationSpec {
    pub kind: EquationKind,
    pub nu: f64,
    pub nonlinear_coeff: f64,
    #[serde(default = "default_true")]
    pub dealias: bool,
}

fn default_true() -> bool {
    true
}

impl EquationSpec {
    pub fn viscid_burgers(nu: f64) -> Self {
        Self {
            kind: EquationKind::ViscidBurgers,
            nu,
            nonlinear_coeff: -1.0,
            dealias: true,
        }
    }

    pub fn kuramoto_sivashinsky(nu: f64) -> Self {
        Self {
            kind: EquationKind::KuramotoSivashinsky,
            nu,
            nonlinear_coeff: -1.0,
            dealias: true,
        }
    }

    pub fn kdv() -> Self {
        Self {
            kind: EquationKind::Kdv,
            nu: 1.0,
            nonlinear_coeff: 6.0,
            dealias: true,
        }
    }

    pub fn default_for(kind: EquationKind) -> Self {
        match kind {
            EquationKind::ViscidBurgers => Self::viscid_burgers(0.01),
            EquationKind::KuramotoSivashinsky => Self::kuramoto_sivashinsky(1.0),
            EquationKind::Kdv => Self::kdv(),
        }
    }

    pub fn with_nonlinear_coeff(mut self, c: f64) -> Self {
        self.nonlinear_coeff = c;
        self
    }

    pub fn with_dealias(mut self, on: bool) -> Self {
        self.dealias = on;
        self
    }

    pub fn linear_symbol(&self, k: f64) -> Complex64 {
        match self.kind {
            EquationKind::ViscidBurgers => Complex64::new(-self.nu * k * k, 0.0),
            EquationKind::KuramotoSivashinsky => {
                let k2 = k * k;
                Complex64::new(self.nu * k2 - self.nu * k2 * k2, 0.0)
            }
            EquationKind::Kdv => Complex64::new(0.0, self.nu * k * k * k),
        }
    }
}

// Carpenter-Kennedy five-stage, fourth-order low-storage RK coefficients,
// paired with a Crank-Nicolson solve for the linear part on every substep.
const CK_ALPHA: [f64; 6] = [
    0.0,
    0.149_659_021_999_3,
    0.370_400_957_364_4,
    0.622_255_763_134_5,
    0.958_282_130_674_8,
    1.0,
];
const CK_BETA: [f64; 5] = [
    0.149_659_021_999_3,
    0.379_210_312_999_9,
    0.822_955_029_386_9,
    0.699_450_455_948_8,
    0.153_057_247_968_1,
];
const CK_GAMMA: [f64; 5] = [
    0.0,
    -0.417_890_474_499_8,
    -1.192_151_694_643,
    -1.697_784_692_471,
    -1.514_183_444_257,
];

/// IMEX stepper: explicit low-storage RK for `N`, Crank-Nicolson for `D`.
#[derive(Debug, Clone)]
pub struct ImexStepper {
    grid: Grid1D,
    eq: EquationSpec,
    dt: f64,
    linear: Vec<Complex64>,
    conv: ConvectiveWork,
    h: Vec<Complex64>,
    f: Vec<Complex64>,
}

impl ImexStepper {
    pub fn new(grid: Grid1D, eq: EquationSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let linear = grid.wavenumbers().iter().map(|&k| eq.linear_symbol(k)).collect();
        let n = grid.num_points;
        Ok(Self {
            grid,
            eq,
            dt,
            linear,
            conv: ConvectiveWork::new(&grid, eq.dealias),
            h: vec![Complex64::new(0.0, 0.0); n],
            f: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    fn explicit_into(&mut self, u: &[Complex64]) {
        if self.eq.nonlinear_coeff == 0.0 {
            self.f.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        } else {
            let mut f = std::mem::take(&mut self.f);
            self.conv.apply(u, self.eq.nonlinear_coeff, &mut f);
            self.f = f;
        }
    }

    /// Advances `state` in place by one step. Non-finite results are reported
    /// as an instability at the time reached.
    pub fn step(&mut self, state: &mut SpectralState) -> Result<()> {
        self.grid.check_len(state.len())?;
        let dt = self.dt;
        self.h.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for stage in 0..CK_BETA.len() {
            self.explicit_into(&state.coeffs);
            let mu = 0.5 * dt * (CK_ALPHA[stage + 1] - CK_ALPHA[stage]);
            let gamma = CK_GAMMA[stage];
            let beta_dt = dt * CK_BETA[stage];
            for j in 0..state.coeffs.len() {
                let h = self.f[j] + self.h[j] * gamma;
                self.h[j] = h;
                let d = self.linear[j];
                let u = state.coeffs[j];
                state.coeffs[j] = (u + h * beta_dt + d * u * mu) / (1.0 - d * mu);
            }
        }
        state.time += dt;
        if !state.is_finite() {
            return Err(Error::Instability {
                step: 0,
                time: state.time,
            });
        }
        Ok(())
    }
}

/// Single IMEX step; builds a fresh stepper, so prefer [`ImexStepper`] in loops.
pub fn imex_step(state: &SpectralState, dt: f64, eq: &EquationSpec, grid: &Grid1D) -> Result<SpectralState> {
    let mut stepper = ImexStepper::new(*grid, *eq, dt)?;
    let mut next = state.clone();
    stepper.step(&mut next)?;
    Ok(next)
}

/// Integrates from `u0`, returning `num_saves` snapshots spaced `dt_save`
/// apart (the first is `u0` itself).
pub fn solve_trajectory(
    u0: &[f64],
    eq: &EquationSpec,
    grid: &Grid1D,
    dt_solver: f64,
    dt_save: f64,
    num_saves: usize,
) -> Result<Vec<Vec<f64>>> {
    grid.check_len(u0.len())?;
    let ratio = dt_save / dt_solver;
    let steps_per_save = ratio.round();
    if !(steps_per_save >= 1.0) || (ratio - steps_per_save).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "dt_save ({dt_save}) must be an integer multiple of dt_solver ({dt_solver})"
        )));
    }
    let steps_per_save = steps_per_save as usize;
    let mut out = Vec::with_capacity(num_saves);
    if num_saves == 0 {
        return Ok(out);
    }
    out.push(u0.to_vec());
    let mut stepper = ImexStepper::new(*grid, *eq, dt_solver)?;
    let transform = Transform::new(grid.num_points);
    let mut state = SpectralState {
        coeffs: transform.forward(u0),
        time: 0.0,
    };
    let mut step = 0usize;
    for _ in 1..num_saves {
        for _ in 0..steps_per_save {
            step += 1;
            stepper.step(&mut state).map_err(|e| match e {
                Error::Instability { time, .. } => Error::Instability { step, time },
                other => other,
            })?;
        }
        out.push(transform.inverse(&state.coeffs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pi_grid(n: usize) -> Grid1D {
        Grid1D::new(0.0, 2.0 * PI, n).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn grid_rejects_non_power_of_two() {
        assert!(Grid1D::new(0.0, 1.0, 500).is_err());
        assert!(Grid1D::new(0.0, 0.0, 16).is_err());
        let g = Grid1D::new(-1.0, 2.0, 16).unwrap();
        let last = g.point(15);
        assert!((last + g.spacing() - g.x_min - g.length).abs() < 1e-14);
    }

    #[test]
    fn derivative_of_sine_is_cosine() {
        let g = two_pi_grid(16);
        let u: Vec<f64> = g.points().iter().map(|x| x.sin()).collect();
        let d = fourier_derivative(&to_spectral(&u, &g).unwrap(), 1, &g).unwrap();
        let du = to_physical(&d, &g).unwrap();
        let expect: Vec<f64> = g.points().iter().map(|x| x.cos()).collect();
        assert!(max_abs_diff(&du, &expect) < 1e-13);
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let g = two_pi_grid(16);
        let s = to_spectral(&[3.0; 16], &g).unwrap();
        for order in 1..4 {
            let d = to_physical(&fourier_derivative(&s, order, &g).unwrap(), &g).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn second_derivative_of_sin_2x() {
        let g = two_pi_grid(16);
        let u: Vec<f64> = g.points().iter().map(|x| (2.0 * x).sin()).collect();
        let d = fourier_derivative(&to_spectral(&u, &g).unwrap(), 2, &g).unwrap();
        let du = to_physical(&d, &g).unwrap();
        let expect: Vec<f64> = g.points().iter().map(|x| -4.0 * (2.0 * x).sin()).collect();
        assert!(max_abs_diff(&du, &expect) < 1e-12);
    }

    #[test]
    fn derivative_rejects_mismatched_grid() {
        let g = two_pi_grid(16);
        let s = to_spectral(&[0.0; 8], &two_pi_grid(8)).unwrap();
        assert!(matches!(
            fourier_derivative(&s, 1, &g),
            Err(Error::Dimension { expected: 16, got: 8 })
        ));
        assert!(fourier_derivative(&to_spectral(&[0.0; 16], &g).unwrap(), 0, &g).is_err());
    }

    #[test]
    fn convective_term_of_sine() {
        let g = two_pi_grid(32);
        let u: Vec<f64> = g.points().iter().map(|x| x.sin()).collect();
        let c = convective_term(&u, &g, true).unwrap();
        let expect: Vec<f64> = g.points().iter().map(|x| 0.5 * (2.0 * x).sin()).collect();
        assert!(max_abs_diff(&c, &expect) < 1e-13);
        let c0 = convective_term(&[2.5; 32], &g, true).unwrap();
        assert!(c0.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        for kind in [
            EquationKind::ViscidBurgers,
            EquationKind::KuramotoSivashinsky,
            EquationKind::Kdv,
        ] {
            let (x0, l) = kind.default_domain();
            let g = Grid1D::new(x0, l, 64).unwrap();
            let traj = solve_trajectory(&[0.0; 64], &EquationSpec::default_for(kind), &g, 1e-3, 1e-2, 5).unwrap();
            assert!(traj.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_save_returns_initial_condition() {
        let g = two_pi_grid(16);
        let u0: Vec<f64> = g.points().iter().map(|x| x.sin()).collect();
        let eq = EquationSpec::viscid_burgers(0.1);
        let traj = solve_trajectory(&u0, &eq, &g, 1e-3, 1e-2, 1).unwrap();
        assert_eq!(traj, vec![u0]);
    }

    #[test]
    fn dt_save_must_be_multiple_of_solver_step() {
        let g = two_pi_grid(16);
        let eq = EquationSpec::viscid_burgers(0.1);
        let err = solve_trajectory(&[0.0; 16], &eq, &g, 3e-3, 1e-2, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn blow_up_reports_step() {
        // A huge explicit coefficient with a huge step overflows in a few steps.
        let g = two_pi_grid(16);
        let eq = EquationSpec::viscid_burgers(0.0).with_nonlinear_coeff(1e3);
        let u0: Vec<f64> = g.points().iter().map(|x| x.sin() + 0.5 * (2.0 * x).cos()).collect();
        let err = solve_trajectory(&u0, &eq, &g, 1e-1, 1e-1, 1000).unwrap_err();
        match err {
            Error::Instability { step, time } => {
                assert!(step > 0);
                assert!((time - step as f64 * 0.1).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
