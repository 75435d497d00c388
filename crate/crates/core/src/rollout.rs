//! Inference: encode, integrate the latent ODE, decode.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::hyper_unet::LatentDynamics;
use crate::spectral::Grid1D;
use crate::training::rk4_step;

pub const SIDECAR_FILE: &str = "rollout.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    FixedRk4,
    AdaptiveDp,
}

impl Integrator {
    /// Accepts the CLI spellings `fixed` / `adaptive` as well as the full names.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_rk4" => Ok(Self::FixedRk4),
            "adaptive" | "adaptive_dp" => Ok(Self::AdaptiveDp),
            other => Err(Error::Config(format!(
                "unknown integrator {other:?} (expected fixed|adaptive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-6, atol: 1e-9 }
    }
}

// Dormand–Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince integrator state carried across output times.
#[derive(Debug, Clone)]
pub struct DormandPrince {
    pub tol: Tolerances,
    /// Number of right-hand-side evaluations so far.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    h: Option<f64>,
    fsal: Option<Vec<f64>>,
}

impl DormandPrince {
    pub fn new(tol: Tolerances) -> Result<Self> {
        if !(tol.rtol > 0.0 && tol.atol > 0.0) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        Ok(Self {
            tol,
            nfe: 0,
            accepted: 0,
            rejected: 0,
            h: None,
            fsal: None,
        })
    }

    /// Advances `y` from `t0` to `t1`. The first trial step spans the whole
    /// interval; the controller shrinks it as needed.
    pub fn integrate<F>(&mut self, f: &mut F, y: &mut Vec<f64>, t0: f64, t1: f64) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut t = t0;
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(());
        }
        // `h` is the controller's proposal; `step` is clipped to the interval end.
        let mut h = self.h.unwrap_or(span);
        let n = y.len();
        let mut k: Vec<Vec<f64>> = vec![Vec::new(); 7];
        let mut stage = vec![0.0; n];
        let mut k0 = match self.fsal.take() {
            Some(k0) => k0,
            None => {
                self.nfe += 1;
                f(y)?
            }
        };
        let mut just_rejected = false;
        while t < t1 {
            let remaining = t1 - t;
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            if step <= 1e-14 * t.abs().max(1.0) {
                return Err(Error::Stiffness { time: t });
            }
            k[0].clone_from(&k0);
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for j in 0..s {
                        acc += step * A[s][j] * k[j][i];
                    }
                    stage[i] = acc;
                }
                self.nfe += 1;
                k[s] = f(&stage)?;
            }
            // Row 6 of A holds the fifth-order weights, so the last stage
            // input is the new state.
            let mut err = 0.0;
            for i in 0..n {
                let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum();
                let scale = self.tol.atol + self.tol.rtol * y[i].abs().max(stage[i].abs());
                err += (step * e / scale).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() || stage.iter().any(|v| !v.is_finite()) {
                self.rejected += 1;
                h = step * 0.2;
                just_rejected = true;
                continue;
            }
            if err <= 1.0 {
                t = if last { t1 } else { t + step };
                y.clone_from(&stage);
                k0 = std::mem::take(&mut k[6]);
                self.accepted += 1;
                let mut factor = if err == 0.0 {
                    10.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
                };
                if just_rejected {
                    factor = factor.min(1.0);
                }
                h = if last { h.max(step * factor) } else { step * factor };
                just_rejected = false;
            } else {
                self.rejected += 1;
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                just_rejected = true;
            }
        }
        self.h = Some(h);
        self.fsal = Some(k0);
        Ok(())
    }
}

/// Integrates `theta' = f(theta)` from 0 to `t_end`; returns the final state and the NFE.
pub fn adaptive_integrate<F>(theta0: &[f64], mut f: F, t_end: f64, rtol: f64, atol: f64) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut dp = DormandPrince::new(Tolerances { rtol, atol })?;
    let mut y = theta0.to_vec();
    dp.integrate(&mut f, &mut y, 0.0, t_end)?;
    Ok((y, dp.nfe))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// `[num_saves, N]`.
    pub snapshots: Vec<f64>,
    /// `[num_saves, dim]`.
    pub latent_traj: Vec<f64>,
    pub num_saves: usize,
    pub grid_len: usize,
    pub dim: usize,
    pub nfe: usize,
    pub wct_ms: f64,
    pub integrator: Integrator,
    /// Last time with a finite state; equals the horizon for stable runs.
    pub stable_until: f64,
    pub stable: bool,
}

impl RolloutResult {
    pub fn snapshot(&self, step: usize) -> &[f64] {
        &self.snapshots[step * self.grid_len..(step + 1) * self.grid_len]
    }

    pub fn latent(&self, step: usize) -> &[f64] {
        &self.latent_traj[step * self.dim..(step + 1) * self.dim]
    }

    /// Decodes save point `step` at arbitrary positions.
    pub fn evaluate_at(&self, ansatz: &Ansatz, step: usize, xs: &[f64]) -> Result<Vec<f64>> {
        ansatz.eval_points(self.latent(step), xs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub dt_save: f64,
    pub num_saves: usize,
    pub integrator: Integrator,
    /// RK4 steps per save interval.
    pub substeps: usize,
    pub tol: Tolerances,
}

/// Rolls `u0` forward: `theta_0 = encode(u0)`, integrate, decode on `grid`
/// at each of the `num_saves` save points (the first is `t = 0`).
/// Divergence truncates the result: later saves repeat the last finite
/// state and `stable` is false.
pub fn rollout<D: LatentDynamics>(
    u0: &[f64],
    encoder: &Encoder,
    ansatz: &Ansatz,
    dynamics: &D,
    grid: &Grid1D,
    opts: &RolloutOptions,
) -> Result<RolloutResult> {
    if opts.num_saves == 0 || !(opts.dt_save > 0.0) || opts.substeps == 0 {
        return Err(Error::Config(
            "rollout needs num_saves, dt_save and substeps > 0".into(),
        ));
    }
    let start = Instant::now();
    let theta0 = encoder.encode(u0, 1)?;
    let dim = theta0.len();
    if dim != dynamics.dim() || dim != ansatz.num_params() {
        return Err(Error::Structural(format!(
            "encoder emits {dim} values, dynamics expects {}, ansatz has {}",
            dynamics.dim(),
            ansatz.num_params()
        )));
    }
    let mut nfe = 0usize;
    let mut latent = Vec::with_capacity(opts.num_saves * dim);
    latent.extend_from_slice(&theta0);
    let mut y = theta0;
    let mut stable = true;
    let mut stable_until = 0.0;
    let mut dp = DormandPrince::new(opts.tol)?;
    for save in 1..opts.num_saves {
        let t0 = (save - 1) as f64 * opts.dt_save;
        let t1 = save as f64 * opts.dt_save;
        let advanced = match opts.integrator {
            Integrator::FixedRk4 => {
                let h = opts.dt_save / opts.substeps as f64;
                let mut f = |x: &[f64]| dynamics.apply(x, 1);
                let mut cur = y.clone();
                let mut ok = true;
                for _ in 0..opts.substeps {
                    cur = rk4_step(&mut f, &cur, h)?;
                    nfe += 4;
                    if cur.iter().any(|v| !v.is_finite()) {
                        ok = false;
                        break;
                    }
                }
                ok.then_some(cur)
            }
            Integrator::AdaptiveDp => {
                let mut f = |x: &[f64]| dynamics.apply(x, 1);
                let mut cur = y.clone();
                match dp.integrate(&mut f, &mut cur, t0, t1) {
                    Ok(()) if cur.iter().all(|v| v.is_finite()) => Some(cur),
                    Ok(()) | Err(Error::Stiffness { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        match advanced {
            Some(next) => {
                y = next;
                stable_until = t1;
            }
            None => {
                stable = false;
                for _ in save..opts.num_saves {
                    latent.extend_from_slice(&y);
                }
                break;
            }
        }
        latent.extend_from_slice(&y);
    }
    if opts.integrator == Integrator::AdaptiveDp {
        nfe = dp.nfe;
    }
    let xs = grid.points();
    let mut snapshots = Vec::with_capacity(opts.num_saves * xs.len());
    for t in latent.chunks(dim) {
        snapshots.extend(ansatz.eval_points(t, &xs)?);
    }
    let wct_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RolloutResult {
        snapshots,
        latent_traj: latent,
        num_saves: opts.num_saves,
        grid_len: xs.len(),
        dim,
        nfe,
        wct_ms,
        integrator: opts.integrator,
        stable_until,
        stable,
    })
}

/// `rollout.json`: per-trajectory cost and stability, one entry per rolled-out trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSidecar {
    pub nfe: Vec<usize>,
    pub wct_ms: Vec<f64>,
    pub integrator: Integrator,
    pub stable_until: Vec<f64>,
}

impl RolloutSidecar {
    pub fn from_results(results: &[RolloutResult]) -> Result<Self> {
        let integrator = results
            .first()
            .map(|r| r.integrator)
            .ok_or_else(|| Error::InsufficientData("no rollouts to summarise".into()))?;
        Ok(Self {
            nfe: results.iter().map(|r| r.nfe).collect(),
            wct_ms: results.iter().map(|r| r.wct_ms).collect(),
            integrator,
            stable_until: results.iter().map(|r| r.stable_until).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(SIDECAR_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
