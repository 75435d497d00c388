//! Rollout metrics, the working-model gate and `report.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::data::TrajectoryDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::plot;
use crate::rollout::RolloutSidecar;
use crate::spectral::{EquationKind, Grid1D, Transform};

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_VERSION: u32 = 1;
/// Rollout steps inspected by [`working_gate`].
pub const GATE_STEPS: usize = 40;
/// Truth energies below this fraction of the spectrum maximum are masked.
pub const ENERGY_MASK: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// `‖pred − truth‖ / ‖truth‖`.
pub fn rel_rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred, truth)?;
    let denom = norm(truth);
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("relRMSE against a zero-norm truth".into()));
    }
    let diff: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(diff.sqrt() / denom)
}

/// `|Σᵢ u(xᵢ) exp(−j2πk xᵢ/L)|` for `k = 0..=N/2`.
pub fn spectrum_magnitude(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let coeffs = Transform::new(n).forward(u);
    coeffs[..=n / 2].iter().map(|c| c.norm() * n as f64).collect()
}

/// Frequencies `f_k = k/L` matching [`spectrum_magnitude`].
pub fn energy_frequencies(grid: &Grid1D) -> Vec<f64> {
    (0..=grid.num_points / 2).map(|k| k as f64 / grid.length).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    /// `log(E_pred / E_true)` per frequency; `None` where masked.
    pub values: Vec<Option<f64>>,
    pub masked: bool,
}

/// Log energy ratio of one snapshot pair. A frequency is masked when either
/// spectrum falls below [`ENERGY_MASK`] of its own maximum, which keeps the
/// result antisymmetric in its arguments.
pub fn energy_ratio(pred: &[f64], truth: &[f64]) -> Result<EnergyRatio> {
    check_len(pred, truth)?;
    let ep = spectrum_magnitude(pred);
    let et = spectrum_magnitude(truth);
    let max_of = |e: &[f64]| e.iter().cloned().fold(0.0f64, f64::max);
    let (mp, mt) = (max_of(&ep), max_of(&et));
    let mut masked = false;
    let values = ep
        .iter()
        .zip(&et)
        .map(|(&p, &t)| {
            if p <= ENERGY_MASK * mp || t <= ENERGY_MASK * mt {
                masked = true;
                None
            } else {
                Some((p / t).ln())
            }
        })
        .collect();
    Ok(EnergyRatio { values, masked })
}

/// `‖θ − θ'‖ / ‖θ‖` where `θ'` is the re-encoded decode of `θ`.
pub fn consistency_relrmse(theta: &[f64], reencoded: &[f64]) -> Result<f64> {
    check_len(reencoded, theta)?;
    if norm(theta) == 0.0 {
        return Err(Error::UndefinedMetric("consistency of a zero-norm theta".into()));
    }
    rel_rmse(reencoded, theta)
}

/// Mean of [`consistency_relrmse`] over a batch `[B, dim]` of latent vectors.
pub fn consistency_of(encoder: &Encoder, ansatz: &Ansatz, grid: &Grid1D, thetas: &[f64], batch: usize) -> Result<f64> {
    let dim = ansatz.num_params();
    if batch == 0 || thetas.len() != batch * dim {
        return Err(Error::Dimension {
            expected: batch * dim,
            got: thetas.len(),
        });
    }
    let mut decoded = Vec::with_capacity(batch * grid.num_points);
    for t in thetas.chunks(dim) {
        decoded.extend(ansatz.eval_grid(t, grid)?);
    }
    let re = encoder.encode(&decoded, batch)?;
    let mut total = 0.0;
    for (t, r) in thetas.chunks(dim).zip(re.chunks(dim)) {
        total += consistency_relrmse(t, r)?;
    }
    Ok(total / batch as f64)
}

/// `max_i (1/Q) Σ_q Σ_n Δt |θ_i^{n+1,q} − θ_i^{n,q}|` over latent
/// trajectories laid out `[Q, steps, dim]`.
pub fn tv_norm(latent: &[f64], num_traj: usize, num_steps: usize, dim: usize, dt: f64) -> Result<f64> {
    if num_traj == 0 || dim == 0 {
        return Err(Error::InsufficientData("TV norm needs at least one trajectory".into()));
    }
    if latent.len() != num_traj * num_steps * dim {
        return Err(Error::Dimension {
            expected: num_traj * num_steps * dim,
            got: latent.len(),
        });
    }
    let mut per_dim = vec![0.0; dim];
    for q in 0..num_traj {
        let traj = &latent[q * num_steps * dim..(q + 1) * num_steps * dim];
        for n in 1..num_steps {
            let (prev, cur) = (&traj[(n - 1) * dim..n * dim], &traj[n * dim..(n + 1) * dim]);
            for i in 0..dim {
                per_dim[i] += dt * (cur[i] - prev[i]).abs();
            }
        }
    }
    Ok(per_dim.into_iter().fold(0.0, f64::max) / num_traj as f64)
}

/// True iff the error stays below 1 for each of the first [`GATE_STEPS`]
/// rollout steps. `curve[0]` is the error after the first step.
pub fn working_gate(curve: &[f64]) -> Result<bool> {
    if curve.len() < GATE_STEPS {
        return Err(Error::InsufficientData(format!(
            "working gate needs {GATE_STEPS} rollout steps, got {}",
            curve.len()
        )));
    }
    Ok(curve[..GATE_STEPS].iter().all(|&e| e < 1.0))
}

/// Energy-ratio prediction range for the figures of each equation.
pub fn default_range(kind: EquationKind) -> usize {
    match kind {
        EquationKind::ViscidBurgers => 3,
        EquationKind::KuramotoSivashinsky => 80,
        EquationKind::Kdv => 16,
    }
}

/// Symmetric colour range of the heatmaps.
pub fn field_range(kind: EquationKind) -> f64 {
    match kind {
        EquationKind::ViscidBurgers => 1.0,
        EquationKind::KuramotoSivashinsky => 3.0,
        EquationKind::Kdv => 8.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelRmseCurves {
    /// `[traj][step]`, step 0 being the initial condition.
    pub per_traj: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatioCurve {
    pub range: usize,
    pub frequencies: Vec<f64>,
    /// Mean over trajectories of the unmasked log ratios.
    pub values: Vec<Option<f64>>,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub equation: EquationKind,
    pub num_traj: usize,
    pub num_steps: usize,
    pub dt_save: f64,
    pub rel_rmse: RelRmseCurves,
    /// Mean over trajectories and steps.
    pub mean_rel_rmse: f64,
    pub energy_ratio: Vec<EnergyRatioCurve>,
    pub tv_norm: Option<f64>,
    pub consistency_relrmse: Option<f64>,
    pub nfe: Option<Summary>,
    pub wct_ms: Option<Summary>,
    pub stable_until: Option<Vec<f64>>,
    /// `None` when the rollout is shorter than the gate window.
    pub working: Option<bool>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let report: Self = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if report.format_version != REPORT_VERSION {
            return Err(Error::Load {
                path,
                offset: 0,
                message: format!("unsupported report version {}", report.format_version),
            });
        }
        Ok(report)
    }
}

/// Quantities that need the trained models rather than the two datasets.
#[derive(Debug, Clone, Default)]
pub struct ReportExtras<'a> {
    pub sidecar: Option<&'a RolloutSidecar>,
    /// Latent rollouts `[Q, steps, dim]`.
    pub latent: Option<(&'a [f64], usize)>,
    pub consistency_relrmse: Option<f64>,
    pub warnings: Vec<String>,
}

fn check_matched(pred: &TrajectoryDataset, truth: &TrajectoryDataset) -> Result<()> {
    if pred.num_traj != truth.num_traj {
        let (lo, hi) = (pred.num_traj.min(truth.num_traj), pred.num_traj.max(truth.num_traj));
        let side = if pred.num_traj < truth.num_traj {
            "prediction"
        } else {
            "truth"
        };
        return Err(Error::Structural(format!(
            "trajectory count mismatch ({} predicted, {} true): indices {:?} missing from the {side}",
            pred.num_traj,
            truth.num_traj,
            (lo..hi).collect::<Vec<_>>()
        )));
    }
    if pred.num_steps != truth.num_steps || pred.num_grid() != truth.num_grid() {
        return Err(Error::Structural(format!(
            "prediction shape {:?} does not match truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// Computes every metric; no files are touched.
pub fn build_report(
    pred: &TrajectoryDataset,
    truth: &TrajectoryDataset,
    extras: &ReportExtras<'_>,
    ranges: &[usize],
) -> Result<EvaluationReport> {
    check_matched(pred, truth)?;
    let (q, steps) = (truth.num_traj, truth.num_steps);
    let mut warnings = extras.warnings.clone();
    let mut per_traj = Vec::with_capacity(q);
    for t in 0..q {
        let curve = (0..steps)
            .map(|s| rel_rmse(pred.snapshot(t, s), truth.snapshot(t, s)))
            .collect::<Result<Vec<_>>>()?;
        per_traj.push(curve);
    }
    let (mut mean, mut std) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for s in 0..steps {
        let column: Vec<f64> = per_traj.iter().map(|c| c[s]).collect();
        let sm = Summary::of(&column).unwrap_or(Summary { mean: 0.0, std: 0.0 });
        mean.push(sm.mean);
        std.push(sm.std);
    }
    let mean_rel_rmse = mean.iter().sum::<f64>() / steps.max(1) as f64;

    let mut energy = Vec::new();
    for &r in ranges {
        if r >= steps {
            warnings.push(format!("energy-ratio range {r} is beyond the {steps} stored steps"));
            continue;
        }
        let nk = truth.num_grid() / 2 + 1;
        let (mut sum, mut count, mut masked) = (vec![0.0; nk], vec![0usize; nk], false);
        for t in 0..q {
            let er = energy_ratio(pred.snapshot(t, r), truth.snapshot(t, r))?;
            masked |= er.masked;
            for (k, v) in er.values.iter().enumerate() {
                if let Some(v) = v {
                    sum[k] += v;
                    count[k] += 1;
                }
            }
        }
        energy.push(EnergyRatioCurve {
            range: r,
            frequencies: energy_frequencies(&truth.grid),
            values: sum
                .iter()
                .zip(&count)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            masked,
        });
    }

    let tv = match extras.latent {
        Some((latent, dim)) => Some(tv_norm(latent, q, steps, dim, truth.dt_save)?),
        None => None,
    };
    let (nfe, wct_ms, stable_until) = match extras.sidecar {
        Some(s) => {
            if s.nfe.len() != q {
                return Err(Error::Structural(format!(
                    "sidecar covers {} trajectories, expected {q}",
                    s.nfe.len()
                )));
            }
            let nfe: Vec<f64> = s.nfe.iter().map(|&n| n as f64).collect();
            let horizon = (steps - 1) as f64 * truth.dt_save;
            for (i, &t) in s.stable_until.iter().enumerate() {
                if t < horizon * (1.0 - 1e-12) {
                    warnings.push(format!("trajectory {i} diverged after t = {t}"));
                }
            }
            (Summary::of(&nfe), Summary::of(&s.wct_ms), Some(s.stable_until.clone()))
        }
        None => (None, None, None),
    };
    let working = if steps > GATE_STEPS {
        Some(working_gate(&mean[1..])?)
    } else {
        None
    };
    Ok(EvaluationReport {
        format_version: REPORT_VERSION,
        equation: truth.eq.kind,
        num_traj: q,
        num_steps: steps,
        dt_save: truth.dt_save,
        rel_rmse: RelRmseCurves { per_traj, mean, std },
        mean_rel_rmse,
        energy_ratio: energy,
        tv_norm: tv,
        consistency_relrmse: extras.consistency_relrmse,
        nfe,
        wct_ms,
        stable_until,
        working,
        warnings,
    })
}

/// Writes the metric curves of `report` as PNG files into `dir`.
pub fn plot_report(report: &EvaluationReport, dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut curves = vec![report.rel_rmse.mean.clone()];
    curves.push(
        report
            .rel_rmse
            .mean
            .iter()
            .zip(&report.rel_rmse.std)
            .map(|(m, s)| m + s)
            .collect(),
    );
    curves.push(
        report
            .rel_rmse
            .mean
            .iter()
            .zip(&report.rel_rmse.std)
            .map(|(m, s)| m - s)
            .collect(),
    );
    let name = "rel_rmse.png".to_string();
    plot::save_png(&plot::line_chart(&curves, 480, 320, Some(1.0)), &dir.join(&name))?;
    written.push(name);
    for er in &report.energy_ratio {
        let values: Vec<f64> = er.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let name = format!("energy_ratio_r{}.png", er.range);
        plot::save_png(&plot::line_chart(&[values], 480, 320, Some(0.0)), &dir.join(&name))?;
        written.push(name);
    }
    Ok(written)
}

/// Builds the report, writes `report.json`, the metric charts and
/// prediction/truth/error heatmaps for the first few trajectories.
pub fn emit_report(
    pred: &TrajectoryDataset,
    truth: &TrajectoryDataset,
    extras: &ReportExtras<'_>,
    ranges: &[usize],
    out_dir: &Path,
) -> Result<EvaluationReport> {
    let report = build_report(pred, truth, extras, ranges)?;
    std::fs::create_dir_all(out_dir)?;
    report.save(out_dir)?;
    plot_report(&report, out_dir)?;
    let range = field_range(truth.eq.kind);
    let (steps, n) = (truth.num_steps, truth.num_grid());
    for t in 0..truth.num_traj.min(4) {
        let (p, tr) = (pred.trajectory(t), truth.trajectory(t));
        let err: Vec<f64> = p.iter().zip(tr).map(|(a, b)| a - b).collect();
        let panels = [
            plot::heatmap(p, steps, n, range, 1)?,
            plot::heatmap(tr, steps, n, range, 1)?,
            plot::heatmap(&err, steps, n, range, 1)?,
        ];
        plot::save_png(&plot::side_by_side(&panels), &out_dir.join(format!("rollout_{t}.png")))?;
    }
    Ok(report)
}
