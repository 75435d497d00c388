//! Losses and optimisation loops for the encoder and the latent dynamics.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::data::{window_starts, TrajectoryDataset};
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::hyper_unet::LatentDynamics;
use crate::optim::{clip_grad_norm, Adam, ExponentialDecay};
use crate::spectral::{EquationKind, Grid1D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub gamma: f64,
    pub batch_size: usize,
    pub training_steps: usize,
    pub seq_length: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub steps_per_decay: usize,
    pub grad_clip_norm: Option<f64>,
    /// Fixed RK4 step; `None` means one step per saved snapshot.
    pub rk4_dt: Option<f64>,
    pub log_every: usize,
    /// Treat `theta = encode(u)` as a constant inside the consistency term.
    pub stop_gradient: bool,
    pub seed: u64,
}

impl TrainingConfig {
    /// Schedule defaults per equation and stage, with desk-scale step counts.
    pub fn defaults(kind: EquationKind, stage: Stage) -> Self {
        use EquationKind::*;
        let (gamma, batch_size, training_steps, seq_length, base_lr, lr_decay_factor, steps_per_decay, clip) =
            match (stage, kind) {
                (Stage::Encoder, ViscidBurgers) => (1.0, 16, 50_000, 1, 1e-4, 0.912, 160_000, None),
                (Stage::Encoder, KuramotoSivashinsky) => (10.0, 32, 50_000, 1, 3e-4, 0.892, 80_000, None),
                (Stage::Encoder, Kdv) => (10.0, 16, 50_000, 1, 3e-4, 0.945, 40_000, None),
                (Stage::Pretrain, _) => (0.0, 32, 50_000, 2, 1e-4, 0.955, 40_000, Some(0.25)),
                (Stage::Finetune, ViscidBurgers) => (0.0, 32, 20_000, 10, 3e-4, 0.955, 10_000, Some(0.25)),
                (Stage::Finetune, KuramotoSivashinsky) => (0.0, 32, 20_000, 20, 5e-5, 0.955, 10_000, Some(0.25)),
                (Stage::Finetune, Kdv) => (0.0, 32, 20_000, 20, 1e-5, 0.955, 10_000, Some(0.25)),
            };
        Self {
            stage,
            gamma,
            batch_size,
            training_steps,
            seq_length,
            base_lr,
            lr_decay_factor,
            steps_per_decay,
            grad_clip_norm: clip,
            rk4_dt: None,
            log_every: 100,
            stop_gradient: false,
            seed: 0,
        }
    }

    pub fn schedule(&self) -> ExponentialDecay {
        ExponentialDecay {
            base_lr: self.base_lr,
            decay: self.lr_decay_factor,
            steps_per_decay: self.steps_per_decay,
        }
    }

    /// Field-path messages for every violated constraint.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push(format!("{prefix}.batch_size must be positive"));
        }
        if !(self.base_lr > 0.0) {
            errs.push(format!("{prefix}.base_lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            errs.push(format!("{prefix}.lr_decay_factor must lie in (0, 1]"));
        }
        if self.steps_per_decay == 0 {
            errs.push(format!("{prefix}.steps_per_decay must be positive"));
        }
        if self.gamma < 0.0 {
            errs.push(format!("{prefix}.gamma must be non-negative"));
        }
        match self.stage {
            Stage::Pretrain if self.seq_length != 2 => {
                errs.push(format!("{prefix}.seq_length must be 2 for pretraining"))
            }
            Stage::Finetune if self.seq_length < 2 => errs.push(format!("{prefix}.seq_length must be at least 2")),
            _ => {}
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                errs.push(format!("{prefix}.grad_clip_norm must be positive"));
            }
        }
        if let Some(h) = self.rk4_dt {
            if !(h > 0.0) {
                errs.push(format!("{prefix}.rk4_dt must be positive"));
            }
        }
        errs
    }

    /// Number of RK4 steps per saved interval `dt_save`.
    pub fn rk4_substeps(&self, dt_save: f64) -> Result<usize> {
        let Some(h) = self.rk4_dt else { return Ok(1) };
        let ratio = dt_save / h;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "rk4_dt = {h} must divide dt_save = {dt_save} into a whole number of steps"
            )));
        }
        Ok(r as usize)
    }
}

// ---------------------------------------------------------------- losses

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderLoss {
    pub reconstruction: f64,
    pub consistency: f64,
    pub total: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// The encoder objective evaluated from precomputed pieces:
/// `sum |u - recon|^2 + gamma * sum |theta - reencoded|^2`.
pub fn encoder_loss_from_parts(u: &[f64], recon: &[f64], theta: &[f64], reencoded: &[f64], gamma: f64) -> EncoderLoss {
    let reconstruction = sq_dist(u, recon);
    let consistency = sq_dist(theta, reencoded);
    EncoderLoss {
        reconstruction,
        consistency,
        total: reconstruction + gamma * consistency,
    }
}

/// Decodes `[batch, dim]` latents onto the grid points.
pub fn decode_batch(ansatz: &Ansatz, thetas: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
    let dim = ansatz.num_params();
    let mut out = Vec::with_capacity(thetas.len() / dim * xs.len());
    for t in thetas.chunks(dim) {
        out.extend(ansatz.eval_points(t, xs)?);
    }
    Ok(out)
}

/// Encoder loss on `u: [batch, N]`. With `grad`, also accumulates the
/// parameter gradient. `theta_n = encode(u_n)`; the consistency term
/// re-encodes the decoded field.
#[allow(clippy::too_many_arguments)]
pub fn encoder_loss(
    enc: &mut Encoder,
    ansatz: &Ansatz,
    grid: &Grid1D,
    u: &[f64],
    batch: usize,
    gamma: f64,
    stop_gradient: bool,
    mode: Mode,
    grad: Option<&mut [f64]>,
) -> Result<EncoderLoss> {
    let xs = grid.points();
    let n = xs.len();
    let dim = ansatz.num_params();
    let (theta, tape1) = enc.forward(u, batch, mode)?;
    let recon = decode_batch(ansatz, &theta, &xs)?;
    if recon.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            what: "decoded reconstruction is not finite".into(),
        });
    }
    let consistency_active = gamma != 0.0;
    let second = if consistency_active {
        Some(enc.forward(&recon, batch, mode)?)
    } else {
        None
    };
    let reencoded = second.as_ref().map(|s| s.0.clone()).unwrap_or_else(|| theta.clone());
    let loss = encoder_loss_from_parts(u, &recon, &theta, &reencoded, gamma);
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: format!(
                "encoder loss is not finite (reconstruction {}, consistency {})",
                loss.reconstruction, loss.consistency
            ),
        });
    }
    let Some(grad) = grad else { return Ok(loss) };
    // d/d recon of the reconstruction term.
    let mut d_recon: Vec<f64> = recon.iter().zip(u).map(|(r, t)| 2.0 * (r - t)).collect();
    let mut d_theta = vec![0.0; theta.len()];
    if let Some((_, tape2)) = &second {
        let d_reenc: Vec<f64> = reencoded
            .iter()
            .zip(&theta)
            .map(|(r, t)| 2.0 * gamma * (r - t))
            .collect();
        let d_in = enc.backward(tape2, &d_reenc, grad);
        if !stop_gradient {
            d_recon.iter_mut().zip(&d_in).for_each(|(a, b)| *a += b);
            d_theta.iter_mut().zip(&d_reenc).for_each(|(a, b)| *a -= b);
        }
    }
    for b in 0..batch {
        ansatz.backward_points(
            &theta[b * dim..(b + 1) * dim],
            &xs,
            &d_recon[b * n..(b + 1) * n],
            &mut d_theta[b * dim..(b + 1) * dim],
        )?;
    }
    enc.backward(&tape1, &d_theta, grad);
    Ok(loss)
}

/// `sum_n |(theta1_n - theta0_n) / dt - Gamma(theta0_n)|^2` over `[batch, dim]` rows.
pub fn single_step_loss<D: LatentDynamics>(
    dynamics: &D,
    theta0: &[f64],
    theta1: &[f64],
    batch: usize,
    dt: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let (pred, tape) = dynamics.forward(theta0, batch)?;
    let resid: Vec<f64> = theta1
        .iter()
        .zip(theta0)
        .zip(&pred)
        .map(|((b, a), g)| (b - a) / dt - g)
        .collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>();
    if let Some(grad) = grad {
        let d: Vec<f64> = resid.iter().map(|r| -2.0 * r).collect();
        dynamics.backward(&tape, &d, grad);
    }
    Ok(loss)
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

/// One classical RK4 step.
pub fn rk4_step<F>(f: &mut F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(y)?;
    let k2 = f(&axpy(y, 0.5 * h, &k1))?;
    let k3 = f(&axpy(y, 0.5 * h, &k2))?;
    let k4 = f(&axpy(y, h, &k3))?;
    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Fixed-step RK4; returns `num_steps + 1` states starting with `theta0`.
pub fn rk4_integrate<F>(theta0: &[f64], mut f: F, dt: f64, num_steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut states = Vec::with_capacity(num_steps + 1);
    states.push(theta0.to_vec());
    for step in 0..num_steps {
        let next = rk4_step(&mut f, states.last().expect("non-empty"), dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: step + 1,
                what: "latent state is not finite".into(),
            });
        }
        states.push(next);
    }
    Ok(states)
}

/// Back-propagates through one RK4 step of `dynamics` from `y` with step
/// `h`, given the cotangent of the output. Returns the cotangent of `y`.
fn rk4_step_backward<D: LatentDynamics>(
    dynamics: &D,
    y: &[f64],
    batch: usize,
    h: f64,
    dy_out: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let (k1, t1) = dynamics.forward(y, batch)?;
    let y2 = axpy(y, 0.5 * h, &k1);
    let (k2, t2) = dynamics.forward(&y2, batch)?;
    let y3 = axpy(y, 0.5 * h, &k2);
    let (k3, t3) = dynamics.forward(&y3, batch)?;
    let y4 = axpy(y, h, &k3);
    let (_, t4) = dynamics.forward(&y4, batch)?;
    let mut dy = dy_out.to_vec();
    let dk4: Vec<f64> = dy_out.iter().map(|g| g * h / 6.0).collect();
    let a4 = dynamics.backward(&t4, &dk4, grad);
    let dk3: Vec<f64> = dy_out.iter().zip(&a4).map(|(g, a)| g * h / 3.0 + h * a).collect();
    dy.iter_mut().zip(&a4).for_each(|(d, a)| *d += a);
    let a3 = dynamics.backward(&t3, &dk3, grad);
    let dk2: Vec<f64> = dy_out.iter().zip(&a3).map(|(g, a)| g * h / 3.0 + 0.5 * h * a).collect();
    dy.iter_mut().zip(&a3).for_each(|(d, a)| *d += a);
    let a2 = dynamics.backward(&t2, &dk2, grad);
    let dk1: Vec<f64> = dy_out.iter().zip(&a2).map(|(g, a)| g * h / 6.0 + 0.5 * h * a).collect();
    dy.iter_mut().zip(&a2).for_each(|(d, a)| *d += a);
    let a1 = dynamics.backward(&t1, &dk1, grad);
    dy.iter_mut().zip(&a1).for_each(|(d, a)| *d += a);
    Ok(dy)
}

/// Multi-step loss `sum_{n >= 1} |theta_n - rollout_n|^2` where the rollout
/// starts from `theta_0` and takes `substeps` RK4 steps of size
/// `dt / substeps` per saved interval. `window` is `[batch, seq_len, dim]`.
/// Gradients back-propagate through the unrolled integrator, recomputing
/// stage activations one step at a time.
#[allow(clippy::too_many_arguments)]
pub fn multi_step_loss<D: LatentDynamics>(
    dynamics: &D,
    window: &[f64],
    batch: usize,
    seq_len: usize,
    dt: f64,
    substeps: usize,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Config("dt and substeps must be positive".into()));
    }
    let dim = dynamics.dim();
    if seq_len < 2 || window.len() != batch * seq_len * dim {
        return Err(Error::Shape(format!(
            "window of {} values does not match batch {batch} x seq {seq_len} x dim {dim}",
            window.len()
        )));
    }
    let at = |n: usize| -> Vec<f64> {
        let mut rows = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let off = (b * seq_len + n) * dim;
            rows.extend_from_slice(&window[off..off + dim]);
        }
        rows
    };
    let h = dt / substeps as f64;
    let mut f = |y: &[f64]| dynamics.apply(y, batch);
    let total = (seq_len - 1) * substeps;
    let states = rk4_integrate(&at(0), &mut f, h, total)?;
    let mut loss = 0.0;
    for n in 1..seq_len {
        loss += sq_dist(&states[n * substeps], &at(n));
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: total,
            what: "multi-step loss is not finite".into(),
        });
    }
    let Some(grad) = grad else { return Ok(loss) };
    let mut dy = vec![0.0; batch * dim];
    for s in (0..total).rev() {
        if (s + 1) % substeps == 0 {
            let n = (s + 1) / substeps;
            let target = at(n);
            for ((d, p), t) in dy.iter_mut().zip(&states[s + 1]).zip(&target) {
                *d += 2.0 * (p - t);
            }
        }
        dy = rk4_step_backward(dynamics, &states[s], batch, h, &dy, grad)?;
    }
    Ok(loss)
}

// ---------------------------------------------------------------- data

/// Every snapshot of a dataset encoded once by a frozen encoder,
/// stored as `[traj, step, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    pub thetas: Vec<f64>,
    pub num_traj: usize,
    pub num_steps: usize,
    pub dim: usize,
    pub dt: f64,
    /// Number of snapshots passed through the encoder while building.
    pub encoded_snapshots: usize,
}

impl LatentCache {
    pub fn build(enc: &Encoder, ds: &TrajectoryDataset, chunk: usize) -> Result<Self> {
        let n = ds.num_grid();
        let total = ds.num_traj * ds.num_steps;
        let chunk = chunk.max(1);
        let mut thetas = Vec::with_capacity(total * enc.config().output_dim);
        let mut encoded = 0;
        for block in ds.u.chunks(chunk * n) {
            let b = block.len() / n;
            thetas.extend(enc.encode(block, b)?);
            encoded += b;
        }
        Ok(Self {
            thetas,
            num_traj: ds.num_traj,
            num_steps: ds.num_steps,
            dim: enc.config().output_dim,
            dt: ds.dt_save,
            encoded_snapshots: encoded,
        })
    }

    pub fn from_parts(thetas: Vec<f64>, num_traj: usize, num_steps: usize, dim: usize, dt: f64) -> Result<Self> {
        if thetas.len() != num_traj * num_steps * dim {
            return Err(Error::Shape("latent buffer does not match [traj, step, dim]".into()));
        }
        Ok(Self {
            thetas,
            num_traj,
            num_steps,
            dim,
            dt,
            encoded_snapshots: 0,
        })
    }

    pub fn state(&self, traj: usize, step: usize) -> &[f64] {
        let off = (traj * self.num_steps + step) * self.dim;
        &self.thetas[off..off + self.dim]
    }

    /// Trajectory `traj`, steps `start..start + len`, contiguous.
    pub fn window(&self, traj: usize, start: usize, len: usize) -> &[f64] {
        let off = (traj * self.num_steps + start) * self.dim;
        &self.thetas[off..off + len * self.dim]
    }

    pub fn trajectory(&self, traj: usize) -> &[f64] {
        self.window(traj, 0, self.num_steps)
    }
}

/// Endless seeded sampler over `(trajectory, start)` windows. Each epoch is
/// a fresh shuffle; batches never straddle epochs.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    windows: Vec<(usize, usize)>,
    order: Vec<(usize, usize)>,
    batch: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl WindowSampler {
    pub fn new(num_traj: usize, num_steps: usize, window_len: usize, batch: usize, seed: u64) -> Result<Self> {
        let windows = window_starts(num_traj, num_steps, window_len);
        if windows.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no windows of length {window_len} in {num_traj} trajectories of {num_steps} steps"
            )));
        }
        let batch = batch.clamp(1, windows.len());
        Ok(Self {
            order: windows.clone(),
            windows,
            batch,
            cursor: usize::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        if self.cursor == usize::MAX || self.cursor + self.batch > self.order.len() {
            self.order.clone_from(&self.windows);
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

// ---------------------------------------------------------------- loops

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Newline-delimited JSON loss log.
pub struct MetricsLog {
    writer: Option<Box<dyn Write + Send>>,
    start: Instant,
    pub records: Vec<MetricRecord>,
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog")
            .field("records", &self.records.len())
            .finish()
    }
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            writer: None,
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    pub fn to_writer(writer: Box<dyn Write + Send>) -> Self {
        Self {
            writer: Some(writer),
            ..Self::in_memory()
        }
    }

    pub fn record(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        let rec = MetricRecord {
            step,
            loss,
            lr,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub steps: usize,
    pub final_loss: f64,
}

fn should_log(step: usize, every: usize, total: usize) -> bool {
    step == 0 || step + 1 == total || (every > 0 && (step + 1).is_multiple_of(every))
}

fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: format!("{what} loss became {loss}"),
        })
    }
}

fn check_params(p: &[f64], step: usize, what: &str) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: format!("{what} parameters became non-finite"),
        })
    }
}

/// Encoder stage: minimises the reconstruction + consistency objective
/// over single snapshots drawn from `ds`.
pub fn train_encoder(
    enc: &mut Encoder,
    ansatz: &Ansatz,
    ds: &TrajectoryDataset,
    cfg: &TrainingConfig,
    log: &mut MetricsLog,
) -> Result<StageSummary> {
    if ansatz.num_params() != enc.config().output_dim {
        return Err(Error::Structural(format!(
            "encoder emits {} values but the ansatz has {} parameters",
            enc.config().output_dim,
            ansatz.num_params()
        )));
    }
    let n = ds.num_grid();
    let mut sampler = WindowSampler::new(ds.num_traj, ds.num_steps, 1, cfg.batch_size, cfg.seed)?;
    let batch = sampler.batch_size();
    let schedule = cfg.schedule();
    let mut opt = Adam::new(enc.num_params());
    let mut grad = vec![0.0; enc.num_params()];
    let mut u = Vec::with_capacity(batch * n);
    let mut last = f64::NAN;
    for step in 0..cfg.training_steps {
        u.clear();
        for (t, s) in sampler.next_batch() {
            u.extend_from_slice(ds.snapshot(t, s));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = encoder_loss(
            enc,
            ansatz,
            &ds.grid,
            &u,
            batch,
            cfg.gamma,
            cfg.stop_gradient,
            Mode::Train,
            Some(&mut grad),
        )
        .map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence { step, what },
            other => other,
        })?;
        check_finite(loss.total, step, "encoder")?;
        if let Some(c) = cfg.grad_clip_norm {
            clip_grad_norm(&mut grad, c);
        }
        let lr = schedule.lr(step);
        opt.step(enc.params_mut(), &grad, lr);
        check_params(enc.params(), step, "encoder")?;
        last = loss.total;
        if should_log(step, cfg.log_every, cfg.training_steps) {
            log.record(step, loss.total, lr)?;
        }
    }
    Ok(StageSummary {
        steps: cfg.training_steps,
        final_loss: last,
    })
}

/// Pretraining (single-step) or fine-tuning (multi-step) of the latent
/// dynamics on cached latent trajectories.
pub fn train_dynamics<D: LatentDynamics>(
    dynamics: &mut D,
    cache: &LatentCache,
    cfg: &TrainingConfig,
    log: &mut MetricsLog,
) -> Result<StageSummary> {
    if dynamics.dim() != cache.dim {
        return Err(Error::Structural(format!(
            "dynamics dimension {} does not match latent dimension {}",
            dynamics.dim(),
            cache.dim
        )));
    }
    let seq = match cfg.stage {
        Stage::Pretrain => 2,
        Stage::Finetune => cfg.seq_length,
        Stage::Encoder => return Err(Error::Config("train_dynamics needs a dynamics stage".into())),
    };
    let substeps = cfg.rk4_substeps(cache.dt)?;
    let mut sampler = WindowSampler::new(cache.num_traj, cache.num_steps, seq, cfg.batch_size, cfg.seed)?;
    let batch = sampler.batch_size();
    let schedule = cfg.schedule();
    let dim = cache.dim;
    let mut opt = Adam::new(dynamics.num_params());
    let mut grad = vec![0.0; dynamics.num_params()];
    let mut last = f64::NAN;
    for step in 0..cfg.training_steps {
        let windows = sampler.next_batch();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = if cfg.stage == Stage::Pretrain {
            let mut t0 = Vec::with_capacity(batch * dim);
            let mut t1 = Vec::with_capacity(batch * dim);
            for &(t, s) in &windows {
                t0.extend_from_slice(cache.state(t, s));
                t1.extend_from_slice(cache.state(t, s + 1));
            }
            single_step_loss(dynamics, &t0, &t1, batch, cache.dt, Some(&mut grad))?
        } else {
            let mut w = Vec::with_capacity(batch * seq * dim);
            for &(t, s) in &windows {
                w.extend_from_slice(cache.window(t, s, seq));
            }
            multi_step_loss(dynamics, &w, batch, seq, cache.dt, substeps, Some(&mut grad)).map_err(|e| match e {
                Error::Divergence { what, .. } => Error::Divergence { step, what },
                other => other,
            })?
        };
        check_finite(loss, step, cfg.stage.name())?;
        if let Some(c) = cfg.grad_clip_norm {
            clip_grad_norm(&mut grad, c);
        }
        let lr = schedule.lr(step);
        opt.step(dynamics.params_mut(), &grad, lr);
        check_params(dynamics.params(), step, cfg.stage.name())?;
        last = loss;
        if should_log(step, cfg.log_every, cfg.training_steps) {
            log.record(step, loss, lr)?;
        }
    }
    Ok(StageSummary {
        steps: cfg.training_steps,
        final_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_encoder_loss() {
        let l = encoder_loss_from_parts(&[1.0, 0.0], &[0.9, 0.1], &[0.5], &[0.4], 10.0);
        assert!((l.total - 0.12).abs() < 1e-12);
        let l0 = encoder_loss_from_parts(&[1.0, 0.0], &[0.9, 0.1], &[0.5], &[0.4], 0.0);
        assert_eq!(l0.total, l0.reconstruction);
    }

    #[test]
    fn table_defaults() {
        let p = TrainingConfig::defaults(EquationKind::KuramotoSivashinsky, Stage::Pretrain);
        assert_eq!(
            (
                p.batch_size,
                p.seq_length,
                p.base_lr,
                p.lr_decay_factor,
                p.steps_per_decay
            ),
            (32, 2, 1e-4, 0.955, 40_000)
        );
        assert_eq!(p.grad_clip_norm, Some(0.25));
        let e = TrainingConfig::defaults(EquationKind::KuramotoSivashinsky, Stage::Encoder);
        assert_eq!(
            (e.gamma, e.batch_size, e.base_lr, e.lr_decay_factor, e.steps_per_decay),
            (10.0, 32, 3e-4, 0.892, 80_000)
        );
        assert_eq!(
            TrainingConfig::defaults(EquationKind::ViscidBurgers, Stage::Encoder).gamma,
            1.0
        );
        assert_eq!(
            TrainingConfig::defaults(EquationKind::ViscidBurgers, Stage::Finetune).seq_length,
            10
        );
        assert_eq!(
            TrainingConfig::defaults(EquationKind::Kdv, Stage::Finetune).seq_length,
            20
        );
    }

    #[test]
    fn rk4_substeps_must_divide() {
        let mut c = TrainingConfig::defaults(EquationKind::Kdv, Stage::Finetune);
        assert_eq!(c.rk4_substeps(0.1).unwrap(), 1);
        c.rk4_dt = Some(0.025);
        assert_eq!(c.rk4_substeps(0.1).unwrap(), 4);
        c.rk4_dt = Some(0.03);
        assert!(c.rk4_substeps(0.1).is_err());
    }

    #[test]
    fn sampler_is_seeded_and_covers_epoch() {
        let mut a = WindowSampler::new(2, 5, 2, 4, 7).unwrap();
        let mut b = WindowSampler::new(2, 5, 2, 4, 7).unwrap();
        let first: Vec<_> = (0..2).flat_map(|_| a.next_batch()).collect();
        assert_eq!(first, (0..2).flat_map(|_| b.next_batch()).collect::<Vec<_>>());
        let mut sorted = first.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }
}
