//! Nonlinear Fourier Ansatz: a periodic decoder whose weights are the latent
//! state.
//!
//! For frequencies `w_k` and trainable phases `a_k`, `a_-k` the input
//! features are `f = [sin(w_k x + a_k) ; cos(w_k x + a_-k) ; 1?]`. A small
//! MLP maps `f` to envelopes `phi` of the same width and the ansatz is the
//! inner product `Psi(x) = <phi(f), f>`, which is exactly `L`-periodic.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::spectral::{EquationKind, Grid1D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Sin,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Swish => z / (1.0 + (-z).exp()),
            Activation::Sin => z.sin(),
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = 1.0 / (1.0 + (-z).exp());
                s + z * s * (1.0 - s)
            }
            Activation::Sin => z.cos(),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqProfile {
    Linear,
    Dyadic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsatzSpec {
    pub mlp_features: Vec<usize>,
    pub activation: Activation,
    pub num_freqs: usize,
    pub freq_profile: FreqProfile,
    pub has_zero_freq: bool,
    pub domain_length: f64,
}

/// What a contiguous block of the latent vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Weight { layer: usize },
    Bias { layer: usize },
    Phases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Segment table of the flat latent vector: MLP layers in order (weights
/// row-major `[out, in]`, then biases), followed by the `2K` phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub segments: Vec<Segment>,
    pub len: usize,
    pub num_layers: usize,
}

impl ThetaLayout {
    /// Weight groups: each MLP layer's `{W, b}` is one group, all phases one more.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut groups = Vec::with_capacity(self.num_layers + 1);
        for layer in 0..self.num_layers {
            let w = self
                .segments
                .iter()
                .find(|s| s.kind == SegmentKind::Weight { layer })
                .expect("weight segment");
            let b = self
                .segments
                .iter()
                .find(|s| s.kind == SegmentKind::Bias { layer })
                .expect("bias segment");
            groups.push(w.start..b.start + b.len);
        }
        let p = self
            .segments
            .iter()
            .find(|s| s.kind == SegmentKind::Phases)
            .expect("phase segment");
        groups.push(p.range());
        groups
    }
}

impl AnsatzSpec {
    /// Table defaults per equation.
    pub fn default_for(kind: EquationKind, domain_length: f64) -> Self {
        let (mlp_features, activation, num_freqs, freq_profile, has_zero_freq) = match kind {
            EquationKind::ViscidBurgers => (vec![4, 4], Activation::Swish, 3, FreqProfile::Dyadic, false),
            EquationKind::KuramotoSivashinsky => (vec![8, 8], Activation::Sin, 3, FreqProfile::Linear, false),
            EquationKind::Kdv => (vec![8, 8], Activation::Swish, 6, FreqProfile::Dyadic, true),
        };
        Self {
            mlp_features,
            activation,
            num_freqs,
            freq_profile,
            has_zero_freq,
            domain_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_freqs == 0 {
            return Err(Error::Config("ansatz needs at least one frequency".into()));
        }
        if self.mlp_features.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        if !(self.domain_length > 0.0) {
            return Err(Error::Config("ansatz domain length must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.num_freqs + usize::from(self.has_zero_freq)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.num_freqs)
            .map(|k| {
                let m = match self.freq_profile {
                    FreqProfile::Linear => (k + 1) as f64,
                    FreqProfile::Dyadic => (1u64 << k) as f64,
                };
                2.0 * PI * m / self.domain_length
            })
            .collect()
    }

    /// `(in, out)` per MLP layer, input `d_f` through the hidden widths back to `d_f`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.feature_dim();
        let mut widths = vec![d];
        widths.extend_from_slice(&self.mlp_features);
        widths.push(d);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>() + 2 * self.num_freqs
    }

    pub fn layout(&self) -> ThetaLayout {
        let mut segments = Vec::new();
        let mut offset = 0;
        let dims = self.layer_dims();
        for (layer, &(i, o)) in dims.iter().enumerate() {
            segments.push(Segment {
                kind: SegmentKind::Weight { layer },
                start: offset,
                len: i * o,
                shape: vec![o, i],
            });
            offset += i * o;
            segments.push(Segment {
                kind: SegmentKind::Bias { layer },
                start: offset,
                len: o,
                shape: vec![o],
            });
            offset += o;
        }
        segments.push(Segment {
            kind: SegmentKind::Phases,
            start: offset,
            len: 2 * self.num_freqs,
            shape: vec![2, self.num_freqs],
        });
        offset += 2 * self.num_freqs;
        ThetaLayout {
            segments,
            len: offset,
            num_layers: dims.len(),
        }
    }

    /// Uniform `[0, 2 pi)` phases, `U(-1/sqrt(in), 1/sqrt(in))` weights, zero biases.
    pub fn init_theta(&self, rng: &mut impl Rng) -> Vec<f64> {
        let layout = self.layout();
        let mut theta = vec![0.0; layout.len];
        for seg in &layout.segments {
            match seg.kind {
                SegmentKind::Weight { .. } => {
                    let bound = 1.0 / (seg.shape[1] as f64).sqrt();
                    for v in &mut theta[seg.range()] {
                        *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
                SegmentKind::Bias { .. } => {}
                SegmentKind::Phases => {
                    for v in &mut theta[seg.range()] {
                        *v = 2.0 * PI * rng.random::<f64>();
                    }
                }
            }
        }
        theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Row-major `[out, in]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredWeights {
    pub layers: Vec<LayerWeights>,
    pub phases_sin: Vec<f64>,
    pub phases_cos: Vec<f64>,
}

/// A latent vector tied to the ansatz whose weights it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub spec: AnsatzSpec,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>, spec: AnsatzSpec) -> Result<Self> {
        let expected = spec.num_params();
        if values.len() != expected {
            return Err(Error::Structural(format!(
                "latent vector has length {}, ansatz expects {expected}",
                values.len()
            )));
        }
        Ok(Self { values, spec })
    }

    pub fn layout(&self) -> ThetaLayout {
        self.spec.layout()
    }

    pub fn evaluate(&self, xs: &[f64]) -> Vec<f64> {
        Ansatz::new(self.spec.clone())
            .expect("spec validated at construction")
            .eval_points(&self.values, xs)
            .expect("length checked at construction")
    }

    pub fn evaluate_at(&self, x: f64) -> f64 {
        self.evaluate(&[x])[0]
    }
}

pub fn flatten(weights: &StructuredWeights, spec: &AnsatzSpec) -> Result<ThetaVector> {
    let dims = spec.layer_dims();
    if weights.layers.len() != dims.len() {
        return Err(Error::Structural(format!(
            "expected {} layers, got {}",
            dims.len(),
            weights.layers.len()
        )));
    }
    let k = spec.num_freqs;
    if weights.phases_sin.len() != k || weights.phases_cos.len() != k {
        return Err(Error::Structural(format!("expected {k} phases per family")));
    }
    let mut values = Vec::with_capacity(spec.num_params());
    for (layer, (&(i, o), lw)) in dims.iter().zip(&weights.layers).enumerate() {
        if lw.w.len() != i * o || lw.b.len() != o {
            return Err(Error::Structural(format!(
                "layer {layer} expects W[{o}x{i}] and b[{o}]"
            )));
        }
        values.extend_from_slice(&lw.w);
        values.extend_from_slice(&lw.b);
    }
    values.extend_from_slice(&weights.phases_sin);
    values.extend_from_slice(&weights.phases_cos);
    ThetaVector::new(values, spec.clone())
}

pub fn unflatten(theta: &ThetaVector) -> Result<StructuredWeights> {
    let layout = theta.layout();
    if theta.values.len() != layout.len {
        return Err(Error::Structural(format!(
            "latent vector has length {}, ansatz expects {}",
            theta.values.len(),
            layout.len
        )));
    }
    let mut layers = Vec::with_capacity(layout.num_layers);
    let mut phases = Vec::new();
    for seg in &layout.segments {
        let vals = theta.values[seg.range()].to_vec();
        match seg.kind {
            SegmentKind::Weight { .. } => layers.push(LayerWeights { w: vals, b: Vec::new() }),
            SegmentKind::Bias { .. } => layers.last_mut().expect("weights precede bias").b = vals,
            SegmentKind::Phases => phases = vals,
        }
    }
    let k = theta.spec.num_freqs;
    Ok(StructuredWeights {
        layers,
        phases_sin: phases[..k].to_vec(),
        phases_cos: phases[k..].to_vec(),
    })
}

/// Precomputed evaluation plan for one ansatz.
#[derive(Debug, Clone)]
pub struct Ansatz {
    spec: AnsatzSpec,
    layout: ThetaLayout,
    freqs: Vec<f64>,
    dims: Vec<(usize, usize)>,
    /// (weight offset, bias offset) per layer.
    offsets: Vec<(usize, usize)>,
    phase_offset: usize,
}

/// Per-point forward activations kept for the backward pass.
struct PointCache {
    features: Vec<f64>,
    /// Pre-activations of hidden layers, then the outputs.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Ansatz {
    pub fn new(spec: AnsatzSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let dims = spec.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut phase_offset = 0;
        for seg in &layout.segments {
            match seg.kind {
                SegmentKind::Weight { .. } => offsets.push((seg.start, 0)),
                SegmentKind::Bias { .. } => offsets.last_mut().expect("weights precede bias").1 = seg.start,
                SegmentKind::Phases => phase_offset = seg.start,
            }
        }
        Ok(Self {
            freqs: spec.frequencies(),
            spec,
            layout,
            dims,
            offsets,
            phase_offset,
        })
    }

    pub fn spec(&self) -> &AnsatzSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len {
            return Err(Error::Structural(format!(
                "latent vector has length {}, ansatz expects {}",
                theta.len(),
                self.layout.len
            )));
        }
        Ok(())
    }

    fn features(&self, theta: &[f64], x: f64, out: &mut Vec<f64>) {
        let k = self.freqs.len();
        out.clear();
        for (j, &w) in self.freqs.iter().enumerate() {
            out.push((w * x + theta[self.phase_offset + j]).sin());
        }
        for (j, &w) in self.freqs.iter().enumerate() {
            out.push((w * x + theta[self.phase_offset + k + j]).cos());
        }
        if self.spec.has_zero_freq {
            out.push(1.0);
        }
    }

    fn forward_point(&self, theta: &[f64], x: f64, cache: &mut PointCache) -> f64 {
        self.features(theta, x, &mut cache.features);
        let last = self.dims.len() - 1;
        for (layer, &(din, dout)) in self.dims.iter().enumerate() {
            let (wo, bo) = self.offsets[layer];
            let input: &[f64] = if layer == 0 {
                &cache.features
            } else {
                &cache.post[layer - 1]
            };
            let mut pre = std::mem::take(&mut cache.pre[layer]);
            pre.clear();
            for o in 0..dout {
                let row = &theta[wo + o * din..wo + (o + 1) * din];
                let z: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + theta[bo + o];
                pre.push(z);
            }
            let post = &mut cache.post[layer];
            post.clear();
            if layer == last {
                post.extend_from_slice(&pre);
            } else {
                let act = self.spec.activation;
                post.extend(pre.iter().map(|&z| act.apply(z)));
            }
            cache.pre[layer] = pre;
        }
        cache.post[last].iter().zip(&cache.features).map(|(p, f)| p * f).sum()
    }

    fn new_cache(&self) -> PointCache {
        PointCache {
            features: Vec::with_capacity(self.spec.feature_dim()),
            pre: vec![Vec::new(); self.dims.len()],
            post: vec![Vec::new(); self.dims.len()],
        }
    }

    pub fn eval_points(&self, theta: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        let mut cache = self.new_cache();
        Ok(xs.iter().map(|&x| self.forward_point(theta, x, &mut cache)).collect())
    }

    pub fn eval_grid(&self, theta: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
        self.eval_points(theta, &grid.points())
    }

    /// Accumulates `d/dtheta sum_i g_i Psi(x_i)` into `grad`.
    pub fn backward_points(&self, theta: &[f64], xs: &[f64], grad_out: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check(theta)?;
        if grad.len() != theta.len() || grad_out.len() != xs.len() {
            return Err(Error::Shape("gradient buffers do not match".into()));
        }
        let k = self.freqs.len();
        let d = self.spec.feature_dim();
        let last = self.dims.len() - 1;
        let mut cache = self.new_cache();
        let mut delta: Vec<f64> = Vec::new();
        let mut next: Vec<f64> = Vec::new();
        let mut dfeat = vec![0.0; d];
        for (&x, &g) in xs.iter().zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            self.forward_point(theta, x, &mut cache);
            // Psi = <phi, f>: dPsi/dphi = f, dPsi/df (direct) = phi.
            delta.clear();
            delta.extend(cache.features.iter().map(|f| g * f));
            for (df, p) in dfeat.iter_mut().zip(&cache.post[last]) {
                *df = g * p;
            }
            for layer in (0..self.dims.len()).rev() {
                let (din, dout) = self.dims[layer];
                let (wo, bo) = self.offsets[layer];
                if layer != last {
                    let act = self.spec.activation;
                    for (dl, &z) in delta.iter_mut().zip(&cache.pre[layer]) {
                        *dl *= act.derivative(z);
                    }
                }
                let input: &[f64] = if layer == 0 {
                    &cache.features
                } else {
                    &cache.post[layer - 1]
                };
                next.clear();
                next.resize(din, 0.0);
                for o in 0..dout {
                    let dl = delta[o];
                    grad[bo + o] += dl;
                    let row = wo + o * din;
                    for i in 0..din {
                        grad[row + i] += dl * input[i];
                        next[i] += dl * theta[row + i];
                    }
                }
                std::mem::swap(&mut delta, &mut next);
            }
            for (df, dl) in dfeat.iter_mut().zip(&delta) {
                *df += dl;
            }
            for (j, &w) in self.freqs.iter().enumerate() {
                let ps = self.phase_offset + j;
                let pc = self.phase_offset + k + j;
                grad[ps] += dfeat[j] * (w * x + theta[ps]).cos();
                grad[pc] -= dfeat[k + j] * (w * x + theta[pc]).sin();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoDecoderConfig {
    pub steps: usize,
    pub lr: f64,
    /// Multiply the learning rate by this factor every `steps_per_decay` steps.
    pub lr_decay: f64,
    pub steps_per_decay: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AutoDecoderConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            lr: 1e-2,
            lr_decay: 0.9,
            steps_per_decay: 1_000,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoDecoderFit {
    pub thetas: Vec<Vec<f64>>,
    /// `None` where the target snapshot has zero norm.
    pub rel_rmse: Vec<Option<f64>>,
    pub abs_rmse: Vec<f64>,
}

impl AutoDecoderFit {
    pub fn mean_rel_rmse(&self) -> f64 {
        let vals: Vec<f64> = self.rel_rmse.iter().flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Fits one latent vector per snapshot by minimising the mean squared
/// reconstruction error with Adam. `snapshots` is `[n, grid]`.
pub fn fit_auto_decoder(
    snapshots: &[f64],
    grid: &Grid1D,
    spec: &AnsatzSpec,
    cfg: &AutoDecoderConfig,
) -> Result<AutoDecoderFit> {
    let n = grid.num_points;
    if !snapshots.len().is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "snapshot buffer of length {} is not a multiple of the grid size {n}",
            snapshots.len()
        )));
    }
    let count = snapshots.len() / n;
    let ansatz = Ansatz::new(spec.clone())?;
    let xs = grid.points();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let norms: Vec<f64> = snapshots
        .chunks(n)
        .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut thetas: Vec<Vec<f64>> = norms
        .iter()
        .map(|&nrm| {
            let init = spec.init_theta(&mut rng);
            if nrm == 0.0 {
                vec![0.0; init.len()]
            } else {
                init
            }
        })
        .collect();
    let mut optims: Vec<Adam> = thetas.iter().map(|t| Adam::new(t.len())).collect();
    let active: Vec<usize> = (0..count).filter(|&i| norms[i] > 0.0).collect();
    let batch = cfg.batch.clamp(1, active.len().max(1));
    let mut grad = vec![0.0; ansatz.num_params()];
    let mut resid = vec![0.0; n];
    let mut cursor = active.len();
    let mut order = active.clone();
    for step in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        let lr = cfg.lr * cfg.lr_decay.powi((step / cfg.steps_per_decay.max(1)) as i32);
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor >= order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let u = &snapshots[idx * n..(idx + 1) * n];
            let pred = ansatz.eval_points(&thetas[idx], &xs)?;
            for i in 0..n {
                resid[i] = pred[i] - u[i];
            }
            loss += resid.iter().map(|r| r * r).sum::<f64>();
            let g: Vec<f64> = resid.iter().map(|r| 2.0 * r / batch as f64).collect();
            grad.iter_mut().for_each(|v| *v = 0.0);
            ansatz.backward_points(&thetas[idx], &xs, &g, &mut grad)?;
            optims[idx].step(&mut thetas[idx], &grad, lr);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "auto-decoder loss is not finite".into(),
            });
        }
    }
    let mut rel_rmse = Vec::with_capacity(count);
    let mut abs_rmse = Vec::with_capacity(count);
    for (i, u) in snapshots.chunks(n).enumerate() {
        let pred = ansatz.eval_points(&thetas[i], &xs)?;
        let err = pred.iter().zip(u).map(|(p, t)| (p - t).powi(2)).sum::<f64>().sqrt();
        abs_rmse.push(err / (n as f64).sqrt());
        rel_rmse.push((norms[i] > 0.0).then(|| err / norms[i]));
    }
    Ok(AutoDecoderFit {
        thetas,
        rel_rmse,
        abs_rmse,
    })
}
