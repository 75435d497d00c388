//! Hyper U-Net: latent dynamics over ansatz weights, organised by
//! weight, layer and graph levels.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::AnsatzSpec;
use crate::error::{Error, Result};
use crate::nn::{swish, swish_grad, Init, LayerNorm, LayerNormCache, Linear, Registry};

/// A trainable vector field `theta -> d theta / dt` evaluated on row batches.
pub trait LatentDynamics {
    type Tape;

    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `theta: [batch, dim]` to `[batch, dim]`, keeping a tape for the VJP.
    fn forward(&self, theta: &[f64], batch: usize) -> Result<(Vec<f64>, Self::Tape)>;

    /// Accumulates parameter gradients and returns `d theta`.
    fn backward(&self, tape: &Self::Tape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64>;

    fn apply(&self, theta: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward(theta, batch)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperUNetConfig {
    pub d_w: usize,
    pub d_l: usize,
    pub d_g: usize,
    /// Number of latent entries in each group, in layout order.
    pub group_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub mixing_blocks: usize,
}

fn one() -> usize {
    1
}

impl HyperUNetConfig {
    /// One group per MLP layer (weights and bias) plus one for all phases.
    pub fn for_ansatz(spec: &AnsatzSpec, d_w: usize, d_l: usize, d_g: usize) -> Self {
        let group_sizes = spec.layout().groups().iter().map(|r| r.len()).collect();
        Self {
            d_w,
            d_l,
            d_g,
            group_sizes,
            mixing_blocks: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.group_sizes
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("d_w", self.d_w), ("d_l", self.d_l), ("d_g", self.d_g)] {
            if v == 0 {
                errs.push(format!("hyper_unet.{name} must be positive"));
            }
        }
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            errs.push("hyper_unet.group_sizes must be non-empty and positive".into());
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(Error::Config(errs.remove(0))),
            _ => Err(Error::ConfigList(errs)),
        }
    }
}

/// Dense -> swish -> Dense -> residual -> LayerNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Mixing {
    d1: Linear,
    d2: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone, Default)]
struct MixingTape {
    x: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    norm: LayerNormCache,
}

impl Mixing {
    fn new(reg: &mut Registry, name: &str, width: usize) -> Self {
        Self {
            d1: Linear::new(reg, &format!("{name}.dense1"), width, width, true),
            d2: Linear::new(reg, &format!("{name}.dense2"), width, width, true),
            norm: LayerNorm::new(reg, &format!("{name}.norm"), width),
        }
    }

    fn forward(&self, p: &[f64], x: Vec<f64>, rows: usize, t: &mut MixingTape) -> Vec<f64> {
        let z = self.d1.forward(p, &x, rows);
        let a: Vec<f64> = z.iter().map(|&v| swish(v)).collect();
        let mut s = self.d2.forward(p, &a, rows);
        s.iter_mut().zip(&x).for_each(|(s, x)| *s += x);
        let y = self.norm.forward(p, &s, &mut t.norm);
        t.x = x;
        t.z = z;
        t.a = a;
        y
    }

    fn backward(&self, p: &[f64], t: &MixingTape, dy: &[f64], rows: usize, grad: &mut [f64]) -> Vec<f64> {
        let ds = self.norm.backward(p, &t.norm, dy, grad);
        let mut da = self.d2.backward(p, &t.a, &ds, rows, grad);
        da.iter_mut().zip(&t.z).for_each(|(g, &z)| *g *= swish_grad(z));
        let mut dx = self.d1.backward(p, &t.x, &da, rows, grad);
        dx.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        dx
    }
}

fn mix_forward(stack: &[Mixing], p: &[f64], mut x: Vec<f64>, rows: usize, tapes: &mut Vec<MixingTape>) -> Vec<f64> {
    for m in stack {
        let mut t = MixingTape::default();
        x = m.forward(p, x, rows, &mut t);
        tapes.push(t);
    }
    x
}

fn mix_backward(
    stack: &[Mixing],
    p: &[f64],
    tapes: &[MixingTape],
    mut d: Vec<f64>,
    rows: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    for (m, t) in stack.iter().zip(tapes).rev() {
        d = m.backward(p, t, &d, rows, grad);
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Group {
    range: Range<usize>,
    weight_mix_down: Vec<Mixing>,
    to_layer: Linear,
    layer_mix_down: Vec<Mixing>,
    layer_merge: Linear,
    layer_mix_up: Vec<Mixing>,
    to_weights: Linear,
    weight_merge: Linear,
    weight_mix_up: Vec<Mixing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperUNet {
    config: HyperUNetConfig,
    registry: Registry,
    params: Vec<f64>,
    /// Per-position `[dim, d_w]` input projection.
    proj_in: usize,
    /// Per-position `[dim, d_w]` output projection and `[dim]` bias.
    proj_out: usize,
    proj_out_bias: usize,
    groups: Vec<Group>,
    to_global: Linear,
    global_mix: Vec<Mixing>,
    from_global: Linear,
    /// Diagnostic: drop the global path so groups evolve independently.
    isolate_groups: bool,
}

#[derive(Debug, Clone, Default)]
struct GroupTape {
    e: Vec<f64>,
    wmd: Vec<MixingTape>,
    h: Vec<f64>,
    lmd: Vec<MixingTape>,
    merge_in: Vec<f64>,
    lmu: Vec<MixingTape>,
    lu: Vec<f64>,
    wmerge_in: Vec<f64>,
    wmu: Vec<MixingTape>,
    wu: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct HyperUNetTape {
    batch: usize,
    theta: Vec<f64>,
    groups: Vec<GroupTape>,
    global_in: Vec<f64>,
    gmix: Vec<MixingTape>,
    g: Vec<f64>,
}

impl HyperUNet {
    pub fn new(config: HyperUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (dw, dl, dg) = (config.d_w, config.d_l, config.d_g);
        let dim = config.dim();
        let nl = config.num_groups();
        let k = config.mixing_blocks;
        let mut reg = Registry::default();
        let proj_in = reg.alloc("weights.project", &[dim, dw], Init::Uniform(1.0));
        let mut groups = Vec::with_capacity(nl);
        for (gi, range) in config.groups().into_iter().enumerate() {
            let n = range.len();
            let name = format!("group{gi}");
            let weight_mix_down = (0..k)
                .map(|j| Mixing::new(&mut reg, &format!("{name}.weight_mix_down{j}"), dw))
                .collect();
            let to_layer = Linear::new(&mut reg, &format!("{name}.to_layer"), n * dw, dl, true);
            let layer_mix_down = (0..k)
                .map(|j| Mixing::new(&mut reg, &format!("{name}.layer_mix_down{j}"), dl))
                .collect();
            let layer_merge = Linear::new(&mut reg, &format!("{name}.layer_merge"), 2 * dl, dl, true);
            let layer_mix_up = (0..k)
                .map(|j| Mixing::new(&mut reg, &format!("{name}.layer_mix_up{j}"), dl))
                .collect();
            let to_weights = Linear::new(&mut reg, &format!("{name}.to_weights"), dl, n * dw, true);
            let weight_merge = Linear::new(&mut reg, &format!("{name}.weight_merge"), 2 * dw, dw, true);
            let weight_mix_up = (0..k)
                .map(|j| Mixing::new(&mut reg, &format!("{name}.weight_mix_up{j}"), dw))
                .collect();
            groups.push(Group {
                range,
                weight_mix_down,
                to_layer,
                layer_mix_down,
                layer_merge,
                layer_mix_up,
                to_weights,
                weight_merge,
                weight_mix_up,
            });
        }
        let to_global = Linear::new(&mut reg, "global.down", nl * dl, dg, true);
        let global_mix = (0..k)
            .map(|j| Mixing::new(&mut reg, &format!("global.mix{j}"), dg))
            .collect();
        let from_global = Linear::new(&mut reg, "global.up", dg, nl * dl, true);
        let proj_out = reg.alloc("weights.output", &[dim, dw], Init::Zeros);
        let proj_out_bias = reg.alloc("weights.output_bias", &[dim], Init::Zeros);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = reg.initialize(&mut rng);
        Ok(Self {
            config,
            registry: reg,
            params,
            proj_in,
            proj_out,
            proj_out_bias,
            groups,
            to_global,
            global_mix,
            from_global,
            isolate_groups: false,
        })
    }

    pub fn config(&self) -> &HyperUNetConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Structural(format!(
                "dynamics parameters of length {} do not match the architecture ({})",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn set_isolate_groups(&mut self, isolate: bool) {
        self.isolate_groups = isolate;
    }

    /// Parameter index ranges of the named entries whose name starts with `prefix`.
    pub fn param_ranges(&self, prefix: &str) -> Vec<Range<usize>> {
        self.registry
            .entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.offset..e.offset + e.len())
            .collect()
    }
}

impl LatentDynamics for HyperUNet {
    type Tape = HyperUNetTape;

    fn dim(&self) -> usize {
        self.config.dim()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, theta: &[f64], batch: usize) -> Result<(Vec<f64>, HyperUNetTape)> {
        let dim = self.dim();
        if batch == 0 || theta.len() != batch * dim {
            return Err(Error::Structural(format!(
                "latent batch of {} values does not match batch {batch} x dim {dim}",
                theta.len()
            )));
        }
        let p = &self.params;
        let (dw, dl) = (self.config.d_w, self.config.d_l);
        let nl = self.groups.len();
        let mut tape = HyperUNetTape {
            batch,
            theta: theta.to_vec(),
            ..Default::default()
        };
        let mut global_in = vec![0.0; batch * nl * dl];
        for (gi, g) in self.groups.iter().enumerate() {
            let n = g.range.len();
            let mut gt = GroupTape::default();
            let mut e = vec![0.0; batch * n * dw];
            for b in 0..batch {
                for (i, pos) in g.range.clone().enumerate() {
                    let t = theta[b * dim + pos];
                    let w = &p[self.proj_in + pos * dw..self.proj_in + (pos + 1) * dw];
                    for c in 0..dw {
                        e[(b * n + i) * dw + c] = t * w[c];
                    }
                }
            }
            gt.e = e.clone();
            let h = mix_forward(&g.weight_mix_down, p, e, batch * n, &mut gt.wmd);
            let l = g.to_layer.forward(p, &h, batch);
            gt.h = h;
            let l = mix_forward(&g.layer_mix_down, p, l, batch, &mut gt.lmd);
            for b in 0..batch {
                global_in[(b * nl + gi) * dl..(b * nl + gi + 1) * dl].copy_from_slice(&l[b * dl..(b + 1) * dl]);
            }
            gt.merge_in = l;
            tape.groups.push(gt);
        }
        let gz = self.to_global.forward(p, &global_in, batch);
        tape.global_in = global_in;
        let gv = mix_forward(&self.global_mix, p, gz, batch, &mut tape.gmix);
        let mut up = self.from_global.forward(p, &gv, batch);
        tape.g = gv;
        if self.isolate_groups {
            up.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut out = vec![0.0; batch * dim];
        for (gi, g) in self.groups.iter().enumerate() {
            let n = g.range.len();
            let gt = &mut tape.groups[gi];
            // Concatenate [upsampled, skip] per sample.
            let down = std::mem::take(&mut gt.merge_in);
            let mut cat = vec![0.0; batch * 2 * dl];
            for b in 0..batch {
                cat[b * 2 * dl..b * 2 * dl + dl].copy_from_slice(&up[(b * nl + gi) * dl..(b * nl + gi + 1) * dl]);
                cat[b * 2 * dl + dl..(b + 1) * 2 * dl].copy_from_slice(&down[b * dl..(b + 1) * dl]);
            }
            let merged = g.layer_merge.forward(p, &cat, batch);
            gt.merge_in = cat;
            let lu = mix_forward(&g.layer_mix_up, p, merged, batch, &mut gt.lmu);
            let wu = g.to_weights.forward(p, &lu, batch);
            gt.lu = lu;
            let rows = batch * n;
            let mut wcat = vec![0.0; rows * 2 * dw];
            for r in 0..rows {
                wcat[r * 2 * dw..r * 2 * dw + dw].copy_from_slice(&wu[r * dw..(r + 1) * dw]);
                wcat[r * 2 * dw + dw..(r + 1) * 2 * dw].copy_from_slice(&gt.h[r * dw..(r + 1) * dw]);
            }
            let merged = g.weight_merge.forward(p, &wcat, rows);
            gt.wmerge_in = wcat;
            let fin = mix_forward(&g.weight_mix_up, p, merged, rows, &mut gt.wmu);
            for b in 0..batch {
                for (i, pos) in g.range.clone().enumerate() {
                    let w = &p[self.proj_out + pos * dw..self.proj_out + (pos + 1) * dw];
                    let f = &fin[(b * n + i) * dw..(b * n + i + 1) * dw];
                    out[b * dim + pos] = p[self.proj_out_bias + pos] + w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            gt.wu = fin;
        }
        Ok((out, tape))
    }

    fn backward(&self, tape: &HyperUNetTape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let p = &self.params;
        let batch = tape.batch;
        let dim = self.dim();
        let (dw, dl) = (self.config.d_w, self.config.d_l);
        let nl = self.groups.len();
        let mut d_theta = vec![0.0; batch * dim];
        let mut d_up = vec![0.0; batch * nl * dl];
        // Skip-path gradients into the down leg: weight level and layer level.
        let mut d_h: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut d_down: Vec<Vec<f64>> = Vec::with_capacity(nl);
        for (gi, g) in self.groups.iter().enumerate() {
            let n = g.range.len();
            let gt = &tape.groups[gi];
            let rows = batch * n;
            let mut d_fin = vec![0.0; rows * dw];
            for b in 0..batch {
                for (i, pos) in g.range.clone().enumerate() {
                    let d = d_out[b * dim + pos];
                    grad[self.proj_out_bias + pos] += d;
                    let f = &gt.wu[(b * n + i) * dw..(b * n + i + 1) * dw];
                    for c in 0..dw {
                        grad[self.proj_out + pos * dw + c] += d * f[c];
                        d_fin[(b * n + i) * dw + c] = d * p[self.proj_out + pos * dw + c];
                    }
                }
            }
            let d_merged = mix_backward(&g.weight_mix_up, p, &gt.wmu, d_fin, rows, grad);
            let d_wcat = g.weight_merge.backward(p, &gt.wmerge_in, &d_merged, rows, grad);
            let mut d_wu = vec![0.0; rows * dw];
            let mut dh = vec![0.0; rows * dw];
            for r in 0..rows {
                d_wu[r * dw..(r + 1) * dw].copy_from_slice(&d_wcat[r * 2 * dw..r * 2 * dw + dw]);
                dh[r * dw..(r + 1) * dw].copy_from_slice(&d_wcat[r * 2 * dw + dw..(r + 1) * 2 * dw]);
            }
            let d_lu = g.to_weights.backward(p, &gt.lu, &d_wu, batch, grad);
            let d_merged = mix_backward(&g.layer_mix_up, p, &gt.lmu, d_lu, batch, grad);
            let d_cat = g.layer_merge.backward(p, &gt.merge_in, &d_merged, batch, grad);
            let mut dd = vec![0.0; batch * dl];
            for b in 0..batch {
                if !self.isolate_groups {
                    d_up[(b * nl + gi) * dl..(b * nl + gi + 1) * dl]
                        .copy_from_slice(&d_cat[b * 2 * dl..b * 2 * dl + dl]);
                }
                dd[b * dl..(b + 1) * dl].copy_from_slice(&d_cat[b * 2 * dl + dl..(b + 1) * 2 * dl]);
            }
            d_h.push(dh);
            d_down.push(dd);
        }
        let d_gv = self.from_global.backward(p, &tape.g, &d_up, batch, grad);
        let d_gz = mix_backward(&self.global_mix, p, &tape.gmix, d_gv, batch, grad);
        let d_gin = self.to_global.backward(p, &tape.global_in, &d_gz, batch, grad);
        for (gi, g) in self.groups.iter().enumerate() {
            let n = g.range.len();
            let gt = &tape.groups[gi];
            let mut dl_vec = std::mem::take(&mut d_down[gi]);
            for b in 0..batch {
                for c in 0..dl {
                    dl_vec[b * dl + c] += d_gin[(b * nl + gi) * dl + c];
                }
            }
            let d_l = mix_backward(&g.layer_mix_down, p, &gt.lmd, dl_vec, batch, grad);
            let mut dh = g.to_layer.backward(p, &gt.h, &d_l, batch, grad);
            dh.iter_mut().zip(&d_h[gi]).for_each(|(a, b)| *a += b);
            let de = mix_backward(&g.weight_mix_down, p, &gt.wmd, dh, batch * n, grad);
            for b in 0..batch {
                for (i, pos) in g.range.clone().enumerate() {
                    let t = tape.theta[b * dim + pos];
                    let mut acc = 0.0;
                    for c in 0..dw {
                        let d = de[(b * n + i) * dw + c];
                        grad[self.proj_in + pos * dw + c] += d * t;
                        acc += d * p[self.proj_in + pos * dw + c];
                    }
                    d_theta[b * dim + pos] = acc;
                }
            }
        }
        d_theta
    }
}

/// `d theta / dt = A theta + b`, a reference model for tests and baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    dim: usize,
    params: Vec<f64>,
}

impl LinearDynamics {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            params: vec![0.0; dim * dim + dim],
        }
    }

    pub fn from_matrix(dim: usize, a: &[f64]) -> Self {
        let mut m = Self::new(dim);
        m.params[..dim * dim].copy_from_slice(a);
        m
    }
}

impl LatentDynamics for LinearDynamics {
    type Tape = (Vec<f64>, usize);

    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, theta: &[f64], batch: usize) -> Result<(Vec<f64>, Self::Tape)> {
        let d = self.dim;
        if theta.len() != batch * d {
            return Err(Error::Structural(format!(
                "expected {} latent values, got {}",
                batch * d,
                theta.len()
            )));
        }
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for i in 0..d {
                let row = &self.params[i * d..(i + 1) * d];
                out[b * d + i] = self.params[d * d + i]
                    + row
                        .iter()
                        .zip(&theta[b * d..(b + 1) * d])
                        .map(|(a, x)| a * x)
                        .sum::<f64>();
            }
        }
        Ok((out, (theta.to_vec(), batch)))
    }

    fn backward(&self, tape: &Self::Tape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let (theta, batch) = tape;
        let mut dx = vec![0.0; batch * d];
        for b in 0..*batch {
            for i in 0..d {
                let g = d_out[b * d + i];
                grad[d * d + i] += g;
                for j in 0..d {
                    grad[i * d + j] += g * theta[b * d + j];
                    dx[b * d + j] += g * self.params[i * d + j];
                }
            }
        }
        dx
    }
}
