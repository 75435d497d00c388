//! Small neural-network building blocks with explicit backward passes.
//!
//! Parameters live in one flat `Vec<f64>` per model; layers only remember
//! offsets into it, and gradients accumulate into a buffer of the same
//! layout. Convolution activations are stored channel-major as `[C, B, L]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `c = a * b + beta * c` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`,
/// with optional transposition of the stored operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named slices of a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub entries: Vec<ParamEntry>,
    pub len: usize,
}

impl Registry {
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let offset = self.len;
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            init,
        };
        self.len += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn initialize(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for e in &self.entries {
            let slot = &mut out[e.offset..e.offset + e.len()];
            match e.init {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = 1.0),
                Init::Uniform(bound) => slot
                    .iter_mut()
                    .for_each(|v| *v = bound * (2.0 * rng.random::<f64>() - 1.0)),
            }
        }
        out
    }
}

/// Circular padding of a single field by `pad` values on both sides.
pub fn periodic_pad(u: &[f64], pad: usize) -> Vec<f64> {
    let n = u.len();
    assert!(pad < n.max(1), "pad must be smaller than the field");
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend_from_slice(&u[n - pad..]);
    out.extend_from_slice(u);
    out.extend_from_slice(&u[..pad]);
    out
}

/// 1D convolution with circular padding `(kernel - 1) / 2` and optional stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConvCache {
    col: Vec<f64>,
    batch: usize,
    len_in: usize,
}

impl Conv1d {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = reg.alloc(format!("{name}.w"), &[cout, cin, kernel], Init::Uniform(bound));
        let b = reg.alloc(format!("{name}.b"), &[cout], Init::Zeros);
        Self {
            cin,
            cout,
            kernel,
            stride,
            w,
            b,
        }
    }

    pub fn out_len(&self, len_in: usize) -> usize {
        len_in / self.stride
    }

    fn im2col(&self, x: &[f64], batch: usize, len_in: usize, col: &mut Vec<f64>) {
        let lout = self.out_len(len_in);
        let half = (self.kernel / 2) as isize;
        let n = batch * lout;
        col.clear();
        col.resize(self.cin * self.kernel * n, 0.0);
        let l = len_in as isize;
        for c in 0..self.cin {
            for j in 0..self.kernel {
                let row = &mut col[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                for bi in 0..batch {
                    let src = &x[(c * batch + bi) * len_in..(c * batch + bi + 1) * len_in];
                    let dst = &mut row[bi * lout..(bi + 1) * lout];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let idx = (t * self.stride) as isize + j as isize - half;
                        *d = src[idx.rem_euclid(l) as usize];
                    }
                }
            }
        }
    }

    /// `x: [cin, batch, len_in]` to `[cout, batch, len_in / stride]`.
    pub fn forward(&self, p: &[f64], x: &[f64], batch: usize, len_in: usize, cache: &mut ConvCache) -> Vec<f64> {
        let lout = self.out_len(len_in);
        let n = batch * lout;
        self.im2col(x, batch, len_in, &mut cache.col);
        cache.batch = batch;
        cache.len_in = len_in;
        let mut y = vec![0.0; self.cout * n];
        for o in 0..self.cout {
            let bias = p[self.b + o];
            y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bias);
        }
        let kk = self.cin * self.kernel;
        gemm(
            self.cout,
            kk,
            n,
            &p[self.w..self.w + self.cout * kk],
            false,
            &cache.col,
            false,
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(&self, p: &[f64], cache: &ConvCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (batch, len_in) = (cache.batch, cache.len_in);
        let lout = self.out_len(len_in);
        let n = batch * lout;
        let kk = self.cin * self.kernel;
        for o in 0..self.cout {
            grad[self.b + o] += dy[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        gemm(
            self.cout,
            n,
            kk,
            dy,
            false,
            &cache.col,
            true,
            1.0,
            &mut grad[self.w..self.w + self.cout * kk],
        );
        let mut dcol = vec![0.0; kk * n];
        gemm(
            kk,
            self.cout,
            n,
            &p[self.w..self.w + self.cout * kk],
            true,
            dy,
            false,
            0.0,
            &mut dcol,
        );
        let mut dx = vec![0.0; self.cin * batch * len_in];
        let half = (self.kernel / 2) as isize;
        let l = len_in as isize;
        for c in 0..self.cin {
            for j in 0..self.kernel {
                let row = &dcol[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                for bi in 0..batch {
                    let dst = &mut dx[(c * batch + bi) * len_in..(c * batch + bi + 1) * len_in];
                    for t in 0..lout {
                        let idx = (t * self.stride) as isize + j as isize - half;
                        dst[idx.rem_euclid(l) as usize] += row[bi * lout + t];
                    }
                }
            }
        }
        dx
    }
}

/// Batch normalisation over `(batch, length)` per channel, with running
/// statistics for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Offsets of running mean and variance in the buffer vector.
    pub running_mean: usize,
    pub running_var: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    per_channel: usize,
    train: bool,
}

impl BatchNorm1d {
    pub fn new(reg: &mut Registry, buffers: &mut Registry, name: &str, channels: usize) -> Self {
        let gamma = reg.alloc(format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = reg.alloc(format!("{name}.beta"), &[channels], Init::Zeros);
        let running_mean = buffers.alloc(format!("{name}.running_mean"), &[channels], Init::Zeros);
        let running_var = buffers.alloc(format!("{name}.running_var"), &[channels], Init::Ones);
        Self {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `x: [C, M]` where `M = batch * length`. Training mode normalises with
    /// batch statistics and updates the running averages in `buffers`.
    pub fn forward(&self, p: &[f64], buffers: &mut [f64], x: &[f64], train: bool, cache: &mut NormCache) -> Vec<f64> {
        let m = x.len() / self.channels;
        cache.per_channel = m;
        cache.train = train;
        cache.xhat.clear();
        cache.xhat.reserve(x.len());
        cache.inv_std.clear();
        let mut y = Vec::with_capacity(x.len());
        for c in 0..self.channels {
            let xs = &x[c * m..(c + 1) * m];
            let (mean, var) = if train {
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let rm = &mut buffers[self.running_mean + c];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
                let rv = &mut buffers[self.running_var + c];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
                (mean, var)
            } else {
                (buffers[self.running_mean + c], buffers[self.running_var + c])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            cache.inv_std.push(inv);
            let (g, b) = (p[self.gamma + c], p[self.beta + c]);
            for &v in xs {
                let xh = (v - mean) * inv;
                cache.xhat.push(xh);
                y.push(g * xh + b);
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let m = cache.per_channel;
        let mut dx = Vec::with_capacity(dy.len());
        for c in 0..self.channels {
            let dys = &dy[c * m..(c + 1) * m];
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let sum_dy: f64 = dys.iter().sum();
            let sum_dy_xh: f64 = dys.iter().zip(xh).map(|(a, b)| a * b).sum();
            grad[self.gamma + c] += sum_dy_xh;
            grad[self.beta + c] += sum_dy;
            let g = p[self.gamma + c];
            let inv = cache.inv_std[c];
            if cache.train {
                let scale = g * inv / m as f64;
                for (d, x) in dys.iter().zip(xh) {
                    dx.push(scale * (m as f64 * d - sum_dy - x * sum_dy_xh));
                }
            } else {
                dx.extend(dys.iter().map(|d| d * g * inv));
            }
        }
        dx
    }
}

/// Dense layer on row vectors: `y[b] = W x[b] + bias`, `W: [out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new(reg: &mut Registry, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self::with_init(reg, name, din, dout, bias, Init::Uniform(bound))
    }

    pub fn with_init(reg: &mut Registry, name: &str, din: usize, dout: usize, bias: bool, init: Init) -> Self {
        let w = reg.alloc(format!("{name}.w"), &[dout, din], init);
        let b = bias.then(|| reg.alloc(format!("{name}.b"), &[dout], Init::Zeros));
        Self { din, dout, w, b }
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }

    /// `x: [batch, din]` to `[batch, dout]`.
    pub fn forward(&self, p: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = vec![0.0; batch * self.dout];
        if let Some(b) = self.b {
            for row in y.chunks_mut(self.dout) {
                row.copy_from_slice(&p[b..b + self.dout]);
            }
        }
        gemm(
            batch,
            self.din,
            self.dout,
            x,
            false,
            &p[self.w..self.w + self.din * self.dout],
            true,
            1.0,
            &mut y,
        );
        y
    }

    /// Returns `dx`; accumulates parameter gradients.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], batch: usize, grad: &mut [f64]) -> Vec<f64> {
        if let Some(b) = self.b {
            for row in dy.chunks(self.dout) {
                for (g, d) in grad[b..b + self.dout].iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        gemm(
            self.dout,
            batch,
            self.din,
            dy,
            true,
            x,
            false,
            1.0,
            &mut grad[self.w..self.w + self.din * self.dout],
        );
        let mut dx = vec![0.0; batch * self.din];
        gemm(
            batch,
            self.dout,
            self.din,
            dy,
            false,
            &p[self.w..self.w + self.din * self.dout],
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}

/// Layer normalisation over the last axis of `[rows, width]` with gain and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub width: usize,
    pub gain: usize,
    pub bias: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(reg: &mut Registry, name: &str, width: usize) -> Self {
        let gain = reg.alloc(format!("{name}.gain"), &[width], Init::Ones);
        let bias = reg.alloc(format!("{name}.bias"), &[width], Init::Zeros);
        Self {
            width,
            gain,
            bias,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], cache: &mut LayerNormCache) -> Vec<f64> {
        let w = self.width;
        cache.xhat.clear();
        cache.inv_std.clear();
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            cache.inv_std.push(inv);
            for (i, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                cache.xhat.push(xh);
                y.push(p[self.gain + i] * xh + p[self.bias + i]);
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = self.width;
        let mut dx = Vec::with_capacity(dy.len());
        let mut dxh = vec![0.0; w];
        for (r, row) in dy.chunks(w).enumerate() {
            let xh = &cache.xhat[r * w..(r + 1) * w];
            for i in 0..w {
                grad[self.gain + i] += row[i] * xh[i];
                grad[self.bias + i] += row[i];
                dxh[i] = row[i] * p[self.gain + i];
            }
            let s1: f64 = dxh.iter().sum();
            let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[r];
            for i in 0..w {
                dx.push(inv / w as f64 * (w as f64 * dxh[i] - s1 - xh[i] * s2));
            }
        }
        dx
    }
}

#[inline]
pub fn swish(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub fn swish_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s + z * s * (1.0 - s)
}
