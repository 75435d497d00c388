//! Convolutional hypernetwork encoder from grid snapshots to ansatz weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Conv1d, ConvCache, Linear, NormCache, Registry};

pub use crate::nn::periodic_pad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_levels: usize,
    pub base_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    pub input_len: usize,
    pub output_dim: usize,
}

fn default_kernel() -> usize {
    3
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_levels == 0 {
            errs.push("encoder.num_levels must be positive".to_string());
        }
        if self.base_channels == 0 {
            errs.push("encoder.base_channels must be positive".to_string());
        }
        if self.kernel_size.is_multiple_of(2) {
            errs.push("encoder.kernel_size must be odd".to_string());
        }
        if self.output_dim == 0 {
            errs.push("encoder.output_dim must be positive".to_string());
        }
        let factor = 1usize.checked_shl(self.num_levels as u32).unwrap_or(0);
        if factor == 0 || self.input_len == 0 || !self.input_len.is_multiple_of(factor) {
            errs.push(format!(
                "grid.num_grid = {} is not divisible by 2^{} (encoder.num_levels)",
                self.input_len, self.num_levels
            ));
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(Error::Config(errs.remove(0))),
            _ => Err(Error::ConfigList(errs)),
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn len_at(&self, level: usize) -> usize {
        self.input_len >> level
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    proj: Option<Conv1d>,
}

#[derive(Debug, Clone, Default)]
struct BlockTape {
    c1: ConvCache,
    n1: NormCache,
    pre_sin: Vec<f64>,
    c2: ConvCache,
    n2: NormCache,
    proj: ConvCache,
}

impl ResBlock {
    fn new(
        reg: &mut Registry,
        buf: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv1d::new(reg, &format!("{name}.conv1"), cin, cout, k, stride);
        let bn1 = BatchNorm1d::new(reg, buf, &format!("{name}.bn1"), cout);
        let conv2 = Conv1d::new(reg, &format!("{name}.conv2"), cout, cout, k, 1);
        let bn2 = BatchNorm1d::new(reg, buf, &format!("{name}.bn2"), cout);
        let proj =
            (cin != cout || stride != 1).then(|| Conv1d::new(reg, &format!("{name}.proj"), cin, cout, 1, stride));
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        p: &[f64],
        buf: &mut [f64],
        x: &[f64],
        batch: usize,
        len: usize,
        train: bool,
        t: &mut BlockTape,
    ) -> Vec<f64> {
        let h = self.conv1.forward(p, x, batch, len, &mut t.c1);
        let h = self.bn1.forward(p, buf, &h, train, &mut t.n1);
        let a: Vec<f64> = h.iter().map(|v| v.sin()).collect();
        t.pre_sin = h;
        let lout = self.conv1.out_len(len);
        let h = self.conv2.forward(p, &a, batch, lout, &mut t.c2);
        let mut out = self.bn2.forward(p, buf, &h, train, &mut t.n2);
        match &self.proj {
            Some(proj) => {
                let s = proj.forward(p, x, batch, len, &mut t.proj);
                out.iter_mut().zip(&s).for_each(|(o, v)| *o += v);
            }
            None => out.iter_mut().zip(x).for_each(|(o, v)| *o += v),
        }
        out
    }

    fn backward(&self, p: &[f64], t: &BlockTape, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.bn2.backward(p, &t.n2, dy, grad);
        let mut d = self.conv2.backward(p, &t.c2, &d, grad);
        d.iter_mut().zip(&t.pre_sin).for_each(|(g, z)| *g *= z.cos());
        let d = self.bn1.backward(p, &t.n1, &d, grad);
        let mut dx = self.conv1.backward(p, &t.c1, &d, grad);
        match &self.proj {
            Some(proj) => {
                let ds = proj.backward(p, &t.proj, dy, grad);
                dx.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
            }
            None => dx.iter_mut().zip(dy).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct EncoderTape {
    batch: usize,
    stem_conv: ConvCache,
    stem_norm: NormCache,
    stem_pre: Vec<f64>,
    blocks: Vec<BlockTape>,
    features: Vec<f64>,
    /// `(channels, length)` after the stem and after each level.
    pub level_shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    registry: Registry,
    buffer_registry: Registry,
    params: Vec<f64>,
    buffers: Vec<f64>,
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<ResBlock>,
    fc: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut reg = Registry::default();
        let mut buf = Registry::default();
        let stem = Conv1d::new(&mut reg, "stem.conv", 1, config.base_channels, k, 1);
        let stem_bn = BatchNorm1d::new(&mut reg, &mut buf, "stem.bn", config.base_channels);
        let mut blocks = Vec::with_capacity(2 * config.num_levels);
        for level in 1..=config.num_levels {
            let cin = config.channels_at(level - 1);
            let cout = config.channels_at(level);
            blocks.push(ResBlock::new(
                &mut reg,
                &mut buf,
                &format!("level{level}.down"),
                cin,
                cout,
                k,
                2,
            ));
            blocks.push(ResBlock::new(
                &mut reg,
                &mut buf,
                &format!("level{level}.regular"),
                cout,
                cout,
                k,
                1,
            ));
        }
        let flat = config.channels_at(config.num_levels) * config.len_at(config.num_levels);
        let fc = Linear::new(&mut reg, "fc", flat, config.output_dim, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = reg.initialize(&mut rng);
        let buffers = buf.initialize(&mut rng);
        Ok(Self {
            config,
            registry: reg,
            buffer_registry: buf,
            params,
            buffers,
            stem,
            stem_bn,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn buffer_registry(&self) -> &Registry {
        &self.buffer_registry
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn set_state(&mut self, params: Vec<f64>, buffers: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Structural(format!(
                "encoder state of sizes ({}, {}) does not match the architecture ({}, {})",
                params.len(),
                buffers.len(),
                self.params.len(),
                self.buffers.len()
            )));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    fn check_input(&self, u: &[f64], batch: usize) -> Result<()> {
        let n = self.config.input_len;
        if batch == 0 || u.len() != batch * n {
            return Err(Error::Config(format!(
                "encoder expects batches of fields with length {n}, got {} values for batch {batch}",
                u.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("encoder input contains non-finite values".into()));
        }
        Ok(())
    }

    fn run(&self, buffers: &mut [f64], u: &[f64], batch: usize, train: bool) -> (Vec<f64>, EncoderTape) {
        let p = &self.params;
        let mut tape = EncoderTape {
            batch,
            ..Default::default()
        };
        let mut len = self.config.input_len;
        let h = self.stem.forward(p, u, batch, len, &mut tape.stem_conv);
        let h = self.stem_bn.forward(p, buffers, &h, train, &mut tape.stem_norm);
        let mut x: Vec<f64> = h.iter().map(|v| v.sin()).collect();
        tape.stem_pre = h;
        tape.level_shapes.push((self.config.base_channels, len));
        for (i, block) in self.blocks.iter().enumerate() {
            let mut bt = BlockTape::default();
            x = block.forward(p, buffers, &x, batch, len, train, &mut bt);
            len = block.conv1.out_len(len);
            tape.blocks.push(bt);
            if i % 2 == 1 {
                tape.level_shapes.push((block.conv2.cout, len));
            }
        }
        // [C, B, L] to per-sample rows [B, C * L].
        let c = self.fc.din / len;
        let mut feats = vec![0.0; batch * c * len];
        for ci in 0..c {
            for b in 0..batch {
                let src = &x[(ci * batch + b) * len..(ci * batch + b + 1) * len];
                feats[b * c * len + ci * len..b * c * len + (ci + 1) * len].copy_from_slice(src);
            }
        }
        let out = self.fc.forward(p, &feats, batch);
        tape.features = feats;
        (out, tape)
    }

    /// Eval-mode encoding of `[batch, N]` fields into `[batch, output_dim]`.
    pub fn encode(&self, u: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(u, batch)?;
        let mut buffers = self.buffers.clone();
        Ok(self.run(&mut buffers, u, batch, false).0)
    }

    /// Forward pass that keeps a tape for [`Encoder::backward`]. Train mode
    /// normalises with batch statistics and updates the running averages.
    pub fn forward(&mut self, u: &[f64], batch: usize, mode: Mode) -> Result<(Vec<f64>, EncoderTape)> {
        self.check_input(u, batch)?;
        let mut buffers = std::mem::take(&mut self.buffers);
        let result = self.run(&mut buffers, u, batch, mode == Mode::Train);
        self.buffers = buffers;
        Ok(result)
    }

    /// Back-propagates `d_out` (`[batch, output_dim]`); accumulates into
    /// `grad` (length `num_params`) and returns the input gradient `[batch, N]`.
    pub fn backward(&self, tape: &EncoderTape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let p = &self.params;
        let batch = tape.batch;
        let dfeat = self.fc.backward(p, &tape.features, d_out, batch, grad);
        let len = self.config.len_at(self.config.num_levels);
        let c = self.fc.din / len;
        let mut dx = vec![0.0; batch * c * len];
        for ci in 0..c {
            for b in 0..batch {
                dx[(ci * batch + b) * len..(ci * batch + b + 1) * len]
                    .copy_from_slice(&dfeat[b * c * len + ci * len..b * c * len + (ci + 1) * len]);
            }
        }
        for (block, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            dx = block.backward(p, bt, &dx, grad);
        }
        dx.iter_mut().zip(&tape.stem_pre).for_each(|(g, z)| *g *= z.cos());
        let d = self.stem_bn.backward(p, &tape.stem_norm, &dx, grad);
        self.stem.backward(p, &tape.stem_conv, &d, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_levels: 2,
            base_channels: 2,
            kernel_size: 3,
            input_len: 16,
            output_dim: 5,
        }
    }

    #[test]
    fn rejects_indivisible_grid() {
        let mut cfg = tiny();
        cfg.input_len = 500;
        cfg.num_levels = 4;
        assert!(matches!(Encoder::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_follow_levels() {
        let mut enc = Encoder::new(tiny(), 1).unwrap();
        let u: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let (out, tape) = enc.forward(&u, 2, Mode::Train).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(tape.level_shapes, vec![(2, 16), (4, 8), (8, 4)]);
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut enc = Encoder::new(tiny(), 1).unwrap();
        let u: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).cos() + 0.5).collect();
        let before = enc.buffers().to_vec();
        enc.forward(&u, 2, Mode::Eval).unwrap();
        assert_eq!(enc.buffers(), &before[..]);
        enc.forward(&u, 2, Mode::Train).unwrap();
        assert_ne!(enc.buffers(), &before[..]);
    }
}
