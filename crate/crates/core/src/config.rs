//! Experiment configuration: per-equation defaults, merging of user
//! documents over them, and aggregated validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ansatz::AnsatzSpec;
use crate::data::{domain_origin, GenerateConfig, InitialConditionSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::default_range;
use crate::hyper_unet::HyperUNetConfig;
use crate::rollout::{Integrator, RolloutOptions, Tolerances};
use crate::spectral::{EquationKind, EquationSpec, Grid1D};
use crate::training::{Stage, TrainingConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
/// Evaluation initial conditions are drawn with `seed ^ EVAL_SEED_SALT`.
pub const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub num_traj: usize,
    pub num_steps: usize,
    pub eval_num_traj: usize,
    pub dt_save: f64,
    pub dt_solver: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderBlock {
    pub num_levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperUNetBlock {
    pub d_w: usize,
    pub d_l: usize,
    pub d_g: usize,
    pub mixing_blocks: usize,
    /// Latent entries per group; filled from the ansatz layout.
    pub group_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlocks {
    pub encoder: TrainingConfig,
    pub pretrain: TrainingConfig,
    pub finetune: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutBlock {
    pub integrator: Integrator,
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationBlock {
    /// Save-point indices at which energy ratios are reported.
    pub ranges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmdBlock {
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub equation: EquationSpec,
    pub grid: Grid1D,
    pub data: DataBlock,
    pub ic: InitialConditionSpec,
    pub ansatz: AnsatzSpec,
    pub encoder: EncoderBlock,
    pub hyper_unet: HyperUNetBlock,
    pub training: TrainingBlocks,
    pub rollout: RolloutBlock,
    pub evaluation: EvaluationBlock,
    pub dmd: DmdBlock,
}

fn default_dt_save(kind: EquationKind) -> f64 {
    match kind {
        EquationKind::ViscidBurgers => 0.01,
        EquationKind::KuramotoSivashinsky => 0.25,
        EquationKind::Kdv => 0.01,
    }
}

impl ExperimentConfig {
    pub fn defaults(kind: EquationKind) -> Self {
        let (x_min, length) = kind.default_domain();
        let (levels, d_l, d_g, rank) = match kind {
            EquationKind::ViscidBurgers => (5, 128, 512, 64),
            EquationKind::KuramotoSivashinsky => (4, 512, 1024, 64),
            EquationKind::Kdv => (4, 512, 1024, 80),
        };
        let seed = 0;
        let training = |stage: Stage, offset: u64| TrainingConfig {
            seed: seed + offset,
            ..TrainingConfig::defaults(kind, stage)
        };
        Self {
            schema_version: CONFIG_VERSION,
            seed,
            equation: EquationSpec::default_for(kind),
            grid: Grid1D {
                x_min,
                length,
                num_points: 512,
            },
            data: DataBlock {
                num_traj: 32,
                num_steps: 300,
                eval_num_traj: 8,
                dt_save: default_dt_save(kind),
                dt_solver: kind.default_dt_solver(),
            },
            ic: InitialConditionSpec::default_for(kind, length),
            ansatz: AnsatzSpec::default_for(kind, length),
            encoder: EncoderBlock {
                num_levels: levels,
                base_channels: 2,
                kernel_size: 3,
            },
            hyper_unet: HyperUNetBlock {
                d_w: 4,
                d_l,
                d_g,
                mixing_blocks: 1,
                group_sizes: None,
            },
            training: TrainingBlocks {
                encoder: training(Stage::Encoder, 1),
                pretrain: training(Stage::Pretrain, 2),
                finetune: training(Stage::Finetune, 3),
            },
            rollout: RolloutBlock {
                integrator: Integrator::FixedRk4,
                rtol: 1e-6,
                atol: 1e-9,
            },
            evaluation: EvaluationBlock {
                ranges: vec![default_range(kind)],
            },
            dmd: DmdBlock { rank },
        }
    }

    /// Reads a JSON document and resolves it.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        resolve(&value)
    }

    pub fn kind(&self) -> EquationKind {
        self.equation.kind
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn training(&self, stage: Stage) -> &TrainingConfig {
        match stage {
            Stage::Encoder => &self.training.encoder,
            Stage::Pretrain => &self.training.pretrain,
            Stage::Finetune => &self.training.finetune,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_levels: self.encoder.num_levels,
            base_channels: self.encoder.base_channels,
            kernel_size: self.encoder.kernel_size,
            input_len: self.grid.num_points,
            output_dim: self.ansatz.num_params(),
        }
    }

    pub fn hyper_unet_config(&self) -> HyperUNetConfig {
        let h = &self.hyper_unet;
        let mut cfg = HyperUNetConfig::for_ansatz(&self.ansatz, h.d_w, h.d_l, h.d_g);
        cfg.mixing_blocks = h.mixing_blocks;
        if let Some(g) = &h.group_sizes {
            cfg.group_sizes = g.clone();
        }
        cfg
    }

    /// Training data, or the held-out evaluation set when `eval` is set.
    pub fn generate_config(&self, eval: bool) -> GenerateConfig {
        GenerateConfig {
            eq: self.equation,
            ic: self.ic.clone(),
            grid: self.grid,
            num_traj: if eval {
                self.data.eval_num_traj
            } else {
                self.data.num_traj
            },
            num_steps: self.data.num_steps,
            dt_save: self.data.dt_save,
            dt_solver: self.data.dt_solver,
            seed: if eval { self.seed ^ EVAL_SEED_SALT } else { self.seed },
        }
    }

    pub fn rollout_options(&self, integrator: Integrator, num_saves: usize) -> Result<RolloutOptions> {
        Ok(RolloutOptions {
            dt_save: self.data.dt_save,
            num_saves,
            integrator,
            substeps: self.training.finetune.rk4_substeps(self.data.dt_save)?,
            tol: Tolerances {
                rtol: self.rollout.rtol,
                atol: self.rollout.atol,
            },
        })
    }

    /// Every violated cross-field constraint, as field-path messages.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.schema_version != CONFIG_VERSION {
            errs.push(format!(
                "schema_version {} is not supported (expected {CONFIG_VERSION})",
                self.schema_version
            ));
        }
        let n = self.grid.num_points;
        if let Err(e) = Grid1D::new(self.grid.x_min, self.grid.length, n) {
            errs.push(format!("grid: {e}"));
        }
        if !(self.equation.nu > 0.0) {
            errs.push("equation.nu must be positive".into());
        }
        let levels = self.encoder.num_levels;
        if levels == 0 || levels > 16 || !n.is_multiple_of(1usize << levels) {
            errs.push(format!(
                "grid.num_points ({n}) must be divisible by 2^encoder.num_levels (2^{levels})"
            ));
        }
        if self.encoder.base_channels == 0 {
            errs.push("encoder.base_channels must be positive".into());
        }
        if self.encoder.kernel_size.is_multiple_of(2) {
            errs.push("encoder.kernel_size must be odd".into());
        }
        let d = &self.data;
        if d.num_traj == 0 || d.eval_num_traj == 0 {
            errs.push("data.num_traj and data.eval_num_traj must be positive".into());
        }
        if d.num_steps < 2 {
            errs.push("data.num_steps must be at least 2".into());
        }
        if !(d.dt_solver > 0.0 && d.dt_save > 0.0) {
            errs.push("data.dt_save and data.dt_solver must be positive".into());
        } else {
            let r = d.dt_save / d.dt_solver;
            if r < 1.0 - 1e-9 || (r - r.round()).abs() > 1e-9 * r {
                errs.push(format!(
                    "data.dt_save ({}) must be a multiple of data.dt_solver ({})",
                    d.dt_save, d.dt_solver
                ));
            }
        }
        if let Err(e) = self.ic.validate() {
            errs.push(format!("ic: {e}"));
        }
        if let Err(e) = self.ansatz.validate() {
            errs.push(format!("ansatz: {e}"));
        }
        if (self.ansatz.domain_length - self.grid.length).abs() > 1e-12 * self.grid.length.abs() {
            errs.push(format!(
                "ansatz.domain_length ({}) must equal grid.length ({})",
                self.ansatz.domain_length, self.grid.length
            ));
        }
        let h = &self.hyper_unet;
        if h.d_w == 0 || h.d_l == 0 || h.d_g == 0 || h.mixing_blocks == 0 {
            errs.push("hyper_unet widths and mixing_blocks must be positive".into());
        }
        if let Some(g) = &h.group_sizes {
            let dim: usize = g.iter().sum();
            if dim != self.ansatz.num_params() {
                errs.push(format!(
                    "hyper_unet.group_sizes sum to {dim}, but the ansatz has {} parameters",
                    self.ansatz.num_params()
                ));
            }
        }
        for (name, stage, cfg) in [
            ("encoder", Stage::Encoder, &self.training.encoder),
            ("pretrain", Stage::Pretrain, &self.training.pretrain),
            ("finetune", Stage::Finetune, &self.training.finetune),
        ] {
            let prefix = format!("training.{name}");
            if cfg.stage != stage {
                errs.push(format!("{prefix}.stage must be {}", stage.name()));
            }
            errs.extend(cfg.violations(&prefix));
            if cfg.seq_length > d.num_steps {
                errs.push(format!(
                    "{prefix}.seq_length ({}) exceeds data.num_steps ({})",
                    cfg.seq_length, d.num_steps
                ));
            }
            if stage != Stage::Encoder && d.dt_save > 0.0 {
                if let Err(e) = cfg.rk4_substeps(d.dt_save) {
                    errs.push(format!("{prefix}.rk4_dt: {e}"));
                }
            }
        }
        if !(self.rollout.rtol > 0.0 && self.rollout.atol > 0.0) {
            errs.push("rollout.rtol and rollout.atol must be positive".into());
        }
        if self.dmd.rank == 0 {
            errs.push("dmd.rank must be positive".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }
}

fn equation_kind(user: &Value) -> Result<EquationKind> {
    let raw = match user.get("equation") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Object(m)) => match m.get("kind") {
            Some(Value::String(s)) => s.clone(),
            _ => return Err(Error::ConfigList(vec!["equation.kind is required".into()])),
        },
        _ => return Err(Error::ConfigList(vec!["equation.kind is required".into()])),
    };
    EquationKind::parse(&raw).map_err(|e| Error::ConfigList(vec![format!("equation.kind: {e}")]))
}

/// Recursive object merge; a nested object whose `kind` differs from the
/// default's replaces it wholesale.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn has(user: &Value, block: &str, field: &str) -> bool {
    user.get(block).and_then(|b| b.get(field)).is_some()
}

/// Expands `user` over the defaults of its equation and validates the
/// result, reporting every violation at once.
pub fn resolve(user: &Value) -> Result<ExperimentConfig> {
    if !user.is_object() {
        return Err(Error::ConfigList(vec!["configuration must be a JSON object".into()]));
    }
    let kind = equation_kind(user)?;
    let mut user = user.clone();
    user["equation"] = match user["equation"].take() {
        Value::Object(mut m) => {
            m.insert("kind".into(), serde_json::to_value(kind)?);
            Value::Object(m)
        }
        _ => serde_json::json!({ "kind": kind }),
    };
    let mut merged = ExperimentConfig::defaults(kind).to_value();
    // Follow a user-chosen domain length or seed where the dependent
    // fields were left unset.
    if let Some(length) = user.get("grid").and_then(|g| g.get("length")).and_then(Value::as_f64) {
        if !has(&user, "grid", "x_min") {
            merged["grid"]["x_min"] = domain_origin(kind, length).into();
        }
        if !has(&user, "ansatz", "domain_length") {
            merged["ansatz"]["domain_length"] = length.into();
        }
    }
    if let Some(seed) = user.get("seed").and_then(Value::as_u64) {
        for (i, stage) in ["encoder", "pretrain", "finetune"].iter().enumerate() {
            merged["training"][stage]["seed"] = (seed + i as u64 + 1).into();
        }
    }
    merge(&mut merged, &user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&merged)
        .map_err(|e| Error::ConfigList(vec![format!("{}: {}", e.path(), e.inner())]))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets the top-level seed of a raw document (the `--seed` override).
pub fn override_seed(user: &mut Value, seed: u64) {
    if let Value::Object(m) = user {
        m.insert("seed".into(), seed.into());
        if let Some(Value::Object(t)) = m.get_mut("training") {
            for stage in t.values_mut() {
                if let Value::Object(s) = stage {
                    s.remove("seed");
                }
            }
        }
    }
}
