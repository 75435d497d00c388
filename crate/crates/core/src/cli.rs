//! Command-line front end. Every subcommand writes into a fresh run
//! directory holding its artifacts, `config.resolved.json` and
//! `metrics.ndjson`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::ansatz::Ansatz;
use crate::checkpoint::{self, Checkpoint, CheckpointKind};
use crate::config::{self, ExperimentConfig};
use crate::data::{self, TrajectoryDataset};
use crate::dmd::{fit_dmd, DmdModel};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluation::{self, EvaluationReport, ReportExtras};
use crate::hyper_unet::{HyperUNet, LatentDynamics};
use crate::rollout::{self, Integrator, RolloutResult, RolloutSidecar};
use crate::runtime;
use crate::training::{self, LatentCache, MetricsLog, Stage};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const LATENT_TENSOR: &str = "latent";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "latentpde", version, about = "Latent-space surrogates for 1D periodic PDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntegratorArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the PDE and write a trajectory dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train the encoder on a dataset.
    TrainEncoder {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pretrain or fine-tune the latent dynamics.
    TrainDynamics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run directory of `train-encoder`.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Run directory of the pretraining stage (fine-tuning only).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll trained models out from the initial conditions of a dataset.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        /// Dataset whose first snapshots seed the rollouts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        dynamics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        integrator: Option<IntegratorArg>,
        /// Number of save intervals; defaults to the dataset length.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a prediction directory against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder run directory, for the consistency metric.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the DMD baseline and optionally roll it out.
    Dmd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        /// Dataset to roll out from; the prediction is written into `out`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Render figures from a stored report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Config(_) | Error::ConfigList(_) => EXIT_CONFIG,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            config,
            out,
            seed,
            split,
        } => {
            let cfg = load_config(&config, seed)?;
            generate(&cfg, split == Split::Eval, &out).map(|_| ())
        }
        Command::TrainEncoder {
            config,
            data,
            out,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = steps {
                cfg.training.encoder.training_steps = s;
            }
            train_encoder(&cfg, &data, &out)
        }
        Command::TrainDynamics {
            config,
            data,
            encoder,
            stage,
            init,
            out,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config, seed)?;
            let stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            if let Some(s) = steps {
                match stage {
                    Stage::Finetune => cfg.training.finetune.training_steps = s,
                    _ => cfg.training.pretrain.training_steps = s,
                }
            }
            train_dynamics(&cfg, stage, &data, &encoder, init.as_deref(), &out)
        }
        Command::Rollout {
            config,
            data,
            encoder,
            dynamics,
            out,
            integrator,
            steps,
        } => {
            let cfg = load_config(&config, None)?;
            let integrator = match integrator {
                Some(IntegratorArg::Fixed) => Integrator::FixedRk4,
                Some(IntegratorArg::Adaptive) => Integrator::AdaptiveDp,
                None => cfg.rollout.integrator,
            };
            rollout_command(&cfg, &data, &encoder, &dynamics, integrator, steps, &out)
        }
        Command::Evaluate {
            pred,
            truth,
            out,
            encoder,
            config,
        } => {
            let cfg = config.map(|c| load_config(&c, None)).transpose()?;
            evaluate(&pred, &truth, encoder.as_deref(), cfg.as_ref(), &out).map(|_| ())
        }
        Command::Dmd {
            config,
            data,
            out,
            rank,
            truth,
        } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(r) = rank {
                cfg.dmd.rank = r;
            }
            dmd_command(&cfg, &data, truth.as_deref(), &out)
        }
        Command::Plot { report, out } => {
            let rep = EvaluationReport::load(&report)?;
            data::prepare_output_dir(&out)?;
            evaluation::plot_report(&rep, &out)?;
            Ok(())
        }
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config::override_seed(&mut value, s);
    }
    config::resolve(&value)
}

/// Fresh run directory with the resolved config. The metrics log is
/// created empty and handed back for stages that record into it.
fn start_run(cfg: Option<&ExperimentConfig>, out: &Path) -> Result<MetricsLog> {
    data::prepare_output_dir(out)?;
    if let Some(c) = cfg {
        c.save_resolved(out)?;
    }
    let file = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    Ok(MetricsLog::to_writer(Box::new(file)))
}

fn embedded_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    config::resolve(&ck.config)
}

pub fn generate(cfg: &ExperimentConfig, eval: bool, out: &Path) -> Result<TrajectoryDataset> {
    start_run(Some(cfg), out)?;
    let ds = data::generate_trajectories(&cfg.generate_config(eval))?;
    ds.write_files(out)?;
    log::info!("wrote {} trajectories to {}", ds.num_traj, out.display());
    Ok(ds)
}

pub fn encoder_checkpoint(enc: &Encoder, cfg: &ExperimentConfig, meta: serde_json::Value) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Encoder);
    ck.push_registry("param.", enc.registry(), enc.params())?;
    ck.push_registry("buffer.", enc.buffer_registry(), enc.buffers())?;
    ck.config = cfg.to_value();
    ck.meta = meta;
    Ok(ck)
}

/// Encoder and ansatz from an encoder run directory.
pub fn load_encoder(dir: &Path) -> Result<(Encoder, Ansatz, ExperimentConfig)> {
    let ck = Checkpoint::load(dir, CheckpointKind::Encoder)?;
    let cfg = embedded_config(&ck)?;
    let mut enc = Encoder::new(cfg.encoder_config(), 0)?;
    let params = ck.read_registry("param.", enc.registry())?;
    let buffers = ck.read_registry("buffer.", enc.buffer_registry())?;
    enc.set_state(params, buffers)?;
    let ansatz = Ansatz::new(cfg.ansatz.clone())?;
    Ok((enc, ansatz, cfg))
}

pub fn dynamics_checkpoint(net: &HyperUNet, cfg: &ExperimentConfig, meta: serde_json::Value) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Dynamics);
    ck.push_registry("param.", net.registry(), net.params())?;
    ck.config = cfg.to_value();
    ck.meta = meta;
    Ok(ck)
}

pub fn load_dynamics(dir: &Path) -> Result<(HyperUNet, ExperimentConfig)> {
    let ck = Checkpoint::load(dir, CheckpointKind::Dynamics)?;
    let cfg = embedded_config(&ck)?;
    let mut net = HyperUNet::new(cfg.hyper_unet_config(), 0)?;
    let params = ck.read_registry("param.", net.registry())?;
    net.set_params(params)?;
    Ok((net, cfg))
}

fn check_dataset(cfg: &ExperimentConfig, ds: &TrajectoryDataset) -> Result<()> {
    if ds.num_grid() != cfg.grid.num_points || ds.eq.kind != cfg.kind() {
        return Err(Error::Config(format!(
            "dataset ({}, N = {}) does not match the configuration ({}, N = {})",
            ds.eq.kind.name(),
            ds.num_grid(),
            cfg.kind().name(),
            cfg.grid.num_points
        )));
    }
    Ok(())
}

pub fn train_encoder(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let ds = data::load_dataset(data_dir)?;
    check_dataset(cfg, &ds)?;
    let mut log = start_run(Some(cfg), out)?;
    let ansatz = Ansatz::new(cfg.ansatz.clone())?;
    let mut enc = Encoder::new(cfg.encoder_config(), cfg.training.encoder.seed)?;
    let summary = training::train_encoder(&mut enc, &ansatz, &ds, &cfg.training.encoder, &mut log)?;
    let meta = serde_json::json!({ "stage": "encoder", "steps": summary.steps, "final_loss": summary.final_loss });
    encoder_checkpoint(&enc, cfg, meta)?.save(out)?;
    Ok(())
}

pub fn train_dynamics(
    cfg: &ExperimentConfig,
    stage: Stage,
    data_dir: &Path,
    encoder_dir: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ds = data::load_dataset(data_dir)?;
    check_dataset(cfg, &ds)?;
    let (enc, _, _) = load_encoder(encoder_dir)?;
    let mut net = match stage {
        Stage::Finetune => {
            let dir =
                init.ok_or_else(|| Error::MissingArtifact(PathBuf::from("<pretrain run directory; pass --init>")))?;
            if !checkpoint::exists(dir, CheckpointKind::Dynamics) {
                return Err(Error::MissingArtifact(checkpoint::manifest_path(
                    dir,
                    CheckpointKind::Dynamics,
                )));
            }
            load_dynamics(dir)?.0
        }
        _ => HyperUNet::new(cfg.hyper_unet_config(), cfg.training.pretrain.seed)?,
    };
    let tcfg = cfg.training(stage);
    let mut log = start_run(Some(cfg), out)?;
    let cache = LatentCache::build(&enc, &ds, 64)?;
    let summary = training::train_dynamics(&mut net, &cache, tcfg, &mut log)?;
    let meta = serde_json::json!({ "stage": stage.name(), "steps": summary.steps, "final_loss": summary.final_loss });
    dynamics_checkpoint(&net, cfg, meta)?.save(out)?;
    Ok(())
}

/// Rolls every trajectory of `ds` from its first snapshot.
pub fn rollout_dataset<D: LatentDynamics + Sync>(
    cfg: &ExperimentConfig,
    ds: &TrajectoryDataset,
    enc: &Encoder,
    ansatz: &Ansatz,
    dynamics: &D,
    integrator: Integrator,
    num_saves: usize,
) -> Result<Vec<RolloutResult>> {
    let opts = cfg.rollout_options(integrator, num_saves)?;
    runtime::install(|| {
        (0..ds.num_traj)
            .into_par_iter()
            .map(|t| {
                rollout::rollout(ds.snapshot(t, 0), enc, ansatz, dynamics, &ds.grid, &opts).map_err(|e| {
                    Error::Trajectory {
                        index: t,
                        source: Box::new(e),
                    }
                })
            })
            .collect()
    })
}

pub fn rollout_command(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    encoder_dir: &Path,
    dynamics_dir: &Path,
    integrator: Integrator,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let ds = data::load_dataset(data_dir)?;
    check_dataset(cfg, &ds)?;
    let (enc, ansatz, _) = load_encoder(encoder_dir)?;
    let (net, _) = load_dynamics(dynamics_dir)?;
    start_run(Some(cfg), out)?;
    let num_saves = steps.map_or(ds.num_steps, |s| s + 1);
    let results = rollout_dataset(cfg, &ds, &enc, &ansatz, &net, integrator, num_saves)?;
    for (i, r) in results.iter().enumerate() {
        if !r.stable {
            log::warn!("trajectory {i} diverged after t = {}", r.stable_until);
        }
    }
    let mut pred = ds.clone();
    pred.num_steps = num_saves;
    pred.u = results.iter().flat_map(|r| r.snapshots.iter().copied()).collect();
    pred.write_files(out)?;
    RolloutSidecar::from_results(&results)?.save(out)?;
    let dim = ansatz.num_params();
    let latent: Vec<f64> = results.iter().flat_map(|r| r.latent_traj.iter().copied()).collect();
    let mut ck = Checkpoint::new(CheckpointKind::Thetas);
    ck.push(LATENT_TENSOR, &[ds.num_traj, num_saves, dim], &latent)?;
    ck.config = cfg.to_value();
    ck.save(out)?;
    Ok(())
}

/// Metrics of `pred_dir` against `truth_dir`, using whatever side
/// artifacts the prediction directory holds.
pub fn evaluate(
    pred_dir: &Path,
    truth_dir: &Path,
    encoder_dir: Option<&Path>,
    cfg: Option<&ExperimentConfig>,
    out: &Path,
) -> Result<EvaluationReport> {
    let pred = data::load_dataset(pred_dir)?;
    let truth = data::load_dataset(truth_dir)?;
    let sidecar = match RolloutSidecar::load(pred_dir) {
        Ok(s) => Some(s),
        Err(Error::MissingArtifact(_)) => None,
        Err(e) => return Err(e),
    };
    let stored_cfg = match cfg {
        Some(c) => Some(c.clone()),
        None => {
            let p = pred_dir.join(config::RESOLVED_CONFIG_FILE);
            if p.exists() {
                Some(ExperimentConfig::from_file(&p)?)
            } else {
                None
            }
        }
    };
    let ranges = stored_cfg.as_ref().map_or_else(
        || vec![evaluation::default_range(truth.eq.kind)],
        |c| c.evaluation.ranges.clone(),
    );
    let latent = if checkpoint::exists(pred_dir, CheckpointKind::Thetas) {
        let ck = Checkpoint::load(pred_dir, CheckpointKind::Thetas)?;
        let e = ck.entry(LATENT_TENSOR)?.clone();
        Some((ck.tensor(LATENT_TENSOR)?, e.shape[2]))
    } else {
        None
    };
    let mut warnings = Vec::new();
    if checkpoint::exists(pred_dir, CheckpointKind::Dmd) {
        let ck = Checkpoint::load(pred_dir, CheckpointKind::Dmd)?;
        if let Some(w) = ck.meta.get("warnings").and_then(|w| w.as_array()) {
            warnings.extend(w.iter().filter_map(|s| s.as_str().map(String::from)));
        }
    }
    let consistency = match (encoder_dir, &latent) {
        (Some(dir), Some((thetas, dim))) => {
            let (enc, ansatz, _) = load_encoder(dir)?;
            let batch = thetas.len() / dim;
            Some(evaluation::consistency_of(&enc, &ansatz, &truth.grid, thetas, batch)?)
        }
        _ => None,
    };
    start_run(stored_cfg.as_ref(), out)?;
    let extras = ReportExtras {
        sidecar: sidecar.as_ref(),
        latent: latent.as_ref().map(|(t, d)| (t.as_slice(), *d)),
        consistency_relrmse: consistency,
        warnings,
    };
    evaluation::emit_report(&pred, &truth, &extras, &ranges, out)
}

pub fn dmd_command(cfg: &ExperimentConfig, data_dir: &Path, truth_dir: Option<&Path>, out: &Path) -> Result<()> {
    let ds = data::load_dataset(data_dir)?;
    check_dataset(cfg, &ds)?;
    let truth = truth_dir.map(data::load_dataset).transpose()?;
    start_run(Some(cfg), out)?;
    let model = fit_dmd(&ds, cfg.dmd.rank)?;
    let mut warnings = Vec::new();
    if model.effective_rank < model.rank {
        warnings.push(format!(
            "dmd rank {} reduced to numerical rank {}",
            model.rank, model.effective_rank
        ));
    }
    let radius = model.spectral_radius();
    if radius > 1.0 {
        warnings.push(format!(
            "dmd operator has spectral radius {radius:.6} > 1: rollouts grow without bound"
        ));
    }
    let mut ck = dmd_checkpoint(&model)?;
    ck.config = cfg.to_value();
    ck.meta = serde_json::json!({ "rank": model.rank, "spectral_radius": radius, "warnings": warnings });
    ck.save(out)?;
    if let Some(t) = truth {
        model.rollout_dataset(&t)?.write_files(out)?;
    }
    Ok(())
}

pub fn dmd_checkpoint(m: &DmdModel) -> Result<Checkpoint> {
    let k = m.effective_rank;
    let mut ck = Checkpoint::new(CheckpointKind::Dmd);
    ck.push("basis", &[m.grid_len, k], &m.basis)?;
    ck.push("operator", &[k, k], &m.operator)?;
    ck.push("singular_values", &[k], &m.singular_values)?;
    Ok(ck)
}

pub fn load_dmd(dir: &Path) -> Result<DmdModel> {
    let ck = Checkpoint::load(dir, CheckpointKind::Dmd)?;
    let rank = ck.meta.get("rank").and_then(|r| r.as_u64()).unwrap_or(0) as usize;
    let basis = ck.entry("basis")?.shape.clone();
    DmdModel::from_parts(
        rank,
        basis[0],
        ck.tensor("basis")?,
        ck.tensor("operator")?,
        ck.tensor("singular_values")?,
    )
}
