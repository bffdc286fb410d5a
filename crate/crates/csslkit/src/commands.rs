//! The four run commands. Each resolves its configuration, writes the run
//! manifest first, then does the work; every output file is a pure
//! function of the manifest contents plus the referenced input files.

use crate::config::{Fields, KvConfig};
use crate::manifest::RunManifest;
use crate::svg;
use cssl::blocks::{RecurrentKind, ThresholdKind};
use cssl::events::generate::{generate_moving_shapes, sequence_seed, GenConfig};
use cssl::events::io::{sequence_dir_name, write_sequence};
use cssl::events::DataError;
use cssl::models::{load_checkpoint, save_checkpoint, CkptError, TaskKind};
use cssl::rng::mix_seed;
use cssl::train::sweep::{two_stage_sweep, SweepConfig, SweepRow, SweepRun};
use cssl::train::{
    check_params_match, evaluate, log_csv, train, Dataset, EvalResult, OptimKind, TaskModel,
    TrainConfig, TrainError,
};
use std::path::{Path, PathBuf};

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub enum CmdError {
    /// Bad invocation or configuration (exit 2).
    Usage(String),
    /// Missing or malformed data, checkpoints, or output paths (exit 3).
    Data(String),
    /// Numerical abort: training diverged (exit 4).
    Numeric(String),
}

impl CmdError {
    pub fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Data(_) => 3,
            CmdError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Data(m) | CmdError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        match e {
            // Generator rejections describe the user's configuration.
            DataError::Config(_) | DataError::Infeasible(_) => CmdError::Usage(e.to_string()),
            other => CmdError::Data(other.to_string()),
        }
    }
}

impl From<CkptError> for CmdError {
    fn from(e: CkptError) -> Self {
        CmdError::Data(e.to_string())
    }
}

/// Maps a library training error; `Diverged` is handled by the callers
/// that own a rescue checkpoint, the rest are data problems because the
/// configuration itself was validated before work started.
impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CmdError::Numeric(e.to_string()),
            other => CmdError::Data(other.to_string()),
        }
    }
}

/// One resolved command invocation: merged config plus the output directory.
pub struct Invocation {
    pub raw: KvConfig,
    pub out: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CmdError> {
    std::fs::write(path, contents)
        .map_err(|e| CmdError::Data(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen

struct GenResolved {
    gen: GenConfig,
    train_sequences: usize,
    val_sequences: usize,
    seed: u64,
    resolved: Vec<(String, String)>,
}

fn resolve_gen(raw: &KvConfig) -> Result<GenResolved, String> {
    let mut f = Fields::new(raw);
    let gen = GenConfig {
        width: f.take("width", 64usize)?,
        height: f.take("height", 64usize)?,
        n_shapes: f.take("n_shapes", 2usize)?,
        classes: f.take("classes", 2usize)?,
        frames: f.take("frames", 8usize)?,
        frame_us: f.take("frame_us", 10_000u64)?,
        substeps: f.take("substeps", 4usize)?,
        min_half: f.take("min_half", 4.0f64)?,
        max_half: f.take("max_half", 9.0f64)?,
        min_speed: f.take("min_speed", 0.5f64)?,
        max_speed: f.take("max_speed", 2.0f64)?,
        contrast_threshold: f.take("contrast_threshold", 0.2f64)?,
        noise_rate: f.take("noise_rate", 0.0f64)?,
    };
    let train_sequences = f.take("train_sequences", 200usize)?;
    let val_sequences = f.take("val_sequences", 40usize)?;
    let seed = f.take("seed", 7u64)?;
    Ok(GenResolved {
        gen,
        train_sequences,
        val_sequences,
        seed,
        resolved: f.finish()?,
    })
}

/// Writes a dataset: `train/` and `val/` sequence directories of EVT1
/// event streams with analytic ground truth. Sequence seeds derive from
/// the base seed, the split, and the index, so any sequence regenerates
/// independently and the whole tree is reproducible byte for byte.
pub fn cmd_gen(inv: &Invocation) -> Result<(), CmdError> {
    let r = resolve_gen(&inv.raw).map_err(CmdError::Usage)?;
    RunManifest::new("gen", &inv.out, r.seed, r.resolved)
        .write()
        .map_err(CmdError::Data)?;
    for (split, count, family) in [
        ("train", r.train_sequences, 0u64),
        ("val", r.val_sequences, 1u64),
    ] {
        let split_dir = inv.out.join(split);
        std::fs::create_dir_all(&split_dir)
            .map_err(|e| CmdError::Data(format!("cannot create {}: {e}", split_dir.display())))?;
        let family_seed = mix_seed(r.seed, family);
        for i in 0..count {
            let (events, truth) =
                generate_moving_shapes(&r.gen, sequence_seed(family_seed, i as u64))?;
            write_sequence(&split_dir.join(sequence_dir_name(i)), &events, &truth)?;
        }
    }
    println!(
        "wrote {} train + {} val sequences ({}x{}, {} frames) to {}",
        r.train_sequences,
        r.val_sequences,
        r.gen.width,
        r.gen.height,
        r.gen.frames,
        inv.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared model/data plumbing

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("config key 'task': unknown task '{s}'"))
}

fn parse_recurrent(s: &str) -> Result<RecurrentKind, String> {
    RecurrentKind::parse(s).ok_or_else(|| format!("config key 'recurrent': unknown cell '{s}'"))
}

fn parse_threshold(s: &str) -> Result<ThresholdKind, String> {
    match s {
        "learned" => Ok(ThresholdKind::Learned),
        "relu" => Ok(ThresholdKind::Relu),
        _ => Err(format!("config key 'threshold': expected learned or relu, got '{s}'")),
    }
}

fn desk_model(task: TaskKind, rec: RecurrentKind, thr: ThresholdKind, alpha: f64) -> Result<TaskModel, CmdError> {
    let built = match task {
        TaskKind::Detect => TaskModel::detect_desk(rec, thr, alpha),
        TaskKind::Flow => TaskModel::flow_desk(rec, thr, alpha),
    };
    built.map_err(|e| CmdError::Usage(e.to_string()))
}

/// Loads one split of a dataset root, failing with the explicit path when
/// the directory is missing.
fn load_split(root: &Path, split: &str, seq_len: usize) -> Result<Dataset, CmdError> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(CmdError::Data(format!(
            "dataset split directory {} does not exist",
            dir.display()
        )));
    }
    Ok(Dataset::load(&dir, seq_len)?)
}

/// Train-schema keys shared by `train` and `sweep` (which re-derives its
/// stage-two runs from the stage-one settings).
fn take_train_cfg(f: &mut Fields, with_penalty_keys: bool) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig {
        epochs: f.take("epochs", 20usize)?,
        batch_size: f.take("batch_size", 4usize)?,
        seq_len: f.take("seq_len", 8usize)?,
        max_lr: f.take("max_lr", 3e-4f64)?,
        seed: f.take("seed", 7u64)?,
        alpha: f.take("alpha", 1.0f64)?,
        optimizer: {
            let s = f.take_choice("optimizer", "adam", &["adam", "adamw"])?;
            OptimKind::parse(&s).expect("choice list matches parser")
        },
        weight_decay: f.take("weight_decay", 0.0f64)?,
        pct_warmup: f.take("pct_warmup", 0.3f64)?,
        clip_norm: f.take("clip_norm", 1.0f64)?,
        ..TrainConfig::default()
    };
    if with_penalty_keys {
        cfg.beta_sparse = f.take("beta_sparse", 0.0f64)?;
        cfg.target_metric = f.take_opt_parsed("target_metric")?;
    } else {
        cfg.beta_sparse = 0.0;
        cfg.target_metric = None;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// train

struct TrainResolved {
    task: TaskKind,
    recurrent: RecurrentKind,
    threshold: ThresholdKind,
    data: PathBuf,
    resume: Option<PathBuf>,
    plots: bool,
    cfg: TrainConfig,
    resolved: Vec<(String, String)>,
}

fn resolve_train(raw: &KvConfig) -> Result<TrainResolved, String> {
    let mut f = Fields::new(raw);
    let task = parse_task(&f.take_choice("task", "detect", &["detect", "flow"])?)?;
    let recurrent = parse_recurrent(&f.take_choice(
        "recurrent",
        "mgu",
        &["mgu", "gru", "minimalrnn"],
    )?)?;
    let mut threshold = parse_threshold(&f.take_choice("threshold", "learned", &["learned", "relu"])?)?;
    if f.take_bool("baseline", false)? {
        threshold = ThresholdKind::Relu;
    }
    let data = f
        .take_opt("data")
        .ok_or("config key 'data' is required: point it at a generated dataset root")?;
    let resume = f.take_opt("resume").map(PathBuf::from);
    let plots = f.take_bool("plots", true)?;
    let cfg = take_train_cfg(&mut f, true)?;
    cfg.validate()?;
    Ok(TrainResolved {
        task,
        recurrent,
        threshold,
        data: PathBuf::from(data),
        resume,
        plots,
        cfg,
        resolved: f.finish()?,
    })
}

/// Writes the post-run report shared by successful and rescued runs:
/// checkpoint, training log, and (for completed runs) the density report.
fn write_train_outputs(
    out: &Path,
    model: &TaskModel,
    params: &cssl::params::ParamSet,
    rows: &[cssl::train::EpochRow],
    epochs_done: usize,
    final_eval: Option<&EvalResult>,
    plots: bool,
) -> Result<(), CmdError> {
    save_checkpoint(
        &out.join("model.ckpt"),
        model.task(),
        epochs_done,
        &model.arch_lines(),
        params,
    )?;
    write_file(&out.join("training.csv"), &log_csv(rows))?;
    if let Some(ev) = final_eval {
        let report = ev
            .ledger
            .report_csv()
            .unwrap_or_else(|| "layer,density,sop,gsop\n".to_string());
        write_file(&out.join("density.csv"), &report)?;
    }
    if plots && !rows.is_empty() {
        let loss: Vec<(f64, f64)> = rows.iter().map(|r| (r.epoch as f64, r.task_loss)).collect();
        let metric: Vec<(f64, f64)> = rows.iter().map(|r| (r.epoch as f64, r.metric)).collect();
        let chart = svg::line_chart(
            "training",
            "epoch",
            "value",
            &[("task_loss", loss), ("metric", metric)],
        );
        write_file(&out.join("training_curves.svg"), &chart)?;
    }
    Ok(())
}

/// Trains a desk-scale model (or resumes one from a checkpoint) and writes
/// `model.ckpt`, `training.csv`, `density.csv`, and the training curves.
/// A numerically divergent run still writes the log rows it completed plus
/// a rescue checkpoint holding the last finite parameters, then exits 4.
pub fn cmd_train(inv: &Invocation) -> Result<(), CmdError> {
    let r = resolve_train(&inv.raw).map_err(CmdError::Usage)?;
    RunManifest::new("train", &inv.out, r.cfg.seed, r.resolved)
        .write()
        .map_err(CmdError::Data)?;

    let train_data = load_split(&r.data, "train", r.cfg.seq_len)?;
    let val_data = load_split(&r.data, "val", r.cfg.seq_len)?;

    let (model, init, start_epoch) = match &r.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            if ckpt.task != r.task {
                return Err(CmdError::Usage(format!(
                    "config key 'task': '{}' does not match the resume checkpoint's task '{}'",
                    r.task.as_str(),
                    ckpt.task.as_str()
                )));
            }
            if r.cfg.epochs <= ckpt.epoch {
                return Err(CmdError::Usage(format!(
                    "config key 'epochs': {} must exceed the {} epochs already in {}",
                    r.cfg.epochs,
                    ckpt.epoch,
                    ckpt_path.display()
                )));
            }
            let model = TaskModel::from_arch(ckpt.task, &ckpt.arch)
                .map_err(|e| CmdError::Data(e.to_string()))?;
            (model, Some(ckpt.params), ckpt.epoch)
        }
        None => (
            desk_model(r.task, r.recurrent, r.threshold, r.cfg.alpha)?,
            None,
            0,
        ),
    };

    match train(&model, &train_data, &val_data, &r.cfg, init, start_epoch) {
        Ok(out) => {
            let epochs_done = start_epoch + out.rows.len();
            let ev = evaluate(&model, &out.params, &val_data, r.cfg.batch_size)?;
            write_train_outputs(
                &inv.out,
                &model,
                &out.params,
                &out.rows,
                epochs_done,
                Some(&ev),
                r.plots,
            )?;
            let last = out.rows.last().expect("training ran at least one epoch");
            println!(
                "trained {} epochs: metric {}  gsop {}  mean_density {}{}",
                epochs_done,
                last.metric,
                last.gsop,
                last.mean_density,
                if out.stopped_early { "  (early stop)" } else { "" }
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, step, last }) => {
            let epochs_done = start_epoch + last.rows.len();
            write_train_outputs(&inv.out, &model, &last.params, &last.rows, epochs_done, None, r.plots)?;
            Err(CmdError::Numeric(format!(
                "loss became non-finite at epoch {epoch}, step {step}; \
                 wrote the last finite parameters to {}",
                inv.out.join("model.ckpt").display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// eval

struct EvalResolved {
    checkpoint: PathBuf,
    data: PathBuf,
    split: String,
    batch_size: usize,
    seq_len: usize,
    plots: bool,
    seed: u64,
    resolved: Vec<(String, String)>,
}

fn resolve_eval(raw: &KvConfig) -> Result<EvalResolved, String> {
    let mut f = Fields::new(raw);
    let checkpoint = f
        .take_opt("checkpoint")
        .ok_or("config key 'checkpoint' is required")?;
    let data = f
        .take_opt("data")
        .ok_or("config key 'data' is required: point it at a generated dataset root")?;
    let split = f.take_choice("split", "val", &["train", "val"])?;
    let batch_size = f.take("batch_size", 4usize)?;
    let seq_len = f.take("seq_len", 8usize)?;
    let plots = f.take_bool("plots", true)?;
    let seed = f.take("seed", 7u64)?;
    if batch_size == 0 {
        return Err("config key 'batch_size': must be >= 1".into());
    }
    if seq_len == 0 {
        return Err("config key 'seq_len': must be >= 1".into());
    }
    Ok(EvalResolved {
        checkpoint: PathBuf::from(checkpoint),
        data: PathBuf::from(data),
        split,
        batch_size,
        seq_len,
        plots,
        seed,
        resolved: f.finish()?,
    })
}

pub const METRICS_HEADER: &str = "metric,outlier_pct,gsop,mean_density";

/// Scores a checkpoint on one dataset split and writes `metrics.csv`, the
/// per-layer `density.csv`, and (optionally) a density bar chart. Shares
/// the library evaluation path with training, so evaluating a just-trained
/// checkpoint on its validation split reproduces the final logged metric
/// exactly.
pub fn cmd_eval(inv: &Invocation) -> Result<(), CmdError> {
    let r = resolve_eval(&inv.raw).map_err(CmdError::Usage)?;
    RunManifest::new("eval", &inv.out, r.seed, r.resolved)
        .write()
        .map_err(CmdError::Data)?;

    let ckpt = load_checkpoint(&r.checkpoint)?;
    let model =
        TaskModel::from_arch(ckpt.task, &ckpt.arch).map_err(|e| CmdError::Data(e.to_string()))?;
    check_params_match(&model, &ckpt.params)?;
    let data = load_split(&r.data, &r.split, r.seq_len)?;
    let ev = evaluate(&model, &ckpt.params, &data, r.batch_size)?;

    write_file(
        &inv.out.join("metrics.csv"),
        &format!(
            "{METRICS_HEADER}\n{},{},{},{}\n",
            ev.metric, ev.outlier_pct, ev.gsop, ev.mean_density
        ),
    )?;
    let report = ev
        .ledger
        .report_csv()
        .unwrap_or_else(|| "layer,density,sop,gsop\n".to_string());
    write_file(&inv.out.join("density.csv"), &report)?;
    if r.plots {
        if let Some(rows) = ev.ledger.report() {
            let bars: Vec<(String, f64)> = rows
                .iter()
                .filter(|row| row.layer != "total")
                .map(|row| (row.layer.clone(), row.density))
                .collect();
            let chart = svg::bar_chart("activation density by layer", "fraction nonzero", &bars);
            write_file(&inv.out.join("density_bars.svg"), &chart)?;
        }
    }
    println!(
        "metric {}  outlier_pct {}  gsop {}  mean_density {}",
        ev.metric, ev.outlier_pct, ev.gsop, ev.mean_density
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

struct SweepResolved {
    checkpoint: PathBuf,
    baseline_checkpoint: Option<PathBuf>,
    baseline: bool,
    data: PathBuf,
    stage1: TrainConfig,
    sweep: SweepConfig,
    resolved: Vec<(String, String)>,
}

fn resolve_sweep(raw: &KvConfig) -> Result<SweepResolved, String> {
    let mut f = Fields::new(raw);
    let checkpoint = f
        .take_opt("checkpoint")
        .ok_or("config key 'checkpoint' is required: the stage-one checkpoint to fine-tune")?;
    let baseline_checkpoint = f.take_opt("baseline_checkpoint").map(PathBuf::from);
    let baseline = f.take_bool("baseline", false)?;
    let data = f
        .take_opt("data")
        .ok_or("config key 'data' is required: point it at a generated dataset root")?;
    let defaults = SweepConfig::default();
    let sweep = SweepConfig {
        betas: f.take_f64_list("betas", "1,0.1,0.04,0.01,0.001")?,
        stage2_epoch_frac: f.take("stage2_epoch_frac", defaults.stage2_epoch_frac)?,
        stage2_lr_frac: f.take("stage2_lr_frac", defaults.stage2_lr_frac)?,
    };
    let stage1 = take_train_cfg(&mut f, false)?;
    stage1.validate()?;
    sweep.validate()?;
    if baseline && baseline_checkpoint.is_none() {
        return Err(
            "config key 'baseline_checkpoint' is required when the baseline columns are requested"
                .into(),
        );
    }
    Ok(SweepResolved {
        checkpoint: PathBuf::from(checkpoint),
        baseline_checkpoint,
        baseline,
        data: PathBuf::from(data),
        stage1,
        sweep,
        resolved: f.finish()?,
    })
}

fn sweep_rows_for(
    ckpt_path: &Path,
    train_data: &Dataset,
    val_data: &Dataset,
    stage1: &TrainConfig,
    sweep: &SweepConfig,
) -> Result<Vec<SweepRow>, CmdError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model =
        TaskModel::from_arch(ckpt.task, &ckpt.arch).map_err(|e| CmdError::Data(e.to_string()))?;
    check_params_match(&model, &ckpt.params)?;
    let runs: Vec<SweepRun> =
        two_stage_sweep(&model, train_data, val_data, stage1, &ckpt.params, sweep)?;
    Ok(runs.into_iter().map(|r| r.row).collect())
}

/// Renders paired model/baseline sweep rows side by side.
fn paired_sweep_csv(rows: &[SweepRow], baseline: &[SweepRow]) -> String {
    let mut s = String::from(
        "label,beta,metric,gsop,mean_density,relu_metric,relu_gsop,relu_mean_density\n",
    );
    for (a, b) in rows.iter().zip(baseline) {
        let beta = a.beta.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.label, beta, a.metric, a.gsop, a.mean_density, b.metric, b.gsop, b.mean_density
        ));
    }
    s
}

/// Fine-tunes a stage-one checkpoint across the sparsity-weight ladder and
/// writes `sweep.csv`: one row per beta plus the penalty-free reference
/// row. With `--baseline`, the same sweep also runs on a ReLU-variant
/// checkpoint and its columns are appended to each row.
pub fn cmd_sweep(inv: &Invocation) -> Result<(), CmdError> {
    let r = resolve_sweep(&inv.raw).map_err(CmdError::Usage)?;
    RunManifest::new("sweep", &inv.out, r.stage1.seed, r.resolved)
        .write()
        .map_err(CmdError::Data)?;

    let train_data = load_split(&r.data, "train", r.stage1.seq_len)?;
    let val_data = load_split(&r.data, "val", r.stage1.seq_len)?;
    let rows = sweep_rows_for(&r.checkpoint, &train_data, &val_data, &r.stage1, &r.sweep)?;
    let csv = if r.baseline {
        let base_ckpt = r.baseline_checkpoint.as_ref().expect("checked at resolve time");
        let base_rows = sweep_rows_for(base_ckpt, &train_data, &val_data, &r.stage1, &r.sweep)?;
        paired_sweep_csv(&rows, &base_rows)
    } else {
        cssl::train::sweep::sweep_csv(&rows)
    };
    write_file(&inv.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
