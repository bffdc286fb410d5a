//! Deterministic training: one-cycle Adam over truncated-BPTT unrolls of
//! event sequences, the activation-sparsity penalty that couples task loss
//! to synaptic-operation cost, and the evaluation pass shared by training
//! epochs and the eval command.

pub mod optim;
pub mod sweep;

use crate::blocks::{RecState, RecurrentKind, ThresholdKind};
use crate::events::{bin_events, io as event_io, TruthBox};
use crate::events::{DataError, SceneTruth};
use crate::models::{
    build_targets, decode, detection_loss, flow_metrics, map_lite, BackboneSpec, DetectConfig,
    DetectModel, DetectionOutput, FlowModel, FlowSpec, MetricsError, ModelError, ScoredBox,
    TaskKind,
};
use crate::params::{BoundParams, ParamSet};
use crate::rng;
use crate::sop::SOpLedger;
use crate::tape::{Tape, Var};
use crate::tensor::{ShapeError, Tensor};
use optim::{adam_step, clip_global_norm, onecycle_lr, AdamState};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// Adam moment decay rates, fixed across all runs.
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
/// Adam denominator guard, fixed across all runs.
pub const ADAM_EPS: f64 = 1e-8;
/// Charbonnier smoothing for the flow training loss, in pixels.
pub const FLOW_LOSS_EPS: f64 = 1e-3;
/// Endpoint error above which a pixel counts as a flow outlier.
pub const FLOW_OUTLIER_PX: f64 = 3.0;
/// IoU threshold for the detection average-precision metric.
pub const DETECT_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(
        "loss became non-finite at epoch {epoch}, step {step}; \
         stopping with the last finite parameters"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        last: Box<TrainOutput>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    AdamW,
}

impl OptimKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimKind::Adam => "adam",
            OptimKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<OptimKind> {
        match s {
            "adam" => Some(OptimKind::Adam),
            "adamw" => Some(OptimKind::AdamW),
            _ => None,
        }
    }
}

/// Everything a training run needs beyond the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per sequence; the BPTT window spans the whole sequence.
    pub seq_len: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub max_lr: f64,
    /// Sparsity penalty weight; zero disables the penalty.
    pub beta_sparse: f64,
    pub seed: u64,
    /// Surrogate-gradient bandwidth handed to model builders.
    pub alpha: f64,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    /// Fraction of total steps spent warming up to `max_lr`.
    pub pct_warmup: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Stop once the validation metric reaches this value (at or above for
    /// detection, at or below for flow).
    pub target_metric: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            seq_len: 8,
            max_lr: 3e-4,
            beta_sparse: 0.0,
            seed: 7,
            alpha: 1.0,
            optimizer: OptimKind::Adam,
            weight_decay: 0.0,
            pct_warmup: 0.3,
            clip_norm: 1.0,
            target_metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.seq_len == 0 {
            return Err("seq_len must be >= 1".into());
        }
        if !self.max_lr.is_finite() || self.max_lr < 0.0 {
            return Err("max_lr must be finite and >= 0".into());
        }
        if !self.beta_sparse.is_finite() || self.beta_sparse < 0.0 {
            return Err("beta_sparse must be finite and >= 0".into());
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err("alpha must be finite and > 0".into());
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err("weight_decay must be finite and >= 0".into());
        }
        if !self.pct_warmup.is_finite() || !(0.0..=1.0).contains(&self.pct_warmup) {
            return Err("pct_warmup must lie in [0, 1]".into());
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err("clip_norm must be finite and > 0".into());
        }
        if let Some(t) = self.target_metric {
            if !t.is_finite() {
                return Err("target_metric must be finite".into());
            }
        }
        Ok(())
    }
}

/// One loaded sequence: binned event frames [T, 2, H, W] plus ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Tensor,
    pub truth: SceneTruth,
}

/// An in-memory dataset of equally shaped, equally long sequences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub seq_len: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Loads every sequence directory under `root` and bins each event
    /// stream into `seq_len` frames covering `[0, seq_len * frame_us)`.
    pub fn load(root: &Path, seq_len: usize) -> Result<Dataset, TrainError> {
        if seq_len == 0 {
            return Err(TrainError::Config("seq_len must be >= 1".into()));
        }
        let dirs = event_io::sequence_dirs(root)?;
        if dirs.is_empty() {
            return Err(TrainError::Config(format!(
                "no sequence directories under {}",
                root.display()
            )));
        }
        let mut sequences = Vec::with_capacity(dirs.len());
        let (mut width, mut height) = (0usize, 0usize);
        for dir in &dirs {
            let (events, truth) = event_io::read_sequence(dir)?;
            if truth.frame_us == 0 {
                return Err(TrainError::Config(format!(
                    "{}: frame_us must be positive",
                    dir.display()
                )));
            }
            if truth.frames.len() < seq_len {
                return Err(TrainError::Config(format!(
                    "{}: only {} truth frames but seq_len is {seq_len}",
                    dir.display(),
                    truth.frames.len()
                )));
            }
            if sequences.is_empty() {
                width = truth.width;
                height = truth.height;
            } else if truth.width != width || truth.height != height {
                return Err(TrainError::Config(format!(
                    "{}: sensor {}x{} differs from the first sequence's {}x{}",
                    dir.display(),
                    truth.width,
                    truth.height,
                    width,
                    height
                )));
            }
            let span = seq_len as u64 * truth.frame_us;
            let frames = bin_events(&events, 0, span, seq_len)?;
            sequences.push(Sequence { frames, truth });
        }
        Ok(Dataset {
            width,
            height,
            seq_len,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Stacks frame `t` of the chosen sequences into one [B, 2, H, W] input.
    pub fn batch_frame(&self, idxs: &[usize], t: usize) -> Tensor {
        let plane = 2 * self.height * self.width;
        let mut data = Vec::with_capacity(idxs.len() * plane);
        for &i in idxs {
            let frames = self.sequences[i].frames.data();
            data.extend_from_slice(&frames[t * plane..(t + 1) * plane]);
        }
        Tensor::new(vec![idxs.len(), 2, self.height, self.width], data).unwrap()
    }

    fn batch_boxes(&self, idxs: &[usize], t: usize) -> Vec<&[TruthBox]> {
        idxs.iter()
            .map(|&i| self.sequences[i].truth.frames[t].boxes.as_slice())
            .collect()
    }

    /// Ground-truth flow [B, 2, H, W], its mask [B, 1, H, W], and the
    /// number of masked pixels.
    fn batch_flow_truth(&self, idxs: &[usize], t: usize) -> (Tensor, Tensor, usize) {
        let (h, w) = (self.height, self.width);
        let mut flow = Vec::with_capacity(idxs.len() * 2 * h * w);
        let mut mask = Vec::with_capacity(idxs.len() * h * w);
        let mut count = 0usize;
        for &i in idxs {
            let truth = &self.sequences[i].truth;
            flow.extend_from_slice(truth.flow_frame(t).data());
            let m = truth.flow_mask(t);
            count += m.data().iter().filter(|&&v| v != 0.0).count();
            mask.extend_from_slice(m.data());
        }
        (
            Tensor::new(vec![idxs.len(), 2, h, w], flow).unwrap(),
            Tensor::new(vec![idxs.len(), 1, h, w], mask).unwrap(),
            count,
        )
    }
}

/// A trainable model for one of the two benchmark tasks.
pub enum TaskModel {
    Detect(DetectModel),
    Flow(FlowModel),
}

/// Recurrent state bundle matching a [`TaskModel`].
pub enum TaskStates {
    Detect(Vec<Option<RecState>>),
    Flow(Option<RecState>),
}

/// One step's task-specific output.
pub enum StepOutput {
    Detect(DetectionOutput),
    Flow(Var),
}

impl TaskModel {
    /// Desk-scale detection model with the given recurrent cell and
    /// threshold flavor.
    pub fn detect_desk(
        rec: RecurrentKind,
        threshold: ThresholdKind,
        alpha: f64,
    ) -> Result<TaskModel, ModelError> {
        let mut spec = BackboneSpec::desk(rec, threshold);
        spec.alpha = alpha;
        Ok(TaskModel::Detect(DetectModel::new(
            spec,
            DetectConfig::default(),
        )?))
    }

    /// Desk-scale flow model with the given recurrent cell and threshold
    /// flavor.
    pub fn flow_desk(
        rec: RecurrentKind,
        threshold: ThresholdKind,
        alpha: f64,
    ) -> Result<TaskModel, ModelError> {
        let mut spec = FlowSpec::desk(rec, threshold);
        spec.alpha = alpha;
        Ok(TaskModel::Flow(FlowModel::new(spec)?))
    }

    /// Rebuilds the model a checkpoint was saved from.
    pub fn from_arch(task: TaskKind, lines: &[String]) -> Result<TaskModel, ModelError> {
        match task {
            TaskKind::Detect => {
                let spec = BackboneSpec::from_arch_lines(lines)?;
                Ok(TaskModel::Detect(DetectModel::new(
                    spec,
                    DetectConfig::default(),
                )?))
            }
            TaskKind::Flow => {
                let spec = FlowSpec::from_arch_lines(lines)?;
                Ok(TaskModel::Flow(FlowModel::new(spec)?))
            }
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            TaskModel::Detect(_) => TaskKind::Detect,
            TaskModel::Flow(_) => TaskKind::Flow,
        }
    }

    pub fn arch_lines(&self) -> Vec<String> {
        match self {
            TaskModel::Detect(m) => m.backbone.spec.to_arch_lines(),
            TaskModel::Flow(m) => m.spec.to_arch_lines(),
        }
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        match self {
            TaskModel::Detect(m) => m.register(ps, rng),
            TaskModel::Flow(m) => m.register(ps, rng),
        }
    }

    pub fn fresh_states(&self) -> TaskStates {
        match self {
            TaskModel::Detect(_) => TaskStates::Detect(Vec::new()),
            TaskModel::Flow(_) => TaskStates::Flow(None),
        }
    }

    /// One recurrent step. Returns the task output plus the sparse block
    /// outputs feeding the sparsity penalty.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        states: &mut TaskStates,
        ledger: Option<&mut SOpLedger>,
    ) -> Result<(StepOutput, Vec<Var>), ShapeError> {
        match (self, states) {
            (TaskModel::Detect(m), TaskStates::Detect(st)) => {
                let (out, blocks) = m.forward_step(tape, bp, x, st, ledger)?;
                Ok((StepOutput::Detect(out), blocks))
            }
            (TaskModel::Flow(m), TaskStates::Flow(st)) => {
                let (flow, blocks) = m.forward_step(tape, bp, x, st, ledger)?;
                Ok((StepOutput::Flow(flow), blocks))
            }
            _ => panic!("recurrent state bundle does not match the task"),
        }
    }
}

/// Mean L1 activation penalty: `beta / (batch * steps)` times the summed
/// absolute block outputs across layers and steps. `None` when `beta` is
/// zero so callers skip the extra graph nodes.
pub fn sparsity_loss(
    tape: &mut Tape,
    step_outputs: &[Vec<Var>],
    beta: f64,
) -> Result<Option<Var>, ShapeError> {
    if beta == 0.0 {
        return Ok(None);
    }
    let first = match step_outputs.iter().flat_map(|s| s.iter()).next() {
        Some(&v) => v,
        None => return Ok(None),
    };
    let batch = tape.value(first).shape()[0];
    let steps = step_outputs.len();
    let mut acc: Option<Var> = None;
    for outputs in step_outputs {
        for &v in outputs {
            let s = tape.sum_abs(v);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
    }
    let scale = beta / (batch * steps) as f64;
    Ok(acc.map(|a| tape.affine(a, scale, 0.0)))
}

fn step_task_loss(
    tape: &mut Tape,
    model: &TaskModel,
    out: &StepOutput,
    data: &Dataset,
    idxs: &[usize],
    t: usize,
) -> Result<Var, ShapeError> {
    match (model, out) {
        (TaskModel::Detect(m), StepOutput::Detect(o)) => {
            let sh = tape.value(o.objectness).shape().to_vec();
            let truths = data.batch_boxes(idxs, t);
            let targets = build_targets(&truths, sh[2], sh[3], m.stride(), &m.cfg);
            detection_loss(tape, o, &targets, &m.cfg)
        }
        (TaskModel::Flow(_), StepOutput::Flow(flow)) => {
            let (target, mask, count) = data.batch_flow_truth(idxs, t);
            let sum = tape.charbonnier_epe_sum(*flow, &target, &mask, FLOW_LOSS_EPS)?;
            Ok(tape.affine(sum, 1.0 / count.max(1) as f64, 0.0))
        }
        _ => panic!("step output does not match the task"),
    }
}

/// One training epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub sparse_loss: f64,
    pub metric: f64,
    pub gsop: f64,
    pub mean_density: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,task_loss,sparse_loss,metric,gsop,mean_density,lr";

/// Renders epoch rows as CSV with shortest-round-trip floats.
pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.task_loss, r.sparse_loss, r.metric, r.gsop, r.mean_density, r.lr
        ));
    }
    s
}

/// Aggregate scores from one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Detection: average precision. Flow: average endpoint error (pixels).
    pub metric: f64,
    /// Flow only: percentage of masked pixels with endpoint error above
    /// [`FLOW_OUTLIER_PX`]; zero for detection.
    pub outlier_pct: f64,
    /// Total synaptic operations across the pass, in units of 1e9.
    pub gsop: f64,
    /// Mean conv-input density across context-aware layers.
    pub mean_density: f64,
    /// Full per-layer ledger for reporting.
    pub ledger: SOpLedger,
}

/// Runs the model over `data` in inference mode and scores it. Training
/// epochs and the eval command share this exact path, so a reported metric
/// is always reproducible from its checkpoint.
pub fn evaluate(
    model: &TaskModel,
    params: &ParamSet,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("evaluation dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    let mut ledger = SOpLedger::new();
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut det_frames: Vec<(Vec<ScoredBox>, Vec<TruthBox>)> = Vec::new();
    let mut aee_sum = 0.0;
    let mut outlier_sum = 0.0;
    let mut mask_total = 0usize;
    for chunk in idxs.chunks(batch_size) {
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, params);
        let mut states = model.fresh_states();
        for t in 0..data.seq_len {
            let x = tape.input(data.batch_frame(chunk, t));
            let (out, _) = model.forward_step(&mut tape, &bp, x, &mut states, Some(&mut ledger))?;
            match (&out, model) {
                (StepOutput::Detect(o), TaskModel::Detect(m)) => {
                    let dets = decode(&tape, o, m.stride(), data.width, data.height, &m.cfg);
                    for (bi, &i) in chunk.iter().enumerate() {
                        det_frames.push((
                            dets[bi].clone(),
                            data.sequences[i].truth.frames[t].boxes.clone(),
                        ));
                    }
                }
                (StepOutput::Flow(f), TaskModel::Flow(_)) => {
                    let pred = tape.value(*f);
                    let plane = 2 * data.height * data.width;
                    for (bi, &i) in chunk.iter().enumerate() {
                        let truth = &data.sequences[i].truth;
                        let target = truth.flow_frame(t);
                        let mask = truth.flow_mask(t);
                        let count = mask.data().iter().filter(|&&v| v != 0.0).count();
                        if count == 0 {
                            continue;
                        }
                        let one = Tensor::new(
                            vec![2, data.height, data.width],
                            pred.data()[bi * plane..(bi + 1) * plane].to_vec(),
                        )
                        .unwrap();
                        let fm = flow_metrics(&one, &target, &mask, FLOW_OUTLIER_PX)?;
                        aee_sum += fm.aee * count as f64;
                        outlier_sum += fm.outlier_pct * count as f64;
                        mask_total += count;
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    let (metric, outlier_pct) = match model.task() {
        TaskKind::Detect => (map_lite(&det_frames, DETECT_IOU), 0.0),
        TaskKind::Flow => {
            if mask_total == 0 {
                return Err(TrainError::Config(
                    "evaluation dataset has no pixels with defined ground-truth flow".into(),
                ));
            }
            let n = mask_total as f64;
            (aee_sum / n, outlier_sum / n)
        }
    };
    Ok(EvalResult {
        metric,
        outlier_pct,
        gsop: ledger.total_sop() as f64 / 1e9,
        mean_density: ledger.mean_density(),
        ledger,
    })
}

/// Result of a training run: final parameters plus the per-epoch log.
#[derive(Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub rows: Vec<EpochRow>,
    /// True when `target_metric` ended the run before the last epoch.
    pub stopped_early: bool,
}

fn diverged(epoch: usize, step: usize, params: ParamSet, rows: Vec<EpochRow>) -> TrainError {
    TrainError::Diverged {
        epoch: epoch + 1,
        step,
        last: Box::new(TrainOutput {
            params,
            rows,
            stopped_early: false,
        }),
    }
}

/// Checks that `params` was registered by (a clone of) `model`: same names
/// in the same order, same shapes. Guards checkpoint loading.
pub fn check_params_match(model: &TaskModel, params: &ParamSet) -> Result<(), TrainError> {
    let mut probe = ParamSet::new();
    let mut probe_rng = rng::rng_from_seed(0);
    model.register(&mut probe, &mut probe_rng);
    if probe.names() != params.names() {
        return Err(TrainError::Config(
            "checkpoint parameters do not match the model architecture".into(),
        ));
    }
    for ((name, want), got) in probe.iter().zip(params.tensors()) {
        if want.shape() != got.shape() {
            return Err(TrainError::Config(format!(
                "checkpoint parameter {name} has shape {:?} but the model expects {:?}",
                got.shape(),
                want.shape()
            )));
        }
    }
    Ok(())
}

/// Trains `model` with full-sequence BPTT, resetting recurrent state at
/// every sequence start. Parameters come from `init` (e.g. a checkpoint)
/// or, when absent, fresh registration seeded by `cfg.seed`. `start_epoch`
/// is the number of epochs already completed; the learning-rate schedule
/// and per-epoch shuffles depend only on absolute epoch numbers, so a
/// resumed run walks the same path as an uninterrupted one.
///
/// A non-finite loss or gradient aborts with [`TrainError::Diverged`]
/// carrying the last finite parameters and the rows logged so far.
pub fn train(
    model: &TaskModel,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    init: Option<ParamSet>,
    start_epoch: usize,
) -> Result<TrainOutput, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if train_data.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    for (name, d) in [("training", train_data), ("validation", val_data)] {
        if d.seq_len != cfg.seq_len {
            return Err(TrainError::Config(format!(
                "{name} dataset was binned into {} frames but seq_len is {}",
                d.seq_len, cfg.seq_len
            )));
        }
    }
    if start_epoch > cfg.epochs {
        return Err(TrainError::Config(format!(
            "start epoch {start_epoch} is past the configured {} epochs",
            cfg.epochs
        )));
    }

    let mut params = match init {
        Some(p) => {
            check_params_match(model, &p)?;
            p
        }
        None => {
            let mut ps = ParamSet::new();
            let mut init_rng = rng::rng_from_seed(cfg.seed);
            model.register(&mut ps, &mut init_rng);
            ps
        }
    };

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamState::new(&params);
    let mut rows: Vec<EpochRow> = Vec::new();
    let mut stopped_early = false;
    let decoupled = cfg.optimizer == OptimKind::AdamW;
    let mut step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = rng::rng_from_seed(rng::mix_seed(cfg.seed, 1 + epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut task_sum = 0.0;
        let mut sparse_sum = 0.0;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = onecycle_lr(step, total_steps, cfg.max_lr, cfg.pct_warmup);
            last_lr = lr;

            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &params);
            let mut states = model.fresh_states();
            let mut block_outputs: Vec<Vec<Var>> = Vec::with_capacity(cfg.seq_len);
            let mut task_acc: Option<Var> = None;
            for t in 0..cfg.seq_len {
                let x = tape.input(train_data.batch_frame(chunk, t));
                let (out, blocks) = model.forward_step(&mut tape, &bp, x, &mut states, None)?;
                let l = step_task_loss(&mut tape, model, &out, train_data, chunk, t)?;
                task_acc = Some(match task_acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
                block_outputs.push(blocks);
            }
            let task = tape.affine(
                task_acc.expect("seq_len >= 1"),
                1.0 / cfg.seq_len as f64,
                0.0,
            );
            let sparse = sparsity_loss(&mut tape, &block_outputs, cfg.beta_sparse)?;
            let total = match sparse {
                Some(s) => tape.add(task, s)?,
                None => task,
            };

            let task_v = tape.value(task).data()[0];
            let sparse_v = sparse.map(|s| tape.value(s).data()[0]).unwrap_or(0.0);
            let total_v = tape.value(total).data()[0];
            if !total_v.is_finite() {
                return Err(diverged(epoch, step, params, rows));
            }

            tape.backward(total)?;
            let mut grads: Vec<Tensor> = bp.vars().iter().map(|&v| tape.grad(v)).collect();
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(epoch, step, params, rows));
            }
            // Clipped updates are finite, but their running sum can still
            // overflow a parameter; keep the pre-update values so a
            // divergent step never poisons the rescue checkpoint.
            let snapshot = params.clone();
            adam_step(
                &mut params,
                &grads,
                &mut opt,
                lr,
                ADAM_BETAS,
                ADAM_EPS,
                cfg.weight_decay,
                decoupled,
            );
            let poisoned = params
                .tensors()
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()));
            if poisoned {
                return Err(diverged(epoch, step, snapshot, rows));
            }

            task_sum += task_v * chunk.len() as f64;
            sparse_sum += sparse_v * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }

        let ev = evaluate(model, &params, val_data, cfg.batch_size)?;
        rows.push(EpochRow {
            epoch: epoch + 1,
            task_loss: task_sum / seen as f64,
            sparse_loss: sparse_sum / seen as f64,
            metric: ev.metric,
            gsop: ev.gsop,
            mean_density: ev.mean_density,
            lr: last_lr,
        });
        if let Some(target) = cfg.target_metric {
            let reached = match model.task() {
                TaskKind::Detect => ev.metric >= target,
                TaskKind::Flow => ev.metric <= target,
            };
            if reached {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutput {
        params,
        rows,
        stopped_early,
    })
}
