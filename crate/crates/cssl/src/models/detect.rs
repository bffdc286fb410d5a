//! Single-scale detection on top of the backbone: one anchor per output
//! cell, an objectness logit and a 4-vector box regression. The head is
//! deliberately minimal; it exists to exercise the sparse backbone, not to
//! compete with full detector stacks.

use super::backbone::{Backbone, BackboneSpec, ModelError};
use super::metrics::ScoredBox;
use crate::blocks::{PlainConv, RecState};
use crate::events::TruthBox;
use crate::params::{BoundParams, ParamSet};
use crate::sop::SOpLedger;
use crate::tape::{Tape, Var};
use crate::tensor::{ShapeError, Tensor};
use rand_chacha::ChaCha8Rng;

/// Head and decoding knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Anchor side length in pixels; box sizes are regressed as
    /// log-ratios against it.
    pub base_box: f64,
    /// Objectness probability needed to emit a box.
    pub score_thresh: f64,
    /// IoU above which a lower-scored box is suppressed.
    pub nms_iou: f64,
    /// BCE weight on positive cells (they are heavily outnumbered).
    pub pos_weight: f64,
    /// Scale of the box-regression loss against the objectness loss.
    pub box_loss_weight: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            base_box: 12.0,
            score_thresh: 0.3,
            nms_iou: 0.5,
            pos_weight: 8.0,
            box_loss_weight: 2.0,
        }
    }
}

/// Per-step raw head outputs (one anchor per cell).
#[derive(Debug, Clone, Copy)]
pub struct DetectionOutput {
    /// Objectness logits [N, 1, H', W'].
    pub objectness: Var,
    /// Box regression [N, 4, H', W']: (tx, ty, tw, th).
    pub boxes: Var,
}

pub struct DetectModel {
    pub backbone: Backbone,
    pub cfg: DetectConfig,
    head: PlainConv,
}

impl DetectModel {
    pub fn new(spec: BackboneSpec, cfg: DetectConfig) -> Result<Self, ModelError> {
        if spec.n_recurrent() == 0 {
            return Err(ModelError::BadSpec(
                "detection needs at least one recurrent layer".into(),
            ));
        }
        let backbone = Backbone::new(spec)?;
        let head = PlainConv::new("Head", backbone.spec.out_channels(), 5, 3, 1, true);
        Ok(DetectModel { backbone, cfg, head })
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.backbone.register(ps, rng);
        self.head.register(ps, rng);
    }

    pub fn stride(&self) -> usize {
        self.backbone.spec.total_stride()
    }

    /// One step: backbone then head. Also returns the backbone's block
    /// outputs for the sparsity penalty.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        states: &mut Vec<Option<RecState>>,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<(DetectionOutput, Vec<Var>), ShapeError> {
        let (act, outputs) =
            self.backbone.forward_step(tape, bp, x, states, ledger.as_deref_mut())?;
        let raw = self.head.forward(tape, bp, act.values, ledger)?;
        let objectness = tape.slice_channels(raw, 0, 1)?;
        let boxes = tape.slice_channels(raw, 1, 5)?;
        Ok((DetectionOutput { objectness, boxes }, outputs))
    }
}

/// Dense supervision tensors for one step's head grid.
pub struct DetectTargets {
    pub obj_target: Tensor,
    pub obj_weight: Tensor,
    pub box_target: Tensor,
    pub box_weight: Tensor,
    pub n_positive: usize,
}

/// Builds per-cell targets: each truth box claims the cell containing its
/// center; (tx, ty) supervise the sigmoid cell offset, (tw, th) the log
/// size ratio against the anchor.
pub fn build_targets(
    truths: &[&[TruthBox]],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    cfg: &DetectConfig,
) -> DetectTargets {
    let n = truths.len();
    let s = stride as f64;
    let mut obj_target = Tensor::zeros(&[n, 1, grid_h, grid_w]);
    let mut obj_weight = Tensor::full(&[n, 1, grid_h, grid_w], 1.0);
    let mut box_target = Tensor::zeros(&[n, 4, grid_h, grid_w]);
    let mut box_weight = Tensor::zeros(&[n, 4, grid_h, grid_w]);
    let plane = grid_h * grid_w;
    let mut n_positive = 0;
    for (b, frame) in truths.iter().enumerate() {
        for t in *frame {
            let cx = 0.5 * (t.xmin + t.xmax);
            let cy = 0.5 * (t.ymin + t.ymax);
            let j = ((cx / s) as usize).min(grid_w - 1);
            let i = ((cy / s) as usize).min(grid_h - 1);
            let cell = i * grid_w + j;
            if obj_target.data()[b * plane + cell] == 1.0 {
                continue; // cell already claimed by an earlier box
            }
            n_positive += 1;
            obj_target.data_mut()[b * plane + cell] = 1.0;
            obj_weight.data_mut()[b * plane + cell] = cfg.pos_weight;
            let tx = cx / s - j as f64;
            let ty = cy / s - i as f64;
            let tw = ((t.xmax - t.xmin) / cfg.base_box).ln();
            let th = ((t.ymax - t.ymin) / cfg.base_box).ln();
            let base = b * 4 * plane;
            for (ch, v) in [tx, ty, tw, th].into_iter().enumerate() {
                box_target.data_mut()[base + ch * plane + cell] = v;
                box_weight.data_mut()[base + ch * plane + cell] = 1.0;
            }
        }
    }
    DetectTargets { obj_target, obj_weight, box_target, box_weight, n_positive }
}

/// Assembles the step's task loss: weighted BCE on objectness (mean over
/// cells) plus smooth-L1 box regression (mean over positive coordinates).
/// The (tx, ty) channels pass through a sigmoid before regression so they
/// live in cell-offset space; (tw, th) regress raw.
pub fn detection_loss(
    tape: &mut Tape,
    out: &DetectionOutput,
    targets: &DetectTargets,
    cfg: &DetectConfig,
) -> Result<Var, ShapeError> {
    let n_cells = targets.obj_target.len() as f64;
    let obj = tape.bce_logits_sum(out.objectness, &targets.obj_target, &targets.obj_weight)?;
    let obj_mean = tape.affine(obj, 1.0 / n_cells, 0.0);

    let xy = tape.slice_channels(out.boxes, 0, 2)?;
    let wh = tape.slice_channels(out.boxes, 2, 4)?;
    let sxy = tape.sigmoid(xy);
    let plane = {
        let sh = targets.box_target.shape();
        sh[2] * sh[3]
    };
    let n = targets.box_target.shape()[0];
    let split = |t: &Tensor, from: usize, to: usize| {
        let mut data = Vec::with_capacity(n * (to - from) * plane);
        for b in 0..n {
            let base = b * 4 * plane;
            data.extend_from_slice(&t.data()[base + from * plane..base + to * plane]);
        }
        Tensor::new(vec![n, to - from, targets.box_target.shape()[2], targets.box_target.shape()[3]], data)
            .unwrap()
    };
    let xy_t = split(&targets.box_target, 0, 2);
    let xy_w = split(&targets.box_weight, 0, 2);
    let wh_t = split(&targets.box_target, 2, 4);
    let wh_w = split(&targets.box_weight, 2, 4);
    let l_xy = tape.smooth_l1_sum(sxy, &xy_t, &xy_w)?;
    let l_wh = tape.smooth_l1_sum(wh, &wh_t, &wh_w)?;
    let box_sum = tape.add(l_xy, l_wh)?;
    let denom = (4 * targets.n_positive).max(1) as f64;
    let box_mean = tape.affine(box_sum, cfg.box_loss_weight / denom, 0.0);
    tape.add(obj_mean, box_mean)
}

/// Decodes one step's head output into scored, clipped, non-overlapping
/// boxes per batch item. Pure readout: works on values, not gradients.
pub fn decode(
    tape: &Tape,
    out: &DetectionOutput,
    stride: usize,
    width: usize,
    height: usize,
    cfg: &DetectConfig,
) -> Vec<Vec<ScoredBox>> {
    let obj = tape.value(out.objectness);
    let boxes = tape.value(out.boxes);
    let sh = obj.shape();
    let (n, gh, gw) = (sh[0], sh[2], sh[3]);
    let plane = gh * gw;
    let s = stride as f64;
    let mut result = Vec::with_capacity(n);
    for b in 0..n {
        let mut cand: Vec<ScoredBox> = Vec::new();
        for i in 0..gh {
            for j in 0..gw {
                let cell = i * gw + j;
                let logit = obj.data()[b * plane + cell];
                let score = crate::tape::sigmoid(logit);
                if score <= cfg.score_thresh {
                    continue;
                }
                let base = b * 4 * plane;
                let tx = boxes.data()[base + cell];
                let ty = boxes.data()[base + plane + cell];
                let tw = boxes.data()[base + 2 * plane + cell];
                let th = boxes.data()[base + 3 * plane + cell];
                let cx = (j as f64 + crate::tape::sigmoid(tx)) * s;
                let cy = (i as f64 + crate::tape::sigmoid(ty)) * s;
                // Cap the log ratios so a wild early-training logit cannot
                // produce an astronomically sized box.
                let w = cfg.base_box * tw.clamp(-4.0, 4.0).exp();
                let h = cfg.base_box * th.clamp(-4.0, 4.0).exp();
                cand.push(ScoredBox {
                    score,
                    xmin: (cx - w / 2.0).clamp(0.0, width as f64),
                    ymin: (cy - h / 2.0).clamp(0.0, height as f64),
                    xmax: (cx + w / 2.0).clamp(0.0, width as f64),
                    ymax: (cy + h / 2.0).clamp(0.0, height as f64),
                });
            }
        }
        result.push(nms(cand, cfg.nms_iou));
    }
    result
}

fn nms(mut cand: Vec<ScoredBox>, iou_thresh: f64) -> Vec<ScoredBox> {
    cand.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<ScoredBox> = Vec::new();
    'outer: for c in cand {
        for k in &keep {
            let v = super::metrics::iou(
                (c.xmin, c.ymin, c.xmax, c.ymax),
                (k.xmin, k.ymin, k.xmax, k.ymax),
            );
            if v > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(c);
    }
    keep
}
