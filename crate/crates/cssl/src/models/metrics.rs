//! Evaluation metrics: a single-threshold average-precision score for
//! detection and endpoint-error statistics for optical flow.

use crate::events::TruthBox;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("flow metrics over an empty mask: no pixels to average")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A detection with its confidence. Detection here is class-agnostic
/// localization: the score says "a shape is here", the box says where.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

pub fn iou(
    a: (f64, f64, f64, f64),
    b: (f64, f64, f64, f64),
) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn scored_tuple(s: &ScoredBox) -> (f64, f64, f64, f64) {
    (s.xmin, s.ymin, s.xmax, s.ymax)
}

fn truth_tuple(t: &TruthBox) -> (f64, f64, f64, f64) {
    (t.xmin, t.ymin, t.xmax, t.ymax)
}

/// Average precision at one IoU threshold with 11-point interpolation.
///
/// `frames` pairs each frame's predictions with its ground-truth boxes;
/// predictions are pooled over all frames, sorted by descending score
/// (deterministic tie-break on frame index), and greedily matched to the
/// highest-IoU unmatched truth in their own frame. A dataset with no truth
/// boxes scores 1.0 when nothing is predicted, 0.0 otherwise.
pub fn map_lite(frames: &[(Vec<ScoredBox>, Vec<TruthBox>)], iou_thresh: f64) -> f64 {
    assert!(iou_thresh > 0.0 && iou_thresh < 1.0, "iou threshold must be in (0,1)");
    let n_truth: usize = frames.iter().map(|(_, t)| t.len()).sum();
    let mut pool: Vec<(usize, ScoredBox)> = Vec::new();
    for (fi, (preds, _)) in frames.iter().enumerate() {
        for p in preds {
            pool.push((fi, *p));
        }
    }
    if n_truth == 0 {
        return if pool.is_empty() { 1.0 } else { 0.0 };
    }
    pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));

    let mut matched: Vec<Vec<bool>> = frames.iter().map(|(_, t)| vec![false; t.len()]).collect();
    let mut tps = Vec::with_capacity(pool.len());
    for (fi, p) in &pool {
        let truths = &frames[*fi].1;
        let mut best = (0usize, 0.0f64);
        for (ti, t) in truths.iter().enumerate() {
            if matched[*fi][ti] {
                continue;
            }
            let v = iou(scored_tuple(p), truth_tuple(t));
            if v > best.1 {
                best = (ti, v);
            }
        }
        if best.1 >= iou_thresh {
            matched[*fi][best.0] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }

    // Precision/recall after each prediction, then 11-point interpolation.
    let mut prs = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / n_truth as f64;
        prs.push((recall, precision));
    }
    let mut ap = 0.0;
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        let p_max = prs
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p_max;
    }
    ap / 11.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMetrics {
    /// Mean endpoint error over masked pixels, in pixels.
    pub aee: f64,
    /// Percentage of masked pixels whose endpoint error exceeds the
    /// outlier threshold.
    pub outlier_pct: f64,
}

/// Endpoint-error statistics of `pred` against `truth` over the pixels
/// where `mask` is nonzero. Both flow fields are [2, H, W] (or [N, 2, H, W]
/// with matching mask batch); the mask carries one channel.
pub fn flow_metrics(
    pred: &Tensor,
    truth: &Tensor,
    mask: &Tensor,
    outlier_px: f64,
) -> Result<FlowMetrics, MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::Shape(format!(
            "pred {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let plane = mask.len();
    if pred.len() != 2 * plane {
        return Err(MetricsError::Shape(format!(
            "flow {:?} does not pair with mask of {} pixels",
            pred.shape(),
            plane
        )));
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut outliers = 0usize;
    for i in 0..plane {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let dx = pred.data()[i] - truth.data()[i];
        let dy = pred.data()[plane + i] - truth.data()[plane + i];
        let epe = (dx * dx + dy * dy).sqrt();
        sum += epe;
        if epe > outlier_px {
            outliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(FlowMetrics {
        aee: sum / n as f64,
        outlier_pct: 100.0 * outliers as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tb(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> TruthBox {
        TruthBox { class: 0, xmin, ymin, xmax, ymax }
    }

    fn sb(score: f64, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> ScoredBox {
        ScoredBox { score, xmin, ymin, xmax, ymax }
    }

    #[test]
    fn exact_match_scores_one() {
        let frames = vec![(vec![sb(1.0, 0.0, 0.0, 4.0, 4.0)], vec![tb(0.0, 0.0, 4.0, 4.0)])];
        assert_eq!(map_lite(&frames, 0.5), 1.0);
    }

    #[test]
    fn offset_boxes_have_iou_one_seventh_and_miss() {
        let v = iou((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        let frames = vec![(vec![sb(0.9, 0.0, 0.0, 2.0, 2.0)], vec![tb(1.0, 1.0, 3.0, 3.0)])];
        assert_eq!(map_lite(&frames, 0.5), 0.0);
    }

    #[test]
    fn false_positive_above_true_positive_caps_precision() {
        // One truth; a spurious high-score box then an exact match.
        let frames = vec![(
            vec![sb(0.9, 20.0, 20.0, 24.0, 24.0), sb(0.5, 0.0, 0.0, 4.0, 4.0)],
            vec![tb(0.0, 0.0, 4.0, 4.0)],
        )];
        // Recall reaches 1.0 only at precision 1/2: AP = 11 * 0.5 / 11.
        assert!((map_lite(&frames, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_pr_oracle_on_random_boxes() {
        let mut rng = crate::rng::rng_from_seed(77);
        for _ in 0..50 {
            let mut frames = Vec::new();
            for _ in 0..3 {
                let mut preds = Vec::new();
                let mut truths = Vec::new();
                for _ in 0..crate::rng::uniform_usize(&mut rng, 6) {
                    let x = crate::rng::uniform(&mut rng, 0.0, 20.0);
                    let y = crate::rng::uniform(&mut rng, 0.0, 20.0);
                    let w = crate::rng::uniform(&mut rng, 2.0, 8.0);
                    let h = crate::rng::uniform(&mut rng, 2.0, 8.0);
                    preds.push(sb(crate::rng::uniform01(&mut rng), x, y, x + w, y + h));
                }
                for _ in 0..crate::rng::uniform_usize(&mut rng, 4) {
                    let x = crate::rng::uniform(&mut rng, 0.0, 20.0);
                    let y = crate::rng::uniform(&mut rng, 0.0, 20.0);
                    let w = crate::rng::uniform(&mut rng, 2.0, 8.0);
                    let h = crate::rng::uniform(&mut rng, 2.0, 8.0);
                    truths.push(tb(x, y, x + w, y + h));
                }
                frames.push((preds, truths));
            }
            let fast = map_lite(&frames, 0.5);
            let slow = oracle_ap(&frames, 0.5);
            assert!(
                (fast - slow).abs() < 1e-12,
                "ap {fast} vs oracle {slow} on {frames:?}"
            );
        }
    }

    /// Direct re-derivation: walk every distinct score threshold, redo the
    /// greedy matching from scratch, and take 11-point max precisions.
    fn oracle_ap(frames: &[(Vec<ScoredBox>, Vec<TruthBox>)], iou_thresh: f64) -> f64 {
        let n_truth: usize = frames.iter().map(|(_, t)| t.len()).sum();
        if n_truth == 0 {
            let any = frames.iter().any(|(p, _)| !p.is_empty());
            return if any { 0.0 } else { 1.0 };
        }
        let mut pool: Vec<(usize, ScoredBox)> = Vec::new();
        for (fi, (preds, _)) in frames.iter().enumerate() {
            for p in preds {
                pool.push((fi, *p));
            }
        }
        pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut points = Vec::new();
        for k in 1..=pool.len() {
            // Rematch using only the top-k predictions.
            let mut matched: Vec<Vec<bool>> =
                frames.iter().map(|(_, t)| vec![false; t.len()]).collect();
            let mut tp = 0usize;
            for (fi, p) in &pool[..k] {
                let truths = &frames[*fi].1;
                let mut best = (0usize, 0.0f64);
                for (ti, t) in truths.iter().enumerate() {
                    if matched[*fi][ti] {
                        continue;
                    }
                    let v = iou(scored_tuple(p), truth_tuple(t));
                    if v > best.1 {
                        best = (ti, v);
                    }
                }
                if best.1 >= iou_thresh {
                    matched[*fi][best.0] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / n_truth as f64, tp as f64 / k as f64));
        }
        let mut ap = 0.0;
        for k in 0..=10 {
            let r = k as f64 / 10.0;
            let p_max = points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += p_max;
        }
        ap / 11.0
    }

    #[test]
    fn flow_metrics_match_hand_values() {
        let pred = Tensor::new(vec![2, 1, 2], vec![1.0, 4.0, 0.0, 0.0]).unwrap();
        let truth = Tensor::zeros(&[2, 1, 2]);
        let mask = Tensor::full(&[1, 1, 2], 1.0);
        let m = flow_metrics(&pred, &truth, &mask, 3.0).unwrap();
        assert!((m.aee - 2.5).abs() < 1e-12);
        assert!((m.outlier_pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn identical_flow_is_perfect() {
        let pred = Tensor::full(&[2, 3, 3], 1.5);
        let mask = Tensor::full(&[1, 3, 3], 1.0);
        let m = flow_metrics(&pred, &pred, &mask, 3.0).unwrap();
        assert_eq!(m.aee, 0.0);
        assert_eq!(m.outlier_pct, 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let pred = Tensor::zeros(&[2, 2, 2]);
        let mask = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            flow_metrics(&pred, &pred, &mask, 3.0),
            Err(MetricsError::EmptyMask)
        ));
    }

    #[test]
    fn random_fields_match_per_pixel_oracle() {
        let mut rng = crate::rng::rng_from_seed(5);
        let (h, w) = (5, 4);
        let mk = |rng: &mut _| {
            let data: Vec<f64> = (0..2 * h * w)
                .map(|_| crate::rng::uniform(rng, -4.0, 4.0))
                .collect();
            Tensor::new(vec![2, h, w], data).unwrap()
        };
        let pred = mk(&mut rng);
        let truth = mk(&mut rng);
        let mask_data: Vec<f64> = (0..h * w)
            .map(|_| if crate::rng::uniform01(&mut rng) < 0.7 { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::new(vec![1, h, w], mask_data).unwrap();
        let m = flow_metrics(&pred, &truth, &mask, 3.0).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        let mut out = 0;
        for i in 0..h * w {
            if mask.data()[i] == 0.0 {
                continue;
            }
            let dx = pred.data()[i] - truth.data()[i];
            let dy = pred.data()[h * w + i] - truth.data()[h * w + i];
            let e = dx.hypot(dy);
            sum += e;
            n += 1;
            if e > 3.0 {
                out += 1;
            }
        }
        assert!((m.aee - sum / n as f64).abs() < 1e-15);
        assert!((m.outlier_pct - 100.0 * out as f64 / n as f64).abs() < 1e-15);
    }
}
