//! Rough timing probe for one training-style step at desk scale.

use cssl::blocks::{RecState, RecurrentKind, ThresholdKind};
use cssl::models::{BackboneSpec, DetectModel, DetectConfig, build_targets, detection_loss};
use cssl::params::{BoundParams, ParamSet};
use cssl::rng::{rng_from_seed, uniform};
use cssl::tape::Tape;
use cssl::tensor::Tensor;
use cssl::events::TruthBox;
use std::time::Instant;

fn run(kind: ThresholdKind, density: f64, label: &str) {
    run_sched(kind, density, label, None)
}

fn run_sched(kind: ThresholdKind, density: f64, label: &str, sched: Option<cssl::tape::ConvSchedule>) {
    let spec = BackboneSpec::desk(RecurrentKind::Mgu, kind);
    let model = DetectModel::new(spec, DetectConfig::default()).unwrap();
    let mut ps = ParamSet::new();
    let mut rng = rng_from_seed(3);
    model.register(&mut ps, &mut rng);

    let n = 4usize;
    let (h, w) = (64usize, 64usize);
    let frames: Vec<Tensor> = (0..8)
        .map(|_| {
            let mut data = vec![0.0; n * 2 * h * w];
            for v in data.iter_mut() {
                if uniform(&mut rng, 0.0, 1.0) < density {
                    *v = uniform(&mut rng, 0.5, 3.0);
                }
            }
            Tensor::new(vec![n, 2, h, w], data).unwrap()
        })
        .collect();
    let truth = vec![TruthBox { class: 0, xmin: 10.0, ymin: 12.0, xmax: 22.0, ymax: 24.0 }];
    let truths: Vec<&[TruthBox]> = (0..n).map(|_| truth.as_slice()).collect();

    let mut best_fwd = f64::MAX;
    let mut best_bwd = f64::MAX;
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        if let Some(s) = sched {
            tape.set_conv_schedule(s);
        }
        let bp = BoundParams::bind(&mut tape, &ps);
        let mut states: Vec<Option<RecState>> = Vec::new();
        let mut loss = None;
        for f in &frames {
            let x = tape.input(f.clone());
            let (out, _blocks) = model.forward_step(&mut tape, &bp, x, &mut states, None).unwrap();
            let sh = tape.value(out.objectness).shape().to_vec();
            let targets = build_targets(&truths, sh[2], sh[3], model.stride(), &model.cfg);
            let l = detection_loss(&mut tape, &out, &targets, &model.cfg).unwrap();
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l).unwrap(),
            });
        }
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        tape.backward(loss.unwrap()).unwrap();
        let bwd = t1.elapsed().as_secs_f64();
        best_fwd = best_fwd.min(fwd);
        best_bwd = best_bwd.min(bwd);
    }
    println!("{label}: forward {best_fwd:.3}s  backward {best_bwd:.3}s  total {:.3}s", best_fwd + best_bwd);
}

fn main() {
    use cssl::tape::ConvSchedule;
    run(ThresholdKind::Learned, 0.10, "learned auto   ");
    run(ThresholdKind::Relu, 0.10, "relu    auto   ");
    run_sched(ThresholdKind::Relu, 0.10, "relu    gather ", Some(ConvSchedule::Gather));
    run_sched(ThresholdKind::Relu, 0.10, "relu    scatter", Some(ConvSchedule::Scatter));
}
