//! Scratch probe: convergence speed of the desk models on the toy corpora.

use cssl::blocks::{RecurrentKind, ThresholdKind};
use cssl::events::generate::{generate_moving_shapes, sequence_seed, GenConfig};
use cssl::events::bin_events;
use cssl::rng::mix_seed;
use cssl::train::{train, Dataset, Sequence, TaskModel, TrainConfig};
use std::time::Instant;

fn build_split(cfg: &GenConfig, family: u64, n: usize) -> Dataset {
    let span = cfg.frames as u64 * cfg.frame_us;
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let (events, truth) =
            generate_moving_shapes(cfg, sequence_seed(family, i as u64)).unwrap();
        let frames = bin_events(&events, 0, span, cfg.frames).unwrap();
        sequences.push(Sequence { frames, truth });
    }
    Dataset {
        width: cfg.width,
        height: cfg.height,
        seq_len: cfg.frames,
        sequences,
    }
}

fn detect_corpus() -> (Dataset, Dataset) {
    let cfg = GenConfig {
        noise_rate: 0.02,
        ..GenConfig::default()
    };
    let t0 = Instant::now();
    let train = build_split(&cfg, mix_seed(7, 0), 200);
    let val = build_split(&cfg, mix_seed(7, 1), 40);
    println!("corpus 64x64 gen: {:.1}s", t0.elapsed().as_secs_f64());
    (train, val)
}

fn flow_corpus() -> (Dataset, Dataset) {
    let cfg = GenConfig {
        width: 32,
        height: 32,
        min_half: 3.0,
        max_half: 6.0,
        noise_rate: 0.02,
        ..GenConfig::default()
    };
    let t0 = Instant::now();
    let train = build_split(&cfg, mix_seed(11, 0), 120);
    let val = build_split(&cfg, mix_seed(11, 1), 24);
    println!("corpus 32x32 gen: {:.1}s", t0.elapsed().as_secs_f64());
    (train, val)
}

fn run(model: &TaskModel, tr: &Dataset, va: &Dataset, cfg: &TrainConfig) {
    let t0 = Instant::now();
    match train(model, tr, va, cfg, None, 0) {
        Ok(out) => {
            for r in &out.rows {
                println!(
                    "epoch {:2}  loss {:8.4}  metric {:.4}  gsop {:.4}  density {:.4}  lr {:.2e}",
                    r.epoch, r.task_loss, r.metric, r.gsop, r.mean_density, r.lr
                );
            }
            println!(
                "done in {:.1}s  early_stop={}  epochs={}",
                t0.elapsed().as_secs_f64(),
                out.stopped_early,
                out.rows.len()
            );
        }
        Err(e) => println!("train error after {:.1}s: {e}", t0.elapsed().as_secs_f64()),
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "mgu".into());
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs;
    match mode.as_str() {
        "mgu" | "gru" | "minimalrnn" | "relu" => {
            let (tr, va) = detect_corpus();
            let (rec, thr) = match mode.as_str() {
                "relu" => (RecurrentKind::Mgu, ThresholdKind::Relu),
                "gru" => (RecurrentKind::Gru, ThresholdKind::Learned),
                "minimalrnn" => (RecurrentKind::MinimalRnn, ThresholdKind::Learned),
                _ => (RecurrentKind::Mgu, ThresholdKind::Learned),
            };
            cfg.target_metric = Some(0.85);
            let model = TaskModel::detect_desk(rec, thr, cfg.alpha).unwrap();
            run(&model, &tr, &va, &cfg);
        }
        "flow" => {
            let (tr, va) = flow_corpus();
            cfg.target_metric = Some(0.45);
            let model =
                TaskModel::flow_desk(RecurrentKind::Mgu, ThresholdKind::Learned, cfg.alpha)
                    .unwrap();
            run(&model, &tr, &va, &cfg);
        }
        other => eprintln!("unknown probe mode {other}"),
    }
}
