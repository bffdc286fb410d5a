//! End-to-end training-loop behavior on tiny synthetic datasets: loss
//! decomposition, determinism, divergence handling, resume numbering, and
//! the shared evaluation path.

use cssl::blocks::{RecurrentKind, ThresholdKind};
use cssl::events::generate::{generate_moving_shapes, GenConfig};
use cssl::events::io::{read_sequence, sequence_dir_name, write_sequence};
use cssl::events::bin_events;
use cssl::models::{BackboneSpec, DetectConfig, DetectModel, FlowModel, FlowSpec};
use cssl::params::{BoundParams, ParamSet};
use cssl::rng;
use cssl::tape::Tape;
use cssl::train::sweep::{sweep_csv, two_stage_sweep, SweepConfig};
use cssl::train::{
    evaluate, log_csv, sparsity_loss, train, Dataset, TaskModel, TrainConfig, TrainError,
};
use std::path::Path;

fn gen_dataset(root: &Path, n: usize, frames: usize, base_seed: u64) {
    let cfg = GenConfig {
        width: 16,
        height: 16,
        n_shapes: 1,
        frames,
        min_half: 2.0,
        max_half: 3.0,
        min_speed: 0.4,
        max_speed: 1.0,
        noise_rate: 0.02,
        ..GenConfig::default()
    };
    for i in 0..n {
        let (s, t) = generate_moving_shapes(&cfg, rng::mix_seed(base_seed, i as u64)).unwrap();
        write_sequence(&root.join(sequence_dir_name(i)), &s, &t).unwrap();
    }
}

fn tiny_detect(rec: RecurrentKind, threshold: ThresholdKind) -> TaskModel {
    let spec = BackboneSpec::with_pattern(
        2,
        &[2, 2, 2, 4, 4, 4, 4],
        &[2, 2, 1, 2, 1, 1, 1],
        rec,
        1.0,
        threshold,
    );
    TaskModel::Detect(DetectModel::new(spec, DetectConfig::default()).unwrap())
}

fn tiny_flow() -> TaskModel {
    let mut spec = FlowSpec::desk(RecurrentKind::Mgu, ThresholdKind::Learned);
    spec.enc1 = 4;
    spec.enc2 = 4;
    spec.res = 4;
    spec.rec = 4;
    TaskModel::Flow(FlowModel::new(spec).unwrap())
}

fn tiny_cfg(epochs: usize, seq_len: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        seq_len,
        max_lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Train/val datasets shared by most tests, built once per test process.
fn load_pair(dir: &Path, n_train: usize, n_val: usize, seq_len: usize) -> (Dataset, Dataset) {
    let train_root = dir.join("train");
    let val_root = dir.join("val");
    gen_dataset(&train_root, n_train, seq_len, 900);
    gen_dataset(&val_root, n_val, seq_len, 901);
    (
        Dataset::load(&train_root, seq_len).unwrap(),
        Dataset::load(&val_root, seq_len).unwrap(),
    )
}

#[test]
fn dataset_load_bins_each_sequence_over_the_frame_windows() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 2, 6, 42);
    let data = Dataset::load(dir.path(), 4).unwrap();
    assert_eq!((data.width, data.height, data.seq_len), (16, 16, 4));
    assert_eq!(data.len(), 2);

    for (i, seq) in data.sequences.iter().enumerate() {
        assert_eq!(seq.frames.shape(), &[4, 2, 16, 16]);
        let (events, truth) = read_sequence(&dir.path().join(sequence_dir_name(i))).unwrap();
        let expect = bin_events(&events, 0, 4 * truth.frame_us, 4).unwrap();
        assert_eq!(seq.frames.data(), expect.data());
        assert_eq!(seq.truth.frames.len(), 6);
    }

    // A batch frame is the per-sequence frame slabs in index order.
    let b = data.batch_frame(&[1, 0], 2);
    assert_eq!(b.shape(), &[2, 2, 16, 16]);
    let plane = 2 * 16 * 16;
    assert_eq!(
        &b.data()[..plane],
        &data.sequences[1].frames.data()[2 * plane..3 * plane]
    );
}

#[test]
fn dataset_load_rejects_short_sequences_and_empty_roots() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 1, 3, 5);
    match Dataset::load(dir.path(), 8) {
        Err(TrainError::Config(msg)) => assert!(msg.contains("3 truth frames"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        Dataset::load(empty.path(), 4),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn training_runs_log_every_epoch_and_reduce_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 6, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let cfg = tiny_cfg(5, 4);
    let out = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();

    assert_eq!(out.rows.len(), 5);
    for (i, row) in out.rows.iter().enumerate() {
        assert_eq!(row.epoch, i + 1);
        assert!(row.task_loss.is_finite() && row.task_loss > 0.0);
        assert_eq!(row.sparse_loss, 0.0);
        assert!(row.metric.is_finite());
        assert!(row.gsop > 0.0);
        assert!(row.mean_density > 0.0 && row.mean_density <= 1.0);
        assert!(row.lr > 0.0);
    }
    let first = out.rows.first().unwrap().task_loss;
    let last = out.rows.last().unwrap().task_loss;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(!out.stopped_early);
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let mut cfg = tiny_cfg(2, 4);
    cfg.beta_sparse = 0.01;

    let a = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();
    let b = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();
    assert_eq!(log_csv(&a.rows), log_csv(&b.rows));
    for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
        assert_eq!(ta.data(), tb.data());
    }

    let mut other = cfg.clone();
    other.seed = 12;
    let c = train(&model, &train_data, &val_data, &other, None, 0).unwrap();
    assert_ne!(log_csv(&a.rows), log_csv(&c.rows));
}

#[test]
fn zero_peak_lr_leaves_parameters_bitwise_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Gru, ThresholdKind::Learned);
    let mut cfg = tiny_cfg(1, 4);
    cfg.max_lr = 0.0;

    let mut init = ParamSet::new();
    let mut init_rng = rng::rng_from_seed(cfg.seed);
    model.register(&mut init, &mut init_rng);

    let out = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();
    for ((name, before), after) in init.iter().zip(out.params.tensors()) {
        assert_eq!(before.data(), after.data(), "parameter {name} moved");
    }
}

#[test]
fn divergent_run_aborts_with_the_last_finite_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let mut cfg = tiny_cfg(3, 4);
    // Clipping bounds each update by roughly the learning rate, so only a
    // rate near f64::MAX overflows the loss arithmetic itself.
    cfg.max_lr = 1e308;

    match train(&model, &train_data, &val_data, &cfg, None, 0) {
        Err(TrainError::Diverged { epoch, step, last }) => {
            assert!(epoch >= 1 && epoch <= cfg.epochs);
            assert!(step >= 1, "the first step starts from finite parameters");
            for (name, t) in last.params.iter() {
                assert!(
                    t.data().iter().all(|v| v.is_finite()),
                    "parameter {name} is non-finite in the rescue checkpoint"
                );
            }
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn total_loss_decomposes_into_task_plus_sparsity_penalty() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 2, 4, 77);
    let data = Dataset::load(dir.path(), 4).unwrap();
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let mut ps = ParamSet::new();
    let mut r = rng::rng_from_seed(3);
    model.register(&mut ps, &mut r);

    let beta = 0.05;
    let mut tape = Tape::new();
    let bp = BoundParams::bind(&mut tape, &ps);
    let mut states = model.fresh_states();
    let chunk = [0usize, 1];
    let mut outputs = Vec::new();
    let mut losses = Vec::new();
    for t in 0..data.seq_len {
        let x = tape.input(data.batch_frame(&chunk, t));
        let (_, blocks) = model.forward_step(&mut tape, &bp, x, &mut states, None).unwrap();
        for &v in &blocks {
            losses.push(tape.value(v).data().iter().map(|a| a.abs()).sum::<f64>());
        }
        outputs.push(blocks);
    }
    let sparse = sparsity_loss(&mut tape, &outputs, beta).unwrap().unwrap();
    let sparse_v = tape.value(sparse).data()[0];

    // Hand-computed penalty: beta / (batch * steps) * sum of L1 norms.
    let hand = beta / (2.0 * data.seq_len as f64) * losses.iter().sum::<f64>();
    assert!(
        (sparse_v - hand).abs() <= 1e-12 * hand.abs().max(1.0),
        "penalty {sparse_v} vs hand {hand}"
    );

    // And the combined scalar is exactly task + penalty.
    let task = tape.input(cssl::tensor::Tensor::full(&[1], 0.625));
    let total = tape.add(task, sparse).unwrap();
    let total_v = tape.value(total).data()[0];
    assert!((total_v - (0.625 + sparse_v)).abs() <= 1e-12);

    // beta = 0 adds no graph nodes.
    assert!(sparsity_loss(&mut tape, &outputs, 0.0).unwrap().is_none());
}

#[test]
fn every_parameter_receives_gradient_on_a_training_batch() {
    let dir = tempfile::tempdir().unwrap();
    // Denser streams than the other tests use, so that every context-aware
    // gate fires somewhere and the conv weights behind it see gradient.
    let cfg = GenConfig {
        width: 16,
        height: 16,
        n_shapes: 1,
        frames: 6,
        min_half: 2.0,
        max_half: 3.0,
        min_speed: 0.8,
        max_speed: 1.2,
        contrast_threshold: 0.15,
        noise_rate: 0.1,
        ..GenConfig::default()
    };
    for i in 0..4 {
        let (s, t) = generate_moving_shapes(&cfg, rng::mix_seed(55, i as u64)).unwrap();
        write_sequence(&dir.path().join(sequence_dir_name(i)), &s, &t).unwrap();
    }
    let data = Dataset::load(dir.path(), 6).unwrap();

    let wide = BackboneSpec::with_pattern(
        2,
        &[4, 4, 4, 8, 8, 8, 8],
        &[2, 2, 1, 2, 1, 1, 1],
        RecurrentKind::Mgu,
        1.0,
        ThresholdKind::Learned,
    );
    for (label, model) in [
        (
            "detect",
            TaskModel::Detect(DetectModel::new(wide, DetectConfig::default()).unwrap()),
        ),
        ("flow", tiny_flow()),
    ] {
        let mut ps = ParamSet::new();
        let mut r = rng::rng_from_seed(21);
        model.register(&mut ps, &mut r);
        // Bias every context gate open: a gate that never fires leaves the
        // conv behind it without gradient by design, and here we are testing
        // the gradient plumbing, not the firing statistics at init. The
        // residual blocks derive their threshold from the first half of
        // conv2's channels, so that half of the bias is lowered too.
        let names: Vec<String> = ps.names().to_vec();
        for (name, t) in names.iter().zip(ps.tensors_mut()) {
            if name.ends_with(".thr_b") {
                for v in t.data_mut() {
                    *v = -4.0;
                }
            } else if name.ends_with("_Conv2.b") {
                let half = t.len() / 2;
                for v in &mut t.data_mut()[..half] {
                    *v = -4.0;
                }
            } else if name.ends_with(".b_xh") {
                // Zero-init recurrent cells emit exactly zero until their
                // candidate path lifts them over the gate; bias it so the
                // deep layers carry signal from the first step.
                for v in t.data_mut() {
                    *v = 1.0;
                }
            }
        }

        // Accumulate gradient hits over a few batches; every parameter
        // tensor, thresholds included, must see a nonzero gradient somewhere.
        let mut hit: Vec<bool> = ps.tensors().iter().map(|t| t.data().is_empty()).collect();
        for chunk in [[0usize, 1], [2, 3]] {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &ps);
            let mut states = model.fresh_states();
            let mut outputs = Vec::new();
            let mut task_acc = None;
            for t in 0..data.seq_len {
                let x = tape.input(data.batch_frame(&chunk, t));
                let (out, blocks) = model.forward_step(&mut tape, &bp, x, &mut states, None).unwrap();
                let l = match (&model, &out) {
                    (TaskModel::Detect(m), cssl::train::StepOutput::Detect(o)) => {
                        let sh = tape.value(o.objectness).shape().to_vec();
                        let truths: Vec<&[cssl::events::TruthBox]> = chunk
                            .iter()
                            .map(|&i| data.sequences[i].truth.frames[t].boxes.as_slice())
                            .collect();
                        let targets =
                            cssl::models::build_targets(&truths, sh[2], sh[3], m.stride(), &m.cfg);
                        cssl::models::detection_loss(&mut tape, o, &targets, &m.cfg).unwrap()
                    }
                    (TaskModel::Flow(_), cssl::train::StepOutput::Flow(f)) => {
                        let target = data.sequences[chunk[0]].truth.flow_frame(t);
                        let mask = data.sequences[chunk[0]].truth.flow_mask(t);
                        let mut bt = Vec::new();
                        let mut bm = Vec::new();
                        for &i in &chunk {
                            bt.extend_from_slice(data.sequences[i].truth.flow_frame(t).data());
                            bm.extend_from_slice(data.sequences[i].truth.flow_mask(t).data());
                        }
                        let _ = (target, mask);
                        let bt = cssl::tensor::Tensor::new(vec![2, 2, 16, 16], bt).unwrap();
                        let bm = cssl::tensor::Tensor::new(vec![2, 1, 16, 16], bm).unwrap();
                        tape.charbonnier_epe_sum(*f, &bt, &bm, 1e-3).unwrap()
                    }
                    _ => unreachable!(),
                };
                task_acc = Some(match task_acc {
                    None => l,
                    Some(a) => tape.add(a, l).unwrap(),
                });
                outputs.push(blocks);
            }
            let sparse = sparsity_loss(&mut tape, &outputs, 0.01).unwrap().unwrap();
            let total = tape.add(task_acc.unwrap(), sparse).unwrap();
            tape.backward(total).unwrap();
            for (slot, &v) in hit.iter_mut().zip(bp.vars()) {
                if tape.grad_data(v).iter().any(|&g| g != 0.0) {
                    *slot = true;
                }
            }
        }
        for (hit, name) in hit.iter().zip(ps.names()) {
            assert!(hit, "{label}: parameter {name} never received a gradient");
        }
    }
}

#[test]
fn resume_continues_epoch_numbering_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let cfg = tiny_cfg(3, 4);

    let mut two = cfg.clone();
    two.epochs = 2;
    let stage = train(&model, &train_data, &val_data, &two, None, 0).unwrap();
    assert_eq!(stage.rows.last().unwrap().epoch, 2);

    let resumed = train(
        &model,
        &train_data,
        &val_data,
        &cfg,
        Some(stage.params),
        2,
    )
    .unwrap();
    assert_eq!(resumed.rows.len(), 1);
    assert_eq!(resumed.rows[0].epoch, 3);

    // The resumed epoch sits on the annealing side of the cycle: its last
    // learning rate is below the peak.
    assert!(resumed.rows[0].lr < cfg.max_lr);
}

#[test]
fn eval_reproduces_the_final_training_row_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::MinimalRnn, ThresholdKind::Learned);
    let cfg = tiny_cfg(2, 4);
    let out = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();
    let last = out.rows.last().unwrap();

    let ev = evaluate(&model, &out.params, &val_data, cfg.batch_size).unwrap();
    assert_eq!(ev.metric, last.metric);
    assert_eq!(ev.gsop, last.gsop);
    assert_eq!(ev.mean_density, last.mean_density);
}

#[test]
fn early_stop_honors_the_target_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let mut cfg = tiny_cfg(4, 4);
    cfg.target_metric = Some(-1.0);

    let out = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.rows.len(), 1);
}

#[test]
fn mismatched_checkpoint_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let detect = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let flow = tiny_flow();
    let mut ps = ParamSet::new();
    let mut r = rng::rng_from_seed(1);
    flow.register(&mut ps, &mut r);

    let cfg = tiny_cfg(1, 4);
    match train(&detect, &train_data, &val_data, &cfg, Some(ps), 0) {
        Err(TrainError::Config(msg)) => assert!(msg.contains("checkpoint"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn two_stage_sweep_orders_rows_and_reuses_the_reference_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, val_data) = load_pair(dir.path(), 4, 2, 4);
    let model = tiny_detect(RecurrentKind::Mgu, ThresholdKind::Learned);
    let cfg = tiny_cfg(2, 4);
    let stage1 = train(&model, &train_data, &val_data, &cfg, None, 0).unwrap();

    let sweep = SweepConfig {
        betas: vec![0.1, 0.01],
        stage2_epoch_frac: 0.5,
        stage2_lr_frac: 0.1,
    };
    let runs = two_stage_sweep(&model, &train_data, &val_data, &cfg, &stage1.params, &sweep)
        .unwrap();

    let labels: Vec<&str> = runs.iter().map(|r| r.row.label.as_str()).collect();
    assert_eq!(labels, ["0.1", "0.01", "W/O"]);
    assert_eq!(runs[0].output.as_ref().unwrap().rows.len(), 1);
    assert!(runs[2].output.is_none());

    let reference = evaluate(&model, &stage1.params, &val_data, cfg.batch_size).unwrap();
    assert_eq!(runs[2].row.metric, reference.metric);
    assert_eq!(runs[2].row.gsop, reference.gsop);

    let csv = sweep_csv(&runs.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("label,beta,metric,gsop,mean_density"));
    assert!(csv.lines().last().unwrap().starts_with("W/O,,"));
}

#[test]
fn log_csv_uses_the_pinned_header_and_round_trip_floats() {
    let rows = vec![cssl::train::EpochRow {
        epoch: 1,
        task_loss: 0.1,
        sparse_loss: 0.25,
        metric: 0.5,
        gsop: 1.5,
        mean_density: 0.125,
        lr: 3e-4,
    }];
    let csv = log_csv(&rows);
    assert_eq!(
        csv,
        "epoch,task_loss,sparse_loss,metric,gsop,mean_density,lr\n1,0.1,0.25,0.5,1.5,0.125,0.0003\n"
    );
}
