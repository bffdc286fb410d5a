//! End-to-end tests of the csslkit binary: exit codes, manifest-first
//! behavior, deterministic outputs, and the per-command file contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn csslkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csslkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Generates a small dataset under `dir/data` and returns its root.
fn gen_tiny(dir: &Path) -> PathBuf {
    let cfg = write_cfg(
        dir,
        "gen.cfg",
        "width=16\nheight=16\nn_shapes=1\nmin_half=2\nmax_half=3\n\
         min_speed=0.4\nmax_speed=1\nnoise_rate=0.02\ntrain_sequences=6\nval_sequences=3\n",
    );
    let data = dir.join("data");
    let out = csslkit(&["gen", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "gen failed: {}", stderr_of(&out));
    data
}

const TINY_TRAIN: &str = "batch_size=2\nmax_lr=0.001\n";

/// Runs a small training job; `extra` may override `epochs` (default 2).
fn train_tiny(dir: &Path, data: &Path, extra: &str, out_name: &str) -> PathBuf {
    let epochs = if extra.contains("epochs=") { "" } else { "epochs=2\n" };
    let cfg = write_cfg(
        dir,
        &format!("{out_name}.cfg"),
        &format!("data={}\n{TINY_TRAIN}{epochs}{extra}", data.display()),
    );
    let run = dir.join(out_name);
    let out = csslkit(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    run
}

/// All files under `root` except manifests, as (relative path, bytes),
/// sorted. Manifests record their own output directory, so they are the
/// one artifact allowed to differ between a run and its replay.
fn tree_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, acc);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != "manifest.txt" {
                    acc.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    acc
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree_files(a), tree_files(b));
    let names_a: Vec<&String> = ta.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = tb.iter().map(|(n, _)| n).collect();
    assert_eq!(names_a, names_b, "file lists differ between {a:?} and {b:?}");
    for ((name, bytes_a), (_, bytes_b)) in ta.iter().zip(&tb) {
        assert_eq!(bytes_a, bytes_b, "{name} differs between {a:?} and {b:?}");
    }
    assert!(!ta.is_empty(), "no files to compare under {a:?}");
}

#[test]
fn gen_same_seed_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "gen.cfg",
        "width=16\nheight=16\nn_shapes=1\nmin_half=2\nmax_half=3\ntrain_sequences=3\nval_sequences=2\nnoise_rate=0.05\n",
    );
    for name in ["a", "b"] {
        let out = csslkit(&[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    assert_same_tree(&dir.path().join("a"), &dir.path().join("b"));
}

#[test]
fn gen_zero_sequences_still_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", "train_sequences=0\nval_sequences=0\n");
    let out_dir = dir.path().join("empty");
    let out = csslkit(&["gen", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out_dir.join("manifest.txt").is_file());
    for split in ["train", "val"] {
        assert!(out_dir.join(split).is_dir());
        assert_eq!(fs::read_dir(out_dir.join(split)).unwrap().count(), 0);
    }
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", "wdith=16\n");
    let out = csslkit(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("wdith"), "stderr should name the key: {err}");
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let cfg = write_cfg(dir.path(), "t.cfg", &format!("data={}\n{TINY_TRAIN}", data.display()));
    let out = csslkit(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--task",
        "segmentation",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("task"));
}

#[test]
fn train_missing_dataset_fails_with_the_path_and_leaves_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "t.cfg", &format!("data={}/nowhere\n{TINY_TRAIN}", dir.path().display()));
    let run = dir.path().join("run");
    let out = csslkit(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("nowhere"), "stderr: {}", stderr_of(&out));
    // The manifest is written before any work begins.
    assert!(run.join("manifest.txt").is_file());
}

#[test]
fn eval_reproduces_the_training_log_metric_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let run = train_tiny(dir.path(), &data, "", "run");

    let log = fs::read_to_string(run.join("training.csv")).unwrap();
    let last = log.trim_end().lines().last().unwrap();
    let metric_logged = last.split(',').nth(3).unwrap();

    // Same batch size as training so evaluation chunks match exactly.
    let eval_cfg = write_cfg(
        dir.path(),
        "e.cfg",
        &format!("checkpoint={}/model.ckpt\ndata={}\nbatch_size=2\n", run.display(), data.display()),
    );
    let ev = dir.path().join("ev");
    let out = csslkit(&["eval", "--config", eval_cfg.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert_eq!(row.split(',').next().unwrap(), metric_logged);

    // Density report: one row per backbone layer plus head and totals.
    let density = fs::read_to_string(ev.join("density.csv")).unwrap();
    let labels: Vec<&str> = density
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    for name in ["Conv1", "Res1_Conv2", "Res2_Conv2", "Res3_Conv2", "Recurrent1", "Recurrent2", "Recurrent3"] {
        assert!(labels.contains(&name), "density.csv misses {name}: {labels:?}");
    }
    assert!(ev.join("density_bars.svg").is_file());
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let first = train_tiny(dir.path(), &data, "", "first");
    let resumed = train_tiny(
        dir.path(),
        &data,
        &format!("resume={}/model.ckpt\nepochs=4\n", first.display()),
        "resumed",
    );
    let log = fs::read_to_string(resumed.join("training.csv")).unwrap();
    let epochs: Vec<&str> = log.trim_end().lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, vec!["3", "4"]);
}

#[test]
fn divergent_training_exits_4_and_writes_a_rescue_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let cfg = write_cfg(
        dir.path(),
        "boom.cfg",
        &format!(
            // No warmup, so the very first update applies the full 1e308
            // rate and the following loss evaluation overflows.
            "data={}\nepochs=1\nbatch_size=2\nmax_lr=1e308\npct_warmup=0\n",
            data.display()
        ),
    );
    let run = dir.path().join("boom");
    let out = csslkit(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("training.csv").is_file());
}

#[test]
fn flow_task_trains_and_logs_endpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let run = train_tiny(dir.path(), &data, "task=flow\nepochs=1\n", "flowrun");
    let log = fs::read_to_string(run.join("training.csv")).unwrap();
    let metric: f64 = log.trim_end().lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(metric > 0.0, "flow endpoint error should start positive, got {metric}");
}

#[test]
fn sweep_writes_one_row_per_beta_plus_reference_and_baseline_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let cssl_run = train_tiny(dir.path(), &data, "", "cssl");
    let relu_run = train_tiny(dir.path(), &data, "baseline=true\n", "relu");

    let base = format!(
        "checkpoint={}/model.ckpt\ndata={}\nbetas=0.1,0.01\nepochs=2\nbatch_size=2\nmax_lr=0.001\n",
        cssl_run.display(),
        data.display()
    );
    let cfg = write_cfg(dir.path(), "sweep.cfg", &base);
    let sw = dir.path().join("sweep");
    let out = csslkit(&["sweep", "--config", cfg.to_str().unwrap(), "--out", sw.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let csv = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 1, "header + one row per beta + reference: {csv}");
    assert!(lines.last().unwrap().starts_with("W/O,"));

    let cfg2 = write_cfg(
        dir.path(),
        "sweep2.cfg",
        &format!("{base}baseline_checkpoint={}/model.ckpt\n", relu_run.display()),
    );
    let sw2 = dir.path().join("sweep2");
    let out = csslkit(&[
        "sweep",
        "--config",
        cfg2.to_str().unwrap(),
        "--baseline",
        "--out",
        sw2.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let csv2 = fs::read_to_string(sw2.join("sweep.csv")).unwrap();
    assert!(csv2.starts_with("label,beta,metric,gsop,mean_density,relu_metric,relu_gsop,relu_mean_density\n"));
    assert_eq!(csv2.trim_end().lines().count(), 1 + 2 + 1);
}

#[test]
fn rerun_replays_a_training_run_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let run = train_tiny(dir.path(), &data, "", "orig");
    let replay = dir.path().join("replay");
    let out = csslkit(&[
        "rerun",
        run.join("manifest.txt").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_same_tree(&run, &replay);
}
