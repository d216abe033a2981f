use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmtrack::config::ModelConfig;
use mmtrack::synth::{Corruption, SceneSpec};
use mmtrack::train::TrainConfig;

fn mmtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmtrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        length: 10,
        corruption: Corruption::Random {
            rgb: 1,
            x: 1,
            min_len: 2,
            max_len: 3,
        },
        ..SceneSpec::default()
    }
}

/// A tiny model and schedule so that every subcommand finishes in seconds.
fn write_tiny_config(dir: &Path, dataset: &Path) -> PathBuf {
    let config = TrainConfig {
        epochs: 2,
        steps_per_epoch: 2,
        batch_size: 2,
        model: ModelConfig {
            search_size: 16,
            clip_size: 8,
            patch: 4,
            embed_dim: 8,
            n_clips: 2,
            encoder_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            expert_widths: vec![4, 8, 16],
            ..ModelConfig::default()
        },
        dataset: Some(dataset.to_path_buf()),
        scene: small_scene(),
        ..TrainConfig::default()
    };
    let path = dir.join("tiny.json");
    config.write_json(&path).unwrap();
    path
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let scene = dir.join("scene.json");
    fs::write(&scene, serde_json::to_string(&small_scene()).unwrap()).unwrap();
    let out = dir.join(name);
    ok(&["gen-data", "--seed", seed, "--out", s(&out), "--config", s(&scene), "--videos", "3", "--eval-videos", "2"]);
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "meta.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), "a", "7");
    let b = gen_small(dir.path(), "b", "7");
    let ta = tree(&a);
    assert!(ta.iter().any(|(p, _)| p == Path::new("train/manifest.json")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("eval/video_0001/x/frame_0009.pgm")));
    assert_eq!(ta, tree(&b));
    let c = gen_small(dir.path(), "c", "8");
    assert_ne!(ta, tree(&c));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = mmtrack(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = mmtrack(&["train", "--strategy", "sometimes", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_is_one_line_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmtrack(&["make-missing", "--dataset", "/nonexistent/ds", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("/nonexistent/ds"), "{err}");

    let out = mmtrack(&["make-missing", "--dataset", "/nonexistent/ds", "--rate", "1.0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn make_missing_writes_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d", "1");
    let out = dir.path().join("sched");
    ok(&["make-missing", "--dataset", s(&data), "--missing", "prolonged", "--rate", "0.5", "--seed", "3", "--out", s(&out)]);
    for v in ["video_0000", "video_0001"] {
        let sched = mmtrack::missing::MissingSchedule::read_json(&out.join(format!("{v}.json"))).unwrap();
        assert_eq!(sched.affected(), 5);
        assert_eq!(sched.both_missing(), 0);
        assert_eq!(sched.kind, mmtrack::missing::MissingKind::Prolonged);
    }
    assert!(out.join("schedule_spec.json").is_file());
}

#[test]
fn train_eval_and_route_viz() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d", "2");
    let config = write_tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--strategy", "tube", "--alpha", "0.25", "--seed", "5", "--out", s(&run)]);
    for f in ["config.json", "meta.json", "model.bin", "model.json", "runlog.csv", "routing_train.csv", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved = TrainConfig::read_json(&run.join("config.json")).unwrap();
    assert_eq!(resolved.seed, 5);
    assert_eq!(resolved.alpha, 0.25);
    assert_eq!(resolved.strategy, mmtrack::masking::MaskStrategy::Tube);

    let ev = dir.path().join("eval");
    let stdout = ok(&["eval", "--run", s(&run), "--missing", "switched", "--rate", "0.2", "--out", s(&ev)]);
    assert!(stdout.contains("precision"));
    let report: mmtrack::missing::MetricsReport = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.frames, 2 * (10 - 2));
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let ev2 = dir.path().join("eval2");
    ok(&["eval", "--run", s(&run), "--missing", "switched", "--rate", "0.2", "--out", s(&ev2)]);
    assert_eq!(fs::read(ev.join("metrics.json")).unwrap(), fs::read(ev2.join("metrics.json")).unwrap());

    let viz = dir.path().join("viz");
    ok(&["route-viz", "--run", s(&run), "--rates", "0,0.5", "--out", s(&viz)]);
    let table = fs::read_to_string(viz.join("routing.csv")).unwrap();
    let telemetry = fs::read_to_string(viz.join("routing_telemetry.csv")).unwrap();
    let records = telemetry.lines().count() - 1;
    assert_eq!(records, 2 * 2 * (10 - 2));
    let mut slots = 0usize;
    let mut table_records = 0usize;
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        table_records += cols[1].parse::<usize>().unwrap();
        slots += cols[3..].iter().map(|c| c.parse::<usize>().unwrap()).sum::<usize>();
    }
    assert_eq!(table_records, records);
    assert_eq!(slots, 2 * records);
    let svg = fs::read_to_string(viz.join("routing.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("class=\"bar\"").count(), 4 * 3);
    assert_eq!(fs::read_to_string(viz.join("routing_by_rate.csv")).unwrap().lines().count(), 3);
}

#[test]
fn ablation_tables_have_the_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d", "3");
    let config = write_tiny_config(dir.path(), &data);
    let out = dir.path().join("mask");
    ok(&["ablate-masking", "--config", s(&config), "--missing", "random", "--rate", "0.5", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("ablate_masking.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(csv.lines().next(), Some("variant,setting,precision,auc"));
    let mut cells: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    cells.sort();
    let mut expected = Vec::new();
    for v in ["video_level", "none", "random", "tube"] {
        for s in ["full", "missing"] {
            expected.push((v.to_string(), s.to_string()));
        }
    }
    expected.sort();
    assert_eq!(cells, expected);
    assert!(out.join("config.json").is_file() && out.join("meta.json").is_file());

    let out = dir.path().join("experts");
    ok(&["ablate-experts", "--config", s(&config), "--experts", "homo:64", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("ablate_experts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("homo:64,full,") && csv.contains("homo:64,missing,"));
}

#[test]
fn bad_expert_spec_is_usage_error() {
    let out = mmtrack(&["ablate-experts", "--experts", "homo:6", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
