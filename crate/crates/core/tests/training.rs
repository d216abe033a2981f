use std::fs;

use mmtrack::config::ModelConfig;
use mmtrack::eval::evaluate;
use mmtrack::heads::LossWeights;
use mmtrack::masking::MaskStrategy;
use mmtrack::missing::{MissingKind, ScheduleSpec};
use mmtrack::synth::{generate_videos, SceneSpec};
use mmtrack::train::{load_run, save_run, train, Trainer, TrainConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        search_size: 16,
        clip_size: 8,
        patch: 4,
        embed_dim: 16,
        n_clips: 2,
        encoder_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        expert_widths: vec![4, 8, 16, 32],
        ..ModelConfig::default()
    }
}

fn tiny_config(strategy: MaskStrategy) -> TrainConfig {
    TrainConfig {
        seed: 3,
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 2,
        strategy,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn videos(n: usize) -> Vec<mmtrack::synth::RenderedSequence> {
    let spec = SceneSpec {
        length: 12,
        ..SceneSpec::default()
    };
    let spec = SceneSpec {
        corruption: mmtrack::synth::Corruption::Random {
            rgb: 1,
            x: 1,
            min_len: 2,
            max_len: 4,
        },
        ..spec
    };
    generate_videos(&spec, n, 9).unwrap()
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let v = videos(3);
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let config = tiny_config(MaskStrategy::VideoLevel);
        let out = train(&config, &v, |_| {}).unwrap();
        save_run(&dir.path().join(run), &config, &out).unwrap();
    }
    for file in ["model.bin", "model.json", "runlog.csv", "routing_train.csv", "config.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn strategy_none_never_calls_masking() {
    let v = videos(2);
    let mut t = Trainer::new(tiny_config(MaskStrategy::None)).unwrap();
    for _ in 0..3 {
        t.step(&v).unwrap();
    }
    assert_eq!(t.counters().total(), 0);

    let mut t = Trainer::new(tiny_config(MaskStrategy::VideoLevel)).unwrap();
    for _ in 0..3 {
        t.step(&v).unwrap();
    }
    let c = t.counters();
    assert_eq!(c.decisions.load(std::sync::atomic::Ordering::Relaxed), 6);
    assert_eq!(c.video_level.load(std::sync::atomic::Ordering::Relaxed), 6);
    assert_eq!(c.random.load(std::sync::atomic::Ordering::Relaxed), 0);
    assert_eq!(c.tube.load(std::sync::atomic::Ordering::Relaxed), 0);
}

#[test]
fn each_baseline_runs_only_its_own_path() {
    let v = videos(2);
    for (strategy, expect) in [(MaskStrategy::Random, [0, 0, 2, 0]), (MaskStrategy::Tube, [0, 0, 0, 2])] {
        let mut t = Trainer::new(tiny_config(strategy)).unwrap();
        t.step(&v).unwrap();
        let c = t.counters();
        let load = |a: &std::sync::atomic::AtomicUsize| a.load(std::sync::atomic::Ordering::Relaxed);
        assert_eq!([load(&c.decisions), load(&c.video_level), load(&c.random), load(&c.tube)], expect, "{strategy}");
    }
}

#[test]
fn zero_weights_give_zero_loss_and_gradient() {
    let v = videos(2);
    let config = TrainConfig {
        loss_weights: LossWeights {
            aux: 0.0,
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
        },
        epochs: 1,
        steps_per_epoch: 1,
        ..tiny_config(MaskStrategy::VideoLevel)
    };
    let mut t = Trainer::new(config).unwrap();
    let before: Vec<Vec<f64>> = t.store().iter().map(|p| p.tensor().data().to_vec()).collect();
    let report = t.step(&v).unwrap();
    assert_eq!(report.loss.total, 0.0);
    for p in t.store().iter() {
        assert!(p.tensor().grad().unwrap().iter().all(|&g| g == 0.0), "{}", p.name());
    }
    // Only weight decay moves the parameters.
    for (p, b) in t.store().iter().zip(&before) {
        for (x, y) in p.tensor().data().iter().zip(b) {
            assert!((x - y * (1.0 - 3e-4 * 1e-4)).abs() <= 1e-15, "{}", p.name());
        }
    }
}

#[test]
fn loss_decreases_on_default_model() {
    let spec = SceneSpec::default();
    let v = generate_videos(&spec, 20, 1).unwrap();
    let config = TrainConfig {
        seed: 0,
        epochs: 3,
        steps_per_epoch: 20,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(&config, &v, |_| {}).unwrap();
    let totals = out.log.totals();
    let tenth = totals.len() / 10;
    let median = |s: &[f64]| {
        let mut s = s.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let first = median(&totals[..tenth]);
    let last = median(&totals[totals.len() - tenth..]);
    assert!(last < first, "median loss {first} -> {last}");
    assert!(out.log.rows.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(out.log.config_hash, config.hash());
}

#[test]
fn checkpoint_round_trip_gives_identical_evaluation() {
    let v = videos(3);
    let config = tiny_config(MaskStrategy::VideoLevel);
    let out = train(&config, &v, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &config, &out).unwrap();
    let (loaded_config, model, store) = load_run(dir.path()).unwrap();
    assert_eq!(loaded_config, config);
    let spec = ScheduleSpec {
        kind: MissingKind::Switched,
        rate: 0.5,
        seed: 4,
    };
    let crop = config.crop();
    let (a, ra) = evaluate(&out.model, &out.store, &v, &crop, &spec).unwrap();
    let (b, rb) = evaluate(&model, &store, &v, &crop, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (c, _) = evaluate(&model, &store, &v, &crop, &spec).unwrap();
    assert_eq!(b, c);
}

#[test]
fn runlog_csv_has_one_row_per_step() {
    let v = videos(2);
    let config = tiny_config(MaskStrategy::Tube);
    let out = train(&config, &v, |_| {}).unwrap();
    let csv = out.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,cls,l1,giou,balance,importance,total"));
    assert_eq!(lines.count(), config.total_steps());
    assert_eq!(out.log.routing.len(), config.total_steps() * config.batch_size);
}

#[test]
fn missing_dataset_is_reported_with_path() {
    let config = TrainConfig {
        dataset: Some("/nonexistent/data".into()),
        ..tiny_config(MaskStrategy::None)
    };
    let err = mmtrack::experiments::training_videos(&config).err().unwrap().to_string();
    assert!(err.contains("/nonexistent/data"), "{err}");
}
