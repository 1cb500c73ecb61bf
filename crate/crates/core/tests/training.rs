use std::fs;

use ecnet::config::Config;
use ecnet::train::{
    load_data, run_train, stream_seed, Checkpoint, Trainer, CHECKPOINT_FILE, CLIPPING_FILE, METRICS_FILE,
};
use ecnet::Error;

fn small() -> Config {
    let mut cfg = Config::default();
    cfg.train_size = 64;
    cfg.test_size = 16;
    cfg.batch_size = 16;
    cfg.epochs = 1;
    cfg
}

#[test]
fn one_epoch_smoke_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let t = run_train(&small(), 42, dir.path(), false).unwrap();
    assert_eq!(t.state.epoch, 1);
    assert_eq!(t.state.step, 4);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<_> = metrics.lines().collect();
    assert!(lines.len() >= 2);
    let width = lines[0].split(',').count();
    for row in &lines[1..] {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), width);
        assert!(cells.iter().all(|v| v.is_finite()));
    }
    let clipping = fs::read_to_string(dir.path().join(CLIPPING_FILE)).unwrap();
    assert_eq!(clipping.lines().count(), 1 + 4);
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let mut cfg = small();
    cfg.epochs = 3;
    let (train, _) = load_data(&cfg).unwrap();

    let mut straight = Trainer::new(cfg.clone(), 9, train.clone()).unwrap();
    straight.run(Some(10)).unwrap();

    let mut first = Trainer::new(cfg.clone(), 9, train.clone()).unwrap();
    first.run(Some(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), train).unwrap();
    resumed.run(Some(10)).unwrap();

    assert_eq!(resumed.state.step, 10);
    assert_eq!(resumed.state.metrics, straight.state.metrics);
    assert_eq!(resumed.state.clipping, straight.state.clipping);
    for id in straight.state.store.ids() {
        assert_eq!(
            resumed.state.store.get(id),
            straight.state.store.get(id),
            "{}",
            straight.state.store.name(id)
        );
    }
}

#[test]
fn run_train_resume_finishes_an_interrupted_run() {
    let mut cfg = small();
    cfg.epochs = 2;
    let a = tempfile::tempdir().unwrap();
    run_train(&cfg, 5, a.path(), false).unwrap();

    let b = tempfile::tempdir().unwrap();
    let mut half = cfg.clone();
    half.epochs = 1;
    let (train, _) = load_data(&cfg).unwrap();
    let mut t = Trainer::new(cfg.clone(), 5, train).unwrap();
    t.run(Some(4)).unwrap();
    t.write_outputs(b.path()).unwrap();
    run_train(&cfg, 5, b.path(), true).unwrap();

    let ma = fs::read(a.path().join(METRICS_FILE)).unwrap();
    let mb = fs::read(b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);

    let err = run_train(&half, 5, b.path(), true).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let err = run_train(&cfg, 6, b.path(), true).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_train(&small(), 123, a.path(), false).unwrap();
    run_train(&small(), 123, b.path(), false).unwrap();
    for f in [METRICS_FILE, CLIPPING_FILE, CHECKPOINT_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn configured_seeds_give_distinct_runs() {
    let cfg = small();
    let runs: Vec<String> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let dir = tempfile::tempdir().unwrap();
            run_train(&cfg, s, dir.path(), false).unwrap();
            fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()
        })
        .collect();
    assert_eq!(runs.len(), 3);
    assert_ne!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
    assert_ne!(runs[1], runs[2]);
}

#[test]
fn stream_seeds_do_not_collide_across_tags_and_counters() {
    let mut seen = std::collections::HashSet::new();
    for tag in 1..=3 {
        for counter in 0..1000 {
            assert!(seen.insert(stream_seed(42, tag, counter)));
        }
    }
}

#[test]
fn trainer_rejects_tiny_or_invalid_input() {
    let cfg = small();
    let (train, _) = load_data(&cfg).unwrap();
    let one = ecnet::data::Dataset {
        samples: train.samples[..1].to_vec(),
        ..train.clone()
    };
    let mut t = Trainer::new(cfg.clone(), 1, one).unwrap();
    assert!(t.train_step().is_err());

    let mut bad = cfg;
    bad.lr = -1.0;
    assert!(matches!(Trainer::new(bad, 1, train).err().unwrap(), Error::Config(_)));
}
