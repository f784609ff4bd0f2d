use mapo_lab::diffusion::{make_schedule, Architecture, DenoiserParams, OutputInit, Schedule, ScheduleKind};
use mapo_lab::objectives::{ObjectiveConfig, ObjectiveKind};
use mapo_lab::tasks::{synthesize_preferences, Dataset, Preset, RejectedSource, TaskSpec};
use mapo_lab::train::{
    adam_step, cosine_lr, load_checkpoint, save_checkpoint, train, write_step_logs, AdamHyper,
    AdamState, Checkpoint, CheckpointError, TrainConfig, TrainError, Trainer,
};

fn fixture(n: usize) -> (Schedule, TaskSpec, Dataset, DenoiserParams) {
    let schedule = make_schedule(ScheduleKind::Cosine, 16).unwrap();
    let task = Preset::Culture.task();
    let data =
        synthesize_preferences(&task, &RejectedSource::BaseMixture, n, 5, Default::default()).unwrap();
    let params = DenoiserParams::init(Architecture::new(2, 4, vec![16]), 9, OutputInit::Random);
    (schedule, task, data, params)
}

fn config(kind: ObjectiveKind, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(ObjectiveConfig::new(kind, 8.0));
    c.steps = steps;
    c.batch_size = 32;
    c.lr = 3e-3;
    c.seed = 17;
    c.record_timing = false;
    c
}

#[test]
fn adam_minimizes_a_quadratic() {
    let target = [3.0, -2.0, 0.5];
    let mut params = vec![vec![0.0; 3]];
    let mut state = AdamState::zeros_like(&params);
    let hyper = AdamHyper::default();
    for step in 0..3000 {
        let grads = vec![params[0].iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect()];
        adam_step(&mut params, &grads, &mut state, cosine_lr(0.05, 0.0, step, 3000), &hyper);
    }
    for (p, t) in params[0].iter().zip(&target) {
        assert!((p - t).abs() < 1e-3, "{p} vs {t}");
    }
    assert_eq!(state.t, 3000);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 0.1, 0, 100), 1e-3);
    assert!((cosine_lr(1e-3, 0.1, 100, 100) - 1e-4).abs() < 1e-18);
    assert!((cosine_lr(1e-3, 0.1, 50, 100) - 5.5e-4).abs() < 1e-15);
}

#[test]
fn every_objective_lowers_its_own_loss() {
    let (schedule, task, data, params) = fixture(256);
    for kind in ObjectiveKind::ALL {
        let out = train(&config(kind, 150), &schedule, &data, &task, params.clone()).unwrap();
        let head: f64 = out.logs[..20].iter().map(|l| l.total).sum::<f64>() / 20.0;
        let tail: f64 = out.logs[130..].iter().map(|l| l.total).sum::<f64>() / 20.0;
        assert!(tail < head, "{kind}: {head} -> {tail}");
        assert_ne!(out.checkpoint.params, params);
    }
}

#[test]
fn runs_are_bit_identical_for_equal_seeds() {
    let (schedule, task, data, params) = fixture(64);
    let run = |seed: u64| {
        let mut cfg = config(ObjectiveKind::Mapo, 25);
        cfg.seed = seed;
        let out = train(&cfg, &schedule, &data, &task, params.clone()).unwrap();
        let mut csv = Vec::new();
        write_step_logs(&mut csv, &out.logs).unwrap();
        (out.checkpoint.to_bytes(), csv)
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn checkpoint_files_round_trip_and_reject_corruption() {
    let (schedule, task, data, params) = fixture(64);
    let out = train(&config(ObjectiveKind::Dpo, 10), &schedule, &data, &task, params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&path, &out.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.to_bytes(), out.checkpoint.to_bytes());
    assert_eq!(std::fs::read(&path).unwrap(), out.checkpoint.to_bytes());

    let bytes = out.checkpoint.to_bytes();
    for pos in [0, 9, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {pos} accepted");
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn interrupted_run_resumes_exactly() {
    let (schedule, task, data, params) = fixture(96);
    let cfg = config(ObjectiveKind::Mapo, 30);
    let full = train(&cfg, &schedule, &data, &task, params.clone()).unwrap();

    let mut first = Trainer::new(cfg.clone(), &schedule, &data, &task, params).unwrap();
    first.run_until(13).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let resumed = Trainer::resume(cfg, &schedule, &data, &task, restored).unwrap().run().unwrap();
    assert_eq!(resumed.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    assert_eq!(resumed.logs[..], full.logs[13..]);
}

#[test]
fn divergence_stops_with_last_good_state() {
    let (schedule, task, data, params) = fixture(64);
    let mut cfg = config(ObjectiveKind::Mapo, 50);
    cfg.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    cfg.checkpoint_path = Some(dir.path().join("last.ckpt"));
    match train(&cfg, &schedule, &data, &task, params) {
        Err(TrainError::NonFinite { step, last_good }) => {
            assert_eq!(last_good.step as usize, step - 1);
            assert!(last_good.params.is_finite());
            let saved = load_checkpoint(cfg.checkpoint_path.as_ref().unwrap()).unwrap();
            assert_eq!(saved.to_bytes(), last_good.to_bytes());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.logs.len())),
    }
}

#[test]
fn dpo_without_updates_sits_at_ln2() {
    let (schedule, task, data, params) = fixture(64);
    let mut cfg = config(ObjectiveKind::Dpo, 5);
    cfg.lr = 0.0;
    let out = train(&cfg, &schedule, &data, &task, params.clone()).unwrap();
    for log in &out.logs {
        assert!((log.total - std::f64::consts::LN_2).abs() < 1e-12);
    }
    assert_eq!(out.checkpoint.params, params);
}

#[test]
fn dataset_from_another_task_is_rejected() {
    let (schedule, _, data, params) = fixture(16);
    let other = Preset::Safety.task();
    assert!(matches!(
        train(&config(ObjectiveKind::Sft, 2), &schedule, &data, &other, params),
        Err(TrainError::TaskMismatch)
    ));
}
