use ndarray::Array2;

use super::*;
use crate::dataset::{synth_session, SynthConfig};
use crate::model::tests::tiny_config;

const RATE: f64 = 10.0;

fn tiny_sessions(n: u64, channels: usize) -> Vec<SessionRecord> {
    let cfg = SynthConfig {
        n_channels: channels,
        duration_seconds: 60.0,
        rate_hz: RATE,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|seed| synth_session(&cfg, seed).unwrap())
        .collect()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        max_epochs: 3,
        batch_size: 2,
        n_val_sessions: 1,
        ..TrainConfig::default()
    }
}

fn window(pred_like: Vec<f32>, session: &str) -> TrainingWindow {
    let t = pred_like.len();
    TrainingWindow {
        meg: Array2::zeros((4, t)),
        target: Array2::from_shape_vec((1, t), pred_like).unwrap(),
        session_id: session.into(),
        start_sample: 0,
    }
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..tiny_train_config()
    };
    let err = Trainer::new(tiny_config(), cfg, dir.path()).run(&tiny_sessions(3, 4), None);
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}

#[test]
fn mode_must_match_output_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        mode: TargetMode::Extended,
        ..tiny_train_config()
    };
    let err = Trainer::new(tiny_config(), cfg, dir.path()).run(&tiny_sessions(3, 4), None);
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}

#[test]
fn too_few_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        n_val_sessions: 3,
        ..tiny_train_config()
    };
    let err = Trainer::new(tiny_config(), cfg, dir.path()).run(&tiny_sessions(3, 4), None);
    assert!(matches!(
        err,
        Err(Error::TooFewSessions {
            needed: 3,
            found: 3
        })
    ));
}

#[test]
fn validation_fixtures() {
    let model = crate::model::ShineModel::init(tiny_config()).unwrap();
    // Constant binary targets are skipped; nothing left is an error.
    let flat = vec![window(vec![1.0; 50], "a"), window(vec![0.0; 50], "b")];
    assert!(matches!(
        validate(&model, &flat),
        Err(Error::AllWindowsDegenerate { count: 2 })
    ));
    assert!((mean_of_valid(&[Some(0.6), None, Some(1.0)], 3).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(
        window_pearson(&[1.0, 2.0, 3.0], &[0.0, 1.0, 1.0]).unwrap(),
        window_pearson(&[2.0, 4.0, 6.0], &[0.0, 1.0, 1.0]).unwrap()
    );
    assert_eq!(
        window_pearson(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(),
        1.0
    );
    assert_eq!(
        window_pearson(&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]).unwrap(),
        -1.0
    );
    assert_eq!(
        window_pearson(&[3.0, 3.0, 3.0], &[0.0, 1.0, 0.0]).unwrap(),
        0.0
    );
}

/// A single small step along the clipped gradient lowers that batch's loss.
#[test]
fn one_step_descends() {
    let sessions = tiny_sessions(2, 4);
    let windows: Vec<TrainingWindow> = sessions
        .iter()
        .flat_map(|s| make_windows(&s.normalized(), 30.0, 30.0, TargetMode::Standard).unwrap())
        .collect();
    let mut model = crate::model::ShineModel::init(tiny_config()).unwrap();
    let batch_loss = |m: &crate::model::ShineModel| -> f64 {
        windows
            .iter()
            .map(|w| {
                m.loss_and_grad::<f32>(
                    m.params(),
                    w.meg.view(),
                    w.target.view(),
                    DegenerateRowPolicy::Skip,
                )
                .unwrap()
                .loss
                .loss
            })
            .sum::<f64>()
            / windows.len() as f64
    };
    let before = batch_loss(&model);
    let cfg = TrainConfig {
        lr: 1e-4,
        ..tiny_train_config()
    };
    let trainer = Trainer::new(tiny_config(), cfg.clone(), "unused");
    let mut opt = AdamW::new(
        model.params(),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
    );
    let refs: Vec<&TrainingWindow> = windows.iter().collect();
    let (loss, used) = trainer
        .step(&mut model, &mut opt, &refs, 1, 0)
        .unwrap()
        .unwrap();
    assert_eq!(used, windows.len());
    assert!((loss - before).abs() < 1e-6);
    let after = batch_loss(&model);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn run_writes_artifacts_and_respects_split() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = tiny_sessions(4, 4);
    let report = Trainer::new(tiny_config(), tiny_train_config(), dir.path())
        .run(&sessions, None)
        .unwrap();
    assert!(report.epochs.len() <= 3 && !report.epochs.is_empty());
    let argmax = report
        .epochs
        .iter()
        .fold(None::<&EpochRecord>, |best, r| match best {
            Some(b) if b.val_pearson >= r.val_pearson => Some(b),
            _ => Some(r),
        })
        .unwrap();
    assert_eq!(report.best_epoch, argmax.epoch);
    assert_eq!(report.best_val_pearson, argmax.val_pearson);
    assert!(report
        .trained_sessions
        .is_disjoint(&report.validated_sessions));
    assert_eq!(report.trained_sessions, report.split.train_sessions);
    for f in [
        CONFIG_FILE,
        METRICS_FILE,
        SPLIT_FILE,
        BEST_CHECKPOINT,
        LAST_CHECKPOINT,
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), report.epochs.len() + 1);
    assert!(csv.starts_with("epoch,train_loss,val_pearson"));
    let rc: RunConfig = io::read_json(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(rc.train, tiny_train_config());

    // Reloading the best checkpoint reproduces its validation score exactly.
    let again = validate_checkpoint(
        &report.checkpoint,
        &sessions,
        &report.split,
        &tiny_train_config(),
    )
    .unwrap();
    assert_eq!(again.to_bits(), report.best_val_pearson.to_bits());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let sessions = tiny_sessions(3, 4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Trainer::new(tiny_config(), tiny_train_config(), a.path())
        .run(&sessions, None)
        .unwrap();
    let mut tb = Trainer::new(tiny_config(), tiny_train_config(), b.path());
    tb.jobs = 2;
    let rb = tb.run(&sessions, None).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn explicit_split_is_honoured_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = tiny_sessions(3, 4);
    let plan = SplitPlan {
        train_sessions: ["synth-0000", "synth-0002"].map(String::from).into(),
        val_sessions: ["synth-0001"].map(String::from).into(),
        seed: 0,
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_train_config()
    };
    let report = Trainer::new(tiny_config(), cfg.clone(), dir.path())
        .run(&sessions, Some(&plan))
        .unwrap();
    assert_eq!(report.split, plan);
    assert_eq!(report.trained_sessions, plan.train_sessions);

    let unknown = SplitPlan {
        val_sessions: ["nope"].map(String::from).into(),
        ..plan
    };
    assert!(matches!(
        Trainer::new(tiny_config(), cfg, dir.path()).run(&sessions, Some(&unknown)),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn per_epoch_resplit_rotates_validation() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = tiny_sessions(4, 4);
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 0,
        resplit_each_epoch: true,
        ..tiny_train_config()
    };
    let report = Trainer::new(tiny_config(), cfg, dir.path())
        .run(&sessions, None)
        .unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(report.validated_sessions.len() >= 1);
}

#[test]
fn train_from_disk() {
    let data = tempfile::tempdir().unwrap();
    for s in tiny_sessions(3, 4) {
        dataset::write_session(&s, &data.path().join(&s.session_id)).unwrap();
    }
    let run = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_train_config()
    };
    let report = train(tiny_config(), cfg, data.path(), run.path()).unwrap();
    assert_eq!(report.epochs.len(), 1);
    let too_many = TrainConfig {
        n_val_sessions: 5,
        ..tiny_train_config()
    };
    assert!(matches!(
        train(tiny_config(), too_many, data.path(), run.path()),
        Err(Error::TooFewSessions { .. })
    ));
}
