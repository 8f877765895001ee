use super::*;
use proptest::prelude::*;
use rand::Rng;

fn random_session(c: usize, t: usize, seed: u64, aux: bool) -> SessionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meg = Array2::from_shape_fn((c, t), |_| rng.gen_range(-3.0f32..3.0));
    let labels = (0..t).map(|_| rng.gen_range(0..=1u8)).collect();
    let aux = aux.then(|| AuxRows {
        envelope: (0..t).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        mel: Array2::from_shape_fn((N_MEL, t), |_| rng.gen_range(0.0f32..4.0)),
    });
    SessionRecord::new(format!("s{seed}"), meg, labels, 250.0, aux).unwrap()
}

#[test]
fn session_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for aux in [false, true] {
        let s = random_session(8, 5000, 1, aux);
        let path = dir.path().join(format!("aux{aux}"));
        write_session(&s, &path).unwrap();
        let back = load_session(&path).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.meg.iter().zip(s.meg.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn corrupt_and_incomplete_sessions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = random_session(4, 300, 2, false);
    let path = dir.path().join("s");
    write_session(&s, &path).unwrap();

    let meg = path.join(MEG_FILE);
    let bytes = fs::read(&meg).unwrap();
    fs::write(&meg, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_session(&path),
        Err(Error::CorruptFile { .. })
    ));
    fs::write(&meg, &bytes).unwrap();

    fs::remove_file(path.join(LABELS_FILE)).unwrap();
    match load_session(&path) {
        Err(Error::MissingField { field, .. }) => assert_eq!(field, LABELS_FILE),
        other => panic!("expected MissingField, got {other:?}"),
    }

    write_session(&s, &path).unwrap();
    fs::write(
        path.join(META_FILE),
        r#"{"session_id": "s", "rate_hz": 250.0}"#,
    )
    .unwrap();
    assert!(matches!(
        load_session(&path),
        Err(Error::MissingField { .. })
    ));
}

#[test]
fn sessions_are_listed_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b", "a", "c"] {
        write_session(&random_session(2, 100, 3, false), &dir.path().join(name)).unwrap();
    }
    fs::create_dir(dir.path().join("not-a-session")).unwrap();
    let names: Vec<String> = list_sessions(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a", "b", "c"]);
}

#[test]
fn window_start_enumeration() {
    let r = 250;
    assert_eq!(
        window_starts(100 * r, 30 * r, 30 * r).unwrap(),
        vec![0, 30 * r, 60 * r, 70 * r]
    );
    assert_eq!(window_starts(30 * r, 30 * r, 30 * r).unwrap(), vec![0]);
    assert_eq!(
        window_starts(120 * r, 30 * r, 30 * r).unwrap(),
        vec![0, 7500, 15000, 22500]
    );
    assert!(matches!(
        window_starts(20 * r, 30 * r, 30 * r),
        Err(Error::SessionTooShort { .. })
    ));
}

#[test]
fn make_windows_slices_meg_and_targets() {
    let s = random_session(3, 100 * 250, 4, true);
    let w = make_windows(&s, 30.0, 30.0, TargetMode::Standard).unwrap();
    assert_eq!(w.len(), 4);
    assert_eq!(w[3].start_sample, 70 * 250);
    for win in &w {
        assert_eq!(win.meg.dim(), (3, 7500));
        assert_eq!(win.target.dim(), (1, 7500));
        assert_eq!(win.session_id, s.session_id);
        let a = win.start_sample;
        assert_eq!(win.meg.row(1), s.meg.slice(s![1, a..a + 7500]));
        let labels: Vec<f32> = s.labels[a..a + 7500].iter().map(|&v| v as f32).collect();
        assert_eq!(win.target.row(0).to_vec(), labels);
    }
    let ext = make_windows(&s, 30.0, 30.0, TargetMode::Extended).unwrap();
    assert_eq!(ext[0].target.dim(), (12, 7500));
    assert_eq!(ext[2].target.row(11), w[2].target.row(0));

    let short = random_session(3, 20 * 250, 5, false);
    assert!(matches!(
        make_windows(&short, 30.0, 30.0, TargetMode::Standard),
        Err(Error::SessionTooShort { .. })
    ));
    assert!(make_windows(&short, 10.0, 10.0, TargetMode::Extended).is_err());
}

#[test]
fn normalization_uses_session_statistics() {
    let s = random_session(5, 1000, 6, false).normalized();
    for row in s.meg.rows() {
        let st = crate::signal::RowStats::of(row.iter().copied());
        assert!(st.mean.abs() < 1e-5);
        assert!((st.std - 1.0).abs() < 1e-4);
    }
}

#[test]
fn split_fixtures() {
    let ids: Vec<String> = (0..92).map(|i| format!("sess{i:03}")).collect();
    let plan = leave_session_out_split(&ids, 8, 7).unwrap();
    assert_eq!(plan.val_sessions.len(), 8);
    assert_eq!(plan.train_sessions.len(), 84);
    assert!(plan.val_sessions.is_disjoint(&plan.train_sessions));
    assert_eq!(leave_session_out_split(&ids, 8, 7).unwrap(), plan);
    let mut reversed = ids.clone();
    reversed.reverse();
    assert_eq!(leave_session_out_split(&reversed, 8, 7).unwrap(), plan);
    assert_ne!(leave_session_out_split(&ids, 8, 8).unwrap(), plan);

    let few: Vec<String> = ids[..5].to_vec();
    assert!(matches!(
        leave_session_out_split(&few, 8, 0),
        Err(Error::TooFewSessions {
            needed: 8,
            found: 5
        })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_is_disjoint_and_exhaustive(seed in any::<u64>(), n in 2usize..40, frac in 0.0f64..1.0) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let n_val = ((n - 1) as f64 * frac) as usize;
        let plan = leave_session_out_split(&ids, n_val, seed).unwrap();
        prop_assert_eq!(plan.val_sessions.len(), n_val);
        prop_assert!(plan.val_sessions.is_disjoint(&plan.train_sessions));
        let union: BTreeSet<String> = plan.val_sessions.union(&plan.train_sessions).cloned().collect();
        prop_assert_eq!(union, ids.into_iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn windows_cover_every_sample(t in 30usize..400, w in 1usize..30, stride_frac in 0.05f64..1.0) {
        let stride = ((w as f64 * stride_frac) as usize).max(1);
        let starts = window_starts(t, w, stride).unwrap();
        let mut covered = vec![false; t];
        for &a in &starts {
            prop_assert!(a + w <= t);
            covered[a..a + w].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|&c| c));
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn synthetic_session_shape_and_determinism() {
    let cfg = SynthConfig::default();
    let a = synth_session(&cfg, 3).unwrap();
    assert_eq!(a.meg.dim(), (32, 30000));
    assert_eq!(a.labels.len(), 30000);
    assert_eq!(a.aux.as_ref().unwrap().mel.dim(), (N_MEL, 30000));
    assert!(a.meg.iter().all(|v| v.is_finite()));
    assert_eq!(synth_session(&cfg, 3).unwrap(), a);
    assert_ne!(synth_session(&cfg, 4).unwrap().meg, a.meg);

    for bad in [
        SynthConfig {
            duration_seconds: 10.0,
            ..cfg.clone()
        },
        SynthConfig {
            n_channels: 0,
            ..cfg.clone()
        },
        SynthConfig { snr: 0.0, ..cfg },
    ] {
        assert!(matches!(
            synth_session(&bad, 0),
            Err(Error::InvalidConfig(_))
        ));
    }
}

#[test]
fn synthetic_speech_fraction_is_balanced() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let s = synth_session(&cfg, seed).unwrap();
        let frac = s.labels.iter().map(|&v| v as f64).sum::<f64>() / s.labels.len() as f64;
        assert!(
            (0.3..=0.9).contains(&frac),
            "seed {seed}: speech fraction {frac}"
        );
    }
}

/// With the noise switched off, undoing each sensor's known lag and solving
/// ordinary least squares from sensors to labels must recover the labels.
#[test]
fn noiseless_synthetic_labels_are_linearly_decodable() {
    let cfg = SynthConfig {
        snr: f64::INFINITY,
        ..SynthConfig::default()
    };
    let (s, truth) = synth_session_with_truth(&cfg, 11).unwrap();
    let max_lag = *truth.lags.iter().max().unwrap();
    let t = s.n_samples() - max_lag;
    let c = s.n_channels();
    let x = nalgebra::DMatrix::from_fn(t, c + 1, |i, j| {
        if j == c {
            1.0
        } else {
            s.meg[[j, i + truth.lags[j]]] as f64
        }
    });
    let y = nalgebra::DVector::from_fn(t, |i, _| s.labels[i] as f64);
    let beta = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let decoded: Vec<f64> = (x * beta).iter().copied().collect();
    let labels: Vec<f64> = y.iter().copied().collect();
    let r = crate::signal::pearson_corr(&decoded, &labels).unwrap();
    assert!(r > 0.99, "least-squares decode correlation {r}");
}

#[test]
fn noise_lowers_but_keeps_decodability() {
    let noisy = synth_session(&SynthConfig::default(), 11).unwrap();
    let clean = synth_session(
        &SynthConfig {
            snr: f64::INFINITY,
            ..SynthConfig::default()
        },
        11,
    )
    .unwrap();
    assert_eq!(noisy.labels, clean.labels);
    let diff: f64 = noisy
        .meg
        .iter()
        .zip(clean.meg.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    assert!(diff > 0.0);
}

#[test]
fn sessions_share_the_subject_geometry() {
    let cfg = SynthConfig::default();
    let (_, a) = synth_session_with_truth(&cfg, 1).unwrap();
    let (_, b) = synth_session_with_truth(&cfg, 2).unwrap();
    assert_eq!(a.lags, b.lags);
    let diff = (&a.mixing - &b.mixing).mapv(f64::abs);
    assert!(diff.iter().all(|&d| d < 1.0) && diff.sum() > 0.0);
    let other = SynthConfig {
        subject_seed: 9,
        ..cfg
    };
    assert_ne!(synth_session_with_truth(&other, 1).unwrap().1.lags, a.lags);
}
