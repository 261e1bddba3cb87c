use bedl_core::autodiff::Activation;
use bedl_core::checkpoint::Checkpoint;
use bedl_core::data::{make_splits, standardize, Dataset, SplitPlan, Targets};
use bedl_core::network::NetworkSpec;
use bedl_core::rng::SeededRng;
use bedl_core::train::{evaluate_regression, metrics_csv, ObjectiveKind, TrainConfig, Trainer};
use bedl_core::{Error, Tensor};

fn dataset() -> Dataset {
    let mut rng = SeededRng::new(3, 8);
    let n = 80;
    let x: Vec<f64> = (0..3 * n).map(|_| rng.standard_normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| (x[3 * i] * 1.5).sin() + 0.5 * x[3 * i + 2] + 0.1 * rng.standard_normal())
        .collect();
    Dataset::new(Tensor::new(vec![n, 3], x).unwrap(), Targets::Regression(y), vec![3]).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::BedlReg,
        epochs,
        batch_size: Some(20),
        seed: 11,
        ..TrainConfig::default()
    }
}

fn spec() -> NetworkSpec {
    NetworkSpec::mlp(3, &[12], 2, Activation::Elu { alpha: 1.0 })
}

fn trained(epochs: usize) -> (Trainer, Dataset, Dataset, bedl_core::data::Standardizer) {
    let raw = dataset();
    let (tr, te) = make_splits(raw.len(), &SplitPlan::new(0, 1)).unwrap();
    let (z, st) = standardize(&raw, &tr).unwrap();
    let (train, test) = (z.subset(&tr), z.subset(&te));
    let mut t = Trainer::new(spec(), &train, config(epochs)).unwrap();
    t.fit(&train, |_, _| {}).unwrap();
    (t, train, test, st)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (t, _, _, st) = trained(3);
    let ckpt = Checkpoint::from_trainer(&t, Some(st)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bedl");
    ckpt.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let path2 = dir.path().join("b.bedl");
    loaded.save(&path2).unwrap();
    assert_eq!(first, std::fs::read(&path2).unwrap());
    assert_eq!(&first[..8], b"BEDLCKPT");
    assert_eq!(u32::from_le_bytes(first[8..12].try_into().unwrap()), 1);
    assert_eq!(loaded.header, ckpt.header);
}

#[test]
fn round_trip_preserves_evaluation_exactly() {
    let (t, _, test, st) = trained(4);
    let ckpt = Checkpoint::from_bytes(
        &Checkpoint::from_trainer(&t, Some(st.clone()))
            .unwrap()
            .to_bytes()
            .unwrap(),
    )
    .unwrap();
    let net = ckpt.network().unwrap();
    let head = &t.cfg.regression;
    assert_eq!(
        evaluate_regression(&t.network, &test, &st, head).unwrap(),
        evaluate_regression(&net, &test, ckpt.header.standardizer.as_ref().unwrap(), head).unwrap()
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (mut straight, train, _, _) = trained(2);
    straight.cfg.epochs = 6;
    let mut log = straight.fit(&train, |_, _| {}).unwrap();

    let (half, _, _, _) = trained(2);
    let bytes = Checkpoint::from_trainer(&half, None).unwrap().to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer().unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.cfg.epochs = 6;
    let mut log2 = resumed.fit(&train, |_, _| {}).unwrap();

    log.truncate(4);
    log2.truncate(4);
    assert_eq!(metrics_csv(&log), metrics_csv(&log2));
    let a = Checkpoint::from_trainer(&straight, None).unwrap();
    let b = Checkpoint::from_trainer(&resumed, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam_m, b.adam_m);
    assert_eq!(a.adam_v, b.adam_v);
    assert_eq!(a.header.rng, b.header.rng);
}

#[test]
fn corrupted_files_are_rejected() {
    let (t, _, _, st) = trained(1);
    let good = Checkpoint::from_trainer(&t, Some(st)).unwrap().to_bytes().unwrap();
    let is_format = |bytes: &[u8]| {
        matches!(
            Checkpoint::from_bytes(bytes),
            Err(Error::Format(_)) | Err(Error::Json(_))
        )
    };

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(is_format(&magic));

    let mut version = good.clone();
    version[8] = 2;
    match Checkpoint::from_bytes(&version) {
        Err(Error::Format(d)) => assert!(d.contains("version"), "{d}"),
        other => panic!("unexpected {other:?}"),
    }

    // Change one digit of the stored learning rate so the hash no longer matches.
    let needle = b"\"lr\":0.001";
    let at = good
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("lr in header");
    let mut tampered = good.clone();
    tampered[at + 9] = b'2';
    match Checkpoint::from_bytes(&tampered) {
        Err(Error::Format(d)) => assert!(d.contains("hash"), "{d}"),
        other => panic!("unexpected {other:?}"),
    }

    for cut in [0, 7, 19, 40, good.len() - 8, good.len() - 1] {
        assert!(is_format(&good[..cut]), "accepted {cut} bytes");
    }
    let mut long = good.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(is_format(&long));
    assert!(Checkpoint::from_bytes(&good).is_ok());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Checkpoint::load(dir.path().join("nope.bedl")),
        Err(Error::Io(_))
    ));
}
