use bedl_core::autodiff::{Activation, ParamStore};
use bedl_core::data::{standardize, Dataset, Targets};
use bedl_core::network::NetworkSpec;
use bedl_core::rng::SeededRng;
use bedl_core::train::{
    evaluate_classification, evaluate_regression, metrics_csv, Adam, AdamConfig, ObjectiveKind, TrainConfig, Trainer,
};
use bedl_core::{Error, Tensor};

const NLL_FLOOR: f64 = -1.38364;

fn regression_data(x: Vec<f64>, y: Vec<f64>, dim: usize) -> Dataset {
    let n = y.len();
    Dataset::new(Tensor::new(vec![n, dim], x).unwrap(), Targets::Regression(y), vec![dim]).unwrap()
}

fn blobs(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed, 9);
    let (mut x, mut labels) = (Vec::new(), Vec::new());
    for c in 0..2 {
        let centre = if c == 0 { -2.0 } else { 2.0 };
        for _ in 0..n_per_class {
            x.push(centre + 0.5 * rng.standard_normal());
            x.push(centre + 0.5 * rng.standard_normal());
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 2], x).unwrap(),
        Targets::Classification { labels, classes: 2 },
        vec![2],
    )
    .unwrap()
}

fn blob_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        objective: ObjectiveKind::BedlReg,
        epochs: 200,
        seed,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 0.01;
    cfg.classification.classes = 2;
    cfg
}

fn small_regression(seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed, 8);
    let n = 60;
    let x: Vec<f64> = (0..2 * n).map(|_| rng.standard_normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 3.0 + 2.0 * x[2 * i] - x[2 * i + 1] + 0.3 * rng.standard_normal())
        .collect();
    regression_data(x, y, 2)
}

#[test]
fn adam_on_a_parabola_matches_the_reference_recurrence() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(vec![1.0]));
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &store);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * store.value(id).data()[0];
        store.get_mut(id).grad = Tensor::vector(vec![g]);
        adam.step(&mut store).unwrap();

        let g = 2.0 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((store.value(id).data()[0] - x).abs() < 1e-10, "step {t}");
    }
    assert!(x.abs() < 0.05, "x = {x}");
    assert!((store.value(id).data()[0] - 0.0029366756811).abs() < 1e-10);
    assert_eq!(adam.t, 100);
}

#[test]
fn single_datum_fit_approaches_the_nll_floor() {
    let ds = regression_data(vec![1.0], vec![0.5], 1);
    let mut cfg = TrainConfig {
        objective: ObjectiveKind::Bedl,
        epochs: 3000,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 0.01;
    let mut trainer = Trainer::new(NetworkSpec::mlp(1, &[], 2, Activation::Identity), &ds, cfg).unwrap();
    let log = trainer.fit(&ds, |_, _| {}).unwrap();
    let last = log.last().unwrap();
    assert!(last.nll > NLL_FLOOR - 1e-5, "nll {} below the floor", last.nll);
    assert!(last.nll < NLL_FLOOR + 0.05, "nll {}", last.nll);
    for w in log[5..].windows(2) {
        assert!(
            w[1].objective <= w[0].objective + 1e-12,
            "objective rose at epoch {}: {} -> {}",
            w[1].epoch,
            w[0].objective,
            w[1].objective
        );
    }
}

#[test]
fn blobs_are_separated_within_200_epochs() {
    let ds = blobs(20, 0);
    let cfg = blob_config(0);
    let mut trainer = Trainer::new(NetworkSpec::mlp(2, &[8], 2, Activation::Relu), &ds, cfg.clone()).unwrap();
    let mut first_perfect = None;
    for _ in 0..200 {
        trainer.run_epoch(&ds).unwrap();
        let e = evaluate_classification(
            &trainer.network,
            &ds,
            cfg.objective,
            &cfg.classification,
            20,
            &mut SeededRng::new(0, 2),
        )
        .unwrap();
        if e.test_error == 0.0 {
            first_perfect = Some(trainer.epoch);
            break;
        }
    }
    assert!(first_perfect.is_some(), "train error never reached 0%");
}

#[test]
fn evidential_baseline_also_separates_blobs() {
    let ds = blobs(20, 1);
    let cfg = TrainConfig {
        objective: ObjectiveKind::Edl,
        ..blob_config(1)
    };
    let mut trainer = Trainer::new(NetworkSpec::mlp(2, &[8], 2, Activation::Relu), &ds, cfg.clone()).unwrap();
    trainer.fit(&ds, |_, _| {}).unwrap();
    let e = evaluate_classification(
        &trainer.network,
        &ds,
        cfg.objective,
        &cfg.classification,
        20,
        &mut SeededRng::new(1, 2),
    )
    .unwrap();
    assert_eq!(e.test_error, 0.0);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let ds = small_regression(0);
    let run = |seed: u64| {
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: Some(16),
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(NetworkSpec::mlp(2, &[10], 2, Activation::Relu), &ds, cfg).unwrap();
        metrics_csv(&t.fit(&ds, |_, _| {}).unwrap())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
    assert_eq!(a.lines().count(), 16);
    assert!(a.starts_with("epoch,objective,nll,regularizer,kl,variance_clamps\n1,"));
}

#[test]
fn classification_evaluation_is_repeatable() {
    let ds = blobs(15, 2);
    let mut cfg = blob_config(2);
    cfg.epochs = 20;
    let mut t = Trainer::new(NetworkSpec::mlp(2, &[8], 2, Activation::Relu), &ds, cfg.clone()).unwrap();
    t.fit(&ds, |_, _| {}).unwrap();
    let eval = || {
        evaluate_classification(
            &t.network,
            &ds,
            cfg.objective,
            &cfg.classification,
            50,
            &mut SeededRng::new(2, 2),
        )
        .unwrap()
    };
    assert_eq!(eval(), eval());
}

#[test]
fn regression_log_lik_carries_the_target_scale() {
    // Doubling the raw targets leaves the standardized problem unchanged, so
    // the reported log-likelihood drops by exactly ln 2 and the RMSE doubles.
    let base = small_regression(1);
    let y = base.regression_targets().unwrap();
    let doubled = regression_data(base.features.data().to_vec(), y.iter().map(|v| 2.0 * v).collect(), 2);
    let idx: Vec<usize> = (0..base.len()).collect();
    let mut out = Vec::new();
    for ds in [&base, &doubled] {
        let (z, st) = standardize(ds, &idx).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(NetworkSpec::mlp(2, &[10], 2, Activation::Relu), &z, cfg.clone()).unwrap();
        t.fit(&z, |_, _| {}).unwrap();
        let e = evaluate_regression(&t.network, &z, &st, &cfg.regression).unwrap();
        assert_eq!(e, evaluate_regression(&t.network, &z, &st, &cfg.regression).unwrap());
        out.push(e);
    }
    assert!((out[0].log_lik - out[1].log_lik - 2f64.ln()).abs() < 1e-10);
    assert!((out[1].rmse / out[0].rmse - 2.0).abs() < 1e-10);
}

#[test]
fn configuration_errors() {
    let reg = small_regression(2);
    let cls = blobs(5, 3);
    let mlp = |o| NetworkSpec::mlp(2, &[4], o, Activation::Relu);
    let bad =
        |cfg: TrainConfig, ds: &Dataset, out: usize| matches!(Trainer::new(mlp(out), ds, cfg), Err(Error::Config(_)));
    let edl = TrainConfig {
        objective: ObjectiveKind::Edl,
        ..TrainConfig::default()
    };
    assert!(bad(edl, &reg, 2));
    let mut zero_lr = TrainConfig::default();
    zero_lr.adam.lr = 0.0;
    assert!(bad(zero_lr, &reg, 2));
    assert!(bad(
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        &reg,
        2
    ));
    assert!(bad(
        TrainConfig {
            batch_size: Some(61),
            ..TrainConfig::default()
        },
        &reg,
        2
    ));
    assert!(bad(TrainConfig::default(), &reg, 3));
    assert!(bad(blob_config(0), &cls, 3));
    assert!(!bad(blob_config(0), &cls, 2));
}

#[test]
fn default_batch_follows_dataset_size() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.effective_batch(506), 506);
    assert_eq!(cfg.effective_batch(1999), 1999);
    assert_eq!(cfg.effective_batch(2000), 128);
    assert_eq!(cfg.effective_batch(60_000), 128);
}
