//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria that are pure library properties (2, 3, 4, 8, 9) fail the run
//! when they fail. The empirical ones (1, 5, 6, 7, 10) depend on data and
//! training outcomes; their FAIL lines are reported without failing the run.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bedl_core::autodiff::{Activation, Tape};
use bedl_core::heads::kl_dirichlet_uniform;
use bedl_core::network::{InitConfig, Network, NetworkSpec};
use bedl_core::rng::SeededRng;
use bedl_core::train::{batch_objective, BatchTargets, ObjectiveKind, TrainConfig};
use bedl_core::uncertainty::ecdf_auc;
use bedl_core::verify;
use bedl_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = Result<Outcome, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn bedl(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_bedl"))
        .current_dir(root())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "bedl {} exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

/// Value of `column` in the first data row whose first field is `row`.
fn csv_field(text: &str, row: &str, column: &str) -> Result<f64, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty output")?.split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == column)
        .ok_or(format!("no column {column}"))?;
    let line = lines
        .find(|l| l.split(',').next() == Some(row))
        .ok_or(format!("no row {row}"))?;
    line.split(',')
        .nth(col)
        .ok_or("short row")?
        .parse()
        .map_err(|e| format!("{e}"))
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let cases = verify::moment_oracle_cases(50, 100_000, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<&verify::MomentCase> = cases.iter().filter(|c| !c.passes(5.0, 0.1)).collect();
    let worst_z = cases
        .iter()
        .flat_map(|c| &c.outputs)
        .map(|o| o.mean_z())
        .fold(0.0, f64::max);
    let worst_v = cases
        .iter()
        .flat_map(|c| &c.outputs)
        .map(|o| o.var_rel_err())
        .fold(0.0, f64::max);
    let by_depth = |d: usize| {
        let all = cases.iter().filter(|c| c.depth() == d).count();
        let bad = failing.iter().filter(|c| c.depth() == d).count();
        format!("{}/{all}", all - bad)
    };
    Ok(Outcome {
        pass: failing.is_empty() && secs < 300.0,
        detail: format!(
            "{}/50 architectures pass (1 layer {}, 2 layers {}, 3 layers {}); worst mean z {worst_z:.2}, worst var rel err {:.3}; {secs:.0} s",
            50 - failing.len(),
            by_depth(1),
            by_depth(2),
            by_depth(3),
            worst_v
        ),
    })
}

fn activation_exactness() -> Check {
    let grid = verify::activation_grid();
    let worst = grid.iter().map(|a| a.max_abs_err()).fold(0.0, f64::max);
    Ok(Outcome {
        pass: grid.iter().all(|a| a.max_abs_err() <= 1e-6),
        detail: format!("{} grid points, max abs error {worst:.2e} (tol 1e-6)", grid.len()),
    })
}

fn gradient_integrity() -> Check {
    let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![1.2, 0.3], vec![-0.7, 0.9]]).map_err(|e| e.to_string())?;
    let y = [0.4, -0.2, 1.1];
    let labels = [2, 0, 1];
    let inits = [
        InitConfig::default(),
        InitConfig {
            log_var_mean: -2.0,
            log_var_var: 0.25,
        },
    ];
    let mut worst = 0.0f64;
    let mut count = 0;
    // The regression head needs a mean and a log-variance output, so the 2-3-1 net has two output units.
    let nets = [
        NetworkSpec::mlp(2, &[3], 2, Activation::Relu),
        NetworkSpec::mlp(2, &[4], 3, Activation::Elu { alpha: 1.0 }),
    ];
    for (k, spec) in nets.iter().enumerate() {
        for init in &inits {
            for objective in [ObjectiveKind::Bedl, ObjectiveKind::BedlReg] {
                let mut net =
                    Network::init(spec.clone(), init, &mut SeededRng::new(7, 0)).map_err(|e| e.to_string())?;
                let mut cfg = TrainConfig {
                    objective,
                    ..TrainConfig::default()
                };
                cfg.classification.classes = 3;
                let checks = verify::gradient_check(&mut net, 1e-5, |n, tape| {
                    let targets = if k == 0 {
                        BatchTargets::Regression(&y)
                    } else {
                        BatchTargets::Classification(&labels)
                    };
                    let terms = batch_objective(n, &cfg, 3, tape, &x, targets, &mut SeededRng::new(7, 1))?;
                    Ok(terms.total)
                })
                .map_err(|e| e.to_string())?;
                count += checks.len();
                worst = checks.iter().map(|c| c.rel_err()).fold(worst, f64::max);
            }
        }
    }
    Ok(Outcome {
        pass: worst < 1e-4,
        detail: format!(
            "{count} parameter entries over 2 nets x 2 objectives x 2 inits, max rel err {worst:.2e} (tol 1e-4)"
        ),
    })
}

fn marginal_cross_checks() -> Check {
    let start = Instant::now();
    let reg = verify::regression_marginal_checks(50, 100_000, 0).map_err(|e| e.to_string())?;
    let cls = verify::classification_marginal_checks(50, 100_000, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let zr = reg.iter().map(|m| m.z()).fold(0.0, f64::max);
    let zc = cls.iter().map(|m| m.z()).fold(0.0, f64::max);
    Ok(Outcome {
        pass: zr <= 3.0 && zc <= 3.0 && secs < 120.0,
        detail: format!(
            "regression max z {zr:.2} over 50 cases (trained-regime moments, KDE two-stage oracle); classification max z {zc:.2} over 50 cases at C = 2, 3; {secs:.0} s"
        ),
    })
}

fn uci_runs(dataset: &str, objective: &str) -> Result<Vec<f64>, String> {
    let config = format!("configs/{dataset}.json");
    let data = root().join(format!("data/uci/{dataset}.csv"));
    if !data.exists() {
        return Err(format!("data/uci/{dataset}.csv missing"));
    }
    let out = tempdir()?;
    (0..5)
        .map(|split| {
            let split = split.to_string();
            let text = bedl(&[
                "train",
                "--config",
                &config,
                "--objective",
                objective,
                "--split",
                &split,
                "--out",
                out.path().to_str().unwrap(),
            ])?;
            csv_field(&text, "test", "log_lik")
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

struct Uci {
    boston: Result<Vec<f64>, String>,
    energy_reg: Result<Vec<f64>, String>,
}

fn uci_reproduction(uci: &Uci) -> Check {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, runs, floor) in [("boston", &uci.boston, -2.60), ("energy", &uci.energy_reg, -1.05)] {
        match runs {
            Ok(v) => {
                let (m, se) = mean_se(v);
                pass &= m >= floor;
                parts.push(format!("{name} {m:.3} ± {se:.3} (need ≥ {floor})"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    Ok(Outcome {
        pass,
        detail: format!("BEDL+Reg over splits 0-4: {}", parts.join("; ")),
    })
}

fn compare_on_energy(uci: &Uci, other: &str, want_other_lower: bool) -> Check {
    let reg = uci.energy_reg.as_ref().map_err(|e| e.clone())?;
    let alt = uci_runs("energy", other)?;
    let (r, a) = (mean(reg), mean(&alt));
    let pass = if want_other_lower { a < r } else { r >= a };
    Ok(Outcome {
        pass,
        detail: format!("energy splits 0-4: bedl+reg {r:.3}, {other} {a:.3}"),
    })
}

fn ood_ordering() -> Check {
    for f in [
        "data/mnist/train-images-idx3-ubyte.gz",
        "data/fashion-mnist/t10k-images-idx3-ubyte.gz",
    ] {
        if !root().join(f).exists() {
            return Err(format!("{f} missing"));
        }
    }
    let start = Instant::now();
    let out = tempdir()?;
    bedl(&[
        "train",
        "--config",
        "configs/mnist_lenet.json",
        "--out",
        out.path().to_str().unwrap(),
    ])?;
    let ckpt = out.path().join("checkpoint.bedl");
    let text = bedl(&[
        "ood-eval",
        "--config",
        "configs/mnist_lenet.json",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let err = csv_field(&text, "in", "test_error")?;
    let (auc_in, auc_out) = (
        csv_field(&text, "in", "ecdf_auc")?,
        csv_field(&text, "out", "ecdf_auc")?,
    );
    let (h_in, h_out) = (
        csv_field(&text, "in", "mean_entropy")?,
        csv_field(&text, "out", "mean_entropy")?,
    );
    Ok(Outcome {
        pass: err <= 3.0 && auc_out < auc_in && h_out >= 2.0 * h_in && secs < 3600.0,
        detail: format!(
            "test error {err:.2}% (≤ 3); ECDF-AUC out {auc_out:.4} vs in {auc_in:.4} (need out < in); mean entropy out {h_out:.4} vs in {h_in:.4}, ratio {:.2} (need ≥ 2); {secs:.0} s",
            h_out / h_in
        ),
    })
}

fn metric_exactness() -> Check {
    let l = 10f64.ln();
    let uniform = ecdf_auc(&[l; 20], 10).map_err(|e| e.to_string())?;
    let confident = ecdf_auc(&[0.0; 20], 10).map_err(|e| e.to_string())?;
    let half = ecdf_auc(&[0.0, l, l, 0.0, 0.0, l], 10).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 1.0]).map_err(|e| e.to_string())?);
    let kl = kl_dirichlet_uniform(&mut tape, a).map_err(|e| e.to_string())?;
    let kl = tape.value(kl).data()[0];
    let kl_err = (kl - (2f64.ln() - 0.5)).abs();
    Ok(Outcome {
        pass: uniform == 0.0 && confident == l && half == 0.5 * l && kl_err <= 1e-10,
        detail: format!("ecdf uniform {uniform}, confident {confident}, half {half}; KL Dir(2,1) error {kl_err:.1e}"),
    })
}

fn determinism() -> Check {
    let data = root().join("data/uci/boston.csv");
    let dir = tempdir()?;
    let config = if data.exists() {
        "configs/boston.json".to_owned()
    } else {
        let csv = dir.path().join("toy.csv");
        let rows: String = (0..80)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                format!("{a},{},{}\n", (i as f64 * 0.11).cos(), 2.0 * a + (i % 7) as f64 * 0.1)
            })
            .collect();
        fs::write(&csv, rows).map_err(|e| e.to_string())?;
        let cfg = dir.path().join("toy.json");
        let text = fs::read_to_string(root().join("configs/boston.json"))
            .map_err(|e| e.to_string())?
            .replace("data/uci/boston.csv", csv.to_str().unwrap());
        fs::write(&cfg, text).map_err(|e| e.to_string())?;
        cfg.to_str().unwrap().to_owned()
    };
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        bedl(&[
            "train",
            "--config",
            &config,
            "--seed",
            "17",
            "--out",
            out.to_str().unwrap(),
        ])?;
        csvs.push(fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(Outcome {
        pass: csvs[0] == csvs[1] && rows > 0,
        detail: format!(
            "two `bedl train` runs of {config}: {rows} epoch rows, identical = {}",
            csvs[0] == csvs[1]
        ),
    })
}

fn run(number: usize, name: &str, gating: bool, f: impl FnOnce() -> Check) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, e),
    };
    println!(
        "criterion {number:>2} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass || !gating
}

fn main() -> ExitCode {
    println!("acceptance:");
    let mut ok = true;
    ok &= run(1, "oracle equivalence", false, oracle_equivalence);
    ok &= run(2, "activation-moment exactness", true, activation_exactness);
    ok &= run(3, "gradient integrity", true, gradient_integrity);
    ok &= run(4, "marginal-likelihood cross-checks", true, marginal_cross_checks);
    let uci = Uci {
        boston: uci_runs("boston", "bedl+reg"),
        energy_reg: uci_runs("energy", "bedl+reg"),
    };
    ok &= run(5, "UCI reproduction", false, || uci_reproduction(&uci));
    ok &= run(6, "regularizer effect", false, || {
        compare_on_energy(&uci, "bedl", false)
    });
    ok &= run(7, "OOD ordering", false, ood_ordering);
    ok &= run(8, "metric exactness", true, metric_exactness);
    ok &= run(9, "determinism", true, determinism);
    ok &= run(10, "hyperprior sanity", false, || {
        compare_on_energy(&uci, "bedl-hyper", true)
    });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
