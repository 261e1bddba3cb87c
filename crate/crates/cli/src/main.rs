use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bedl_core::checkpoint::Checkpoint;
use bedl_core::data::{load_csv, make_splits, Dataset, SplitPlan};
use bedl_core::experiment::{DatasetConfig, ExperimentConfig, IdxPair, Prepared};
use bedl_core::network::Network;
use bedl_core::rng::SeededRng;
use bedl_core::train::{
    evaluate_classification, evaluate_regression, EpochMetrics, ObjectiveKind, Task, TrainConfig, Trainer,
};
use bedl_core::verify;
use bedl_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bedl",
    version,
    about = "Train and evaluate moment-propagating evidential networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config and evaluate on its test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the config's train or test split.
    Eval(EvalArgs),
    /// In-domain and out-of-domain entropy metrics for a classifier.
    OodEval(OodArgs),
    /// Print the train/test assignment of a CSV dataset's splits.
    Splits(SplitsArgs),
    /// Compare the analytic moments and marginals against their oracles.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// bedl, bedl+reg, bedl-hyper, or edl
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Observation precision of the regression head.
    #[arg(long)]
    beta: Option<f64>,
    /// Output samples per datum in the classification head.
    #[arg(long)]
    samples: Option<usize>,
    /// Split index for CSV datasets.
    #[arg(long)]
    split: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t: &mut TrainConfig = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.objective {
            t.objective = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.adam.lr = v;
        }
        if let Some(v) = self.batch {
            t.batch_size = Some(v);
        }
        if let Some(v) = self.delta {
            t.delta = v;
        }
        if let Some(v) = self.beta {
            t.regression.beta = v;
        }
        if let Some(v) = self.samples {
            t.classification.samples = v;
        }
        if let (Some(s), DatasetConfig::Csv { split, .. }) = (self.split, &mut cfg.dataset) {
            *split = s;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results directory for metrics.csv, summary.csv and checkpoint.bedl.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train or test
    #[arg(long, default_value = "test")]
    on: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding t10k-{images,labels} IDX files; overrides the config's `ood`.
    #[arg(long)]
    ood_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SplitsArgs {
    /// CSV experiment config; alternatively give --rows.
    #[arg(long, conflicts_with = "rows")]
    config: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 20)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
}

#[derive(Args)]
struct VerifyArgs {
    /// all, moments, activations, or marginals
    #[arg(long, default_value = "all")]
    what: String,
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn write_csv_rows(out: &mut impl Write, header: &str, rows: &[String]) -> Result<()> {
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

const REGRESSION_HEADER: &str = "split,n,log_lik,rmse";
const CLASSIFICATION_HEADER: &str = "split,n,test_error,ecdf_auc,mean_entropy";

fn summary(
    split: &str,
    net: &Network,
    cfg: &TrainConfig,
    prepared: &Prepared,
    ds: &Dataset,
    rng: &mut SeededRng,
) -> Result<(&'static str, String)> {
    match prepared.task {
        Task::Regression => {
            let st = prepared
                .standardizer
                .as_ref()
                .ok_or_else(|| Error::Config("regression data without a standardizer".into()))?;
            let e = evaluate_regression(net, ds, st, &cfg.regression)?;
            Ok((REGRESSION_HEADER, format!("{split},{},{},{}", e.n, e.log_lik, e.rmse)))
        }
        Task::Classification => {
            let e = evaluate_classification(net, ds, cfg.objective, &cfg.classification, cfg.eval_samples, rng)?;
            Ok((
                CLASSIFICATION_HEADER,
                format!("{split},{},{},{},{}", e.n, e.test_error, e.ecdf_auc, e.mean_entropy),
            ))
        }
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let prepared = cfg.prepare()?;
    let spec = cfg.network_spec(&prepared.train)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.header.spec != spec {
                return Err(Error::Config("checkpoint architecture differs from the config".into()));
            }
            let mut t = ckpt.trainer()?;
            t.cfg.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::new(spec, &prepared.train, cfg.train.clone())?,
    };
    fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut metrics = File::create(&metrics_path)?;
    writeln!(metrics, "{}", EpochMetrics::CSV_HEADER)?;

    let mut last_good = Checkpoint::from_trainer(&trainer, prepared.standardizer.clone())?;
    let mut io_err = None;
    let fitted = trainer.fit(&prepared.train, |t, m| {
        if let Err(e) = writeln!(metrics, "{}", m.csv_row()).and_then(|_| metrics.flush()) {
            io_err.get_or_insert(e);
        }
        match Checkpoint::from_trainer(t, prepared.standardizer.clone()) {
            Ok(c) => last_good = c,
            Err(e) => log::warn!("could not snapshot epoch {}: {e}", m.epoch),
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Err(e) = fitted {
        let path = args.out.join("last_good.bedl");
        last_good.save(&path)?;
        eprintln!(
            "training stopped at epoch {}; last good state (epoch {}) saved to {}",
            trainer.epoch + 1,
            last_good.header.epoch,
            path.display()
        );
        return Err(e);
    }
    Checkpoint::from_trainer(&trainer, prepared.standardizer.clone())?.save(args.out.join("checkpoint.bedl"))?;

    let mut rng = SeededRng::new(trainer.cfg.seed, 2);
    let (header, row) = summary(
        "test",
        &trainer.network,
        &trainer.cfg,
        &prepared,
        &prepared.test,
        &mut rng,
    )?;
    let mut f = File::create(args.out.join("summary.csv"))?;
    write_csv_rows(&mut f, header, std::slice::from_ref(&row))?;
    write_csv_rows(&mut io::stdout(), header, &[row])?;
    Ok(())
}

fn load_for_eval(config: &Path, overrides: &Overrides, checkpoint: &Path) -> Result<(Prepared, Checkpoint, Network)> {
    let cfg = load_config(config, overrides)?;
    let prepared = cfg.prepare()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.header.task != prepared.task {
        return Err(Error::Config(format!(
            "checkpoint is a {:?} model but the config describes {:?} data",
            ckpt.header.task, prepared.task
        )));
    }
    if ckpt.header.standardizer != prepared.standardizer {
        return Err(Error::Config(
            "checkpoint was trained on a different split or preprocessing".into(),
        ));
    }
    let net = ckpt.network()?;
    Ok((prepared, ckpt, net))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (prepared, ckpt, net) = load_for_eval(&args.config, &args.overrides, &args.checkpoint)?;
    let ds = match args.on.as_str() {
        "test" => &prepared.test,
        "train" => &prepared.train,
        other => return Err(Error::Config(format!("--on must be train or test, got {other:?}"))),
    };
    let mut rng = SeededRng::new(ckpt.header.config.seed, 2);
    let (header, row) = summary(&args.on, &net, &ckpt.header.config, &prepared, ds, &mut rng)?;
    write_csv_rows(&mut io::stdout(), header, &[row])
}

fn ood_eval(args: &OodArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let ood = match (&args.ood_dir, &cfg.ood) {
        (Some(dir), _) => IdxPair::in_dir(dir, "t10k"),
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(Error::Config(
                "no out-of-domain data: set `ood` or pass --ood-dir".into(),
            ))
        }
    };
    let (prepared, ckpt, net) = load_for_eval(&args.config, &args.overrides, &args.checkpoint)?;
    if prepared.task != Task::Classification {
        return Err(Error::Config("ood-eval needs a classification experiment".into()));
    }
    let out_ds = ood.load()?;
    let c = &ckpt.header.config;
    let mut rows = Vec::new();
    for (domain, ds, stream) in [("in", &prepared.test, 2), ("out", &out_ds, 3)] {
        let mut rng = SeededRng::new(c.seed, stream);
        let e = evaluate_classification(&net, ds, c.objective, &c.classification, c.eval_samples, &mut rng)?;
        rows.push(format!(
            "{domain},{},{},{},{}",
            e.n, e.test_error, e.ecdf_auc, e.mean_entropy
        ));
    }
    write_csv_rows(&mut io::stdout(), "domain,n,test_error,ecdf_auc,mean_entropy", &rows)
}

fn splits(args: &SplitsArgs) -> Result<()> {
    let (n, seed, fraction) = match (&args.config, args.rows) {
        (Some(path), _) => match ExperimentConfig::load(path)?.dataset {
            DatasetConfig::Csv {
                path,
                options,
                split_seed,
                train_fraction,
                ..
            } => (load_csv(path, &options)?.len(), split_seed, train_fraction),
            DatasetConfig::Idx { .. } => return Err(Error::Config("image datasets have a fixed test set".into())),
        },
        (None, Some(rows)) => (rows, args.seed, args.train_fraction),
        (None, None) => return Err(Error::Config("give --config or --rows".into())),
    };
    let mut out = io::stdout().lock();
    writeln!(out, "split,row,role")?;
    for index in 0..args.count {
        let plan = SplitPlan {
            index,
            train_fraction: fraction,
            seed,
        };
        let (tr, te) = make_splits(n, &plan)?;
        let mut rows: Vec<(usize, &str)> = tr
            .iter()
            .map(|&r| (r, "train"))
            .chain(te.iter().map(|&r| (r, "test")))
            .collect();
        rows.sort_unstable();
        for (r, role) in rows {
            writeln!(out, "{index},{r},{role}")?;
        }
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let all = args.what == "all";
    if !all && !["moments", "activations", "marginals"].contains(&args.what.as_str()) {
        return Err(Error::Config(format!("unknown verify target {:?}", args.what)));
    }
    let mut out = io::stdout().lock();
    if all || args.what == "moments" {
        writeln!(
            out,
            "check,case,widths,activation,output,mm_mean,mc_mean,mean_se,mean_z,mm_var,mc_var,var_rel_err,pass"
        )?;
        for c in verify::moment_oracle_cases(args.cases, args.draws, args.seed)? {
            let widths: Vec<String> = c.widths.iter().map(usize::to_string).collect();
            for (k, o) in c.outputs.iter().enumerate() {
                writeln!(
                    out,
                    "moments,{},{},{},{k},{},{},{},{},{},{},{},{}",
                    c.case,
                    widths.join("-"),
                    activation_name(c.activation),
                    o.mm_mean,
                    o.mc_mean,
                    o.mean_se,
                    o.mean_z(),
                    o.mm_var,
                    o.mc_var,
                    o.var_rel_err(),
                    o.passes(5.0, 0.1)
                )?;
            }
        }
        writeln!(out)?;
    }
    if all || args.what == "activations" {
        writeln!(
            out,
            "check,activation,mu,sigma,mean,quad_mean,var,quad_var,max_abs_err,pass"
        )?;
        for a in verify::activation_grid() {
            writeln!(
                out,
                "activation,{},{},{},{},{},{},{},{},{}",
                activation_name(a.activation),
                a.mu,
                a.sigma,
                a.mean,
                a.quad_mean,
                a.var,
                a.quad_var,
                a.max_abs_err(),
                a.max_abs_err() <= 1e-6
            )?;
        }
        writeln!(out)?;
    }
    if all || args.what == "marginals" {
        writeln!(out, "check,case,analytic,reference,se,z,pass")?;
        let reg = verify::regression_marginal_checks(args.cases, args.draws, args.seed)?;
        let cls = verify::classification_marginal_checks(args.cases, args.draws, args.seed)?;
        for (name, checks) in [("regression", reg), ("classification", cls)] {
            for m in checks {
                writeln!(
                    out,
                    "{name},{},{},{},{},{},{}",
                    m.case,
                    m.analytic,
                    m.reference,
                    m.se,
                    m.z(),
                    m.z() <= 3.0
                )?;
            }
        }
    }
    Ok(())
}

fn activation_name(a: bedl_core::autodiff::Activation) -> String {
    use bedl_core::autodiff::Activation;
    match a {
        Activation::Identity => "identity".into(),
        Activation::Relu => "relu".into(),
        Activation::Elu { alpha } => format!("elu({alpha})"),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } | Error::Io(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::Numerical(_) | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::OodEval(a) => ood_eval(a),
        Command::Splits(a) => splits(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
