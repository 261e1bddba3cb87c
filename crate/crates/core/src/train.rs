//! Optimizer, training loop, and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, MomentPart, ParamStore, Tape, Var};
use crate::data::{Dataset, Standardizer, Targets};
use crate::error::{Error, Result};
use crate::heads::{
    bedl_objective, classification_kl, classification_log_marginal, edl_alpha, edl_loss, hyper_objective,
    hyperprior_penalty, pac_objective, regression_kl, regression_log_marginal, ClassificationHeadConfig,
    HyperpriorConfig, ObjectiveReport, ObjectiveTerms, PacConfig, PacTask, RegressionHeadConfig,
};
use crate::moments::GaussianVar;
use crate::network::{InitConfig, LayerKind, Network, NetworkSpec};
use crate::rng::SeededRng;
use crate::special::HALF_LN_2PI;
use crate::tensor::Tensor;
use crate::uncertainty::{argmax, decompose, ecdf_auc, entropy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "bedl")]
    Bedl,
    #[serde(rename = "bedl+reg")]
    BedlReg,
    #[serde(rename = "bedl-hyper")]
    BedlHyper,
    #[serde(rename = "edl")]
    Edl,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bedl" => Ok(Self::Bedl),
            "bedl+reg" | "bedl-reg" => Ok(Self::BedlReg),
            "bedl-hyper" => Ok(Self::BedlHyper),
            "edl" => Ok(Self::Edl),
            _ => Err(Error::Config(format!(
                "unknown objective {s:?} (expected bedl, bedl+reg, bedl-hyper, edl)"
            ))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bedl => "bedl",
            Self::BedlReg => "bedl+reg",
            Self::BedlHyper => "bedl-hyper",
            Self::Edl => "edl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn of(ds: &Dataset) -> Self {
        match ds.targets {
            Targets::Regression(_) => Self::Regression,
            Targets::Classification { .. } => Self::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the
/// [`ParamStore`] they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`. Non-finite
    /// gradients abort without touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in {} at flat index {i}",
                    p.grad.data()[i],
                    p.name
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &g), mk), vk) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *mk = beta1 * *mk + (1.0 - beta1) * g;
                *vk = beta2 * *vk + (1.0 - beta2) * g * g;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub epochs: usize,
    /// `None`: full batch below 2000 training points, 128 otherwise.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub regression: RegressionHeadConfig,
    pub classification: ClassificationHeadConfig,
    /// PAC confidence δ.
    pub delta: f64,
    /// Precision of the Gaussian reference distribution in the regression KL.
    pub alpha_prior: f64,
    pub hyperprior: HyperpriorConfig,
    /// Weight of the squared-error term in the evidential baseline loss.
    pub beta_edl: f64,
    pub init: InitConfig,
    /// Output-layer samples per datum at evaluation time.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::BedlReg,
            epochs: 100,
            batch_size: None,
            seed: 0,
            adam: AdamConfig::default(),
            regression: RegressionHeadConfig::default(),
            classification: ClassificationHeadConfig::default(),
            delta: 0.05,
            alpha_prior: 1.0,
            hyperprior: HyperpriorConfig::default(),
            beta_edl: 2.0,
            init: InitConfig::default(),
            eval_samples: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if let Some(b) = self.batch_size {
            if b < 1 || b > n_train {
                return Err(Error::Config(format!("batch size {b} must lie in 1..={n_train}")));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config("delta must lie in (0, 1]".into()));
        }
        if !(self.alpha_prior > 0.0) {
            return Err(Error::Config("alpha_prior must be positive".into()));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be >= 2".into()));
        }
        self.regression.validate()?;
        self.classification.validate()?;
        self.hyperprior.validate()
    }

    pub fn effective_batch(&self, n_train: usize) -> usize {
        self.batch_size
            .unwrap_or(if n_train < 2000 { n_train } else { 128 })
            .min(n_train)
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: f64,
    pub nll: f64,
    pub regularizer: f64,
    pub kl: f64,
    pub variance_clamps: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,objective,nll,regularizer,kl,variance_clamps";

    /// Shortest round-trip float formatting, so identical runs give identical bytes.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.objective, self.nll, self.regularizer, self.kl, self.variance_clamps
        )
    }
}

/// Forward pass with the weight means only (variances ignored), as used by
/// the evidential baseline. Returns logits `[B, out]`.
pub fn deterministic_forward(net: &Network, tape: &mut Tape, x: &Tensor) -> Result<Var> {
    let spec = net.spec();
    let (batch, d) = x.dims2()?;
    if d != spec.input_dim() {
        return Err(Error::shape(
            "deterministic_forward",
            "input width does not match the network",
        ));
    }
    let mut shape = spec.input_shape.clone();
    let mut full = vec![batch];
    full.extend_from_slice(&shape);
    let mut h = tape.constant(x.reshape(&full)?);
    for (layer, p) in spec.layers.iter().zip(net.layer_params()) {
        let w = tape.param(&net.store, p.w_mean);
        let b = p.bias.map(|(m, _)| tape.param(&net.store, m));
        let f = match layer.kind {
            LayerKind::Dense { fan_in, .. } => {
                let flat = tape.reshape(h, &[batch, fan_in])?;
                let f = tape.matmul(flat, w)?;
                match b {
                    Some(b) => {
                        let bb = tape.broadcast_rows(b, batch)?;
                        tape.add(f, bb)?
                    }
                    None => f,
                }
            }
            LayerKind::Conv2d { stride, .. } => {
                let f = tape.conv2d(h, w, stride)?;
                match b {
                    Some(b) => {
                        let s = tape.value(f).shape().to_vec();
                        let per = tape.broadcast_cols(b, s[2] * s[3])?;
                        let tiled = tape.tile(per, batch)?;
                        let bb = tape.reshape(tiled, &s)?;
                        tape.add(f, bb)?
                    }
                    None => f,
                }
            }
        };
        shape = tape.value(f).shape()[1..].to_vec();
        h = match layer.activation {
            Activation::Identity => f,
            act => {
                let zero = tape.constant(Tensor::zeros(tape.value(f).shape()));
                tape.act_moment(act, MomentPart::Mean, f, zero)?
            }
        };
    }
    let width: usize = shape.iter().product();
    tape.reshape(h, &[batch, width])
}

/// Minibatch targets in the form the heads consume.
pub enum BatchTargets<'a> {
    Regression(&'a [f64]),
    Classification(&'a [usize]),
}

/// Objective of one minibatch on `tape`.
pub fn batch_objective(
    net: &Network,
    cfg: &TrainConfig,
    n_data: usize,
    tape: &mut Tape,
    x: &Tensor,
    targets: BatchTargets<'_>,
    rng: &mut SeededRng,
) -> Result<ObjectiveTerms> {
    if cfg.objective == ObjectiveKind::Edl {
        let BatchTargets::Classification(labels) = targets else {
            return Err(Error::Config("the evidential baseline is classification-only".into()));
        };
        let logits = deterministic_forward(net, tape, x)?;
        let alpha = edl_alpha(tape, logits)?;
        let loss = edl_loss(tape, alpha, labels, cfg.beta_edl)?;
        let total = tape.mean(loss)?;
        return Ok(ObjectiveTerms {
            total,
            nll: total,
            regularizer: None,
            kl: None,
        });
    }

    let out: GaussianVar = net.forward(tape, x)?;
    let (log_marginals, kl, task) = match targets {
        BatchTargets::Regression(y) => {
            let lm = regression_log_marginal(tape, out, y, &cfg.regression)?;
            let kl = if cfg.objective == ObjectiveKind::BedlReg {
                Some(regression_kl(tape, out, cfg.alpha_prior)?)
            } else {
                None
            };
            (
                lm,
                kl,
                PacTask::Regression {
                    beta: cfg.regression.beta,
                },
            )
        }
        BatchTargets::Classification(labels) => {
            let sample = classification_log_marginal(tape, out, labels, &cfg.classification, rng)?;
            let kl = if cfg.objective == ObjectiveKind::BedlReg {
                Some(classification_kl(tape, &sample, cfg.classification.samples)?)
            } else {
                None
            };
            (sample.log_marginal, kl, PacTask::Classification)
        }
    };
    match cfg.objective {
        ObjectiveKind::Bedl => bedl_objective(tape, log_marginals),
        ObjectiveKind::BedlReg => {
            let pac = PacConfig {
                delta: cfg.delta,
                task,
                n_data,
            };
            pac_objective(tape, log_marginals, kl.expect("kl computed for bedl+reg"), &pac)
        }
        ObjectiveKind::BedlHyper => {
            let pairs = net.mean_log_var_vars(tape);
            let penalty = hyperprior_penalty(tape, &pairs, &cfg.hyperprior)?;
            hyper_objective(tape, log_marginals, penalty, n_data)
        }
        ObjectiveKind::Edl => unreachable!(),
    }
}

/// Stateful training run: network, optimizer, and the random stream used for
/// shuffling and head sampling.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub rng: SeededRng,
    pub epoch: usize,
    pub task: Task,
}

impl Trainer {
    /// Fresh network initialized from `cfg.seed` (stream 0); training draws
    /// use stream 1.
    pub fn new(spec: NetworkSpec, train: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(train.len())?;
        let task = Task::of(train);
        if spec.input_dim() != train.dim() {
            return Err(Error::Config(format!(
                "network expects {} inputs, data has {}",
                spec.input_dim(),
                train.dim()
            )));
        }
        let out = spec.output_dim()?;
        match task {
            Task::Regression if out != 2 => {
                return Err(Error::Config(format!("regression networks need 2 outputs, got {out}")))
            }
            Task::Classification if out != cfg.classification.classes => {
                return Err(Error::Config(format!(
                    "classification network has {out} outputs for {} classes",
                    cfg.classification.classes
                )))
            }
            _ => {}
        }
        if task == Task::Regression && cfg.objective == ObjectiveKind::Edl {
            return Err(Error::Config("the evidential baseline is classification-only".into()));
        }
        let network = Network::init(spec, &cfg.init, &mut SeededRng::new(cfg.seed, 0))?;
        let adam = Adam::new(cfg.adam.clone(), &network.store);
        Ok(Self {
            network,
            adam,
            rng: SeededRng::new(cfg.seed, 1),
            cfg,
            epoch: 0,
            task,
        })
    }

    /// One pass over `train` in shuffled minibatches.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<EpochMetrics> {
        let n = train.len();
        let batch = self.cfg.effective_batch(n);
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let mut acc = ObjectiveReport {
            total: 0.0,
            nll: 0.0,
            regularizer: 0.0,
            kl: 0.0,
        };
        let mut clamps = 0;
        for chunk in order.chunks(batch) {
            let x = train.feature_rows(chunk);
            let mut tape = Tape::new();
            let ys: Vec<f64>;
            let ls: Vec<usize>;
            let targets = match &train.targets {
                Targets::Regression(y) => {
                    ys = chunk.iter().map(|&i| y[i]).collect();
                    BatchTargets::Regression(&ys)
                }
                Targets::Classification { labels, .. } => {
                    ls = chunk.iter().map(|&i| labels[i]).collect();
                    BatchTargets::Classification(&ls)
                }
            };
            let terms = batch_objective(&self.network, &self.cfg, n, &mut tape, &x, targets, &mut self.rng)?;
            let r = terms.report(&tape);
            if !r.total.is_finite() {
                return Err(Error::Numerical(format!("objective became {}", r.total)));
            }
            let grads = tape.backward(terms.total)?;
            self.network.store.zero_grad();
            grads.accumulate(&mut self.network.store)?;
            self.adam.step(&mut self.network.store)?;
            let w = chunk.len() as f64 / n as f64;
            acc.total += w * r.total;
            acc.nll += w * r.nll;
            acc.regularizer += w * r.regularizer;
            acc.kl += w * r.kl;
            clamps += tape.variance_clamps();
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            objective: acc.total,
            nll: acc.nll,
            regularizer: acc.regularizer,
            kl: acc.kl,
            variance_clamps: clamps,
        })
    }

    /// Run the remaining configured epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut log = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch(train)?;
            log::info!(
                "epoch {:>4}  objective {:.6}  nll {:.6}  reg {:.6}",
                m.epoch,
                m.objective,
                m.nll,
                m.regularizer
            );
            on_epoch(self, &m);
            log.push(m);
        }
        Ok(log)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(EpochMetrics::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionEval {
    pub n: usize,
    /// Mean test log-likelihood in original target units.
    pub log_lik: f64,
    pub rmse: f64,
}

const EVAL_BATCH: usize = 500;

/// Closed-form predictive log density on standardized data, reported in
/// original units via the standardizer.
pub fn evaluate_regression(
    net: &Network,
    test: &Dataset,
    standardizer: &Standardizer,
    head: &RegressionHeadConfig,
) -> Result<RegressionEval> {
    let y = test.regression_targets()?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let (mut ll, mut se) = (0.0, 0.0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = net.predict(&test.feature_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let (m1, s1) = (out.mean.get2(r, 0), out.var.get2(r, 0));
            let (m2, s2) = (out.mean.get2(r, 1), out.var.get2(r, 1));
            let v = 1.0 / head.beta + s1 + (m2 + 0.5 * s2).min(crate::heads::LOG_VAR_CLAMP).exp();
            let d = y[i] - m1;
            ll += -HALF_LN_2PI - 0.5 * v.ln() - 0.5 * d * d / v + standardizer.log_lik_correction();
            se += (d * standardizer.target_std).powi(2);
        }
    }
    let n = test.len() as f64;
    Ok(RegressionEval {
        n: test.len(),
        log_lik: ll / n,
        rmse: (se / n).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationEval {
    pub n: usize,
    pub test_error: f64,
    pub ecdf_auc: f64,
    pub mean_entropy: f64,
    #[serde(skip)]
    pub entropies: Vec<f64>,
}

/// Predictive class probabilities and entropies for every row of `ds`.
pub fn predict_classes(
    net: &Network,
    ds: &Dataset,
    objective: ObjectiveKind,
    head: &ClassificationHeadConfig,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut probs = Vec::with_capacity(ds.len());
    let mut ents = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = ds.feature_rows(chunk);
        if objective == ObjectiveKind::Edl {
            let mut tape = Tape::new();
            let logits = deterministic_forward(net, &mut tape, &x)?;
            let f = tape.value(logits);
            for r in 0..chunk.len() {
                let alpha: Vec<f64> = f.row(r).iter().map(|v| v.max(0.0) + 1.0).collect();
                let a0: f64 = alpha.iter().sum();
                let p: Vec<f64> = alpha.iter().map(|a| a / a0).collect();
                ents.push(entropy(&p));
                probs.push(p);
            }
        } else {
            let out = net.predict(&x)?;
            for rep in decompose(&out, samples, head.logit_clamp, rng)? {
                ents.push(rep.entropy);
                probs.push(rep.mean);
            }
        }
    }
    Ok((probs, ents))
}

pub fn evaluate_classification(
    net: &Network,
    ds: &Dataset,
    objective: ObjectiveKind,
    head: &ClassificationHeadConfig,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<ClassificationEval> {
    let (labels, classes) = ds.labels()?;
    let (probs, ents) = predict_classes(net, ds, objective, head, samples, rng)?;
    let wrong = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) != y).count();
    Ok(ClassificationEval {
        n: ds.len(),
        test_error: 100.0 * wrong as f64 / ds.len() as f64,
        ecdf_auc: ecdf_auc(&ents, classes)?,
        mean_entropy: ents.iter().sum::<f64>() / ents.len() as f64,
        entropies: ents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, 1.0]));
        store.get_mut(id).grad = Tensor::vector(vec![3.0, -0.02]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        let v = store.value(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0]));
        store.get_mut(id).grad = Tensor::vector(vec![f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(adam.step(&mut store), Err(Error::Numerical(_))));
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn objective_names_round_trip() {
        for k in [
            ObjectiveKind::Bedl,
            ObjectiveKind::BedlReg,
            ObjectiveKind::BedlHyper,
            ObjectiveKind::Edl,
        ] {
            assert_eq!(k.to_string().parse::<ObjectiveKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{k}\""));
        }
    }
}
