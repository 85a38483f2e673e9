//! Primal-dual robust training and its baselines.
//!
//! Every method runs the same epoch loop: shuffle, sample perturbations per
//! batch, take a primal step on
//! `mean[robust(f(x + delta), y) + nu * nominal(f(x), y)]`, then after the
//! epoch move `nu` by projected ascent on the nominal-loss constraint.
//! ERM skips the sampler, adversarial training and the fixed-weight penalty
//! freeze `nu`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::diffcore::{grad_theta, LabeledBatch, Loss, LossTriple, ModelParams};
use crate::error::{Error, Result};
use crate::perturb::PerturbSet;
use crate::sampler::{run_sampler, SamplerCfg, SamplerMethod};

/// Rows per chunk when evaluating over a whole dataset.
const EVAL_CHUNK: usize = 512;

/// Named random substreams derived from the top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Sampler,
    Shuffle,
    Noise,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of substream `stream`, independent across streams.
pub fn substream_seed(seed: u64, stream: Stream) -> u64 {
    let tag = match stream {
        Stream::Init => 1,
        Stream::Sampler => 2,
        Stream::Shuffle => 3,
        Stream::Noise => 4,
    };
    splitmix64(splitmix64(seed) ^ tag)
}

/// Sampler seed for one epoch; keeps noise fresh across epochs.
fn epoch_sampler_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(substream_seed(seed, Stream::Sampler) ^ epoch as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub nu: f64,
    pub rho: f64,
    pub eta_dual: f64,
}

impl DualState {
    pub fn new(rho: f64, eta_dual: f64) -> Result<Self> {
        let s = Self {
            nu: 0.0,
            rho,
            eta_dual,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Parameter(format!("rho must be nonnegative, got {}", self.rho)));
        }
        if !(self.eta_dual >= 0.0) || !self.eta_dual.is_finite() {
            return Err(Error::Parameter(format!(
                "dual step must be nonnegative, got {}",
                self.eta_dual
            )));
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::Parameter(format!("nu must be nonnegative, got {}", self.nu)));
        }
        Ok(())
    }

    /// `nu <- max(0, nu + eta_dual * (avg_nominal - rho))`.
    pub fn update(&mut self, avg_nominal: f64) -> f64 {
        self.nu = (self.nu + self.eta_dual * (avg_nominal - self.rho)).max(0.0);
        self.nu
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" | "sgd+momentum" => Ok(Optimizer::Momentum),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum => "momentum",
        })
    }
}

/// Which average of the nominal loss drives the dual update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualAverage {
    /// Mean of the batch nominal losses seen during the epoch.
    Running,
    /// An extra pass over the full training set after the epoch.
    FullPass,
}

impl FromStr for DualAverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(DualAverage::Running),
            "full_pass" | "full" | "strict" => Ok(DualAverage::FullPass),
            other => Err(Error::Config(format!("unknown dual average `{other}`"))),
        }
    }
}

impl fmt::Display for DualAverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DualAverage::Running => "running",
            DualAverage::FullPass => "full_pass",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub set: PerturbSet,
    pub sampler: SamplerCfg,
    pub losses: LossTriple,
    pub dual: DualState,
    pub dual_average: DualAverage,
    /// Attack used for the per-epoch robust accuracy; `None` skips it.
    pub eval_attack: Option<SamplerCfg>,
    /// Rows used for per-epoch accuracies (0 means all).
    pub eval_rows: usize,
    pub seed: u64,
}

impl TrainCfg {
    /// Plain SGD defaults around the given perturbation set and sampler.
    pub fn new(set: PerturbSet, sampler: SamplerCfg) -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.1,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 1.0,
            set,
            sampler,
            losses: LossTriple::default(),
            dual: DualState {
                nu: 0.0,
                rho: 0.0,
                eta_dual: 0.0,
            },
            dual_average: DualAverage::Running,
            eval_attack: None,
            eval_rows: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight decay must be nonnegative".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Parameter("lr decay must be positive".into()));
        }
        self.sampler.validate()?;
        self.losses.validate()?;
        self.dual.validate()?;
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Erm,
    /// Minimize the robust loss on sampled perturbations only.
    Adversarial,
    Dale,
    /// DALE with `nu` pinned to the given value.
    Penalty(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Nominal-loss average that fed the dual update.
    pub clean_loss: f64,
    /// Mean robust loss on the perturbed training batches.
    pub robust_loss: f64,
    /// Dual variable in effect during the epoch.
    pub nu: f64,
    pub slack: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

pub const HISTORY_COLUMNS: [&str; 7] = [
    "epoch",
    "clean_loss",
    "robust_loss",
    "nu",
    "slack",
    "clean_acc",
    "robust_acc",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    /// `nu` after the last dual update.
    pub final_nu: f64,
}

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn nu_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nu).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", HISTORY_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.clean_loss, r.robust_loss, r.nu, r.slack, r.clean_acc, r.robust_acc
            )?;
        }
        Ok(())
    }
}

fn check_data(model: &ModelParams, data: &Dataset) -> Result<()> {
    if data.dim() != model.input_dim {
        return Err(Error::Shape(format!(
            "data has {} features, model expects {}",
            data.dim(),
            model.input_dim
        )));
    }
    if data.num_classes > model.num_classes {
        return Err(Error::Shape(format!(
            "data has {} classes, model has {}",
            data.num_classes, model.num_classes
        )));
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn perturbed_inputs(set: &PerturbSet, batch: &LabeledBatch, deltas: &Array2<f64>) -> Array2<f64> {
    let mut out = &batch.inputs + deltas;
    if let Some((lo, hi)) = set.clamp {
        out.mapv_inplace(|v| v.clamp(lo, hi));
    }
    out
}

/// Inputs after the attack, or the clean inputs.
fn attacked(
    model: &ModelParams,
    batch: &LabeledBatch,
    attack: Option<(&PerturbSet, &SamplerCfg)>,
    loss: Loss,
) -> Result<Array2<f64>> {
    match attack {
        Some((set, cfg)) => {
            let deltas = run_sampler(model, set, batch, cfg, loss)?;
            Ok(perturbed_inputs(set, batch, &deltas))
        }
        None => Ok(batch.inputs.clone()),
    }
}

/// Fraction of rows whose argmax prediction on the (optionally attacked)
/// input equals the label. The attack maximizes `loss`.
pub fn evaluate(
    model: &ModelParams,
    data: &Dataset,
    attack: Option<(&PerturbSet, &SamplerCfg)>,
    loss: Loss,
) -> Result<f64> {
    check_data(model, data)?;
    let mut correct = 0usize;
    for idx in chunks(data.len()) {
        let batch = data.batch(&idx)?;
        let inputs = attacked(model, &batch, attack, loss)?;
        let pred = model.predict(inputs.view())?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn mean_loss(
    model: &ModelParams,
    data: &Dataset,
    attack: Option<(&PerturbSet, &SamplerCfg)>,
    attack_loss: Loss,
    loss: Loss,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in chunks(data.len()) {
        let batch = data.batch(&idx)?;
        let inputs = attacked(model, &batch, attack, attack_loss)?;
        let reference = if loss.kind.needs_reference() {
            Some(model.forward(batch.inputs.view())?)
        } else {
            None
        };
        total += model
            .losses(inputs.view(), &batch.labels, reference.as_ref().map(|r| r.view()), loss)?
            .sum();
    }
    Ok(total / data.len() as f64)
}

/// Mean nominal loss over the dataset.
pub fn nominal_risk(model: &ModelParams, data: &Dataset, loss: Loss) -> Result<f64> {
    check_data(model, data)?;
    mean_loss(model, data, None, loss, loss)
}

/// `[mean nominal loss - rho]_+`.
pub fn constraint_slack(model: &ModelParams, data: &Dataset, rho: f64, loss: Loss) -> Result<f64> {
    Ok((nominal_risk(model, data, loss)? - rho).max(0.0))
}

/// `mean robust loss + nu * (mean nominal loss - rho)`, with the attack
/// standing in for the inner maximization.
pub fn empirical_lagrangian(
    model: &ModelParams,
    data: &Dataset,
    nu: f64,
    rho: f64,
    set: &PerturbSet,
    attack: &SamplerCfg,
    losses: &LossTriple,
) -> Result<f64> {
    check_data(model, data)?;
    let robust = mean_loss(
        model,
        data,
        Some((set, attack)),
        losses.pert_loss(),
        losses.robust_loss(),
    )?;
    let nominal = mean_loss(model, data, None, losses.nominal_loss(), losses.nominal_loss())?;
    Ok(robust + nu * (nominal - rho))
}

fn eval_view(data: &Dataset, rows: usize) -> std::borrow::Cow<'_, Dataset> {
    if rows == 0 || rows >= data.len() {
        std::borrow::Cow::Borrowed(data)
    } else {
        let idx: Vec<usize> = (0..rows).collect();
        std::borrow::Cow::Owned(Dataset {
            inputs: data.inputs.select(Axis(0), &idx),
            labels: data.labels[..rows].to_vec(),
            num_classes: data.num_classes,
            split: data.split,
        })
    }
}

fn divergence(epoch: usize, batch: usize, what: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        batch,
        what: what.into(),
    }
}

/// Runs the epoch loop for `method`. Accuracies in the history are measured
/// on `eval` when given, otherwise on the training data.
pub fn train(
    model: &ModelParams,
    data: &Dataset,
    cfg: &TrainCfg,
    method: Method,
    eval: Option<&Dataset>,
) -> Result<(ModelParams, RunHistory)> {
    cfg.validate()?;
    check_data(model, data)?;
    if let Some(e) = eval {
        check_data(model, e)?;
    }
    if method == Method::Adversarial
        && !matches!(cfg.sampler.method, SamplerMethod::Fgsm | SamplerMethod::Pgd)
    {
        return Err(Error::Parameter(
            "adversarial training needs an fgsm or pgd sampler".into(),
        ));
    }
    let mut dual = cfg.dual;
    match method {
        Method::Erm | Method::Adversarial => {
            dual.nu = 0.0;
            dual.eta_dual = 0.0;
        }
        Method::Penalty(nu) => {
            if !(nu >= 0.0) || !nu.is_finite() {
                return Err(Error::Parameter(format!("fixed nu must be nonnegative, got {nu}")));
            }
            dual.nu = nu;
            dual.eta_dual = 0.0;
        }
        Method::Dale => {}
    }
    let robust = cfg.losses.robust_loss();
    let nominal = cfg.losses.nominal_loss();
    let monitor = eval_view(eval.unwrap_or(data), cfg.eval_rows);

    let mut model = model.clone();
    let mut velocity = vec![0.0; model.theta.len()];
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, Stream::Shuffle));
    let mut history = RunHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let sampler = cfg.sampler.with_seed(epoch_sampler_seed(cfg.seed, epoch));
        let nu = dual.nu;
        let mut robust_sum = 0.0;
        let mut nominal_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(idx)?;
            let perturbed = match method {
                Method::Erm => None,
                _ => {
                    let deltas = run_sampler(&model, &cfg.set, &batch, &sampler, cfg.losses.pert_loss())?;
                    Some(perturbed_inputs(&cfg.set, &batch, &deltas))
                }
            };
            let step = grad_theta(&model, &batch, perturbed.as_ref().map(|p| p.view()), &cfg.losses, nu)?;
            let batch_nominal = match step.nominal_loss {
                Some(v) => v,
                None if method == Method::Erm && robust == nominal => step.robust_loss,
                None => {
                    let reference = if nominal.kind.needs_reference() {
                        Some(model.forward(batch.inputs.view())?)
                    } else {
                        None
                    };
                    model
                        .losses(batch.inputs.view(), &batch.labels, reference.as_ref().map(|r| r.view()), nominal)?
                        .mean()
                        .expect("nonempty batch")
                }
            };
            if !step.robust_loss.is_finite() || !batch_nominal.is_finite() {
                return Err(divergence(
                    epoch,
                    b,
                    format!("loss robust={} nominal={}", step.robust_loss, batch_nominal),
                ));
            }
            if step.grad.iter().any(|g| !g.is_finite()) {
                return Err(divergence(epoch, b, "non-finite gradient"));
            }
            let w = idx.len() as f64;
            robust_sum += step.robust_loss * w;
            nominal_sum += batch_nominal * w;
            for ((t, v), g) in model.theta.iter_mut().zip(velocity.iter_mut()).zip(&step.grad) {
                let g = g + cfg.weight_decay * *t;
                match cfg.optimizer {
                    Optimizer::Sgd => *t -= lr * g,
                    Optimizer::Momentum => {
                        *v = cfg.momentum * *v + g;
                        *t -= lr * *v;
                    }
                }
            }
            if model.theta.iter().any(|t| !t.is_finite()) {
                return Err(divergence(epoch, b, "non-finite parameters"));
            }
        }
        let n = data.len() as f64;
        let avg_nominal = match cfg.dual_average {
            DualAverage::Running => nominal_sum / n,
            DualAverage::FullPass => nominal_risk(&model, data, nominal)?,
        };
        if !avg_nominal.is_finite() {
            return Err(divergence(epoch, 0, format!("epoch nominal loss {avg_nominal}")));
        }
        let clean_acc = evaluate(&model, &monitor, None, cfg.losses.pert_loss())?;
        let robust_acc = match &cfg.eval_attack {
            Some(a) => evaluate(&model, &monitor, Some((&cfg.set, a)), cfg.losses.pert_loss())?,
            None => f64::NAN,
        };
        history.records.push(EpochRecord {
            epoch,
            clean_loss: avg_nominal,
            robust_loss: robust_sum / n,
            nu,
            slack: (avg_nominal - dual.rho).max(0.0),
            clean_acc,
            robust_acc,
        });
        dual.update(avg_nominal);
        lr *= cfg.lr_decay;
        log::debug!(
            "epoch {epoch}: clean_loss={avg_nominal:.4} nu={nu:.4} clean_acc={clean_acc:.4}"
        );
    }
    history.final_nu = dual.nu;
    Ok((model, history))
}

pub fn dale_train(model: &ModelParams, data: &Dataset, cfg: &TrainCfg) -> Result<(ModelParams, RunHistory)> {
    train(model, data, cfg, Method::Dale, None)
}

pub fn erm_train(model: &ModelParams, data: &Dataset, cfg: &TrainCfg) -> Result<(ModelParams, RunHistory)> {
    train(model, data, cfg, Method::Erm, None)
}

pub fn adv_train(model: &ModelParams, data: &Dataset, cfg: &TrainCfg) -> Result<(ModelParams, RunHistory)> {
    train(model, data, cfg, Method::Adversarial, None)
}

pub fn penalty_train(
    model: &ModelParams,
    data: &Dataset,
    cfg: &TrainCfg,
    fixed_nu: f64,
) -> Result<(ModelParams, RunHistory)> {
    train(model, data, cfg, Method::Penalty(fixed_nu), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_blobs;
    use crate::diffcore::{Activation, Arch};

    fn blobs(seed: u64) -> Dataset {
        make_blobs(200, &[vec![-2.0, -2.0], vec![2.0, 2.0]], 0.5, seed).unwrap()
    }

    fn logistic(seed: u64) -> ModelParams {
        ModelParams::init_uniform(Arch::Logistic, 2, 2, seed).unwrap()
    }

    fn cfg(eps: f64) -> TrainCfg {
        let mut c = TrainCfg::new(PerturbSet::linf(eps).unwrap(), SamplerCfg::pgd(3, 0.05));
        c.epochs = 5;
        c.batch_size = 16;
        c
    }

    fn bits(theta: &[f64]) -> Vec<u64> {
        theta.iter().map(|t| t.to_bits()).collect()
    }

    #[test]
    fn dual_update_is_projected() {
        let mut d = DualState::new(0.5, 2.0).unwrap();
        assert_eq!(d.update(0.75), 0.5);
        assert_eq!(d.update(0.0), 0.0);
        assert!(DualState::new(-0.1, 1.0).is_err());
    }

    #[test]
    fn substreams_differ() {
        let s: Vec<u64> = [Stream::Init, Stream::Sampler, Stream::Shuffle, Stream::Noise]
            .iter()
            .map(|&k| substream_seed(7, k))
            .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let m = logistic(1);
        let mut c = cfg(0.1);
        c.lr = 0.0;
        let (out, h) = erm_train(&m, &blobs(0), &c).unwrap();
        assert_eq!(bits(&out.theta), bits(&m.theta));
        assert_eq!(h.len(), 5);
    }

    #[test]
    fn dale_with_empty_set_is_erm() {
        let m = logistic(2);
        let mut c = cfg(0.0);
        c.optimizer = Optimizer::Momentum;
        c.weight_decay = 1e-3;
        let (a, _) = erm_train(&m, &blobs(1), &c).unwrap();
        let (b, hb) = dale_train(&m, &blobs(1), &c).unwrap();
        assert_eq!(bits(&a.theta), bits(&b.theta));
        assert!(hb.nu_trace().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversarial_equals_frozen_dale() {
        let m = logistic(3);
        let c = cfg(0.3);
        let (a, _) = adv_train(&m, &blobs(2), &c).unwrap();
        let (b, _) = dale_train(&m, &blobs(2), &c).unwrap();
        let (p, hp) = penalty_train(&m, &blobs(2), &c, 0.0).unwrap();
        assert_eq!(bits(&a.theta), bits(&b.theta));
        assert_eq!(bits(&a.theta), bits(&p.theta));
        assert!(hp.nu_trace().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversarial_rejects_lmc() {
        let mut c = cfg(0.3);
        c.sampler = SamplerCfg::lmc_laplace(3, 0.05, 0.1);
        assert!(adv_train(&logistic(0), &blobs(0), &c).is_err());
    }

    #[test]
    fn dual_trace_follows_update_rule() {
        let m = ModelParams::init_uniform(Arch::mlp([8], Activation::Tanh), 2, 2, 4).unwrap();
        let mut c = cfg(0.5);
        c.epochs = 8;
        c.dual = DualState::new(0.2, 0.7).unwrap();
        for mode in [DualAverage::Running, DualAverage::FullPass] {
            c.dual_average = mode;
            let (_, h) = dale_train(&m, &blobs(5), &c).unwrap();
            let mut next: Vec<f64> = h.nu_trace()[1..].to_vec();
            next.push(h.final_nu);
            for (r, &n) in h.records.iter().zip(&next) {
                assert_eq!(n, (r.nu + 0.7 * (r.clean_loss - 0.2)).max(0.0));
                if r.clean_loss > 0.2 {
                    assert!(n > r.nu);
                } else {
                    assert!(n <= r.nu);
                }
                assert_eq!(r.slack, (r.clean_loss - 0.2).max(0.0));
            }
        }
    }

    #[test]
    fn full_pass_average_is_exact_risk() {
        let m = logistic(6);
        let mut c = cfg(0.2);
        c.epochs = 1;
        c.dual_average = DualAverage::FullPass;
        let (out, h) = dale_train(&m, &blobs(6), &c).unwrap();
        let risk = nominal_risk(&out, &blobs(6), Loss::cross_entropy()).unwrap();
        assert_eq!(h.records[0].clean_loss, risk);
    }

    #[test]
    fn penalty_keeps_nu_constant() {
        let mut c = cfg(0.2);
        c.dual = DualState::new(0.1, 5.0).unwrap();
        let (_, h) = penalty_train(&logistic(7), &blobs(7), &c, 0.4).unwrap();
        assert!(h.nu_trace().iter().all(|&v| v == 0.4));
        assert_eq!(h.final_nu, 0.4);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let mut c = cfg(0.0);
        c.epochs = 50;
        let data = make_blobs(400, &[vec![-3.0, -3.0], vec![3.0, 3.0]], 0.5, 8).unwrap();
        let (m, h) = erm_train(&logistic(8), &data, &c).unwrap();
        assert!(evaluate(&m, &data, None, Loss::cross_entropy()).unwrap() >= 0.99);
        // nonincreasing trend with small blips
        for w in h.records.windows(2) {
            assert!(w[1].clean_loss <= w[0].clean_loss * 1.05 + 1e-12);
        }
    }

    #[test]
    fn evaluate_cases() {
        let data = make_blobs(10, &[vec![-3.0, 0.0], vec![3.0, 0.0]], 0.0, 0).unwrap();
        let mut m = ModelParams::zeros(Arch::Logistic, 2, 2).unwrap();
        // logits (-x0, x0)
        m.theta[0] = -1.0;
        m.theta[2] = 1.0;
        let ce = Loss::cross_entropy();
        assert_eq!(evaluate(&m, &data, None, ce).unwrap(), 1.0);
        let zero = PerturbSet::linf(0.0).unwrap();
        let pgd = SamplerCfg::pgd(10, 0.1);
        assert_eq!(evaluate(&m, &data, Some((&zero, &pgd)), ce).unwrap(), 1.0);
        let big = PerturbSet::linf(4.0).unwrap();
        let pgd = SamplerCfg::pgd(10, 1.0);
        assert_eq!(evaluate(&m, &data, Some((&big, &pgd)), ce).unwrap(), 0.0);
    }

    #[test]
    fn slack_and_lagrangian() {
        let data = blobs(9);
        let m = logistic(9);
        let ce = Loss::cross_entropy();
        let risk = nominal_risk(&m, &data, ce).unwrap();
        assert_eq!(constraint_slack(&m, &data, risk + 1.0, ce).unwrap(), 0.0);
        assert!((constraint_slack(&m, &data, risk - 0.1, ce).unwrap() - 0.1).abs() < 1e-12);
        let zero = PerturbSet::linf(0.0).unwrap();
        let pgd = SamplerCfg::pgd(5, 0.1);
        let losses = LossTriple::default();
        let l = empirical_lagrangian(&m, &data, 0.7, 0.3, &zero, &pgd, &losses).unwrap();
        assert!((l - (1.7 * risk - 0.7 * 0.3)).abs() < 1e-12);
        let set = PerturbSet::linf(0.5).unwrap();
        let l0 = empirical_lagrangian(&m, &data, 0.0, 0.3, &set, &pgd, &losses).unwrap();
        let l1 = empirical_lagrangian(&m, &data, 1.0, 0.3, &set, &pgd, &losses).unwrap();
        assert!(l0 >= risk);
        assert!((l1 - l0 - (risk - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = cfg(0.0);
        c.lr = 1e308;
        c.epochs = 3;
        match erm_train(&logistic(0), &blobs(0), &c) {
            Err(Error::Divergence { epoch: 1, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_header() {
        let (_, h) = erm_train(&logistic(0), &blobs(0), &cfg(0.0)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,clean_loss,robust_loss,nu,slack,clean_acc,robust_acc\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
