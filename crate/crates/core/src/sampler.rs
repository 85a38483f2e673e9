//! Perturbation generators: FGSM, PGD and projected Langevin Monte Carlo with
//! Laplacian or Gaussian momentum.
//!
//! Every chain draws its noise from a ChaCha stream keyed by
//! `(seed, example id, step)`, so results do not depend on how examples are
//! grouped into batches.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{LabeledBatch, Loss, ModelParams, DEFAULT_LOG_FLOOR};
use crate::error::{Error, Result};
use crate::perturb::PerturbSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Fgsm,
    Pgd,
    LmcLaplace,
    LmcGauss,
}

impl SamplerMethod {
    pub fn is_lmc(self) -> bool {
        matches!(self, SamplerMethod::LmcLaplace | SamplerMethod::LmcGauss)
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(SamplerMethod::Fgsm),
            "pgd" => Ok(SamplerMethod::Pgd),
            "lmc_laplace" | "laplace" => Ok(SamplerMethod::LmcLaplace),
            "lmc_gauss" | "gauss" => Ok(SamplerMethod::LmcGauss),
            other => Err(Error::Config(format!("unknown sampler method `{other}`"))),
        }
    }
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMethod::Fgsm => "fgsm",
            SamplerMethod::Pgd => "pgd",
            SamplerMethod::LmcLaplace => "lmc_laplace",
            SamplerMethod::LmcGauss => "lmc_gauss",
        })
    }
}

/// Where the sign sits in the Laplacian update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignVariant {
    /// `delta + eta * sign(grad U + sqrt(2 eta T) xi)`
    SignOutside,
    /// `delta + eta * grad U + sqrt(2 eta T) xi`
    NoSign,
}

impl FromStr for SignVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outside" | "sign_outside" => Ok(SignVariant::SignOutside),
            "none" | "no_sign" => Ok(SignVariant::NoSign),
            other => Err(Error::Config(format!("unknown sign variant `{other}`"))),
        }
    }
}

impl fmt::Display for SignVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignVariant::SignOutside => "outside",
            SignVariant::NoSign => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    UniformRandom,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(InitKind::Zero),
            "uniform" | "uniform_random" => Ok(InitKind::UniformRandom),
            other => Err(Error::Config(format!("unknown init `{other}`"))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Zero => "zero",
            InitKind::UniformRandom => "uniform_random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerCfg {
    pub method: SamplerMethod,
    pub steps: usize,
    pub step_size: f64,
    pub temperature: f64,
    pub sign_variant: SignVariant,
    pub init: InitKind,
    pub seed: u64,
    pub log_floor: f64,
}

impl SamplerCfg {
    pub fn fgsm(step_size: f64) -> Self {
        Self {
            method: SamplerMethod::Fgsm,
            steps: 1,
            step_size,
            temperature: 0.0,
            sign_variant: SignVariant::SignOutside,
            init: InitKind::Zero,
            seed: 0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn pgd(steps: usize, step_size: f64) -> Self {
        Self {
            method: SamplerMethod::Pgd,
            steps,
            ..Self::fgsm(step_size)
        }
    }

    pub fn lmc_laplace(steps: usize, step_size: f64, temperature: f64) -> Self {
        Self {
            method: SamplerMethod::LmcLaplace,
            steps,
            temperature,
            ..Self::fgsm(step_size)
        }
    }

    pub fn lmc_gauss(steps: usize, step_size: f64, temperature: f64) -> Self {
        Self {
            method: SamplerMethod::LmcGauss,
            steps,
            temperature,
            sign_variant: SignVariant::NoSign,
            ..Self::fgsm(step_size)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitKind) -> Self {
        self.init = init;
        self
    }

    pub fn with_sign_variant(mut self, v: SignVariant) -> Self {
        self.sign_variant = v;
        self
    }

    /// Sets the temperature so that `sqrt(2 eta T)` equals `coef`.
    pub fn with_noise_coef(mut self, coef: f64) -> Self {
        self.temperature = coef * coef / (2.0 * self.step_size);
        self
    }

    pub fn noise_coef(&self) -> f64 {
        match self.method {
            SamplerMethod::Fgsm | SamplerMethod::Pgd => 0.0,
            _ => (2.0 * self.step_size * self.temperature).sqrt(),
        }
    }

    /// FGSM always takes exactly one step.
    pub fn effective_steps(&self) -> usize {
        match self.method {
            SamplerMethod::Fgsm => 1,
            _ => self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Parameter(format!(
                "sampler step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Parameter("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// `-1`, `0` or `1`. Unlike `f64::signum`, zero maps to zero.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const INIT_STEP: u64 = 0;

/// The random stream for one chain at one step.
pub fn noise_rng(seed: u64, example_id: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example_id);
    rng.set_word_pos((step as u128) << 40);
    rng
}

/// Inverse CDF of the unit Laplace distribution for `u` in `(-1/2, 1/2)`.
pub fn laplace_from_uniform(u: f64) -> f64 {
    -sign(u) * (1.0 - 2.0 * u.abs()).ln()
}

/// `dim` i.i.d. unit-scale Laplace draws.
pub fn laplace_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            laplace_from_uniform(u - 0.5)
        })
        .collect()
}

/// `dim` i.i.d. standard normal draws.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Shared state for advancing a set of chains, one per row.
struct Chains<'a> {
    model: &'a ModelParams,
    set: &'a PerturbSet,
    inputs: ArrayView2<'a, f64>,
    labels: &'a [usize],
    reference: Option<ArrayView2<'a, f64>>,
    ids: &'a [u64],
    loss: Loss,
}

impl Chains<'_> {
    fn perturbed(&self, deltas: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(deltas.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let x = self.inputs.row(i);
            let d = deltas.row(i);
            for j in 0..row.len() {
                let v = x[j] + d[j];
                row[j] = match self.set.clamp {
                    Some((lo, hi)) => v.clamp(lo, hi),
                    None => v,
                };
            }
        }
        out
    }

    fn init(&self, cfg: &SamplerCfg) -> Array2<f64> {
        let (m, d) = self.inputs.dim();
        let mut deltas = Array2::zeros((m, d));
        if cfg.init == InitKind::UniformRandom && self.set.epsilon > 0.0 {
            let eps = self.set.epsilon;
            for (i, mut row) in deltas.rows_mut().into_iter().enumerate() {
                let mut rng = noise_rng(cfg.seed, self.ids[i], INIT_STEP);
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-eps..=eps)).collect();
                self.set.project_in_place(&mut v);
                self.set
                    .fit_to_domain(self.inputs.row(i).as_slice().expect("row-major"), &mut v);
                row.assign(&ArrayView1::from(&v));
            }
        }
        deltas
    }

    /// Advances every chain by one update; `step` is 1-based.
    fn step(&self, cfg: &SamplerCfg, deltas: &mut Array2<f64>, step: u64) -> Result<()> {
        let adv = self.perturbed(deltas);
        let (values, grads) =
            self.model
                .loss_grad_inputs(adv.view(), self.labels, self.reference, self.loss)?;
        let eta = cfg.step_size;
        let coef = cfg.noise_coef();
        let dim = deltas.ncols();
        for (i, mut row) in deltas.rows_mut().into_iter().enumerate() {
            let g = grads.row(i);
            let delta = row.as_slice_mut().expect("row-major deltas");
            match cfg.method {
                SamplerMethod::Fgsm | SamplerMethod::Pgd => {
                    for (d, &gj) in delta.iter_mut().zip(g.iter()) {
                        *d += eta * sign(gj);
                    }
                }
                SamplerMethod::LmcLaplace | SamplerMethod::LmcGauss => {
                    let denom = values[i].max(cfg.log_floor);
                    let mut rng = noise_rng(cfg.seed, self.ids[i], step);
                    let xi = if cfg.method == SamplerMethod::LmcLaplace {
                        laplace_noise(&mut rng, dim)
                    } else {
                        gaussian_noise(&mut rng, dim)
                    };
                    let signed = cfg.method == SamplerMethod::LmcLaplace
                        && cfg.sign_variant == SignVariant::SignOutside;
                    for ((d, &gj), &n) in delta.iter_mut().zip(g.iter()).zip(&xi) {
                        let drift = gj / denom;
                        if signed {
                            *d += eta * sign(drift + coef * n);
                        } else {
                            *d = *d + eta * drift + coef * n;
                        }
                    }
                }
            }
            self.set.project_in_place(delta);
            self.set
                .fit_to_domain(self.inputs.row(i).as_slice().expect("row-major"), delta);
        }
        Ok(())
    }
}

fn check_single(model: &ModelParams, set: &PerturbSet, x: &[f64], delta: &[f64]) -> Result<()> {
    if x.len() != model.input_dim || delta.len() != model.input_dim {
        return Err(Error::Shape(format!(
            "x has {} and delta {} coordinates, model expects {}",
            x.len(),
            delta.len(),
            model.input_dim
        )));
    }
    if !set.contains(delta) {
        return Err(Error::Parameter("delta is outside the perturbation set".into()));
    }
    Ok(())
}

fn row2(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("contiguous")
}

/// One projected signed-gradient ascent step:
/// `delta <- proj(delta + eta * sign(grad_delta loss(f(x + delta), y)))`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_step(
    model: &ModelParams,
    set: &PerturbSet,
    x: &[f64],
    y: usize,
    reference: Option<&[f64]>,
    delta: &[f64],
    step_size: f64,
    loss: Loss,
) -> Result<Vec<f64>> {
    check_single(model, set, x, delta)?;
    let cfg = SamplerCfg::pgd(1, step_size);
    cfg.validate()?;
    let labels = [y];
    let ids = [0];
    let chains = Chains {
        model,
        set,
        inputs: row2(x),
        labels: &labels,
        reference: reference.map(row2),
        ids: &ids,
        loss,
    };
    let mut deltas = Array2::from_shape_vec((1, delta.len()), delta.to_vec()).expect("row");
    chains.step(&cfg, &mut deltas, 1)?;
    Ok(deltas.into_raw_vec_and_offset().0)
}

/// One projected Langevin update for the chain `example_id` at step `step`
/// (1-based); `cfg.method` must be an LMC kind.
#[allow(clippy::too_many_arguments)]
pub fn lmc_step(
    model: &ModelParams,
    set: &PerturbSet,
    x: &[f64],
    y: usize,
    reference: Option<&[f64]>,
    delta: &[f64],
    cfg: &SamplerCfg,
    loss: Loss,
    example_id: u64,
    step: u64,
) -> Result<Vec<f64>> {
    if !cfg.method.is_lmc() {
        return Err(Error::Parameter(format!(
            "lmc_step needs an LMC method, got `{}`",
            cfg.method
        )));
    }
    cfg.validate()?;
    check_single(model, set, x, delta)?;
    let labels = [y];
    let ids = [example_id];
    let chains = Chains {
        model,
        set,
        inputs: row2(x),
        labels: &labels,
        reference: reference.map(row2),
        ids: &ids,
        loss,
    };
    let mut deltas = Array2::from_shape_vec((1, delta.len()), delta.to_vec()).expect("row");
    chains.step(cfg, &mut deltas, step.max(1))?;
    Ok(deltas.into_raw_vec_and_offset().0)
}

/// Runs one chain per example from the configured init and returns the final
/// perturbations, one row per example.
///
/// KL losses use the clean prediction `f(x)` as reference.
pub fn run_sampler(
    model: &ModelParams,
    set: &PerturbSet,
    batch: &LabeledBatch,
    cfg: &SamplerCfg,
    loss: Loss,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    batch.check_labels(model.num_classes)?;
    let reference = if loss.kind.needs_reference() {
        Some(model.forward(batch.inputs.view())?)
    } else {
        None
    };
    let chains = Chains {
        model,
        set,
        inputs: batch.inputs.view(),
        labels: &batch.labels,
        reference: reference.as_ref().map(|r| r.view()),
        ids: &batch.ids,
        loss,
    };
    if batch.inputs.ncols() != model.input_dim {
        return Err(Error::Shape(format!(
            "batch width {} does not match model input_dim {}",
            batch.inputs.ncols(),
            model.input_dim
        )));
    }
    let mut deltas = chains.init(cfg);
    for step in 1..=cfg.effective_steps() as u64 {
        chains.step(cfg, &mut deltas, step)?;
    }
    Ok(deltas)
}

/// Like [`run_sampler`] but also returns every intermediate iterate
/// (`result[t]` is the perturbation matrix after `t` steps).
pub fn run_sampler_trace(
    model: &ModelParams,
    set: &PerturbSet,
    batch: &LabeledBatch,
    cfg: &SamplerCfg,
    loss: Loss,
) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    batch.check_labels(model.num_classes)?;
    let reference = if loss.kind.needs_reference() {
        Some(model.forward(batch.inputs.view())?)
    } else {
        None
    };
    let chains = Chains {
        model,
        set,
        inputs: batch.inputs.view(),
        labels: &batch.labels,
        reference: reference.as_ref().map(|r| r.view()),
        ids: &batch.ids,
        loss,
    };
    let mut deltas = chains.init(cfg);
    let mut trace = vec![deltas.clone()];
    for step in 1..=cfg.effective_steps() as u64 {
        chains.step(cfg, &mut deltas, step)?;
        trace.push(deltas.clone());
    }
    Ok(trace)
}

/// Draws samples from `n_chains` independent chains at a single `(x, y)`.
///
/// Each chain runs `burn_in` steps, then records its state every `thin`
/// steps until `keep` samples are collected. Returns `n_chains * keep`
/// perturbations.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains(
    model: &ModelParams,
    set: &PerturbSet,
    x: &[f64],
    y: usize,
    cfg: &SamplerCfg,
    loss: Loss,
    n_chains: usize,
    burn_in: usize,
    keep: usize,
    thin: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if x.len() != model.input_dim {
        return Err(Error::Shape("x does not match model input_dim".into()));
    }
    let thin = thin.max(1);
    let inputs = Array2::from_shape_fn((n_chains, x.len()), |(_, j)| x[j]);
    let labels = vec![y; n_chains];
    let ids: Vec<u64> = (0..n_chains as u64).collect();
    let reference = if loss.kind.needs_reference() {
        Some(model.forward(inputs.view())?)
    } else {
        None
    };
    let chains = Chains {
        model,
        set,
        inputs: inputs.view(),
        labels: &labels,
        reference: reference.as_ref().map(|r| r.view()),
        ids: &ids,
        loss,
    };
    let mut deltas = chains.init(cfg);
    let mut out = Vec::with_capacity(n_chains * keep);
    let mut step = 0u64;
    for _ in 0..burn_in {
        step += 1;
        chains.step(cfg, &mut deltas, step)?;
    }
    for _ in 0..keep {
        for _ in 0..thin {
            step += 1;
            chains.step(cfg, &mut deltas, step)?;
        }
        out.extend(deltas.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Sample mean and (population) variance.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
