//! Toy-problem reports: the exact optimal density on a grid and checks of
//! the samplers against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ConfigMap;
use crate::diffcore::{Activation, Arch, LabeledBatch, Loss, ModelParams};
use crate::error::Result;
use crate::lambda_oracle::{
    default_gamma_sweep, expected_loss, histogram_of_samples, lambda_star, loss_landscape,
    oversmoothed_lambda, tv_distance, write_oracle_csv, DeltaGrid,
};
use crate::perturb::{NormKind, PerturbSet};
use crate::sampler::{
    laplace_noise, moments, run_sampler_trace, sample_chains, InitKind, SamplerCfg,
};

/// One-feature, two-class logistic model whose class-0 logit is
/// `weight * x + bias`.
pub fn toy_model(weight: f64, bias: f64) -> ModelParams {
    let mut m = ModelParams::zeros(Arch::Logistic, 1, 2).expect("valid toy model");
    m.theta[0] = weight;
    m.theta[2] = bias;
    m
}

fn toy_from(cfg: &ConfigMap) -> Result<(ModelParams, f64, usize)> {
    Ok((
        toy_model(cfg.get("oracle.weight")?, cfg.get("oracle.bias")?),
        cfg.get("oracle.x")?,
        cfg.get("oracle.label")?,
    ))
}

fn toy_set(cfg: &ConfigMap) -> Result<PerturbSet> {
    PerturbSet::new(cfg.get::<NormKind>("perturb.norm")?, cfg.get("oracle.epsilon")?, None)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub gamma: f64,
    pub mu: f64,
    pub expected_loss: f64,
    pub csv: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub cells: usize,
    pub cell_volume: f64,
    pub loss_min: f64,
    pub loss_mean: f64,
    pub loss_max: f64,
    pub oversmoothed_expected_loss: f64,
    pub rows: Vec<OracleRow>,
}

/// Tabulates the toy landscape and the optimal density for each `gamma`,
/// writing one CSV per `gamma` plus the over-smoothed density.
pub fn oracle_report(cfg: &ConfigMap, out: &std::path::Path) -> Result<OracleReport> {
    let (model, x, y) = toy_from(cfg)?;
    let grid = DeltaGrid::new(toy_set(cfg)?, &[cfg.get("oracle.nodes")?])?;
    let values = loss_landscape(&model, &[x], y, &grid, Loss::cross_entropy(), None)?;
    let mut gammas: Vec<f64> = cfg.list("oracle.gammas")?;
    if gammas.is_empty() {
        gammas = default_gamma_sweep(grid.total_volume());
    }
    let mut rows = Vec::new();
    for (i, &gamma) in gammas.iter().enumerate() {
        let dist = lambda_star(&values, grid.cell_volume, gamma)?;
        let name = format!("oracle_gamma_{i}.csv");
        write_oracle_csv(std::fs::File::create(out.join(&name))?, &grid, &values, &dist)?;
        rows.push(OracleRow {
            gamma,
            mu: dist.mu.unwrap_or(f64::NAN),
            expected_loss: expected_loss(&dist, &values)?,
            csv: name,
        });
    }
    let over = oversmoothed_lambda(&values, grid.cell_volume)?;
    write_oracle_csv(
        std::fs::File::create(out.join("oracle_oversmoothed.csv"))?,
        &grid,
        &values,
        &over,
    )?;
    Ok(OracleReport {
        cells: grid.len(),
        cell_volume: grid.cell_volume,
        loss_min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        loss_mean: values.iter().sum::<f64>() / values.len() as f64,
        loss_max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        oversmoothed_expected_loss: expected_loss(&over, &values)?,
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplerReport {
    pub pgd_recovery: bool,
    pub pgd_recovery_models: usize,
    pub pgd_recovery_steps: usize,
    pub gauss_tv_to_oversmoothed: f64,
    pub gauss_samples: usize,
    pub gauss_tv_pass: bool,
    pub laplace_mean: f64,
    pub laplace_variance: f64,
    pub laplace_variance_pass: bool,
}

/// Checks that zero-temperature Laplacian LMC reproduces PGD iterates bit
/// for bit on `models` random MLPs over `steps` steps.
pub fn pgd_recovery(models: usize, steps: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..models {
        let d = rng.random_range(2..8);
        let k = rng.random_range(2..5);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..10)).collect();
        let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let model = ModelParams::init_uniform(Arch::mlp(hidden, act), d, k, rng.random())?;
        let m = rng.random_range(1..6);
        let inputs = ndarray::Array2::from_shape_fn((m, d), |_| rng.random_range(0.0..1.0));
        let labels = (0..m).map(|_| rng.random_range(0..k)).collect();
        let batch = LabeledBatch::new(inputs, labels)?;
        let eps = rng.random_range(0.05..0.5);
        let eta = rng.random_range(0.01..0.2);
        let set = if rng.random_bool(0.5) {
            PerturbSet::linf(eps)?
        } else {
            PerturbSet::l2(eps)?
        }
        .with_clamp(0.0, 1.0)?;
        let init = if rng.random_bool(0.5) { InitKind::Zero } else { InitKind::UniformRandom };
        let s = rng.random();
        let pgd = SamplerCfg::pgd(steps, eta).with_init(init).with_seed(s);
        let lmc = SamplerCfg::lmc_laplace(steps, eta, 0.0).with_init(init).with_seed(s);
        let a = run_sampler_trace(&model, &set, &batch, &pgd, Loss::cross_entropy())?;
        let b = run_sampler_trace(&model, &set, &batch, &lmc, Loss::cross_entropy())?;
        let same = a
            .iter()
            .zip(&b)
            .all(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Gaussian LMC samples on the toy landscape, histogrammed and compared to
/// the density proportional to the loss. Returns `(tv, sample count)`.
pub fn gauss_stationarity(cfg: &ConfigMap) -> Result<(f64, usize)> {
    let (model, x, y) = toy_from(cfg)?;
    let set = toy_set(cfg)?;
    let grid = DeltaGrid::new(set, &[cfg.get("validate.nodes")?])?;
    let values = loss_landscape(&model, &[x], y, &grid, Loss::cross_entropy(), None)?;
    let target = oversmoothed_lambda(&values, grid.cell_volume)?;
    let sampler = SamplerCfg::lmc_gauss(0, cfg.get("validate.eta")?, cfg.get("validate.temperature")?)
        .with_init(InitKind::UniformRandom)
        .with_seed(cfg.get("seed")?);
    let samples = sample_chains(
        &model,
        &set,
        &[x],
        y,
        &sampler,
        Loss::cross_entropy(),
        cfg.get("validate.chains")?,
        cfg.get("validate.burn_in")?,
        cfg.get("validate.keep")?,
        cfg.get("validate.thin")?,
    )?;
    let hist = histogram_of_samples(&samples, &grid)?;
    Ok((tv_distance(&hist, &target)?, samples.len()))
}

pub fn sampler_report(cfg: &ConfigMap) -> Result<SamplerReport> {
    let models: usize = cfg.get("validate.models")?;
    let steps = 20;
    let pgd_ok = pgd_recovery(models, steps, cfg.get("seed")?)?;
    let (tv, n) = gauss_stationarity(cfg)?;
    let draws: usize = cfg.get("validate.laplace_draws")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("seed")?);
    let (mean, var) = moments(&laplace_noise(&mut rng, draws));
    Ok(SamplerReport {
        pgd_recovery: pgd_ok,
        pgd_recovery_models: models,
        pgd_recovery_steps: steps,
        gauss_tv_to_oversmoothed: tv,
        gauss_samples: n,
        gauss_tv_pass: tv <= 0.1,
        laplace_mean: mean,
        laplace_variance: var,
        laplace_variance_pass: (1.99..=2.01).contains(&var),
    })
}
