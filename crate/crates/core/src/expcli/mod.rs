//! Experiment harness behind the `dale` binary.
//!
//! Each run resolves a [`ConfigMap`], writes `history.csv`, `summary.json`
//! and `model.json` into its output directory, and can be replayed from the
//! emitted `summary.json`.

pub mod config;
pub mod pca;
pub mod validate;

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::ConfigMap;

use crate::dataio::{load_mnist, make_blobs, make_moons, mnist_dir, subset, Dataset, Split};
use crate::diffcore::{Activation, Arch, LossKind, LossTriple, ModelParams};
use crate::error::{Error, Result};
use crate::perturb::{NormKind, PerturbSet};
use crate::sampler::{InitKind, SamplerCfg, SamplerMethod, SignVariant};
use crate::trainer::{
    evaluate, substream_seed, train, DualAverage, DualState, Method, Optimizer, RunHistory,
    Stream, TrainCfg,
};

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::NotDifferentiable(_) | Error::Json(_) => 2,
        Error::Data(_)
        | Error::Idx { .. }
        | Error::Io(_)
        | Error::Shape(_)
        | Error::InvalidLabel { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodName {
    Erm,
    Fgsm,
    Pgd,
    Dale,
    Penalty,
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(MethodName::Erm),
            "fgsm" => Ok(MethodName::Fgsm),
            "pgd" => Ok(MethodName::Pgd),
            "dale" => Ok(MethodName::Dale),
            "penalty" => Ok(MethodName::Penalty),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodName::Erm => "erm",
            MethodName::Fgsm => "fgsm",
            MethodName::Pgd => "pgd",
            MethodName::Dale => "dale",
            MethodName::Penalty => "penalty",
        })
    }
}

/// Train and test sets selected by `data.*`.
pub fn load_data(cfg: &ConfigMap) -> Result<(Dataset, Dataset)> {
    let seed: u64 = cfg.get("data.seed")?;
    let (train, test) = match cfg.raw("data.name") {
        "mnist" => {
            let dir = cfg.path("data.mnist_dir").unwrap_or_else(mnist_dir);
            let data_err = |e: Error| match e {
                Error::Io(io) => Error::Data(format!("{}: {io}", dir.display())),
                other => other,
            };
            (
                load_mnist(&dir, Split::Train).map_err(data_err)?,
                load_mnist(&dir, Split::Test).map_err(data_err)?,
            )
        }
        "blobs" => {
            let n: usize = cfg.get("data.n")?;
            let s: f64 = cfg.get("data.separation")?;
            let spread: f64 = cfg.get("data.spread")?;
            let centers = [vec![-s, -s], vec![s, s]];
            let mut test = make_blobs(n, &centers, spread, seed.wrapping_add(1))?;
            test.split = Split::Test;
            (make_blobs(n, &centers, spread, seed)?, test)
        }
        "moons" => {
            let n: usize = cfg.get("data.n")?;
            let noise: f64 = cfg.get("data.noise")?;
            let mut test = make_moons(n, noise, seed.wrapping_add(1))?;
            test.split = Split::Test;
            (make_moons(n, noise, seed)?, test)
        }
        other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
    };
    let shrink = |ds: Dataset, key: &str| -> Result<Dataset> {
        let n: usize = cfg.get(key)?;
        if n == 0 || n >= ds.len() {
            Ok(ds)
        } else {
            subset(&ds, n, seed)
        }
    };
    Ok((shrink(train, "data.train_size")?, shrink(test, "data.test_size")?))
}

pub fn perturb_set(cfg: &ConfigMap) -> Result<PerturbSet> {
    let clamp = match cfg.raw("perturb.clamp") {
        "auto" => (cfg.raw("data.name") == "mnist").then_some((0.0, 1.0)),
        "none" => None,
        raw => {
            let v: Vec<f64> = cfg.list("perturb.clamp")?;
            match v.as_slice() {
                [lo, hi] => Some((*lo, *hi)),
                _ => return Err(Error::Config(format!("perturb.clamp must be `lo,hi`, got `{raw}`"))),
            }
        }
    };
    PerturbSet::new(cfg.get::<NormKind>("perturb.norm")?, cfg.get("perturb.epsilon")?, clamp)
}

pub fn build_model(cfg: &ConfigMap, input_dim: usize, num_classes: usize) -> Result<ModelParams> {
    let arch = match cfg.raw("model.arch") {
        "logistic" => Arch::Logistic,
        "mlp" => Arch::mlp(
            cfg.list::<usize>("model.hidden")?,
            cfg.get::<Activation>("model.activation")?,
        ),
        other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
    };
    ModelParams::init_uniform(
        arch,
        input_dim,
        num_classes,
        substream_seed(cfg.get("seed")?, Stream::Init),
    )
}

/// The training sampler for `method`.
pub fn train_sampler(cfg: &ConfigMap, method: MethodName) -> Result<SamplerCfg> {
    let eps: f64 = cfg.get("perturb.epsilon")?;
    let steps: usize = cfg.get("sampler.steps")?;
    let eta: f64 = cfg.get("sampler.eta")?;
    let kind = match cfg.raw("sampler.kind") {
        "auto" => match method {
            MethodName::Fgsm => SamplerMethod::Fgsm,
            MethodName::Pgd | MethodName::Erm => SamplerMethod::Pgd,
            MethodName::Dale | MethodName::Penalty => SamplerMethod::LmcLaplace,
        },
        _ => cfg.get("sampler.kind")?,
    };
    let base = match kind {
        SamplerMethod::Fgsm => SamplerCfg::fgsm(if eps > 0.0 { eps } else { eta }),
        SamplerMethod::Pgd => SamplerCfg::pgd(steps, eta),
        SamplerMethod::LmcLaplace => SamplerCfg::lmc_laplace(steps, eta, 0.0)
            .with_noise_coef(cfg.get("sampler.noise_coef")?)
            .with_sign_variant(cfg.get::<SignVariant>("sampler.sign_variant")?),
        SamplerMethod::LmcGauss => {
            SamplerCfg::lmc_gauss(steps, eta, 0.0).with_noise_coef(cfg.get("sampler.noise_coef")?)
        }
    };
    let sampler = base.with_init(cfg.get::<InitKind>("sampler.init")?);
    sampler.validate()?;
    Ok(sampler)
}

/// FGSM with step epsilon and `PGD^L` with the configured steps.
pub fn eval_attacks(cfg: &ConfigMap) -> Result<(SamplerCfg, SamplerCfg)> {
    let eps: f64 = cfg.get("perturb.epsilon")?;
    let steps: usize = cfg.get("eval.pgd_steps")?;
    let mut eta: f64 = cfg.get("eval.pgd_eta")?;
    if eta == 0.0 {
        eta = if eps > 0.0 { 2.5 * eps / steps.max(1) as f64 } else { 0.1 };
    }
    let fgsm_step = if eps > 0.0 { eps } else { 0.1 };
    Ok((SamplerCfg::fgsm(fgsm_step), SamplerCfg::pgd(steps, eta)))
}

pub fn losses(cfg: &ConfigMap) -> Result<LossTriple> {
    LossTriple::new(
        cfg.get::<LossKind>("loss.pert")?,
        cfg.get::<LossKind>("loss.robust")?,
        cfg.get::<LossKind>("loss.nominal")?,
        cfg.get("loss.ce_bound")?,
    )
}

pub fn train_cfg(cfg: &ConfigMap) -> Result<(TrainCfg, Method)> {
    let name: MethodName = cfg.get("method")?;
    let set = perturb_set(cfg)?;
    let mut tc = TrainCfg::new(set, train_sampler(cfg, name)?);
    tc.epochs = cfg.get("train.epochs")?;
    tc.batch_size = cfg.get("train.batch_size")?;
    tc.lr = cfg.get("train.lr")?;
    tc.optimizer = cfg.get::<Optimizer>("train.optimizer")?;
    tc.momentum = cfg.get("train.momentum")?;
    tc.weight_decay = cfg.get("train.weight_decay")?;
    tc.lr_decay = cfg.get("train.lr_decay")?;
    tc.eval_rows = cfg.get("train.eval_rows")?;
    tc.losses = losses(cfg)?;
    tc.dual = DualState::new(cfg.get("dual.rho")?, cfg.get("dual.step")?)?;
    tc.dual_average = cfg.get::<DualAverage>("dual.average")?;
    if cfg.get::<bool>("eval.per_epoch_robust")? {
        tc.eval_attack = Some(eval_attacks(cfg)?.1);
    }
    tc.seed = cfg.get("seed")?;
    tc.validate()?;
    let method = match name {
        MethodName::Erm => Method::Erm,
        MethodName::Fgsm | MethodName::Pgd => Method::Adversarial,
        MethodName::Dale => Method::Dale,
        MethodName::Penalty => Method::Penalty(cfg.get("dual.fixed_nu")?),
    };
    Ok((tc, method))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a run's inputs: the resolved config (minus the output
/// directory) and the training data, framed like a git blob and hashed
/// with SHA-256.
pub fn input_hash(cfg: &ConfigMap, train: &Dataset) -> String {
    let mut payload = Vec::new();
    for (k, v) in cfg.as_map() {
        if k != "out" {
            payload.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
    }
    for v in train.inputs.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &train.labels {
        payload.extend_from_slice(&(l as u64).to_le_bytes());
    }
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", payload.len()).as_bytes());
    h.update(&payload);
    hex(&h.finalize())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FinalMetrics {
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub final_nu: f64,
    pub train_clean_loss: f64,
    pub slack: f64,
}

pub fn final_metrics(
    cfg: &ConfigMap,
    model: &ModelParams,
    test: &Dataset,
    history: &RunHistory,
) -> Result<FinalMetrics> {
    let set = perturb_set(cfg)?;
    let (fgsm, pgd) = eval_attacks(cfg)?;
    let rows: usize = cfg.get("eval.test_rows")?;
    let test = if rows == 0 || rows >= test.len() {
        test.clone()
    } else {
        subset(test, rows, cfg.get("data.seed")?)?
    };
    let pert = losses(cfg)?.pert_loss();
    let last = history.records.last();
    Ok(FinalMetrics {
        clean_acc: evaluate(model, &test, None, pert)?,
        fgsm_acc: evaluate(model, &test, Some((&set, &fgsm)), pert)?,
        pgd_acc: evaluate(model, &test, Some((&set, &pgd)), pert)?,
        final_nu: history.final_nu,
        train_clean_loss: last.map_or(f64::NAN, |r| r.clean_loss),
        slack: last.map_or(f64::NAN, |r| r.slack),
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelParams,
    pub history: RunHistory,
    pub metrics: FinalMetrics,
    pub input_hash: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    use std::io::Write;
    writeln!(f)?;
    Ok(())
}

fn out_dir(cfg: &ConfigMap) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.raw("out"));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    Ok(out)
}

/// Trains once and writes `history.csv`, `summary.json` and `model.json`.
pub fn run_single(cfg: &ConfigMap) -> Result<RunOutcome> {
    let out = out_dir(cfg)?;
    let (train_set, test_set) = load_data(cfg)?;
    let (tc, method) = train_cfg(cfg)?;
    let model = build_model(cfg, train_set.dim(), train_set.num_classes)?;
    let hash = input_hash(cfg, &train_set);
    log::info!(
        "training {} on {} rows ({} epochs)",
        cfg.raw("method"),
        train_set.len(),
        tc.epochs
    );
    let (model, history) = match train(&model, &train_set, &tc, method, Some(&test_set)) {
        Ok(r) => r,
        Err(e) => {
            let diag = json!({
                "config": cfg.as_map(),
                "input_hash": hash,
                "status": "error",
                "error": e.to_string(),
            });
            write_json(&out.join("summary.json"), &diag)?;
            return Err(e);
        }
    };
    history.write_csv(BufWriter::new(File::create(out.join("history.csv"))?))?;
    write_json(&out.join("model.json"), &model)?;
    let metrics = final_metrics(cfg, &model, &test_set, &history)?;
    let summary = json!({
        "config": cfg.as_map(),
        "input_hash": hash,
        "status": "ok",
        "final": metrics,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(RunOutcome {
        model,
        history,
        metrics,
        input_hash: hash,
    })
}

/// Loads `model.json` and reports clean, FGSM and PGD test accuracy.
pub fn run_eval(cfg: &ConfigMap, model_path: &Path) -> Result<FinalMetrics> {
    let text = std::fs::read_to_string(model_path)?;
    let model: ModelParams = serde_json::from_str(&text)?;
    let (_, test) = load_data(cfg)?;
    let metrics = final_metrics(cfg, &model, &test, &RunHistory::default())?;
    let out = out_dir(cfg)?;
    write_json(&out.join("eval.json"), &metrics)?;
    Ok(metrics)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One sweep point: the medians over seeds of the final metrics.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub value: f64,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub final_nu: f64,
    pub runs: Vec<FinalMetrics>,
}

fn sweep_point(
    base: &ConfigMap,
    label: &str,
    value: f64,
    overrides: &[(&str, String)],
) -> Result<SweepRow> {
    let seeds: Vec<u64> = base.list("sweep.seeds")?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep.seeds is empty".into()));
    }
    let root = PathBuf::from(base.raw("out"));
    let mut runs = Vec::new();
    for seed in seeds {
        let mut cfg = base.clone();
        cfg.set("kind", "single")?;
        for (k, v) in overrides {
            cfg.set(k, v.clone())?;
        }
        cfg.set("seed", seed.to_string())?;
        let dir = root.join(format!("{label}_{value}_seed_{seed}"));
        cfg.set("out", dir.to_string_lossy().into_owned())?;
        runs.push(run_single(&cfg)?.metrics);
    }
    let pick = |f: fn(&FinalMetrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(SweepRow {
        label: label.to_string(),
        value,
        clean_acc: pick(|m| m.clean_acc),
        fgsm_acc: pick(|m| m.fgsm_acc),
        pgd_acc: pick(|m| m.pgd_acc),
        final_nu: pick(|m| m.final_nu),
        runs,
    })
}

fn write_sweep_csv(path: &Path, column: &str, rows: &[SweepRow], with_method: bool) -> Result<()> {
    use std::io::Write;
    let mut f = BufWriter::new(File::create(path)?);
    if with_method {
        writeln!(f, "method,{column},clean_acc,fgsm_acc,pgd_acc,final_nu")?;
    } else {
        writeln!(f, "{column},clean_acc,fgsm_acc,pgd_acc")?;
    }
    for r in rows {
        if with_method {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.label, r.value, r.clean_acc, r.fgsm_acc, r.pgd_acc, r.final_nu
            )?;
        } else {
            writeln!(f, "{},{},{},{}", r.value, r.clean_acc, r.fgsm_acc, r.pgd_acc)?;
        }
    }
    Ok(())
}

/// One DALE training per `rho` (median over seeds); writes `rho_sweep.csv`.
pub fn run_rho_sweep(cfg: &ConfigMap) -> Result<Vec<SweepRow>> {
    let out = out_dir(cfg)?;
    let list: Vec<f64> = cfg.list("sweep.rho")?;
    if list.is_empty() {
        return Err(Error::Config("sweep.rho is empty".into()));
    }
    let rows = list
        .iter()
        .map(|&rho| sweep_point(cfg, "rho", rho, &[("dual.rho", rho.to_string())]))
        .collect::<Result<Vec<_>>>()?;
    write_sweep_csv(&out.join("rho_sweep.csv"), "rho", &rows, false)?;
    Ok(rows)
}

/// Penalty training per fixed `nu` plus one adaptive DALE row; writes
/// `nu_sweep.csv`.
pub fn run_nu_sweep(cfg: &ConfigMap) -> Result<Vec<SweepRow>> {
    let out = out_dir(cfg)?;
    let list: Vec<f64> = cfg.list("sweep.nu")?;
    if list.is_empty() {
        return Err(Error::Config("sweep.nu is empty".into()));
    }
    let mut rows = Vec::new();
    for &nu in &list {
        rows.push(sweep_point(
            cfg,
            "penalty",
            nu,
            &[("method", "penalty".into()), ("dual.fixed_nu", nu.to_string())],
        )?);
    }
    let mut dale = sweep_point(cfg, "dale", f64::NAN, &[("method", "dale".into())])?;
    dale.value = dale.final_nu;
    rows.push(dale);
    write_sweep_csv(&out.join("nu_sweep.csv"), "nu", &rows, true)?;
    Ok(rows)
}

/// One training per sampler step count; writes `steps_sweep.csv`.
pub fn run_steps_sweep(cfg: &ConfigMap) -> Result<Vec<SweepRow>> {
    let out = out_dir(cfg)?;
    let list: Vec<usize> = cfg.list("sweep.steps")?;
    if list.is_empty() {
        return Err(Error::Config("sweep.steps is empty".into()));
    }
    let rows = list
        .iter()
        .map(|&l| sweep_point(cfg, "steps", l as f64, &[("sampler.steps", l.to_string())]))
        .collect::<Result<Vec<_>>>()?;
    write_sweep_csv(&out.join("steps_sweep.csv"), "steps", &rows, false)?;
    Ok(rows)
}

pub fn run_oracle(cfg: &ConfigMap) -> Result<validate::OracleReport> {
    let out = out_dir(cfg)?;
    let report = validate::oracle_report(cfg, &out)?;
    write_json(&out.join("oracle.json"), &report)?;
    Ok(report)
}

pub fn run_sampler_validation(cfg: &ConfigMap) -> Result<validate::SamplerReport> {
    let out = out_dir(cfg)?;
    let report = validate::sampler_report(cfg)?;
    write_json(&out.join("sampler_validation.json"), &report)?;
    Ok(report)
}

/// Projects PGD and LMC perturbations of the first `pca.examples` test rows
/// onto the top principal axes of the training data; writes `pca.csv`.
pub fn run_pca(cfg: &ConfigMap, model_path: Option<&Path>) -> Result<pca::Pca> {
    let out = out_dir(cfg)?;
    let (train_set, test_set) = load_data(cfg)?;
    let model: ModelParams = match model_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => run_single(cfg)?.model,
    };
    let k: usize = cfg.get("pca.k")?;
    let fit = pca::fit_pca(train_set.inputs.view(), k)?;
    let n: usize = cfg.get::<usize>("pca.examples")?.min(test_set.len());
    let batch = test_set.batch(&(0..n).collect::<Vec<_>>())?;
    let set = perturb_set(cfg)?;
    let loss = losses(cfg)?.pert_loss();
    let seed = substream_seed(cfg.get("seed")?, Stream::Noise);
    let mut rows = Vec::new();
    for name in [MethodName::Pgd, MethodName::Dale] {
        let sampler = train_sampler(cfg, name)?.with_seed(seed);
        let deltas = crate::sampler::run_sampler(&model, &set, &batch, &sampler, loss)?;
        for d in deltas.rows() {
            let tag = if name == MethodName::Pgd { "pgd" } else { "lmc" };
            rows.push((tag.to_string(), fit.project(d.as_slice().expect("row-major"))));
        }
    }
    pca::write_pca_csv(BufWriter::new(File::create(out.join("pca.csv"))?), fit.k(), &rows)?;
    Ok(fit)
}
