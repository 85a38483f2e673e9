use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dale_core::expcli::{self, ConfigMap};
use dale_core::Error;

#[derive(Parser)]
#[command(name = "dale", version, about = "Constrained adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train one model and write history.csv, summary.json, model.json.
    Train(Common),
    /// Train once per rho in sweep.rho.
    SweepRho(Common),
    /// Fixed-nu penalty runs for each value in sweep.nu, plus adaptive DALE.
    SweepNu(Common),
    /// Train once per sampler step count in sweep.steps.
    SweepSteps(Common),
    /// Clean, FGSM and PGD accuracy of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Optimal perturbation density of the toy model on a grid.
    Oracle(Common),
    /// Check samplers against exact targets on toy problems.
    ValidateSampler(Common),
    /// Project perturbations onto the data's principal axes.
    Pca {
        #[command(flatten)]
        common: Common,
        /// Saved model; trains one from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` file or a previous summary.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["mnist", "blobs", "moons"])]
    dataset: Option<String>,
    #[arg(long, value_parser = ["erm", "fgsm", "pgd", "dale", "penalty"])]
    method: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// sqrt(2 * eta * T) of the Langevin sampler.
    #[arg(long)]
    noise_coef: Option<f64>,
    #[arg(long, value_parser = ["outside", "none"])]
    sign_variant: Option<String>,
    #[arg(long)]
    dual_step: Option<f64>,
    #[arg(long)]
    fixed_nu: Option<f64>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self, kind: &str) -> Result<ConfigMap, Error> {
        let mut o: Vec<(String, String)> = vec![("kind".into(), kind.into())];
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.into(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.to_string_lossy().into_owned()));
        push("data.name", self.dataset.clone());
        push("method", self.method.clone());
        push("dual.rho", self.rho.map(|v| v.to_string()));
        push("perturb.epsilon", self.epsilon.map(|v| v.to_string()));
        push("sampler.steps", self.steps.map(|v| v.to_string()));
        push("sampler.eta", self.eta.map(|v| v.to_string()));
        push("sampler.noise_coef", self.noise_coef.map(|v| v.to_string()));
        push("sampler.sign_variant", self.sign_variant.clone());
        push("dual.step", self.dual_step.map(|v| v.to_string()));
        push("dual.fixed_nu", self.fixed_nu.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.push((k.trim().into(), v.trim().into()));
        }
        ConfigMap::resolve(self.config.as_deref(), &o)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.verb {
        Verb::Train(c) => {
            let cfg = c.resolve("single")?;
            let outcome = expcli::run_single(&cfg)?;
            print_json(&outcome.metrics)
        }
        Verb::SweepRho(c) => {
            let rows = expcli::run_rho_sweep(&c.resolve("rho_sweep")?)?;
            print_json(&rows)
        }
        Verb::SweepNu(c) => {
            let rows = expcli::run_nu_sweep(&c.resolve("nu_sweep")?)?;
            print_json(&rows)
        }
        Verb::SweepSteps(c) => {
            let rows = expcli::run_steps_sweep(&c.resolve("steps_sweep")?)?;
            print_json(&rows)
        }
        Verb::Eval { common, model } => {
            let metrics = expcli::run_eval(&common.resolve("single")?, &model)?;
            print_json(&metrics)
        }
        Verb::Oracle(c) => {
            let report = expcli::run_oracle(&c.resolve("oracle_report")?)?;
            print_json(&report)
        }
        Verb::ValidateSampler(c) => {
            let report = expcli::run_sampler_validation(&c.resolve("sampler_validation")?)?;
            print_json(&report)
        }
        Verb::Pca { common, model } => {
            let fit = expcli::run_pca(&common.resolve("single")?, model.as_deref())?;
            println!("variances: {:?}", fit.variances);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(expcli::exit_code(&e) as u8)
        }
    }
}
