//! Flat `key = value` run configuration with dotted section keys.
//!
//! Resolution order is defaults, then the config file, then explicit
//! overrides. The resolved map is echoed into `summary.json`, which can be
//! passed back as a config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognized key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("kind", "single"),
    ("seed", "0"),
    ("out", "runs/default"),
    ("method", "dale"),
    ("data.name", "blobs"),
    ("data.mnist_dir", ""),
    ("data.train_size", "0"),
    ("data.test_size", "0"),
    ("data.seed", "0"),
    ("data.n", "400"),
    ("data.separation", "2"),
    ("data.spread", "0.5"),
    ("data.noise", "0.1"),
    ("model.arch", "mlp"),
    ("model.hidden", "64,64"),
    ("model.activation", "relu"),
    ("train.epochs", "5"),
    ("train.batch_size", "64"),
    ("train.lr", "0.05"),
    ("train.optimizer", "momentum"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0"),
    ("train.lr_decay", "1"),
    ("train.eval_rows", "1000"),
    ("perturb.norm", "linf"),
    ("perturb.epsilon", "0.3"),
    ("perturb.clamp", "auto"),
    ("sampler.kind", "auto"),
    ("sampler.steps", "7"),
    ("sampler.eta", "0.1"),
    ("sampler.noise_coef", "0.001"),
    ("sampler.sign_variant", "outside"),
    ("sampler.init", "zero"),
    ("loss.pert", "cross_entropy"),
    ("loss.robust", "cross_entropy"),
    ("loss.nominal", "cross_entropy"),
    ("loss.ce_bound", "50"),
    ("dual.rho", "0.3"),
    ("dual.step", "1"),
    ("dual.average", "running"),
    ("dual.fixed_nu", "0.5"),
    ("eval.pgd_steps", "10"),
    ("eval.pgd_eta", "0"),
    ("eval.per_epoch_robust", "true"),
    ("eval.test_rows", "0"),
    ("sweep.rho", "0.05,0.2,0.5,1.0"),
    ("sweep.nu", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"),
    ("sweep.steps", "1,3,7"),
    ("sweep.seeds", "0,1,2"),
    ("oracle.epsilon", "1"),
    ("oracle.nodes", "101"),
    ("oracle.weight", "2"),
    ("oracle.bias", "0"),
    ("oracle.x", "0"),
    ("oracle.label", "1"),
    ("oracle.gammas", ""),
    ("validate.chains", "1000"),
    ("validate.burn_in", "1000"),
    ("validate.keep", "100"),
    ("validate.thin", "10"),
    ("validate.eta", "0.001"),
    ("validate.temperature", "1"),
    ("validate.nodes", "40"),
    ("validate.models", "20"),
    ("validate.laplace_draws", "1000000"),
    ("pca.k", "2"),
    ("pca.examples", "200"),
];

/// A fully resolved configuration: every key in [`DEFAULTS`] has a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v.clone())?;
        }
        Ok(())
    }

    /// Loads a config file: either `key = value` text or a `summary.json`
    /// whose `config` object holds the resolved map.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let json: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let obj = json
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::Config(format!("{}: no `config` object", path.display())))?;
            for (k, v) in obj {
                let v = v
                    .as_str()
                    .ok_or_else(|| Error::Config(format!("config value for `{k}` is not a string")))?;
                self.set(k, v)?;
            }
            Ok(())
        } else {
            self.apply(&parse_kv(&text)?)
        }
    }

    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            cfg.load_file(p)?;
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no default for config key `{key}`"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("bad item `{s}` in `{key}`: {e}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Canonical `key = value` text, one line per key in sorted order.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_cli_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\ntrain.epochs = 9\ndual.rho=0.7 # inline\n\n").unwrap();
        let cfg = ConfigMap::resolve(Some(&p), &[("dual.rho".into(), "0.2".into())]).unwrap();
        assert_eq!(cfg.get::<usize>("train.epochs").unwrap(), 9);
        assert_eq!(cfg.get::<f64>("dual.rho").unwrap(), 0.2);
        assert_eq!(cfg.raw("method"), "dale");
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_config_errors() {
        assert!(matches!(ConfigMap::default().set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(parse_kv("justtext"), Err(Error::Config(_))));
        let mut c = ConfigMap::default();
        c.set("train.epochs", "x").unwrap();
        assert!(matches!(c.get::<usize>("train.epochs"), Err(Error::Config(_))));
    }

    #[test]
    fn lists() {
        let c = ConfigMap::default();
        assert_eq!(c.list::<f64>("sweep.rho").unwrap(), vec![0.05, 0.2, 0.5, 1.0]);
        assert!(c.list::<f64>("oracle.gammas").unwrap().is_empty());
    }

    #[test]
    fn summary_json_round_trip() {
        let mut c = ConfigMap::default();
        c.set("seed", "17").unwrap();
        let json = serde_json::json!({ "config": c.as_map(), "final": { "x": 1.0 } });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&json).unwrap()).unwrap();
        assert_eq!(ConfigMap::resolve(Some(&p), &[]).unwrap(), c);
    }
}
