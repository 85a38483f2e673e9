//! Perturbation sets: `l_inf` and `l_2` balls of radius epsilon, with an
//! optional data-domain clamp applied to `x + delta`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed by [`PerturbSet::contains`].
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(NormKind::Linf),
            "l2" | "2" => Ok(NormKind::L2),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSet {
    pub norm: NormKind,
    pub epsilon: f64,
    /// Bounds `(lo, hi)` for every coordinate of `x + delta`.
    pub clamp: Option<(f64, f64)>,
}

impl PerturbSet {
    pub fn new(norm: NormKind, epsilon: f64, clamp: Option<(f64, f64)>) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Parameter(format!(
                "epsilon must be finite and nonnegative, got {epsilon}"
            )));
        }
        if let Some((lo, hi)) = clamp {
            if !(lo < hi) {
                return Err(Error::Parameter(format!("clamp domain needs lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(Self {
            norm,
            epsilon,
            clamp,
        })
    }

    pub fn linf(epsilon: f64) -> Result<Self> {
        Self::new(NormKind::Linf, epsilon, None)
    }

    pub fn l2(epsilon: f64) -> Result<Self> {
        Self::new(NormKind::L2, epsilon, None)
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.clamp = Some((lo, hi));
        Self::new(self.norm, self.epsilon, self.clamp)
    }

    pub fn norm_of(&self, delta: &[f64]) -> f64 {
        match self.norm {
            NormKind::Linf => delta.iter().fold(0.0, |a: f64, &b| a.max(b.abs())),
            NormKind::L2 => delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn contains(&self, delta: &[f64]) -> bool {
        self.norm_of(delta) <= self.epsilon + MEMBERSHIP_TOLERANCE
    }

    /// Euclidean projection onto the ball, in place.
    ///
    /// Points already inside are left untouched, and the output of an `l_2`
    /// rescale always has computed norm `<= epsilon`, so projecting twice
    /// returns bit-identical values.
    pub fn project_in_place(&self, delta: &mut [f64]) {
        let eps = self.epsilon;
        match self.norm {
            NormKind::Linf => {
                for v in delta.iter_mut() {
                    *v = v.clamp(-eps, eps);
                }
            }
            NormKind::L2 => {
                let norm = self.norm_of(delta);
                if norm <= eps {
                    return;
                }
                if eps == 0.0 {
                    delta.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let original: Vec<f64> = delta.to_vec();
                let mut scale = eps / norm;
                loop {
                    for (d, o) in delta.iter_mut().zip(&original) {
                        *d = o * scale;
                    }
                    if self.norm_of(delta) <= eps {
                        break;
                    }
                    scale = f64::from_bits(scale.to_bits() - 1);
                }
            }
        }
    }

    pub fn project(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = delta.to_vec();
        self.project_in_place(&mut out);
        out
    }

    /// `x + delta`, clipped to the clamp domain when one is configured.
    pub fn clamp_perturbed(&self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(delta)
            .map(|(xi, di)| self.clamp_coord(xi + di))
            .collect()
    }

    fn clamp_coord(&self, v: f64) -> f64 {
        match self.clamp {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }

    /// Replaces each coordinate of `delta` whose perturbed value leaves the
    /// clamp domain by the offset that lands exactly on the boundary.
    /// Coordinates inside the domain are not touched.
    pub fn fit_to_domain(&self, x: &[f64], delta: &mut [f64]) {
        if let Some((lo, hi)) = self.clamp {
            for (d, &xi) in delta.iter_mut().zip(x) {
                let v = xi + *d;
                if v > hi {
                    *d = hi - xi;
                } else if v < lo {
                    *d = lo - xi;
                }
            }
        }
    }
}
