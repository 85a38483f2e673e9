use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper clip for cross-entropy, so every loss is `[0, B]`-valued.
pub const DEFAULT_CE_BOUND: f64 = 50.0;

/// Default floor used before taking `log` of a loss.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-log p_y`, clipped to `[0, B]`.
    CrossEntropy,
    /// `KL(reference || p)`, where the reference is the clean prediction.
    Kl,
    /// Misclassification indicator. Evaluation only.
    ZeroOne,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Kl => "kl",
            LossKind::ZeroOne => "zero_one",
        }
    }

    pub fn is_differentiable(self) -> bool {
        !matches!(self, LossKind::ZeroOne)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, LossKind::Kl)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" | "xent" => Ok(LossKind::CrossEntropy),
            "kl" => Ok(LossKind::Kl),
            "zero_one" | "01" => Ok(LossKind::ZeroOne),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// A loss kind together with the cross-entropy clip bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub ce_bound: f64,
}

impl Loss {
    pub fn new(kind: LossKind, ce_bound: f64) -> Self {
        Self { kind, ce_bound }
    }

    pub fn cross_entropy() -> Self {
        Self::new(LossKind::CrossEntropy, DEFAULT_CE_BOUND)
    }

    pub fn kl() -> Self {
        Self::new(LossKind::Kl, DEFAULT_CE_BOUND)
    }

    pub(crate) fn require_differentiable(&self) -> Result<()> {
        if self.kind.is_differentiable() {
            Ok(())
        } else {
            Err(Error::NotDifferentiable(self.kind.name()))
        }
    }
}

impl Default for Loss {
    fn default() -> Self {
        Self::cross_entropy()
    }
}

/// The three losses of the primal-dual loop: the sampler potential, the
/// adversarial objective and the nominal constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub pert: LossKind,
    pub robust: LossKind,
    pub nominal: LossKind,
    pub ce_bound: f64,
}

impl LossTriple {
    pub fn new(pert: LossKind, robust: LossKind, nominal: LossKind, ce_bound: f64) -> Result<Self> {
        let triple = Self {
            pert,
            robust,
            nominal,
            ce_bound,
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pert.is_differentiable() {
            return Err(Error::NotDifferentiable(self.pert.name()));
        }
        if !self.robust.is_differentiable() {
            return Err(Error::NotDifferentiable(self.robust.name()));
        }
        if !(self.ce_bound > 0.0) {
            return Err(Error::Parameter(format!(
                "cross-entropy bound must be positive, got {}",
                self.ce_bound
            )));
        }
        Ok(())
    }

    pub fn pert_loss(&self) -> Loss {
        Loss::new(self.pert, self.ce_bound)
    }

    pub fn robust_loss(&self) -> Loss {
        Loss::new(self.robust, self.ce_bound)
    }

    pub fn nominal_loss(&self) -> Loss {
        Loss::new(self.nominal, self.ce_bound)
    }
}

impl Default for LossTriple {
    fn default() -> Self {
        Self {
            pert: LossKind::CrossEntropy,
            robust: LossKind::CrossEntropy,
            nominal: LossKind::CrossEntropy,
            ce_bound: DEFAULT_CE_BOUND,
        }
    }
}

/// What a single prediction is scored against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Label(usize),
    Reference(&'a [f64]),
}

/// Loss of a simplex vector against a label or a reference distribution.
pub fn loss_value(loss: Loss, probs: &[f64], target: Target<'_>) -> Result<f64> {
    let k = probs.len();
    match (loss.kind, target) {
        (LossKind::CrossEntropy, Target::Label(y)) => {
            check_label(y, k)?;
            let raw = -probs[y].ln();
            Ok(raw.clamp(0.0, loss.ce_bound))
        }
        (LossKind::ZeroOne, Target::Label(y)) => {
            check_label(y, k)?;
            Ok(if argmax(probs) == y { 0.0 } else { 1.0 })
        }
        (LossKind::Kl, Target::Reference(r)) => {
            if r.len() != k {
                return Err(Error::Shape(format!(
                    "reference has {} entries, prediction has {k}",
                    r.len()
                )));
            }
            let mut kl = 0.0;
            for (&ri, &pi) in r.iter().zip(probs) {
                if ri > 0.0 {
                    kl += ri * (ri.ln() - pi.ln());
                }
            }
            Ok(kl.max(0.0))
        }
        (kind, Target::Label(_)) => Err(Error::Parameter(format!(
            "loss `{kind}` needs a reference distribution, got a label"
        ))),
        (kind, Target::Reference(_)) => Err(Error::Parameter(format!(
            "loss `{kind}` needs a label, got a reference distribution"
        ))),
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label < num_classes {
        Ok(())
    } else {
        Err(Error::InvalidLabel { label, num_classes })
    }
}

/// Numerically stable log-sum-exp of one logit row.
pub(crate) fn log_sum_exp(logits: ArrayView1<'_, f64>) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Loss of one logit row; when `dlogits` is given it receives `d loss / d logits`.
pub(crate) fn loss_from_logits(
    loss: Loss,
    logits: ArrayView1<'_, f64>,
    label: usize,
    reference: Option<ArrayView1<'_, f64>>,
    dlogits: Option<ArrayViewMut1<'_, f64>>,
) -> Result<f64> {
    let k = logits.len();
    let lse = log_sum_exp(logits);
    match loss.kind {
        LossKind::CrossEntropy => {
            check_label(label, k)?;
            let raw = lse - logits[label];
            let clipped = raw >= loss.ce_bound;
            if let Some(mut dz) = dlogits {
                if clipped {
                    dz.fill(0.0);
                } else {
                    for (j, d) in dz.iter_mut().enumerate() {
                        *d = (logits[j] - lse).exp();
                    }
                    dz[label] -= 1.0;
                }
            }
            Ok(raw.clamp(0.0, loss.ce_bound))
        }
        LossKind::Kl => {
            let r = reference.ok_or_else(|| {
                Error::Parameter("kl loss requires a reference distribution".into())
            })?;
            if r.len() != k {
                return Err(Error::Shape(format!(
                    "reference has {} entries, logits have {k}",
                    r.len()
                )));
            }
            let mut kl = 0.0;
            for j in 0..k {
                if r[j] > 0.0 {
                    kl += r[j] * (r[j].ln() - (logits[j] - lse));
                }
            }
            if let Some(mut dz) = dlogits {
                for (j, d) in dz.iter_mut().enumerate() {
                    *d = (logits[j] - lse).exp() - r[j];
                }
            }
            Ok(kl.max(0.0))
        }
        LossKind::ZeroOne => {
            check_label(label, k)?;
            if dlogits.is_some() {
                return Err(Error::NotDifferentiable(loss.kind.name()));
            }
            let row: Vec<f64> = logits.to_vec();
            Ok(if argmax(&row) == label { 0.0 } else { 1.0 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_cross_entropy_is_zero() {
        let p = [0.0, 1.0, 0.0];
        assert_eq!(loss_value(Loss::cross_entropy(), &p, Target::Label(1)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let p = [0.1; 10];
        let l = loss_value(Loss::cross_entropy(), &p, Target::Label(3)).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_clipped() {
        let p = [1.0, 0.0];
        let l = loss_value(Loss::new(LossKind::CrossEntropy, 7.5), &p, Target::Label(1)).unwrap();
        assert_eq!(l, 7.5);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.2, 0.0, 0.8];
        let l = loss_value(Loss::kl(), &p, Target::Reference(&p)).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn kl_positive_when_different() {
        let p = [0.5, 0.5];
        let r = [0.9, 0.1];
        let l = loss_value(Loss::kl(), &p, Target::Reference(&r)).unwrap();
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_label_errors() {
        let p = [0.5, 0.5];
        assert!(matches!(
            loss_value(Loss::cross_entropy(), &p, Target::Label(2)),
            Err(Error::InvalidLabel { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn zero_one_ties_go_to_lowest_index() {
        let p = [0.4, 0.4, 0.2];
        let l = Loss::new(LossKind::ZeroOne, 1.0);
        assert_eq!(loss_value(l, &p, Target::Label(0)).unwrap(), 0.0);
        assert_eq!(loss_value(l, &p, Target::Label(1)).unwrap(), 1.0);
    }

    #[test]
    fn triple_rejects_zero_one_for_pert_and_robust() {
        let ce = LossKind::CrossEntropy;
        assert!(LossTriple::new(LossKind::ZeroOne, ce, ce, 50.0).is_err());
        assert!(LossTriple::new(ce, LossKind::ZeroOne, ce, 50.0).is_err());
        assert!(LossTriple::new(ce, ce, LossKind::ZeroOne, 50.0).is_ok());
    }
}
