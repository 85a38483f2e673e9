//! Differentiable classifier core: logistic and MLP models with softmax
//! output, bounded losses, and exact reverse-mode gradients with respect to
//! both the parameters and the inputs.

mod loss;
mod model;

pub use loss::{
    argmax, loss_value, Loss, LossKind, LossTriple, Target, DEFAULT_CE_BOUND, DEFAULT_LOG_FLOOR,
};
pub use model::{Activation, Arch, ModelParams};

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use model::row_view;

/// `m` examples with labels and stable example ids.
///
/// Ids key the per-example random streams of the samplers, so a perturbation
/// does not depend on which batch the example landed in.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl LabeledBatch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(inputs, labels, ids)
    }

    pub fn with_ids(inputs: Array2<f64>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if inputs.nrows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs, {} labels, {} ids",
                inputs.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("batch inputs contain non-finite values".into()));
        }
        Ok(Self { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for &y in &self.labels {
            loss::check_label(y, num_classes)?;
        }
        Ok(())
    }
}

/// Class probabilities for each input row.
pub fn forward(model: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    model.forward(inputs)
}

/// Result of [`grad_theta`]: the gradient and the batch-mean losses it came from.
#[derive(Clone, Debug)]
pub struct ThetaGrad {
    pub grad: Vec<f64>,
    pub robust_loss: f64,
    pub nominal_loss: Option<f64>,
}

/// Gradient of the batch mean of
/// `robust(f(x_i + delta_i), y_i) + dual_weight * nominal(f(x_i), y_i)`.
///
/// `perturbed` holds the rows `x_i + delta_i`; `None` evaluates the robust
/// term on the clean inputs. KL terms use the clean prediction as a fixed
/// reference. With `dual_weight == 0` the nominal term is skipped entirely.
pub fn grad_theta(
    model: &ModelParams,
    batch: &LabeledBatch,
    perturbed: Option<ArrayView2<'_, f64>>,
    losses: &LossTriple,
    dual_weight: f64,
) -> Result<ThetaGrad> {
    if !(dual_weight >= 0.0) {
        return Err(Error::Parameter(format!(
            "dual weight must be nonnegative, got {dual_weight}"
        )));
    }
    let clean = batch.inputs.view();
    let robust = losses.robust_loss();
    let nominal = losses.nominal_loss();
    let needs_ref = robust.kind.needs_reference() || nominal.kind.needs_reference();
    let reference = if needs_ref {
        Some(model.forward(clean)?)
    } else {
        None
    };
    let adv_inputs = perturbed.unwrap_or(clean);
    if adv_inputs.dim() != clean.dim() {
        return Err(Error::Shape(format!(
            "perturbed inputs {:?} differ from clean {:?}",
            adv_inputs.dim(),
            clean.dim()
        )));
    }
    let (robust_loss, mut grad) = model.loss_grad_theta(
        adv_inputs,
        &batch.labels,
        reference.as_ref().map(|r| r.view()),
        robust,
    )?;
    let mut nominal_loss = None;
    if dual_weight != 0.0 {
        let (value, g_nom) = model.loss_grad_theta(
            clean,
            &batch.labels,
            reference.as_ref().map(|r| r.view()),
            nominal,
        )?;
        for (g, h) in grad.iter_mut().zip(&g_nom) {
            *g += dual_weight * h;
        }
        nominal_loss = Some(value);
    }
    Ok(ThetaGrad {
        grad,
        robust_loss,
        nominal_loss,
    })
}

/// Gradient of `loss(f(x), y)` with respect to `x`.
///
/// `reference` is only consulted for KL losses.
pub fn grad_input(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    reference: Option<&[f64]>,
    loss: Loss,
) -> Result<Vec<f64>> {
    let (_, g) = loss_and_grad_input(model, x, y, reference, loss)?;
    Ok(g)
}

/// `grad_x log(max(loss, floor)) = grad_x loss / max(loss, floor)`.
pub fn grad_log_loss_input(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    reference: Option<&[f64]>,
    loss: Loss,
    floor: f64,
) -> Result<Vec<f64>> {
    if !(floor > 0.0) {
        return Err(Error::Parameter(format!("log floor must be positive, got {floor}")));
    }
    let (value, mut g) = loss_and_grad_input(model, x, y, reference, loss)?;
    let denom = value.max(floor);
    g.iter_mut().for_each(|v| *v /= denom);
    Ok(g)
}

/// Loss value together with its input gradient for a single example.
pub fn loss_and_grad_input(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    reference: Option<&[f64]>,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    let reference = reference.map(row_view);
    let (values, g) = model.loss_grad_inputs(row_view(x), &[y], reference, loss)?;
    Ok((values[0], g.into_raw_vec_and_offset().0))
}

/// Per-row losses for a batch (references only for KL).
pub fn batch_losses(
    model: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    reference: Option<ArrayView2<'_, f64>>,
    loss: Loss,
) -> Result<Array1<f64>> {
    model.losses(inputs, labels, reference, loss)
}
