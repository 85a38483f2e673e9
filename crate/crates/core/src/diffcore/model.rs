use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{check_label, loss_from_logits, Loss};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Network shape. `Logistic` is multinomial logistic regression; `Mlp` adds
/// fully connected hidden layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

impl Arch {
    pub fn mlp(hidden: impl Into<Vec<usize>>, activation: Activation) -> Self {
        Arch::Mlp {
            hidden: hidden.into(),
            activation,
        }
    }

    fn hidden(&self) -> &[usize] {
        match self {
            Arch::Logistic => &[],
            Arch::Mlp { hidden, .. } => hidden,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Arch::Logistic => Activation::Tanh,
            Arch::Mlp { activation, .. } => *activation,
        }
    }

    /// Layer widths including input and output.
    pub fn widths(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden().len() + 2);
        w.push(input_dim);
        w.extend_from_slice(self.hidden());
        w.push(num_classes);
        w
    }

    pub fn param_count(&self, input_dim: usize, num_classes: usize) -> usize {
        self.widths(input_dim, num_classes)
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// A classifier `f_theta: R^d -> simplex(K)` with a flat parameter vector.
///
/// Each layer stores an `out x in` row-major weight block followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
    pub num_classes: usize,
    pub input_dim: usize,
}

/// Intermediate values kept for the reverse pass.
struct Tape {
    /// `acts[0]` is the input; `acts[l]` is the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, input_dim: usize, num_classes: usize, theta: Vec<f64>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Parameter("input_dim must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Parameter("num_classes must be at least 2".into()));
        }
        if arch.hidden().contains(&0) {
            return Err(Error::Parameter("hidden layer widths must be positive".into()));
        }
        let expected = arch.param_count(input_dim, num_classes);
        if theta.len() != expected {
            return Err(Error::Shape(format!(
                "theta has {} entries, architecture needs {expected}",
                theta.len()
            )));
        }
        Ok(Self {
            arch,
            theta,
            num_classes,
            input_dim,
        })
    }

    pub fn zeros(arch: Arch, input_dim: usize, num_classes: usize) -> Result<Self> {
        let n = arch.param_count(input_dim, num_classes);
        Self::new(arch, input_dim, num_classes, vec![0.0; n])
    }

    /// Fan-in scaled uniform initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases zero.
    pub fn init_uniform(arch: Arch, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dim, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut model.theta[layer.w_off..layer.b_off] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn layers(&self) -> Vec<Layer> {
        let widths = self.arch.widths(self.input_dim, self.num_classes);
        let mut off = 0;
        widths
            .windows(2)
            .map(|p| {
                let layer = Layer {
                    fan_in: p[0],
                    fan_out: p[1],
                    w_off: off,
                    b_off: off + p[0] * p[1],
                };
                off = layer.b_off + p[1];
                layer
            })
            .collect()
    }

    fn weight(&self, layer: &Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.fan_out, layer.fan_in),
            &self.theta[layer.w_off..layer.b_off],
        )
        .expect("layer offsets are consistent with theta")
    }

    fn bias(&self, layer: &Layer) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.theta[layer.b_off..layer.b_off + layer.fan_out])
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input width {} does not match model input_dim {}",
                inputs.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn run(&self, inputs: ArrayView2<'_, f64>, keep: bool) -> Result<Tape> {
        self.check_inputs(&inputs)?;
        let layers = self.layers();
        let act = self.arch.activation();
        let mut acts = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len().saturating_sub(1));
        let mut h = inputs.to_owned();
        for (l, layer) in layers.iter().enumerate() {
            let mut z = h.dot(&self.weight(layer).t());
            z += &self.bias(layer);
            if l + 1 == layers.len() {
                if keep {
                    acts.push(h);
                }
                return Ok(Tape {
                    acts,
                    pre,
                    logits: z,
                });
            }
            let a = z.mapv(|v| act.apply(v));
            if keep {
                acts.push(h);
                pre.push(z);
            }
            h = a;
        }
        unreachable!("a model always has an output layer")
    }

    /// Raw scores before the softmax.
    pub fn logits(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(inputs, false)?.logits)
    }

    /// Class probabilities, one simplex row per input row.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut z = self.logits(inputs)?;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(z)
    }

    /// Argmax predictions; ties go to the lowest class index.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let z = self.logits(inputs)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| super::loss::argmax(r.as_slice().expect("row-major logits")))
            .collect())
    }

    fn check_targets(
        &self,
        m: usize,
        labels: &[usize],
        reference: Option<&ArrayView2<'_, f64>>,
        loss: Loss,
    ) -> Result<()> {
        if labels.len() != m {
            return Err(Error::Shape(format!("{m} inputs but {} labels", labels.len())));
        }
        for &y in labels {
            check_label(y, self.num_classes)?;
        }
        match reference {
            Some(r) if r.dim() != (m, self.num_classes) => Err(Error::Shape(format!(
                "reference is {:?}, expected ({m}, {})",
                r.dim(),
                self.num_classes
            ))),
            None if loss.kind.needs_reference() => Err(Error::Parameter(format!(
                "loss `{}` requires reference predictions",
                loss.kind
            ))),
            _ => Ok(()),
        }
    }

    /// Per-row loss values.
    pub fn losses(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        reference: Option<ArrayView2<'_, f64>>,
        loss: Loss,
    ) -> Result<Array1<f64>> {
        self.check_targets(inputs.nrows(), labels, reference.as_ref(), loss)?;
        let z = self.logits(inputs)?;
        let mut out = Array1::zeros(z.nrows());
        for (i, row) in z.rows().into_iter().enumerate() {
            let r = reference.as_ref().map(|r| r.row(i));
            out[i] = loss_from_logits(loss, row, labels[i], r, None)?;
        }
        Ok(out)
    }

    fn dlogits(
        &self,
        tape: &Tape,
        labels: &[usize],
        reference: Option<&ArrayView2<'_, f64>>,
        loss: Loss,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let m = tape.logits.nrows();
        let mut values = Array1::zeros(m);
        let mut dz = Array2::zeros(tape.logits.raw_dim());
        for i in 0..m {
            let r = reference.map(|r| r.row(i));
            values[i] =
                loss_from_logits(loss, tape.logits.row(i), labels[i], r, Some(dz.row_mut(i)))?;
        }
        Ok((values, dz))
    }

    /// Reverse pass from `d objective / d logits`.
    fn backward(
        &self,
        tape: &Tape,
        mut dz: Array2<f64>,
        want_theta: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Array2<f64>>) {
        let layers = self.layers();
        let act = self.arch.activation();
        let mut grad = want_theta.then(|| vec![0.0; self.theta.len()]);
        for (l, layer) in layers.iter().enumerate().rev() {
            let h_prev = &tape.acts[l];
            if let Some(g) = grad.as_mut() {
                let gw = dz.t().dot(h_prev);
                let gw_slice = &mut g[layer.w_off..layer.b_off];
                for (dst, src) in gw_slice.iter_mut().zip(gw.iter()) {
                    *dst = *src;
                }
                let gb = dz.sum_axis(Axis(0));
                g[layer.b_off..layer.b_off + layer.fan_out].copy_from_slice(gb.as_slice().unwrap());
            }
            if l == 0 {
                if want_input {
                    return (grad, Some(dz.dot(&self.weight(layer))));
                }
                break;
            }
            let mut dh = dz.dot(&self.weight(layer));
            Zip::from(&mut dh)
                .and(&tape.pre[l - 1])
                .and(&tape.acts[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            dz = dh;
        }
        (grad, None)
    }

    /// Mean loss over the rows and its exact gradient with respect to theta.
    pub fn loss_grad_theta(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        reference: Option<ArrayView2<'_, f64>>,
        loss: Loss,
    ) -> Result<(f64, Vec<f64>)> {
        loss.require_differentiable()?;
        let m = inputs.nrows();
        if m == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        self.check_targets(m, labels, reference.as_ref(), loss)?;
        let tape = self.run(inputs, true)?;
        let (values, mut dz) = self.dlogits(&tape, labels, reference.as_ref(), loss)?;
        dz /= m as f64;
        let (grad, _) = self.backward(&tape, dz, true, false);
        Ok((values.sum() / m as f64, grad.expect("theta gradient requested")))
    }

    /// Per-row losses and, for each row, the gradient of that row's loss with
    /// respect to its own input.
    pub fn loss_grad_inputs(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        reference: Option<ArrayView2<'_, f64>>,
        loss: Loss,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        loss.require_differentiable()?;
        self.check_targets(inputs.nrows(), labels, reference.as_ref(), loss)?;
        let tape = self.run(inputs, true)?;
        let (values, dz) = self.dlogits(&tape, labels, reference.as_ref(), loss)?;
        let (_, gx) = self.backward(&tape, dz, false, true);
        Ok((values, gx.expect("input gradient requested")))
    }

    /// Copy of the weights of layer `index` as an `out x in` matrix.
    pub fn layer_weight(&self, index: usize) -> Option<Array2<f64>> {
        self.layers().get(index).map(|l| self.weight(l).to_owned())
    }

    /// Copy of the bias of layer `index`.
    pub fn layer_bias(&self, index: usize) -> Option<Array1<f64>> {
        self.layers().get(index).map(|l| self.bias(l).to_owned())
    }

    /// Overwrites one layer's weights and bias.
    pub fn set_layer(&mut self, index: usize, weight: ArrayView2<'_, f64>, bias: ArrayView1<'_, f64>) -> Result<()> {
        let layer = *self
            .layers()
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no layer {index}")))?;
        if weight.dim() != (layer.fan_out, layer.fan_in) || bias.len() != layer.fan_out {
            return Err(Error::Shape(format!(
                "layer {index} expects weight ({}, {}) and bias {}",
                layer.fan_out, layer.fan_in, layer.fan_out
            )));
        }
        let mut w = ndarray::ArrayViewMut2::from_shape(
            (layer.fan_out, layer.fan_in),
            &mut self.theta[layer.w_off..layer.b_off],
        )
        .expect("layer offsets are consistent with theta");
        w.assign(&weight);
        self.theta[layer.b_off..layer.b_off + layer.fan_out]
            .iter_mut()
            .zip(bias.iter())
            .for_each(|(d, s)| *d = *s);
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.arch.hidden().len() + 1
    }
}

/// Single-row view of a slice.
pub(crate) fn row_view(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("contiguous row")
}
