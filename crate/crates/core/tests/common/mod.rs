#![allow(dead_code)]

use dale_core::diffcore::{Arch, Activation, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best value of `sum_i lambda_i l_i vol` over densities with
/// `sum_i lambda_i vol = 1`, `lambda >= 0` and `sum_i lambda_i^2 vol <= c`,
/// found by enumerating every support. On a support `S` both constraints are
/// active at a stationary point, which forces `lambda = a + b l` there.
pub fn brute_force_max(values: &[f64], vol: f64, c: f64) -> f64 {
    let n = values.len();
    assert!(n <= 16);
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let a: f64 = idx.len() as f64 * vol;
        let b: f64 = idx.iter().map(|&i| values[i] * vol).sum();
        let q: f64 = idx.iter().map(|&i| values[i] * values[i] * vol).sum();
        let spread = q - b * b / a;
        let need = c - 1.0 / a;
        let candidates: Vec<(f64, f64)> = if need < -1e-12 {
            continue;
        } else if spread <= 1e-14 * q.max(1.0) {
            // constant on the support: only the uniform density is feasible
            vec![(1.0 / a, 0.0)]
        } else {
            let beta = (need.max(0.0) / spread).sqrt();
            vec![((1.0 - beta * b) / a, beta)]
        };
        for (alpha, beta) in candidates {
            let lam: Vec<f64> = idx.iter().map(|&i| alpha + beta * values[i]).collect();
            if lam.iter().any(|&l| l < -1e-12) {
                continue;
            }
            let obj: f64 = idx.iter().zip(&lam).map(|(&i, l)| l * values[i] * vol).sum();
            best = best.max(obj);
        }
    }
    best
}

pub fn random_landscape(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..5.0)).collect()
}

pub fn random_mlp(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ModelParams {
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..6)).collect();
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let arch = Arch::Mlp { hidden, activation };
    let mut m = ModelParams::init_uniform(arch, d, k, rng.random()).unwrap();
    for t in m.theta.iter_mut() {
        *t = rng.random_range(-1.5..1.5);
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use dale_core::diffcore::{grad_input, grad_theta, LabeledBatch, Loss, LossKind, LossTriple};
use ndarray::{Array2, ArrayView2};

/// `|a - b| / max(|a|, |b|, 1e-4)`; the floor keeps near-zero components
/// from dominating through rounding noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn objective(
    model: &ModelParams,
    batch: &LabeledBatch,
    perturbed: ArrayView2<'_, f64>,
    reference: ArrayView2<'_, f64>,
    losses: &LossTriple,
    w: f64,
) -> f64 {
    let r = model
        .losses(perturbed, &batch.labels, Some(reference), losses.robust_loss())
        .unwrap()
        .mean()
        .unwrap();
    let n = model
        .losses(batch.inputs.view(), &batch.labels, Some(reference), losses.nominal_loss())
        .unwrap()
        .mean()
        .unwrap();
    r + w * n
}

/// Largest relative error between `grad_theta` and central differences of
/// the same objective, with KL references held at the clean prediction.
pub fn theta_fd_error(
    model: &ModelParams,
    batch: &LabeledBatch,
    perturbed: &Array2<f64>,
    losses: &LossTriple,
    w: f64,
) -> f64 {
    let g = grad_theta(model, batch, Some(perturbed.view()), losses, w).unwrap().grad;
    let reference = model.forward(batch.inputs.view()).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut m = model.clone();
    #[allow(clippy::needless_range_loop)]
    for i in 0..model.theta.len() {
        let t0 = m.theta[i];
        m.theta[i] = t0 + h;
        let up = objective(&m, batch, perturbed.view(), reference.view(), losses, w);
        m.theta[i] = t0 - h;
        let down = objective(&m, batch, perturbed.view(), reference.view(), losses, w);
        m.theta[i] = t0;
        worst = worst.max(rel_err(g[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Largest relative error between `grad_input` and central differences.
pub fn input_fd_error(model: &ModelParams, x: &[f64], y: usize, loss: Loss) -> f64 {
    let reference = if loss.kind == LossKind::Kl {
        // reference taken away from x so the gradient is not trivially zero
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.4).collect();
        let row = ndarray::ArrayView2::from_shape((1, x.len()), &shifted).unwrap();
        Some(model.forward(row).unwrap().row(0).to_vec())
    } else {
        None
    };
    let g = grad_input(model, x, y, reference.as_deref(), loss).unwrap();
    let f = |v: &[f64]| -> f64 {
        let row = ndarray::ArrayView2::from_shape((1, v.len()), v).unwrap();
        let r = reference
            .as_ref()
            .map(|r| ndarray::Array2::from_shape_vec((1, r.len()), r.clone()).unwrap());
        model.losses(row, &[y], r.as_ref().map(|r| r.view()), loss).unwrap()[0]
    };
    let h = 1e-5;
    let mut v = x.to_vec();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        v[j] = x[j] + h;
        let up = f(&v);
        v[j] = x[j] - h;
        let down = f(&v);
        v[j] = x[j];
        worst = worst.max(rel_err(g[j], (up - down) / (2.0 * h)));
    }
    worst
}

/// A random MLP, batch, perturbed copy and loss triple.
pub fn random_instance(r: &mut ChaCha8Rng) -> (ModelParams, LabeledBatch, Array2<f64>, LossTriple, f64) {
    let d = r.random_range(1..6);
    let k = r.random_range(2..5);
    let model = random_mlp(r, d, k);
    let m = r.random_range(1..6);
    let inputs = Array2::from_shape_fn((m, d), |_| r.random_range(-1.0..1.0));
    let labels = (0..m).map(|_| r.random_range(0..k)).collect();
    let batch = LabeledBatch::new(inputs, labels).unwrap();
    let perturbed = &batch.inputs + &Array2::from_shape_fn((m, d), |_| r.random_range(-0.3..0.3));
    let robust = if r.random_bool(0.3) { LossKind::Kl } else { LossKind::CrossEntropy };
    let losses = LossTriple::new(LossKind::CrossEntropy, robust, LossKind::CrossEntropy, 50.0).unwrap();
    let w = if r.random_bool(0.5) { 0.0 } else { r.random_range(0.1..2.0) };
    (model, batch, perturbed, losses, w)
}

/// Minimal IDX image file with `n` images of `rows x cols` pixels.
pub fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

/// Writes an image/label pair into `dir` and returns the two paths.
pub fn write_idx_pair(
    dir: &std::path::Path,
    images: &[u8],
    labels: &[u8],
) -> (std::path::PathBuf, std::path::PathBuf) {
    let i = dir.join("images-idx3-ubyte");
    let l = dir.join("labels-idx1-ubyte");
    std::fs::write(&i, images).unwrap();
    std::fs::write(&l, labels).unwrap();
    (i, l)
}
