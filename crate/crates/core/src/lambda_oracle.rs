//! Exact optimal perturbation distribution on a gridded, low-dimensional
//! perturbation set.
//!
//! For a loss landscape `l(delta)` tabulated on the cells of a grid over the
//! ball, the optimal density is `[(l - mu) / gamma]_+`, where `mu` solves
//! `sum_i [l_i - mu]_+ * vol = gamma`. Taking `gamma = sum_i l_i * vol` gives
//! `mu = 0` and the over-smoothed density proportional to the loss; letting
//! `gamma -> 0` concentrates all mass on the loss maximizers.
//!
//! The normalization uses `gamma` itself (not `2 gamma`); the two
//! conventions differ only by a rescaling of `gamma`.
//!
//! Quadrature is the midpoint rule and grids are capped at three dimensions.

use std::io::Write;

use ndarray::Array2;

use crate::diffcore::{Loss, ModelParams};
use crate::error::{Error, Result};
use crate::perturb::{NormKind, PerturbSet};

pub const MAX_GRID_DIM: usize = 3;

/// Absolute bisection tolerance on the normalization residual.
pub const MU_TOLERANCE: f64 = 1e-10;

/// Midpoint grid over a perturbation set. Only cells whose center lies in
/// the set are kept.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaGrid {
    pub set: PerturbSet,
    pub nodes: Vec<usize>,
    pub cell_volume: f64,
    widths: Vec<f64>,
    /// Centers of the in-set cells, in row-major cell order.
    centers: Vec<Vec<f64>>,
    /// Flat cell index -> position in `centers`.
    slot: Vec<Option<usize>>,
}

impl DeltaGrid {
    pub fn new(set: PerturbSet, nodes: &[usize]) -> Result<Self> {
        let dim = nodes.len();
        if dim == 0 || dim > MAX_GRID_DIM {
            return Err(Error::Parameter(format!(
                "grid dimension must be in 1..={MAX_GRID_DIM}, got {dim}"
            )));
        }
        if nodes.contains(&0) {
            return Err(Error::Parameter("every axis needs at least one node".into()));
        }
        if !(set.epsilon > 0.0) {
            return Err(Error::Parameter("grid needs a set with positive radius".into()));
        }
        let eps = set.epsilon;
        let widths: Vec<f64> = nodes.iter().map(|&n| 2.0 * eps / n as f64).collect();
        let cell_volume: f64 = widths.iter().product();
        let total: usize = nodes.iter().product();
        let mut centers = Vec::new();
        let mut slot = vec![None; total];
        for (flat, s) in slot.iter_mut().enumerate() {
            let idx = unflatten(flat, nodes);
            let c: Vec<f64> = idx
                .iter()
                .zip(&widths)
                .map(|(&k, &h)| -eps + (k as f64 + 0.5) * h)
                .collect();
            let inside = match set.norm {
                NormKind::Linf => true,
                NormKind::L2 => c.iter().map(|v| v * v).sum::<f64>().sqrt() <= eps,
            };
            if inside {
                *s = Some(centers.len());
                centers.push(c);
            }
        }
        if centers.len() < 2 {
            return Err(Error::Parameter(format!(
                "grid has {} in-set cells, need at least 2",
                centers.len()
            )));
        }
        Ok(Self {
            set,
            nodes: nodes.to_vec(),
            cell_volume,
            widths,
            centers,
            slot,
        })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    /// Number of in-set cells.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_volume(&self) -> f64 {
        self.cell_volume * self.len() as f64
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// In-set cell holding `delta`, or the in-set cell with the nearest center
    /// when the containing cell was masked out.
    pub fn locate(&self, delta: &[f64]) -> Result<usize> {
        if delta.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has {} coordinates, grid has {}",
                delta.len(),
                self.dim()
            )));
        }
        let eps = self.set.epsilon;
        let mut flat = 0;
        for ((&v, &h), &n) in delta.iter().zip(&self.widths).zip(&self.nodes) {
            let k = ((v + eps) / h).floor();
            let k = if k < 0.0 { 0 } else { (k as usize).min(n - 1) };
            flat = flat * n + k;
        }
        if let Some(pos) = self.slot[flat] {
            return Ok(pos);
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d: f64 = c.iter().zip(delta).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }
}

fn unflatten(mut flat: usize, nodes: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; nodes.len()];
    for (i, &n) in nodes.iter().enumerate().rev() {
        idx[i] = flat % n;
        flat /= n;
    }
    idx
}

/// A piecewise-constant density over the cells of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    pub cell_volume: f64,
    pub density: Vec<f64>,
    /// Smoothing parameter of the optimal density (absent for histograms).
    pub gamma: Option<f64>,
    /// Threshold `mu` solving the normalization (absent for histograms).
    pub mu: Option<f64>,
}

impl DiscreteDist {
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_volume
    }

    pub fn uniform(cells: usize, cell_volume: f64) -> Self {
        Self {
            cell_volume,
            density: vec![1.0 / (cells as f64 * cell_volume); cells],
            gamma: None,
            mu: None,
        }
    }

    fn check_compatible(&self, other_len: usize, other_vol: f64) -> Result<()> {
        let same_vol = (self.cell_volume - other_vol).abs()
            <= 1e-12 * self.cell_volume.abs().max(other_vol.abs());
        if self.density.len() != other_len || !same_vol {
            return Err(Error::GridMismatch(format!(
                "{} cells of volume {} vs {} cells of volume {}",
                self.density.len(),
                self.cell_volume,
                other_len,
                other_vol
            )));
        }
        Ok(())
    }
}

fn check_values(values: &[f64], cell_volume: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Degenerate("empty landscape".into()));
    }
    if !(cell_volume > 0.0) {
        return Err(Error::Parameter(format!("cell volume must be positive, got {cell_volume}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("landscape has non-finite values".into()));
    }
    Ok(())
}

/// Tabulates `loss(f(x + delta), y)` at every in-set cell center.
///
/// When the grid dimension is below the input dimension, `axes` names the
/// input coordinates the grid perturbs; pass `None` when they match.
pub fn loss_landscape(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    grid: &DeltaGrid,
    loss: Loss,
    axes: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::Shape(format!(
            "x has {} coordinates, model expects {}",
            x.len(),
            model.input_dim
        )));
    }
    let default_axes: Vec<usize> = (0..grid.dim()).collect();
    let axes = match axes {
        Some(a) => a,
        None if grid.dim() == x.len() => &default_axes,
        None => {
            return Err(Error::Shape(format!(
                "grid dimension {} differs from input dimension {} and no axes were given",
                grid.dim(),
                x.len()
            )))
        }
    };
    if axes.len() != grid.dim() || axes.iter().any(|&a| a >= x.len()) {
        return Err(Error::Shape("axes do not match the grid".into()));
    }
    let n = grid.len();
    let mut inputs = Array2::zeros((n, x.len()));
    for (i, c) in grid.centers().iter().enumerate() {
        let mut delta = vec![0.0; x.len()];
        for (&a, &v) in axes.iter().zip(c) {
            delta[a] = v;
        }
        let row = grid.set.clamp_perturbed(x, &delta);
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    let labels = vec![y; n];
    let reference = if loss.kind.needs_reference() {
        let clean = ndarray::ArrayView2::from_shape((1, x.len()), x).expect("row");
        let p = model.forward(clean)?;
        Some(Array2::from_shape_fn((n, model.num_classes), |(_, j)| p[[0, j]]))
    } else {
        None
    };
    let values = model.losses(inputs.view(), &labels, reference.as_ref().map(|r| r.view()), loss)?;
    Ok(values.to_vec())
}

fn positive_mass(values: &[f64], cell_volume: f64, mu: f64) -> f64 {
    values.iter().map(|&v| (v - mu).max(0.0)).sum::<f64>() * cell_volume
}

/// Solves `sum_i [values_i - mu]_+ * cell_volume = gamma` for `mu`.
///
/// Bisection on the decreasing piecewise-linear map, bracketed by
/// `[min - gamma / total_volume - 1, max]`, finished with an exact solve on
/// the active set.
pub fn solve_mu(values: &[f64], cell_volume: f64, gamma: f64) -> Result<f64> {
    check_values(values, cell_volume)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total_volume = cell_volume * values.len() as f64;
    let mut lo = min - gamma / total_volume - 1.0;
    let mut hi = max;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if positive_mass(values, cell_volume, mid) > gamma {
            lo = mid;
        } else {
            hi = mid;
        }
        if (positive_mass(values, cell_volume, hi) - gamma).abs() <= 0.25 * MU_TOLERANCE
            && (hi - lo) < 1e-15 * (1.0 + hi.abs())
        {
            break;
        }
    }
    let residual = |mu: f64| (positive_mass(values, cell_volume, mu) - gamma).abs();
    let mut best = if residual(lo) < residual(hi) { lo } else { hi };
    // exact root on the active set found by bisection
    let mid = 0.5 * (lo + hi);
    let (count, sum) = values
        .iter()
        .filter(|&&v| v > mid)
        .fold((0usize, 0.0), |(c, s), &v| (c + 1, s + v));
    if count > 0 {
        let exact = (sum - gamma / cell_volume) / count as f64;
        if residual(exact) <= residual(best) {
            best = exact;
        }
    }
    Ok(best)
}

/// `[(values - mu) / gamma]_+` with `mu` from [`solve_mu`].
pub fn lambda_star(values: &[f64], cell_volume: f64, gamma: f64) -> Result<DiscreteDist> {
    let mu = solve_mu(values, cell_volume, gamma)?;
    Ok(DiscreteDist {
        cell_volume,
        density: values.iter().map(|&v| (v - mu).max(0.0) / gamma).collect(),
        gamma: Some(gamma),
        mu: Some(mu),
    })
}

/// Density proportional to the loss.
pub fn oversmoothed_lambda(values: &[f64], cell_volume: f64) -> Result<DiscreteDist> {
    check_values(values, cell_volume)?;
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::Degenerate("landscape has negative values".into()));
    }
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Degenerate("landscape is identically zero".into()));
    }
    let gamma = sum * cell_volume;
    Ok(DiscreteDist {
        cell_volume,
        density: values.iter().map(|&v| v / gamma).collect(),
        gamma: Some(gamma),
        mu: Some(0.0),
    })
}

/// `E_{delta ~ dist}[loss] = sum_i density_i * values_i * vol`.
pub fn expected_loss(dist: &DiscreteDist, values: &[f64]) -> Result<f64> {
    if dist.density.len() != values.len() {
        return Err(Error::GridMismatch(format!(
            "{} densities vs {} values",
            dist.density.len(),
            values.len()
        )));
    }
    Ok(dist
        .density
        .iter()
        .zip(values)
        .map(|(d, v)| d * v)
        .sum::<f64>()
        * dist.cell_volume)
}

/// Total variation distance `(1/2) sum_i |a_i - b_i| * vol`.
pub fn tv_distance(a: &DiscreteDist, b: &DiscreteDist) -> Result<f64> {
    a.check_compatible(b.density.len(), b.cell_volume)?;
    Ok(0.5
        * a.density
            .iter()
            .zip(&b.density)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
        * a.cell_volume)
}

/// Cell counts of `samples` on `grid`.
pub fn histogram_counts(samples: &[Vec<f64>], grid: &DeltaGrid) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; grid.len()];
    for s in samples {
        counts[grid.locate(s)?] += 1;
    }
    Ok(counts)
}

/// Normalized cell-count density of `samples`.
pub fn histogram_of_samples(samples: &[Vec<f64>], grid: &DeltaGrid) -> Result<DiscreteDist> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no samples".into()));
    }
    let counts = histogram_counts(samples, grid)?;
    let norm = samples.len() as f64 * grid.cell_volume;
    Ok(DiscreteDist {
        cell_volume: grid.cell_volume,
        density: counts.iter().map(|&c| c as f64 / norm).collect(),
        gamma: None,
        mu: None,
    })
}

/// Default `gamma` sweep `{1e-3, 1e-2, ..., 10} * total_volume`.
pub fn default_gamma_sweep(total_volume: f64) -> Vec<f64> {
    (-3..=1).map(|e| 10f64.powi(e) * total_volume).collect()
}

/// Writes one row per cell: `c0..c{dim-1}, loss, density`.
pub fn write_oracle_csv<W: Write>(
    mut out: W,
    grid: &DeltaGrid,
    values: &[f64],
    dist: &DiscreteDist,
) -> Result<()> {
    dist.check_compatible(grid.len(), grid.cell_volume)?;
    if values.len() != grid.len() {
        return Err(Error::GridMismatch("values do not match grid".into()));
    }
    let mut header: Vec<String> = (0..grid.dim()).map(|i| format!("c{i}")).collect();
    header.push("loss".into());
    header.push("density".into());
    writeln!(out, "{}", header.join(","))?;
    for ((c, v), d) in grid.centers().iter().zip(values).zip(&dist.density) {
        let mut row: Vec<String> = c.iter().map(|x| format!("{x}")).collect();
        row.push(format!("{v}"));
        row.push(format!("{d}"));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
