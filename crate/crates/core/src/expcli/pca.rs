//! Principal axes of a dataset, used to project perturbations to 2-D.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

/// Sample covariance of the rows of `data`.
pub fn covariance(data: ArrayView2<'_, f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::Degenerate("covariance needs at least 2 rows".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let d = cov.nrows();
    Ok((mean.to_vec(), DMatrix::from_fn(d, d, |i, j| cov[[i, j]])))
}

/// Top-`k` principal axes. Each axis is signed so its largest-magnitude
/// entry is positive. If the covariance has rank below `k`, fewer axes are
/// returned and a warning is logged.
pub fn fit_pca(data: ArrayView2<'_, f64>, k: usize) -> Result<Pca> {
    let d = data.ncols();
    if k == 0 || k > d {
        return Err(Error::Parameter(format!("k must be in 1..={d}, got {k}")));
    }
    let (mean, cov) = covariance(data)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut axes = Vec::new();
    let mut variances = Vec::new();
    for &i in order.iter().take(k) {
        let lambda = eig.eigenvalues[i];
        if !(lambda > RANK_TOLERANCE * top) {
            log::warn!("covariance has rank {}, reducing k from {k}", axes.len());
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
        variances.push(lambda);
    }
    if axes.is_empty() {
        return Err(Error::Degenerate("data has zero variance".into()));
    }
    Ok(Pca {
        mean,
        axes,
        variances,
    })
}

impl Pca {
    pub fn k(&self) -> usize {
        self.axes.len()
    }

    /// Coordinates of a perturbation (a displacement, so no centering).
    pub fn project(&self, delta: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .map(|a| a.iter().zip(delta).map(|(x, y)| x * y).sum())
            .collect()
    }
}

/// Columns `pc1..pck,method`.
pub fn write_pca_csv<W: Write>(mut out: W, k: usize, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut header: Vec<String> = (1..=k).map(|i| format!("pc{i}")).collect();
    header.push("method".into());
    writeln!(out, "{}", header.join(","))?;
    for (method, coords) in rows {
        let cells: Vec<String> = coords.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{},{method}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    #[test]
    fn axis_aligned_data_gives_coordinate_axes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let scales = [1.0, 5.0, 0.2];
        let data = Array2::from_shape_fn((500, 3), |(_, j)| scales[j] * rng.random_range(-1.0..1.0));
        // make the sample covariance exactly diagonal by symmetrizing signs
        let mut full = Array2::zeros((4000, 3));
        for (r, row) in data.rows().into_iter().enumerate() {
            for s in 0..8 {
                for j in 0..3 {
                    let sign = if s & (1 << j) != 0 { -1.0 } else { 1.0 };
                    full[[r * 8 + s, j]] = sign * row[j];
                }
            }
        }
        let pca = fit_pca(full.view(), 2).unwrap();
        assert!((pca.axes[0][1] - 1.0).abs() < 1e-12);
        assert!((pca.axes[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(pca.project(&[0.0; 3]), vec![0.0, 0.0]);
    }

    #[test]
    fn rank_deficient_reduces_k() {
        let data = Array2::from_shape_fn((10, 3), |(i, j)| if j == 0 { i as f64 } else { 0.0 });
        let pca = fit_pca(data.view(), 3).unwrap();
        assert_eq!(pca.k(), 1);
        assert!(fit_pca(Array2::<f64>::zeros((5, 2)).view(), 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_pca_csv(&mut buf, 2, &[("pgd".into(), vec![0.5, -1.0])]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pc1,pc2,method\n0.5,-1,pgd\n");
    }
}
