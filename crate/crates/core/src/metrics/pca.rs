use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 64;

/// Square 2-D histogram over the bounding box of a point set. `counts` is
/// row-major, rows indexed by the first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub bins: usize,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn from_points(points: &[[f64; 2]], bins: usize) -> Self {
        let edges = |axis: usize| {
            let lo = points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
            (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect::<Vec<_>>()
        };
        let (x_edges, y_edges) = (edges(0), edges(1));
        let bin = |v: f64, e: &[f64]| {
            let (lo, hi) = (e[0], e[bins]);
            (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
        };
        let mut counts = vec![0u64; bins * bins];
        for p in points {
            counts[bin(p[0], &x_edges) * bins + bin(p[1], &y_edges)] += 1;
        }
        Self {
            bins,
            x_edges,
            y_edges,
            counts,
        }
    }

    /// `(row, col, count)` for every non-empty cell, row-major order.
    pub fn nonzero_cells(&self) -> Vec<(usize, usize, u64)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i / self.bins, i % self.bins, c))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPca {
    pub mean: Vec<f64>,
    /// Two leading unit-norm principal directions.
    pub components: [Vec<f64>; 2],
    /// Sample-covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub projected: Vec<[f64; 2]>,
    pub histogram: Histogram2d,
}

/// Flips `v` so that its first non-negligible coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale.max(1e-300)) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Eigen-pairs of a symmetric matrix, eigenvalue-descending.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Principal-component view of a set of latent vectors: the two leading
/// components of the mean-centered sample covariance, the projection of every
/// sample onto them, and a [`HISTOGRAM_BINS`]² histogram of the projections.
///
/// When there are fewer samples than dimensions the decomposition runs on the
/// `N x N` Gram matrix instead of the `d x d` covariance; the nonzero spectrum
/// is the same.
pub fn latent_pca_histogram(latents: &[Vec<f64>]) -> Result<LatentPca> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 latent vectors, got {n}")));
    }
    let d = latents[0].len();
    if d < 2 || latents.iter().any(|l| l.len() != d) {
        return Err(Error::Config("latent vectors must share a dimension of at least 2".into()));
    }
    let mut mean = vec![0.0; d];
    for l in latents {
        mean.iter_mut().zip(l).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| latents[r][c] - mean[c]);
    let denom = (n - 1) as f64;

    let (eigenvalues, mut components) = if n >= d {
        let cov = centered.transpose() * &centered / denom;
        let (values, vectors) = sorted_eigen(cov);
        let comps = [0, 1].map(|j| vectors.column(j).iter().copied().collect::<Vec<_>>());
        (values, comps)
    } else {
        let gram = &centered * centered.transpose() / denom;
        let (values, vectors) = sorted_eigen(gram);
        let comps = [0, 1].map(|j| {
            let v = centered.transpose() * vectors.column(j);
            let norm = v.norm();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect::<Vec<_>>()
            } else {
                // zero-variance direction: any unit vector orthogonal to the first
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                e
            }
        });
        (values, comps)
    };
    for c in components.iter_mut() {
        canonical_sign(c);
    }
    let projected: Vec<[f64; 2]> = (0..n)
        .map(|r| {
            let row = centered.row(r);
            [0, 1].map(|j| row.iter().zip(&components[j]).map(|(a, b)| a * b).sum())
        })
        .collect();
    let histogram = Histogram2d::from_points(&projected, HISTOGRAM_BINS);
    Ok(LatentPca {
        mean,
        components,
        eigenvalues,
        projected,
        histogram,
    })
}
