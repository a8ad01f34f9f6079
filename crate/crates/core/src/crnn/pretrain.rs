//! Unsupervised filter learning: contrast normalization, ZCA whitening and
//! k-means over small crops.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{FILTER_SIZE, NUM_FILTERS};
use super::patch::{PatchTensor, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;

/// Variance floor for contrast normalization of `[0, 1]` data.
pub const CONTRAST_EPSILON: f64 = 0.01;
/// Eigenvalue floor for whitening.
pub const ZCA_EPSILON: f64 = 0.1;

/// Draws `count` random 8x8 crops (all channels) from `patches`.
pub fn sample_crops<R: Rng>(patches: &[&PatchTensor], count: usize, rng: &mut R) -> Result<Array2<f64>> {
    let first = patches.first().ok_or(Error::InsufficientCrops { need: count, got: 0 })?;
    let c = first.channels;
    let k = FILTER_SIZE * FILTER_SIZE;
    let mut out = Array2::zeros((count, c * k));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = patches[rng.random_range(0..patches.len())];
        let oy = rng.random_range(0..=PATCH_SIZE - FILTER_SIZE);
        let ox = rng.random_range(0..=PATCH_SIZE - FILTER_SIZE);
        for ch in 0..c {
            for dy in 0..FILTER_SIZE {
                for dx in 0..FILTER_SIZE {
                    row[ch * k + dy * FILTER_SIZE + dx] = p.at(ch, oy + dy, ox + dx);
                }
            }
        }
    }
    Ok(out)
}

/// Per-row mean removal and variance normalization.
pub fn contrast_normalize(rows: &Array2<f64>) -> Array2<f64> {
    let mut out = rows.clone();
    for mut r in out.axis_iter_mut(Axis(0)) {
        let mean = r.mean().unwrap_or(0.0);
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
        let scale = 1.0 / (var + CONTRAST_EPSILON).sqrt();
        r.mapv_inplace(|v| (v - mean) * scale);
    }
    out
}

/// Whitening transform `W = U (S + eps)^(-1/2) U^T` about `mean`, with its
/// inverse.
pub struct Zca {
    pub mean: Array1<f64>,
    pub forward: Array2<f64>,
    pub inverse: Array2<f64>,
}

impl Zca {
    pub fn fit(rows: &Array2<f64>) -> Self {
        let (n, d) = rows.dim();
        let mean = rows.mean_axis(Axis(0)).expect("non-empty");
        let centered = rows - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[(i, j)]));
        let u = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, j)]);
        let scale = |p: f64| Array1::from_iter(eig.eigenvalues.iter().map(|&s| (s.max(0.0) + ZCA_EPSILON).powf(p)));
        let fwd = (&u * &scale(-0.5)).dot(&u.t());
        let inv = (&u * &scale(0.5)).dot(&u.t());
        Self {
            mean,
            forward: fwd,
            inverse: inv,
        }
    }

    pub fn whiten(&self, rows: &Array2<f64>) -> Array2<f64> {
        (rows - &self.mean).dot(&self.forward)
    }

    pub fn unwhiten(&self, rows: &Array2<f64>) -> Array2<f64> {
        rows.dot(&self.inverse) + &self.mean
    }
}

/// Learned centroids and the clustering trace.
pub struct Pretrained {
    /// `128 x dim` centroids in contrast-normalized (unwhitened) space.
    pub centroids: Array2<f64>,
    pub objective: Vec<f64>,
}

/// Contrast-normalizes and whitens `crops`, clusters them into 128
/// centroids and maps the centroids back out of the whitened space.
pub fn pretrain_filters(crops: &Array2<f64>, iterations: usize, seed: u64) -> Result<Pretrained> {
    if crops.nrows() < NUM_FILTERS {
        return Err(Error::InsufficientCrops {
            need: NUM_FILTERS,
            got: crops.nrows(),
        });
    }
    let normalized = contrast_normalize(crops);
    let zca = Zca::fit(&normalized);
    let white = zca.whiten(&normalized);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let km = kmeans(white.view(), NUM_FILTERS, iterations, &mut rng);
    Ok(Pretrained {
        centroids: zca.unwhiten(&km.centroids),
        objective: km.objective,
    })
}

/// Scales each centroid to unit norm; all-zero rows stay zero.
pub fn unit_filters(centroids: &Array2<f64>) -> Array2<f64> {
    let mut out = centroids.clone();
    for mut r in out.axis_iter_mut(Axis(0)) {
        let n = r.dot(&r).sqrt();
        if n > 1e-12 {
            r /= n;
        }
    }
    out
}
