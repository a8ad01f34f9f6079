//! Lloyd's k-means with k-means++ seeding, shared by mixture initialization
//! and convolution filter pretraining.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k x dim` centroids.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn squared_norms(m: &ArrayView2<f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Nearest centroid per row (lowest index on ties) and its squared distance.
fn assign(data: &ArrayView2<f64>, data_norms: &Array1<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let c_norms = squared_norms(&centroids.view());
    let cross = data.dot(&centroids.t());
    let mut labels = Vec::with_capacity(data.nrows());
    let mut dists = Vec::with_capacity(data.nrows());
    for (i, row) in cross.rows().into_iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (k, &x) in row.iter().enumerate() {
            let d = data_norms[i] - 2.0 * x + c_norms[k];
            if d < best.1 {
                best = (k, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1.max(0.0));
    }
    (labels, dists)
}

fn exact_objective(data: &ArrayView2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    data.rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &k)| {
            r.iter()
                .zip(centroids.row(k).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle
/// or `max_iterations` is reached. Requires `data.nrows() >= k >= 1`.
pub fn kmeans<R: Rng>(data: ArrayView2<f64>, k: usize, max_iterations: usize, rng: &mut R) -> KMeans {
    let (n, dim) = data.dim();
    assert!(k >= 1 && n >= k, "kmeans needs at least k rows");
    let norms = squared_norms(&data);

    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(data.row(first).iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if closest[chosen] == 0.0 {
                // rounding walked past the end; take the farthest row
                chosen = (0..n).max_by(|&a, &b| closest[a].total_cmp(&closest[b])).unwrap_or(0);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            let d: f64 = r.iter().zip(data.row(pick).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < closest[i] {
                closest[i] = d;
            }
        }
    }

    let (mut labels, _) = assign(&data, &norms, &centroids);
    let mut objective = vec![exact_objective(&data, &centroids, &labels)];
    for _ in 0..max_iterations {
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (r, &l) in data.rows().into_iter().zip(&labels) {
            let mut s = sums.row_mut(l);
            s += &r;
            counts[l] += 1;
        }
        for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
            if counts[c] > 0 {
                row /= counts[c] as f64;
                centroids.row_mut(c).assign(&row);
            }
        }
        let (next, _) = assign(&data, &norms, &centroids);
        let changed = next != labels;
        labels = next;
        objective.push(exact_objective(&data, &centroids, &labels));
        if !changed {
            break;
        }
    }
    KMeans {
        centroids,
        assignments: labels,
        objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_planted_clusters_and_objective_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rows = Vec::new();
        for c in centers.iter() {
            for _ in 0..50 {
                rows.push(c[0] + rng.random_range(-1.0..1.0));
                rows.push(c[1] + rng.random_range(-1.0..1.0));
            }
        }
        let data = Array2::from_shape_vec((150, 2), rows).unwrap();
        let km = kmeans(data.view(), 3, 50, &mut rng);
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        for block in 0..3 {
            let l = km.assignments[block * 50];
            assert!(km.assignments[block * 50..(block + 1) * 50].iter().all(|&a| a == l));
        }
    }
}
