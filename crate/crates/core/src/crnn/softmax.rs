//! Multinomial logistic regression over recursive features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer {
    /// `classes x features`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SoftmaxParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            batch: 32,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl SoftmaxLayer {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, features)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Class probabilities for one feature vector.
    pub fn probabilities(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut z = self.weights.dot(&x) + &self.bias;
        normalize_row(z.view_mut());
        z
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let p = self.probabilities(x);
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }
}

fn normalize_row(mut z: ndarray::ArrayViewMut1<f64>) {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    z.mapv_inplace(|v| (v - m).exp());
    let s = z.sum();
    z /= s;
}

/// Mean cross-entropy plus `l2 / 2 * |W|^2`, and its gradient.
pub fn loss_and_gradient(
    layer: &SoftmaxLayer,
    x: ArrayView2<f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut probs = x.dot(&layer.weights.t()) + &layer.bias;
    let mut loss = 0.0;
    for (mut row, &label) in probs.axis_iter_mut(Axis(0)).zip(y) {
        normalize_row(row.view_mut());
        loss -= row[label].max(1e-300).ln();
        row[label] -= 1.0;
    }
    loss = loss / n + 0.5 * l2 * layer.weights.iter().map(|w| w * w).sum::<f64>();
    let grad_w = probs.t().dot(&x) / n + &layer.weights * l2;
    let grad_b = probs.sum_axis(Axis(0)) / n;
    (loss, grad_w, grad_b)
}

/// Mini-batch gradient descent from zero weights. Returns the layer and the
/// full-data loss after each epoch (entry 0 is the initial loss).
pub fn train_softmax(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    params: SoftmaxParams,
) -> Result<(SoftmaxLayer, Vec<f64>)> {
    if y.is_empty() || classes == 0 {
        return Err(Error::EmptyClassSet);
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} out of {classes} classes")));
    }
    let mut layer = SoftmaxLayer::zeros(classes, x.ncols());
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let batch = params.batch.max(1);
    let mut curve = vec![loss_and_gradient(&layer, x, y, params.l2).0];
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (_, gw, gb) = loss_and_gradient(&layer, bx.view(), &by, params.l2);
            layer.weights.scaled_add(-params.learning_rate, &gw);
            layer.bias.scaled_add(-params.learning_rate, &gb);
        }
        curve.push(loss_and_gradient(&layer, x, y, params.l2).0);
    }
    Ok((layer, curve))
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(layer: &SoftmaxLayer, x: ArrayView2<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hits = x.rows().into_iter().zip(y).filter(|(r, &l)| layer.predict(r.view()) == l).count();
    hits as f64 / y.len() as f64
}
