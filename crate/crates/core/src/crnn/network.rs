//! Convolution, pooling and recursive tree layers.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::patch::{PatchTensor, PATCH_SIZE};
use crate::error::{Error, Result};

pub const NUM_FILTERS: usize = 128;
pub const FILTER_SIZE: usize = 8;
pub const CONV_SIZE: usize = PATCH_SIZE - FILTER_SIZE + 1;
pub const POOL_SIZE: usize = 8;
pub const POOL_STRIDE: usize = 2;
pub const POOLED_SIZE: usize = (CONV_SIZE - POOL_SIZE) / POOL_STRIDE + 1;
pub const RNN_FANIN: usize = 3;
pub const NUM_RNNS: usize = 4;
pub const FEATURE_LEN: usize = NUM_FILTERS * NUM_RNNS;

const _: () = assert!(CONV_SIZE == 60 && POOLED_SIZE == 27 && FEATURE_LEN == 512);

/// Convolution filter bank, one row per filter laid out `[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub channels: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl FilterBank {
    pub fn new(channels: usize, weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let want = (NUM_FILTERS, channels * FILTER_SIZE * FILTER_SIZE);
        if weights.dim() != want || bias.len() != NUM_FILTERS {
            return Err(Error::Shape(format!(
                "filter bank {:?} / bias {} for {channels} channels",
                weights.dim(),
                bias.len()
            )));
        }
        Ok(Self {
            channels,
            weights,
            bias,
        })
    }

    /// `(filters, height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.weights.nrows(), FILTER_SIZE, FILTER_SIZE, self.channels)
    }
}

/// Nonlinearity applied at every recursive merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Linear merges; lets tests check the tree arithmetic directly.
    Identity,
}

/// One recursive network: a single `128 x (9 * 128)` matrix shared by every
/// merge at every depth. Children are concatenated in row-major block order.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnWeights {
    pub weights: Array2<f64>,
    pub activation: Activation,
}

impl RnnWeights {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = RNN_FANIN * RNN_FANIN * NUM_FILTERS;
        Self {
            weights: Array2::from_shape_simple_fn((NUM_FILTERS, n), || rng.random_range(-0.1..=0.1)),
            activation: Activation::Tanh,
        }
    }

    /// Linear block averaging.
    pub fn averaging() -> Self {
        let k = RNN_FANIN * RNN_FANIN;
        let mut weights = Array2::zeros((NUM_FILTERS, k * NUM_FILTERS));
        for child in 0..k {
            for f in 0..NUM_FILTERS {
                weights[(f, child * NUM_FILTERS + f)] = 1.0 / k as f64;
            }
        }
        Self {
            weights,
            activation: Activation::Identity,
        }
    }
}

/// Gathers the `cols x (channels * 64)` matrix of every valid 8x8 window.
fn im2col(patch: &PatchTensor) -> Array2<f64> {
    let c = patch.channels;
    let k = FILTER_SIZE * FILTER_SIZE;
    let mut cols = Array2::zeros((CONV_SIZE * CONV_SIZE, c * k));
    for (pos, mut row) in cols.axis_iter_mut(Axis(0)).enumerate() {
        let (oy, ox) = (pos / CONV_SIZE, pos % CONV_SIZE);
        let row = row.as_slice_mut().unwrap();
        for ch in 0..c {
            let plane = patch.plane(ch);
            for dy in 0..FILTER_SIZE {
                let src = (oy + dy) * PATCH_SIZE + ox;
                let dst = ch * k + dy * FILTER_SIZE;
                row[dst..dst + FILTER_SIZE].copy_from_slice(&plane[src..src + FILTER_SIZE]);
            }
        }
    }
    cols
}

/// Valid convolution (correlation) without nonlinearity: `128 x 60 x 60`.
pub fn convolve(patch: &PatchTensor, filters: &FilterBank) -> Result<Array3<f64>> {
    if patch.channels != filters.channels || patch.data.len() != patch.channels * PATCH_SIZE * PATCH_SIZE {
        return Err(Error::DimensionMismatch {
            expected: filters.channels,
            got: patch.channels,
        });
    }
    let cols = im2col(patch);
    let resp = filters.weights.dot(&cols.t()) + &filters.bias.view().insert_axis(Axis(1));
    let n = filters.weights.nrows();
    Ok(resp.into_shape_with_order((n, CONV_SIZE, CONV_SIZE)).expect("contiguous"))
}

/// Mean over 8x8 windows at stride 2: `60 -> 27` per side.
pub fn average_pool(maps: &Array3<f64>) -> Array3<f64> {
    let (n, h, w) = maps.dim();
    assert_eq!((h, w), (CONV_SIZE, CONV_SIZE), "pooling input must be 60x60");
    let inv = 1.0 / (POOL_SIZE * POOL_SIZE) as f64;
    let mut out = Array3::zeros((n, POOLED_SIZE, POOLED_SIZE));
    let mut rows = Array2::<f64>::zeros((POOLED_SIZE, w));
    for f in 0..n {
        let m = maps.index_axis(Axis(0), f);
        rows.fill(0.0);
        for py in 0..POOLED_SIZE {
            for dy in 0..POOL_SIZE {
                let mut r = rows.row_mut(py);
                r += &m.row(py * POOL_STRIDE + dy);
            }
        }
        for py in 0..POOLED_SIZE {
            for px in 0..POOLED_SIZE {
                let x0 = px * POOL_STRIDE;
                out[(f, py, px)] = rows.slice(s![py, x0..x0 + POOL_SIZE]).sum() * inv;
            }
        }
    }
    out
}

/// Convolution, tanh, then average pooling: `128 x 27 x 27`.
pub fn cnn_forward(patch: &PatchTensor, filters: &FilterBank) -> Result<Array3<f64>> {
    let mut conv = convolve(patch, filters)?;
    assert_eq!(conv.dim().1, CONV_SIZE, "convolution must yield 60x60 maps");
    conv.mapv_inplace(f64::tanh);
    let pooled = average_pool(&conv);
    assert_eq!(pooled.dim().1, POOLED_SIZE, "pooling must yield 27x27 maps");
    Ok(pooled)
}

/// One merge level: `(g*g) x 128` node grid to `(g/3)^2 x 128`.
fn merge_level(nodes: ArrayView2<f64>, g: usize, rnn: &RnnWeights) -> Array2<f64> {
    let d = nodes.ncols();
    let pg = g / RNN_FANIN;
    let mut gathered = Array2::zeros((pg * pg, RNN_FANIN * RNN_FANIN * d));
    for by in 0..pg {
        for bx in 0..pg {
            let mut row = gathered.row_mut(by * pg + bx);
            for dy in 0..RNN_FANIN {
                for dx in 0..RNN_FANIN {
                    let child = (by * RNN_FANIN + dy) * g + bx * RNN_FANIN + dx;
                    let slot = (dy * RNN_FANIN + dx) * d;
                    row.slice_mut(s![slot..slot + d]).assign(&nodes.row(child));
                }
            }
        }
    }
    let mut parents = gathered.dot(&rnn.weights.t());
    if rnn.activation == Activation::Tanh {
        parents.mapv_inplace(f64::tanh);
    }
    parents
}

/// Reduces the pooled maps through each tree `27 -> 9 -> 3 -> 1` and
/// concatenates the roots.
pub fn rnn_forward(maps: &Array3<f64>, rnns: &[RnnWeights]) -> Result<Array1<f64>> {
    let (n, h, w) = maps.dim();
    if h != w || !is_power_of_fanin(h) {
        return Err(Error::Shape(format!("{h}x{w} grid is not a power of {RNN_FANIN}")));
    }
    if rnns.iter().any(|r| r.weights.dim() != (n, RNN_FANIN * RNN_FANIN * n)) {
        return Err(Error::Shape("recursive weights do not match map count".into()));
    }
    // node-major layout: one row per grid cell
    let leaves = maps
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, h * w))
        .expect("standard layout")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    let mut out = Array1::zeros(n * rnns.len());
    for (r, rnn) in rnns.iter().enumerate() {
        let mut g = h;
        let mut nodes = merge_level(leaves.view(), g, rnn);
        g /= RNN_FANIN;
        let mut sizes = vec![g];
        while g > 1 {
            nodes = merge_level(nodes.view(), g, rnn);
            g /= RNN_FANIN;
            sizes.push(g);
        }
        if h == POOLED_SIZE {
            assert_eq!(sizes, [9, 3, 1], "recursive reduction must run 27 -> 9 -> 3 -> 1");
        }
        out.slice_mut(s![r * n..(r + 1) * n]).assign(&nodes.row(0));
    }
    if n == NUM_FILTERS && rnns.len() == NUM_RNNS {
        assert_eq!(out.len(), FEATURE_LEN, "feature must have 512 entries");
    }
    Ok(out)
}

fn is_power_of_fanin(mut g: usize) -> bool {
    if g < RNN_FANIN {
        return false;
    }
    while g > 1 {
        if g % RNN_FANIN != 0 {
            return false;
        }
        g /= RNN_FANIN;
    }
    true
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_patch(rng: &mut ChaCha8Rng, channels: usize) -> PatchTensor {
        let mut p = PatchTensor::zeros(channels);
        p.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        p
    }

    pub(crate) fn random_bank(rng: &mut ChaCha8Rng, channels: usize) -> FilterBank {
        let dim = channels * FILTER_SIZE * FILTER_SIZE;
        FilterBank::new(
            channels,
            Array2::from_shape_simple_fn((NUM_FILTERS, dim), || rng.random_range(-0.2..0.2)),
            Array1::from_shape_simple_fn(NUM_FILTERS, || rng.random_range(-0.1..0.1)),
        )
        .unwrap()
    }

    /// Direct summation over every output position.
    fn naive_conv(p: &PatchTensor, f: &FilterBank, k: usize, oy: usize, ox: usize) -> f64 {
        let mut s = f.bias[k];
        for c in 0..p.channels {
            for dy in 0..FILTER_SIZE {
                for dx in 0..FILTER_SIZE {
                    s += f.weights[(k, c * 64 + dy * 8 + dx)] * p.at(c, oy + dy, ox + dx);
                }
            }
        }
        s
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_patch(&mut rng, 4);
        let f = random_bank(&mut rng, 4);
        let conv = convolve(&p, &f).unwrap();
        assert_eq!(conv.dim(), (128, 60, 60));
        for k in [0, 17, 127] {
            for (oy, ox) in [(0, 0), (59, 59), (13, 41)] {
                assert!((conv[(k, oy, ox)] - naive_conv(&p, &f, k, oy, ox)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_hot_filter_pools_shifted_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_patch(&mut rng, 3);
        let mut w = Array2::zeros((NUM_FILTERS, 3 * 64));
        // filter 0 picks channel 1 at offset (2, 5)
        w[(0, 64 + 2 * 8 + 5)] = 1.0;
        let f = FilterBank::new(3, w, Array1::zeros(NUM_FILTERS)).unwrap();
        let pooled = cnn_forward(&p, &f).unwrap();
        assert_eq!(pooled.dim(), (128, 27, 27));
        for py in 0..27 {
            for px in 0..27 {
                let mut s = 0.0;
                for dy in 0..8 {
                    for dx in 0..8 {
                        s += p.at(1, 2 * py + dy + 2, 2 * px + dx + 5).tanh();
                    }
                }
                assert!((pooled[(0, py, px)] - s / 64.0).abs() < 1e-12);
                assert_eq!(pooled[(1, py, px)], 0.0);
            }
        }
    }

    #[test]
    fn zero_patch_gives_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = random_bank(&mut rng, 4);
        f.bias.fill(0.0);
        let pooled = cnn_forward(&PatchTensor::zeros(4), &f).unwrap();
        assert!(pooled.iter().all(|&v| v == 0.0));
        assert!(convolve(&PatchTensor::zeros(3), &f).is_err());
    }

    #[test]
    fn averaging_tree_returns_map_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps = Array3::from_shape_simple_fn((128, 27, 27), || rng.random_range(-1.0..1.0));
        let rnns = vec![RnnWeights::averaging(); 4];
        let feat = rnn_forward(&maps, &rnns).unwrap();
        assert_eq!(feat.len(), 512);
        for f in 0..128 {
            let mean = maps.index_axis(Axis(0), f).mean().unwrap();
            for r in 0..4 {
                assert!((feat[r * 128 + f] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tree_rejects_bad_grids_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rnns: Vec<_> = (0..4).map(|_| RnnWeights::random(&mut rng)).collect();
        assert!(rnn_forward(&Array3::zeros((128, 26, 26)), &rnns).is_err());
        let maps = Array3::from_shape_simple_fn((128, 27, 27), || rng.random_range(-1.0..1.0));
        let a = rnn_forward(&maps, &rnns).unwrap();
        let b = rnn_forward(&maps, &rnns).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }
}
