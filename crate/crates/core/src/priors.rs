//! Gaussian mixture appearance models learned from seed pixels, and the
//! per-frame bank holding one model per object label.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, IoContext, Result};
use crate::hypothesis::HypothesisSet;
use crate::kmeans::kmeans;
use crate::scene::{ColorImage, FeatureImage};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// EM stopping and regularization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Minimum mean per-sample log-likelihood gain to keep iterating.
    pub tolerance: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iterations: 200,
            tolerance: 1e-5,
        }
    }
}

impl From<&PipelineConfig> for GmmParams {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            epsilon: c.gmm_epsilon,
            max_iterations: c.gmm_max_iterations,
            tolerance: c.gmm_tolerance,
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance`.
    chol: DMatrix<f64>,
    /// `ln w - d/2 ln 2pi - 1/2 ln det`.
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Option<Self> {
        let chol = covariance.clone().cholesky()?.l();
        let d = mean.len() as f64;
        let half_log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        Some(Self {
            log_norm: weight.ln() - 0.5 * d * LN_2PI - half_log_det,
            weight,
            mean,
            covariance,
            chol,
        })
    }

    fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        // forward substitution of L z = x - mean
        let d = x.len();
        let mut maha = 0.0;
        for i in 0..d {
            let mut v = x[i] - self.mean[i];
            for j in 0..i {
                v -= self.chol[(i, j)] * scratch[j];
            }
            v /= self.chol[(i, i)];
            scratch[i] = v;
            maha += v * v;
        }
        self.log_norm - 0.5 * maha
    }
}

/// Full-covariance Gaussian mixture.
#[derive(Debug, Clone)]
pub struct Gmm {
    dim: usize,
    components: Vec<Component>,
}

impl Gmm {
    /// Builds a mixture from explicit parameters. Fails when a covariance
    /// is not positive definite or the weights are not a distribution.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means.first().map(|m| m.len()).ok_or(Error::NoSamples)?;
        let total: f64 = weights.iter().sum();
        if weights.len() != means.len()
            || weights.len() != covariances.len()
            || (total - 1.0).abs() > 1e-9
            || weights.iter().any(|w| !(*w > 0.0))
        {
            return Err(Error::Shape("invalid mixture weights".into()));
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(covariances)
            .map(|((w, m), c)| {
                if m.len() != dim || c.len() != dim * dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: m.len(),
                    });
                }
                Component::new(w, DVector::from_vec(m), DMatrix::from_row_slice(dim, dim, &c))
                    .ok_or_else(|| Error::Shape("covariance not positive definite".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.as_slice().to_vec()).collect()
    }

    /// Row-major covariance matrices.
    pub fn covariances(&self) -> Vec<Vec<f64>> {
        self.components
            .iter()
            .map(|c| c.covariance.transpose().as_slice().to_vec())
            .collect()
    }

    /// Weight-averaged mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(c.mean.iter()) {
                *o += c.weight * m;
            }
        }
        out
    }

    fn log_likelihood_unchecked(&self, x: &[f64]) -> f64 {
        let mut scratch = [0.0; 16];
        let mut best = f64::NEG_INFINITY;
        let mut logs = [0.0; 32];
        for (k, c) in self.components.iter().enumerate() {
            let l = c.log_density(x, &mut scratch[..self.dim]);
            logs[k] = l;
            best = best.max(l);
        }
        let s: f64 = logs[..self.components.len()].iter().map(|l| (l - best).exp()).sum();
        best + s.ln()
    }

    /// `-ln p(x)`, evaluated with log-sum-exp.
    pub fn neg_log_likelihood(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(-self.log_likelihood_unchecked(x))
    }

    /// Unchecked variant for hot loops; `x.len()` must equal `dim()`.
    pub(crate) fn nll(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        -self.log_likelihood_unchecked(x)
    }
}

/// A fitted mixture and its training trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm,
    /// Total training log-likelihood: the initial model, then each accepted
    /// EM step.
    pub log_likelihood: Vec<f64>,
}

fn row_mean_cov(rows: &[&[f64]], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = DVector::zeros(dim);
    for r in rows {
        for k in 0..dim {
            mean[k] += r[k];
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        let d = DVector::from_fn(dim, |k, _| r[k] - mean[k]);
        cov += &d * d.transpose();
    }
    (mean, cov / n)
}

struct EmState {
    components: Vec<Component>,
}

fn e_step(samples: &[Vec<f64>], components: &[Component], resp: &mut Array2<f64>) -> f64 {
    let dim = samples[0].len();
    let mut scratch = vec![0.0; dim];
    let mut total = 0.0;
    for (i, x) in samples.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, c) in components.iter().enumerate() {
            let l = c.log_density(x, &mut scratch);
            resp[(i, k)] = l;
            best = best.max(l);
        }
        let mut s = 0.0;
        for k in 0..components.len() {
            let e = (resp[(i, k)] - best).exp();
            resp[(i, k)] = e;
            s += e;
        }
        for k in 0..components.len() {
            resp[(i, k)] /= s;
        }
        total += best + s.ln();
    }
    total
}

fn m_step(samples: &[Vec<f64>], resp: &Array2<f64>, previous: &[Component], epsilon: f64) -> Option<Vec<Component>> {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mut out = Vec::with_capacity(previous.len());
    for (k, prev) in previous.iter().enumerate() {
        let nk: f64 = resp.column(k).sum();
        if nk < 1e-10 {
            // starved component: keep it with a negligible weight
            out.push((1e-10, prev.mean.clone(), prev.covariance.clone()));
            continue;
        }
        let mut mean = DVector::zeros(dim);
        for (i, x) in samples.iter().enumerate() {
            let r = resp[(i, k)];
            for j in 0..dim {
                mean[j] += r * x[j];
            }
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(dim, dim);
        for (i, x) in samples.iter().enumerate() {
            let r = resp[(i, k)];
            for a in 0..dim {
                let da = x[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += r * da * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov /= nk;
        for a in 0..dim {
            cov[(a, a)] += epsilon;
        }
        out.push((nk / n, mean, cov));
    }
    let total: f64 = out.iter().map(|c| c.0).sum();
    out.into_iter()
        .map(|(w, m, c)| Component::new(w / total, m, c))
        .collect()
}

/// Fits a `k`-component mixture by EM from a k-means start.
///
/// The recorded log-likelihood never decreases: an EM step that would lower
/// it is rejected and fitting stops. When there are fewer samples than
/// components, `k` is reduced to the sample count.
pub fn fit_gmm(samples: &[Vec<f64>], k: usize, params: GmmParams, seed: u64) -> Result<GmmFit> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::NoSamples);
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: samples.iter().find(|s| s.len() != dim).map_or(0, |s| s.len()),
        });
    }
    let mut k = k.max(1);
    if n < k {
        log::warn!("only {n} samples for a {k}-component mixture; reducing to {n}");
        k = n;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((n, dim), |(i, j)| samples[i][j]);
    let km = kmeans(data.view(), k, 20, &mut rng);
    let all: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
    let (_, global_cov) = row_mean_cov(&all, dim);
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let rows: Vec<&[f64]> = samples
            .iter()
            .zip(&km.assignments)
            .filter(|(_, &a)| a == c)
            .map(|(s, _)| s.as_slice())
            .collect();
        let mean = DVector::from_fn(dim, |j, _| km.centroids[(c, j)]);
        let mut cov = if rows.len() >= 2 {
            row_mean_cov(&rows, dim).1
        } else if rows.is_empty() {
            global_cov.clone()
        } else {
            DMatrix::zeros(dim, dim)
        };
        for a in 0..dim {
            cov[(a, a)] += params.epsilon;
        }
        let weight = (rows.len().max(1)) as f64;
        components.push((weight, mean, cov));
    }
    let total: f64 = components.iter().map(|c| c.0).sum();
    let components = components
        .into_iter()
        .map(|(w, m, c)| Component::new(w / total, m, c))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Shape("initial covariance not positive definite".into()))?;

    let mut state = EmState { components };
    let mut resp = Array2::zeros((n, k));
    let mut ll = e_step(samples, &state.components, &mut resp);
    let mut trace = vec![ll];
    for _ in 0..params.max_iterations {
        let Some(next) = m_step(samples, &resp, &state.components, params.epsilon) else {
            break;
        };
        let mut next_resp = Array2::zeros((n, k));
        let next_ll = e_step(samples, &next, &mut next_resp);
        if !(next_ll >= ll) {
            break;
        }
        let gain = (next_ll - ll) / n as f64;
        state.components = next;
        resp = next_resp;
        ll = next_ll;
        trace.push(ll);
        if gain < params.tolerance {
            break;
        }
    }
    debug_assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    Ok(GmmFit {
        model: Gmm {
            dim,
            components: state.components,
        },
        log_likelihood: trace,
    })
}

/// Appearance models for every object label of one frame.
#[derive(Debug, Clone)]
pub struct PriorBank {
    /// Model for label 0.
    pub ground: Gmm,
    /// Models for labels `1..=O`.
    pub objects: Vec<Gmm>,
    /// Color-only model for label `O + 1`.
    pub sky: Gmm,
}

impl PriorBank {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// Model for object label `label`.
    pub fn model(&self, label: usize) -> &Gmm {
        match label {
            0 => &self.ground,
            l if l <= self.objects.len() => &self.objects[l - 1],
            _ => &self.sky,
        }
    }

    pub fn models(&self) -> impl Iterator<Item = &Gmm> {
        std::iter::once(&self.ground).chain(&self.objects).chain(std::iter::once(&self.sky))
    }
}

/// Fallback sky model: bright blue and near-white.
pub fn default_sky_model() -> Gmm {
    Gmm::new(
        vec![0.5, 0.5],
        vec![vec![135.0, 190.0, 235.0], vec![225.0, 232.0, 240.0]],
        vec![
            vec![400.0, 0.0, 0.0, 0.0, 400.0, 0.0, 0.0, 0.0, 400.0],
            vec![400.0, 0.0, 0.0, 0.0, 400.0, 0.0, 0.0, 0.0, 400.0],
        ],
    )
    .expect("static sky model")
}

/// Color samples from images with boolean sky masks, evenly subsampled to
/// at most `limit` values.
pub fn sky_samples(masks: &[(&ColorImage, &[bool])], limit: usize) -> Vec<[f64; 3]> {
    let all: Vec<[f64; 3]> = masks
        .iter()
        .flat_map(|(img, mask)| {
            img.pixels
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(p, _)| [p[0] as f64, p[1] as f64, p[2] as f64])
        })
        .collect();
    subsample(all, limit)
}

fn subsample<T: Clone>(v: Vec<T>, limit: usize) -> Vec<T> {
    if v.len() <= limit || limit == 0 {
        return v;
    }
    let step = v.len() as f64 / limit as f64;
    (0..limit).map(|i| v[(i as f64 * step) as usize].clone()).collect()
}

/// Most seed samples used per model; larger seed sets are evenly thinned.
const MAX_SAMPLES_PER_MODEL: usize = 3000;

fn seed_samples(features: &FeatureImage, pixels: &[usize], dim: usize) -> Vec<Vec<f64>> {
    let rows = pixels.iter().map(|&p| features.features[p][..dim].to_vec()).collect();
    subsample(rows, MAX_SAMPLES_PER_MODEL)
}

/// Fits the ground, object and sky models for one frame. Under the RGB
/// feature configurations the ground and object models are color-only.
pub fn build_prior_bank(
    features: &FeatureImage,
    hyp: &HypothesisSet,
    sky: &[[f64; 3]],
    config: &PipelineConfig,
) -> Result<PriorBank> {
    let dim = config.features.dim();
    let params = GmmParams::from(config);
    let seed = config.stage_seed("gmm");
    let k = config.gmm_components;
    if hyp.ground_seeds.is_empty() {
        return Err(Error::NoSamples);
    }
    let ground = fit_gmm(&seed_samples(features, &hyp.ground_seeds, dim), k, params, seed)?.model;
    let objects = hyp
        .clusters
        .iter()
        .map(|c| {
            fit_gmm(&seed_samples(features, &c.seeds, dim), k, params, seed ^ c.id as u64).map(|f| f.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let sky = if sky.is_empty() {
        log::warn!("no sky training pixels; using the default sky model");
        default_sky_model()
    } else {
        let rows: Vec<Vec<f64>> = sky.iter().map(|s| s.to_vec()).collect();
        fit_gmm(&rows, k, params, seed ^ 0x5e5e)?.model
    };
    Ok(PriorBank { ground, objects, sky })
}

const BANK_MAGIC: &[u8; 4] = b"RFPB";
const BANK_VERSION: u32 = 1;

fn write_gmm<W: Write>(w: &mut W, g: &Gmm) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(g.dim as u32)?;
    w.write_u32::<LittleEndian>(g.components.len() as u32)?;
    for c in &g.components {
        w.write_f64::<LittleEndian>(c.weight)?;
        for v in c.mean.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in c.covariance.transpose().iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_gmm<R: Read>(r: &mut R) -> Result<Gmm> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let k = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if dim == 0 || dim > 16 || k == 0 || k > 32 {
        return Err(Error::Format(format!("bad mixture header {dim}x{k}")));
    }
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push(r.read_f64::<LittleEndian>().map_err(io)?);
        means.push((0..dim).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>().map_err(io)?);
        covs.push(
            (0..dim * dim)
                .map(|_| r.read_f64::<LittleEndian>())
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?,
        );
    }
    // weights were normalized when written; renormalize against rounding
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Gmm::new(weights, means, covs)
}

impl PriorBank {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.write_u32::<LittleEndian>(BANK_VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.objects.len() as u32).unwrap();
        for g in self.models() {
            write_gmm(&mut out, g).unwrap();
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|e| Error::Format(e.to_string()))?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("not a prior bank".into()));
        }
        let version = bytes.read_u32::<LittleEndian>().map_err(|e| Error::Format(e.to_string()))?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported prior bank version {version}")));
        }
        let o = bytes.read_u32::<LittleEndian>().map_err(|e| Error::Format(e.to_string()))? as usize;
        let ground = read_gmm(&mut bytes)?;
        let objects = (0..o).map(|_| read_gmm(&mut bytes)).collect::<Result<Vec<_>>>()?;
        let sky = read_gmm(&mut bytes)?;
        Ok(Self { ground, objects, sky })
    }
}

/// Cache file for a frame's bank under a given config.
pub fn prior_cache_path(dir: &Path, frame_id: &str, config: &PipelineConfig) -> PathBuf {
    dir.join(format!("{frame_id}-{:016x}.priors", config.fingerprint()))
}

pub fn save_prior_cache(dir: &Path, frame_id: &str, config: &PipelineConfig, bank: &PriorBank) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).at(dir)?;
    let path = prior_cache_path(dir, frame_id, config);
    std::fs::write(&path, bank.to_bytes()).at(&path)?;
    Ok(path)
}

/// Returns the cached bank if one exists for this frame and config.
pub fn load_prior_cache(dir: &Path, frame_id: &str, config: &PipelineConfig) -> Result<Option<PriorBank>> {
    let path = prior_cache_path(dir, frame_id, config);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path).at(&path)?;
    PriorBank::from_bytes(&bytes).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_samples_give_regularized_point_mass() {
        let v = vec![12.0, 40.0, 200.0, 3.0, 90.0, 128.0];
        let samples = vec![v.clone(); 25];
        let fit = fit_gmm(&samples, 1, GmmParams::default(), 1).unwrap();
        assert_eq!(fit.model.means()[0], v);
        let cov = &fit.model.covariances()[0];
        for a in 0..6 {
            for b in 0..6 {
                let expected = if a == b { 1e-3 } else { 0.0 };
                assert!((cov[a * 6 + b] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_samples_is_an_error_and_small_sets_shrink_k() {
        assert!(matches!(fit_gmm(&[], 5, GmmParams::default(), 0), Err(Error::NoSamples)));
        let samples = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 1.0]];
        let fit = fit_gmm(&samples, 5, GmmParams::default(), 0).unwrap();
        assert_eq!(fit.model.num_components(), 3);
    }

    pub(crate) fn two_blobs(seed: u64) -> (Vec<Vec<f64>>, [[f64; 3]; 2], f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[40.0, 60.0, 90.0], [180.0, 150.0, 30.0]];
        let frac = rng.random_range(0.3..0.7);
        let n = 3000;
        let noise = Normal::new(0.0, 4.0).unwrap();
        let samples = (0..n)
            .map(|i| {
                let c = if (i as f64) < frac * n as f64 { centers[0] } else { centers[1] };
                c.iter().map(|m| m + noise.sample(&mut rng)).collect()
            })
            .collect();
        (samples, centers, (frac * n as f64).ceil() / n as f64)
    }

    #[test]
    fn recovers_two_blobs() {
        let (samples, centers, frac) = two_blobs(4);
        let fit = fit_gmm(&samples, 2, GmmParams::default(), 9).unwrap();
        let means = fit.model.means();
        let weights = fit.model.weights();
        for (c, want_w) in centers.iter().zip([frac, 1.0 - frac]) {
            let k = (0..2)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!(means[k].iter().zip(c).all(|(x, y)| (x - y).abs() < 0.5), "{:?}", means[k]);
            assert!((weights[k] - want_w).abs() < 0.05);
        }
        assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0]));
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nll_at_mean_of_standard_gaussian() {
        let mut cov = vec![0.0; 36];
        for i in 0..6 {
            cov[i * 7] = 1.0;
        }
        let g = Gmm::new(vec![1.0], vec![vec![0.0; 6]], vec![cov]).unwrap();
        let nll = g.neg_log_likelihood(&[0.0; 6]).unwrap();
        assert!((nll - 3.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((nll - 5.5136).abs() < 1e-4);
        let far = g.neg_log_likelihood(&[1e6; 6]).unwrap();
        assert!(far.is_finite() && far > 1e11);
        assert!(matches!(
            g.neg_log_likelihood(&[0.0; 3]),
            Err(Error::DimensionMismatch { expected: 6, got: 3 })
        ));
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 2.0
    }

    #[test]
    fn nll_matches_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let d = if rng.random_bool(0.5) { 3 } else { 6 };
            let k = rng.random_range(1..6);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let covs: Vec<DMatrix<f64>> = (0..k).map(|_| random_spd(&mut rng, d)).collect();
            let g = Gmm::new(
                weights.clone(),
                means.clone(),
                covs.iter().map(|c| c.transpose().as_slice().to_vec()).collect(),
            )
            .unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..10.0)).collect();
            // naive density: sum_k w_k (2 pi)^(-d/2) |S|^(-1/2) exp(-m/2)
            let mut p = 0.0;
            for j in 0..k {
                let diff = DVector::from_fn(d, |i, _| x[i] - means[j][i]);
                let inv = covs[j].clone().try_inverse().unwrap();
                let m = (diff.transpose() * inv * &diff)[(0, 0)];
                p += weights[j] * (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0)
                    / covs[j].determinant().sqrt()
                    * (-0.5 * m).exp();
            }
            let want = -p.ln();
            let got = g.neg_log_likelihood(&x).unwrap();
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn bank_round_trips_through_bytes() {
        let (samples, _, _) = two_blobs(8);
        let g = fit_gmm(&samples, 3, GmmParams::default(), 2).unwrap().model;
        let bank = PriorBank {
            ground: g.clone(),
            objects: vec![g.clone(), default_sky_model()],
            sky: default_sky_model(),
        };
        let back = PriorBank::from_bytes(&bank.to_bytes()).unwrap();
        assert_eq!(back.num_objects(), 2);
        let x = [100.0, 100.0, 60.0];
        assert!((back.model(1).nll(&x) - g.nll(&x)).abs() < 1e-9);
        assert!(PriorBank::from_bytes(b"nope").is_err());
    }

    fn scene_with(objects: Vec<crate::synthetic::SceneObject>) -> crate::pipeline::Prepared {
        let mut spec = crate::synthetic::SceneSpec::empty(3);
        spec.objects = objects;
        let frame = crate::io::FrameInput::from(&crate::synthetic::generate(&spec));
        crate::pipeline::prepare(&frame, &crate::config::default_config()).unwrap()
    }

    /// Index of the cluster with the most seeds; grazing returns can split
    /// a box top into its own small cluster.
    fn largest(prep: &crate::pipeline::Prepared) -> usize {
        (0..prep.hyp.num_objects()).max_by_key(|&k| prep.hyp.clusters[k].seeds.len()).expect("a cluster")
    }

    fn block(center: [f64; 2], base: f64, height: f64, color: [f64; 3]) -> crate::synthetic::SceneObject {
        crate::synthetic::SceneObject {
            category: crate::scene::Category::Vehicle,
            shape: crate::synthetic::Shape::Box {
                length: 2.5,
                width: 2.0,
                height,
            },
            center,
            yaw: 0.0,
            base,
            color,
        }
    }

    fn sky() -> Vec<[f64; 3]> {
        vec![[200.0, 220.0, 245.0], [190.0, 215.0, 240.0], [210.0, 225.0, 250.0], [180.0, 205.0, 238.0], [205.0, 222.0, 247.0]]
    }

    #[test]
    fn red_seeds_reject_a_blue_feature() {
        let prep = scene_with(vec![block([10.0, 0.0], -1.73, 1.5, [190.0, 20.0, 20.0])]);
        let config = crate::config::default_config();
        let bank = build_prior_bank(&prep.features, &prep.hyp, &sky(), &config).unwrap();
        let k = largest(&prep);
        let red = prep.features.features[prep.hyp.clusters[k].seeds[0]];
        let mut blue = red;
        blue[..3].copy_from_slice(&[20.0, 20.0, 190.0]);
        let model = bank.model(prep.hyp.clusters[k].id);
        assert!(model.nll(&blue) - model.nll(&red) > 5.0);
    }

    #[test]
    fn rgb_ablation_fits_color_only_models() {
        let prep = scene_with(vec![block([10.0, 2.0], -1.73, 1.5, [40.0, 60.0, 170.0])]);
        let mut config = crate::config::default_config();
        config.features = crate::config::FeatureConfig::Rgb;
        let bank = build_prior_bank(&prep.features, &prep.hyp, &sky(), &config).unwrap();
        assert!(bank.models().all(|g| g.dim() == 3));
    }

    #[test]
    fn ground_model_sits_below_an_elevated_cluster() {
        // a canopy 1.2 m above the road; camera Y points down, so "below"
        // is a larger vertical channel
        let prep = scene_with(vec![block([10.0, 0.0], -0.53, 0.4, [150.0, 110.0, 80.0])]);
        let config = crate::config::default_config();
        let bank = build_prior_bank(&prep.features, &prep.hyp, &sky(), &config).unwrap();
        let roof = bank.model(prep.hyp.clusters[largest(&prep)].id);
        assert!(bank.ground.mean()[4] > roof.mean()[4]);
    }

    fn sample_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (prop::sample::select(vec![3usize, 6]), 1usize..120, 1usize..7).prop_flat_map(|(dim, n, k)| {
            // a few repeated rows exercise the degenerate covariance path
            (prop::collection::vec(prop::collection::vec(0.0f64..255.0, dim), n), Just(k), 0..n).prop_map(
                |(mut rows, k, dup)| {
                    let copy = rows[dup].clone();
                    rows.extend(std::iter::repeat_n(copy, dup.min(10)));
                    (rows, k)
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_fit_is_monotone_normalized_and_positive_definite(
            (samples, k) in sample_sets(),
            seed in any::<u64>(),
            probe in prop::collection::vec(-1e6f64..1e6, 6),
        ) {
            let fit = fit_gmm(&samples, k, GmmParams::default(), seed).unwrap();
            prop_assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let dim = fit.model.dim();
            for cov in fit.model.covariances() {
                prop_assert!(DMatrix::from_row_slice(dim, dim, &cov).cholesky().is_some());
            }
            let nll = fit.model.neg_log_likelihood(&probe[..dim]).unwrap();
            prop_assert!(nll.is_finite());
        }
    }
}
