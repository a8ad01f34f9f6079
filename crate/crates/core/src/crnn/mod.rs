//! Convolutional-recursive patch classifier.
//!
//! A patch passes through 128 k-means-learned 8x8 filters (valid
//! convolution, tanh, 8x8 average pooling at stride 2), then four fixed
//! random recursive trees that merge 3x3 blocks down to a single node each.
//! The four 128-long roots form the 512-long feature fed to a trained
//! softmax over the seven recognized categories.

mod network;
mod patch;
mod pretrain;
mod softmax;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use network::{
    average_pool, cnn_forward, convolve, rnn_forward, Activation, FilterBank, RnnWeights, CONV_SIZE, FEATURE_LEN,
    FILTER_SIZE, NUM_FILTERS, NUM_RNNS, POOLED_SIZE,
};
pub use patch::{augment_flips, extract_patch, extract_patch_box, resize_plane, LabeledPatch, PatchOptions, PatchTensor, PATCH_SIZE};
pub use pretrain::{contrast_normalize, pretrain_filters, sample_crops, unit_filters, Pretrained, Zca};
pub use softmax::{accuracy, loss_and_gradient, train_softmax, SoftmaxLayer, SoftmaxParams};

use crate::config::PipelineConfig;
use crate::error::{Error, IoContext, Result};
use crate::scene::Category;

/// Number of classes the softmax separates.
pub const NUM_CLASSES: usize = 7;

impl From<&PipelineConfig> for PatchOptions {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            masked: c.patch_masked,
            depth: c.patch_depth,
            mask_dilation: c.mask_dilation,
        }
    }
}

/// Per-patch class probabilities over [`Category::RECOGNIZED`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<[f64; NUM_CLASSES]>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Score of row `k` for `category`; zero for ground and sky.
    pub fn score(&self, k: usize, category: Category) -> f64 {
        category.recognized_index().map_or(0.0, |i| self.rows[k][i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnnModel {
    pub options: PatchOptions,
    pub filters: FilterBank,
    pub rnns: Vec<RnnWeights>,
    pub softmax: SoftmaxLayer,
}

impl CrnnModel {
    /// Recursive feature of one patch.
    pub fn features(&self, patch: &PatchTensor) -> Result<Array1<f64>> {
        let maps = cnn_forward(patch, &self.filters)?;
        rnn_forward(&maps, &self.rnns)
    }

    /// Features of many patches as rows, computed in parallel.
    pub fn feature_matrix(&self, patches: &[&PatchTensor]) -> Result<Array2<f64>> {
        let rows = patches.par_iter().map(|p| self.features(p)).collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows.len(), FEATURE_LEN));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
            dst.assign(&src);
        }
        Ok(out)
    }

    pub fn probabilities(&self, patch: &PatchTensor) -> Result<[f64; NUM_CLASSES]> {
        let f = self.features(patch)?;
        let p = self.softmax.probabilities(f.view());
        let mut out = [0.0; NUM_CLASSES];
        out.iter_mut().zip(p.iter()).for_each(|(o, v)| *o = *v);
        Ok(out)
    }

    pub fn predict(&self, patch: &PatchTensor) -> Result<Category> {
        let p = self.probabilities(patch)?;
        let best = (0..NUM_CLASSES).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
        Ok(Category::RECOGNIZED[best])
    }
}

/// One row of class probabilities per patch, in input order.
pub fn score_patches(patches: &[PatchTensor], model: &CrnnModel) -> Result<ScoreTable> {
    let rows = patches.par_iter().map(|p| model.probabilities(p)).collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { rows })
}

/// Outcome of fitting the classifier.
#[derive(Debug, Clone)]
pub struct TrainedCrnn {
    pub model: CrnnModel,
    pub kmeans_objective: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

/// Learns filters from random crops, draws the recursive weights and trains
/// the softmax on `train` (which should already include flip augmentation).
pub fn train_crnn(train: &[LabeledPatch], config: &PipelineConfig) -> Result<TrainedCrnn> {
    let options = PatchOptions::from(config);
    if train.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if let Some(p) = train.iter().find(|p| p.tensor.channels != options.channels()) {
        return Err(Error::DimensionMismatch {
            expected: options.channels(),
            got: p.tensor.channels,
        });
    }
    let labels = train
        .iter()
        .map(|p| {
            p.category
                .recognized_index()
                .ok_or_else(|| Error::Other(format!("{} is not a recognized class", p.category.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    let tensors: Vec<&PatchTensor> = train.iter().map(|p| &p.tensor).collect();

    let mut crop_rng = ChaCha8Rng::seed_from_u64(config.stage_seed("crops"));
    let crops = sample_crops(&tensors, config.pretrain_crops, &mut crop_rng)?;
    let pre = pretrain_filters(&crops, config.kmeans_iterations, config.stage_seed("filters"))?;
    let filters = FilterBank::new(options.channels(), unit_filters(&pre.centroids), Array1::zeros(NUM_FILTERS))?;
    let mut rnn_rng = ChaCha8Rng::seed_from_u64(config.stage_seed("rnn"));
    let rnns = (0..NUM_RNNS).map(|_| RnnWeights::random(&mut rnn_rng)).collect();
    let mut model = CrnnModel {
        options,
        filters,
        rnns,
        softmax: SoftmaxLayer::zeros(NUM_CLASSES, FEATURE_LEN),
    };
    let x = model.feature_matrix(&tensors)?;
    let params = SoftmaxParams {
        learning_rate: config.softmax_learning_rate,
        epochs: config.softmax_epochs,
        batch: config.softmax_batch,
        l2: config.softmax_l2,
        seed: config.stage_seed("softmax"),
    };
    let (softmax, loss_curve) = train_softmax(x.view(), &labels, NUM_CLASSES, params)?;
    model.softmax = softmax;
    let train_accuracy = accuracy(&model.softmax, x.view(), &labels);
    Ok(TrainedCrnn {
        model,
        kmeans_objective: pre.objective,
        loss_curve,
        train_accuracy,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"RFCN";
const MODEL_VERSION: u32 = 1;

fn write_f32s<'a, W: Write>(w: &mut W, values: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for v in values {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f32::<LittleEndian>().map(f64::from)).collect()
}

impl CrnnModel {
    /// Versioned little-endian blob: magic, header of shapes, then f32
    /// tensors in row-major order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u8(self.options.masked as u8)?;
        w.write_u8(self.options.depth as u8)?;
        w.write_u32::<LittleEndian>(self.options.mask_dilation as u32)?;
        let (nf, fd) = self.filters.weights.dim();
        let (rr, rc) = self.rnns.first().map_or((0, 0), |r| r.weights.dim());
        let (sc, sf) = self.softmax.weights.dim();
        for v in [self.filters.channels, nf, fd, self.rnns.len(), rr, rc, sc, sf] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        write_f32s(w, self.filters.weights.as_standard_layout().iter())?;
        write_f32s(w, self.filters.bias.iter())?;
        for r in &self.rnns {
            write_f32s(w, r.weights.as_standard_layout().iter())?;
        }
        write_f32s(w, self.softmax.weights.as_standard_layout().iter())?;
        write_f32s(w, self.softmax.bias.iter())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a classifier model".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let masked = r.read_u8().map_err(fmt)? != 0;
        let depth = r.read_u8().map_err(fmt)? != 0;
        let mask_dilation = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut h = [0usize; 8];
        for v in h.iter_mut() {
            *v = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        }
        let [channels, nf, fd, nr, rr, rc, sc, sf] = h;
        if nf != NUM_FILTERS || fd != channels * FILTER_SIZE * FILTER_SIZE || nr > 16 || sc > 64 || sf > 1 << 16 {
            return Err(Error::Format(format!("implausible model header {h:?}")));
        }
        let arr2 = |r: &mut R, rows: usize, cols: usize| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_vec((rows, cols), read_f32s(r, rows * cols).map_err(fmt)?).expect("sized"))
        };
        let weights = arr2(r, nf, fd)?;
        let bias = Array1::from(read_f32s(r, nf).map_err(fmt)?);
        let filters = FilterBank::new(channels, weights, bias)?;
        let rnns = (0..nr)
            .map(|_| {
                arr2(r, rr, rc).map(|weights| RnnWeights {
                    weights,
                    activation: Activation::Tanh,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let softmax = SoftmaxLayer {
            weights: arr2(r, sc, sf)?,
            bias: Array1::from(read_f32s(r, sc).map_err(fmt)?),
        };
        Ok(Self {
            options: PatchOptions {
                masked,
                depth,
                mask_dilation,
            },
            filters,
            rnns,
            softmax,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        self.write_to(&mut f).at(path)?;
        f.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).at(path)?);
        Self::read_from(&mut f)
    }
}
