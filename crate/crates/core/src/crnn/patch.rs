//! Object patch extraction, resizing and flip augmentation.

use crate::error::{Error, Result};
use crate::hypothesis::{ObjectCluster, PatchBox};
use crate::scene::{Category, ColorImage, DepthMap};

/// Side length of every classifier input.
pub const PATCH_SIZE: usize = 67;
const PLANE: usize = PATCH_SIZE * PATCH_SIZE;

/// A 67x67 classifier input, channel-major `[c][y][x]`.
///
/// Color channels hold `value / 255`; the optional depth channel is
/// min-max normalized to `[0, 1]` within the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub channels: usize,
    pub data: Vec<f64>,
    /// Support of the cluster when the patch was masked.
    pub mask: Option<Vec<bool>>,
    pub cluster: usize,
}

impl PatchTensor {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            data: vec![0.0; channels * PLANE],
            mask: None,
            cluster: 0,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * PLANE + y * PATCH_SIZE + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * PLANE..(c + 1) * PLANE]
    }

    /// Horizontal mirror of every channel and of the mask.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    out.data[c * PLANE + y * PATCH_SIZE + x] = self.at(c, y, PATCH_SIZE - 1 - x);
                }
            }
        }
        if let Some(mask) = &self.mask {
            let m = out.mask.as_mut().unwrap();
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    m[y * PATCH_SIZE + x] = mask[y * PATCH_SIZE + PATCH_SIZE - 1 - x];
                }
            }
        }
        out
    }
}

/// A patch with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub tensor: PatchTensor,
    pub category: Category,
}

/// Source coordinate sampled by output index `i` under a half-pixel-center
/// mapping from `n` source samples to [`PATCH_SIZE`] outputs.
fn source_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) * n as f64 / PATCH_SIZE as f64 - 0.5
}

fn bilinear_taps(i: usize, n: usize) -> (usize, usize, f64) {
    let s = source_coord(i, n).clamp(0.0, (n - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize of a `w x h` plane to 67x67.
pub fn resize_plane(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let xs: Vec<_> = (0..PATCH_SIZE).map(|i| bilinear_taps(i, w)).collect();
    let ys: Vec<_> = (0..PATCH_SIZE).map(|i| bilinear_taps(i, h)).collect();
    let mut out = Vec::with_capacity(PLANE);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn nearest_index(i: usize, n: usize) -> usize {
    ((i as f64 + 0.5) * n as f64 / PATCH_SIZE as f64).floor().min((n - 1) as f64) as usize
}

/// Square dilation of the seed set inside `bbox`, row-major over the box.
fn support_mask(bbox: &PatchBox, image_width: usize, seeds: &[usize], radius: usize) -> Vec<bool> {
    let (w, h) = (bbox.width(), bbox.height());
    let mut mask = vec![false; w * h];
    for &p in seeds {
        let (x, y) = (p % image_width, p / image_width);
        if !bbox.contains(x, y) {
            continue;
        }
        let (lx, ly) = (x - bbox.x0, y - bbox.y0);
        for yy in ly.saturating_sub(radius)..=(ly + radius).min(h - 1) {
            for xx in lx.saturating_sub(radius)..=(lx + radius).min(w - 1) {
                mask[yy * w + xx] = true;
            }
        }
    }
    mask
}

/// Options controlling patch construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOptions {
    pub masked: bool,
    pub depth: bool,
    pub mask_dilation: usize,
}

impl PatchOptions {
    pub fn channels(&self) -> usize {
        if self.depth {
            4
        } else {
            3
        }
    }
}

/// Crops `bbox` from the image (and depth), resizes to 67x67 and optionally
/// zeroes everything outside the dilated seed support of `seeds`.
pub fn extract_patch_box(
    image: &ColorImage,
    depth: Option<&DepthMap>,
    bbox: &PatchBox,
    seeds: &[usize],
    cluster: usize,
    options: PatchOptions,
) -> Result<PatchTensor> {
    let (w, h) = (bbox.width(), bbox.height());
    if w <= 1 || h <= 1 || bbox.x1 >= image.width || bbox.y1 >= image.height {
        return Err(Error::DegeneratePatch(w, h));
    }
    let full_mask = options.masked.then(|| support_mask(bbox, image.width, seeds, options.mask_dilation));
    let mut data = Vec::with_capacity(options.channels() * PLANE);
    for c in 0..3 {
        let plane: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| image.get(bbox.x0 + x, bbox.y0 + y)[c] as f64 / 255.0)
            .collect();
        data.extend(resize_plane(&plane, w, h));
    }
    if options.depth {
        let depth = depth.ok_or(Error::NoDepthSupport)?;
        let mut raw = Vec::with_capacity(w * h);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..h {
            for x in 0..w {
                let i = (bbox.y0 + y) * depth.width + bbox.x0 + x;
                let in_support = full_mask.as_ref().is_none_or(|m| m[y * w + x]);
                if depth.is_valid(i) {
                    raw.push(Some(depth.depth[i]));
                    if in_support {
                        lo = lo.min(depth.depth[i]);
                        hi = hi.max(depth.depth[i]);
                    }
                } else {
                    raw.push(None);
                }
            }
        }
        let span = hi - lo;
        let plane: Vec<f64> = raw
            .iter()
            .map(|d| match d {
                Some(d) if span > 0.0 => ((d - lo) / span).clamp(0.0, 1.0),
                _ => 0.0,
            })
            .collect();
        data.extend(resize_plane(&plane, w, h));
    }
    let mask = full_mask.map(|m| {
        let xs: Vec<usize> = (0..PATCH_SIZE).map(|i| nearest_index(i, w)).collect();
        let ys: Vec<usize> = (0..PATCH_SIZE).map(|i| nearest_index(i, h)).collect();
        let m = &m;
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| m[y * w + x])).collect::<Vec<bool>>()
    });
    if let Some(mask) = &mask {
        for (i, v) in data.iter_mut().enumerate() {
            if !mask[i % PLANE] {
                *v = 0.0;
            }
        }
    }
    Ok(PatchTensor {
        channels: options.channels(),
        data,
        mask,
        cluster,
    })
}

/// Patch for an object hypothesis.
pub fn extract_patch(
    image: &ColorImage,
    depth: Option<&DepthMap>,
    cluster: &ObjectCluster,
    options: PatchOptions,
) -> Result<PatchTensor> {
    extract_patch_box(image, depth, &cluster.patch, &cluster.seeds, cluster.id, options)
}

/// Appends a mirrored copy of every Cyclist, Pedestrian and Sitter patch.
pub fn augment_flips(mut patches: Vec<LabeledPatch>) -> Vec<LabeledPatch> {
    let mirrored: Vec<LabeledPatch> = patches
        .iter()
        .filter(|p| matches!(p.category, Category::Cyclist | Category::Pedestrian | Category::Sitter))
        .map(|p| LabeledPatch {
            tensor: p.tensor.flipped(),
            category: p.category,
        })
        .collect();
    patches.extend(mirrored);
    patches
}
