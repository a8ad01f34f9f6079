//! Lidar-to-image registration: sparse depth from projection, image-guided
//! densification, and the per-pixel `(R, G, B, X, Y, Z)` feature image.

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::scene::{AxisScaling, CameraCalibration, ColorImage, DepthMap, DepthSource, FeatureImage, PointCloud};

/// A pixel with a registered lidar return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub pixel: usize,
    /// Index of the nearest point that landed on this pixel.
    pub point: usize,
}

/// Depth at registered pixels only.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    pub depth: DepthMap,
    /// One entry per valid pixel, ordered by pixel index.
    pub seeds: Vec<Seed>,
    /// For each pixel, the point kept there (if any).
    pub pixel_point: Vec<Option<usize>>,
}

impl SparseDepth {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }
}

/// Pixel hit by a lidar-frame point, with its camera depth.
pub fn project_point(
    calib: &CameraCalibration,
    p: &Point3<f64>,
    width: usize,
    height: usize,
) -> Option<(usize, usize, f64)> {
    let pc = calib.to_camera(p);
    let (u, v) = calib.project_camera(&pc)?;
    let (x, y) = (u.round(), v.round());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as usize, y as usize, pc.z))
}

/// Projects the cloud into a `width x height` image. Points behind the
/// camera or outside the image are dropped; when several points hit one
/// pixel the nearest wins.
pub fn project_points(
    cloud: &PointCloud,
    calib: &CameraCalibration,
    width: usize,
    height: usize,
) -> Result<SparseDepth> {
    calib.validate()?;
    let mut depth = DepthMap::empty(width, height);
    let mut pixel_point = vec![None; width * height];
    for (j, p) in cloud.points.iter().enumerate() {
        let Some((x, y, z)) = project_point(calib, p, width, height) else {
            continue;
        };
        let i = y * width + x;
        if depth.source[i] == DepthSource::Missing || z < depth.depth[i] {
            depth.depth[i] = z;
            depth.source[i] = DepthSource::Seed;
            pixel_point[i] = Some(j);
        }
    }
    let seeds = pixel_point
        .iter()
        .enumerate()
        .filter_map(|(pixel, p)| p.map(|point| Seed { pixel, point }))
        .collect();
    Ok(SparseDepth {
        depth,
        seeds,
        pixel_point,
    })
}

/// Bandwidths of the joint-bilateral fill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpsampleParams {
    pub sigma_spatial: f64,
    pub sigma_range: f64,
}

impl Default for UpsampleParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 6.0,
            sigma_range: 20.0,
        }
    }
}

/// Minimum accumulated weight for a pixel to be filled in the current pass.
const MIN_SUPPORT: f64 = 0.05;

/// Densifies `sparse` guided by `image`.
///
/// Every pass fills the missing pixels whose window holds enough
/// color-compatible support, each with the normalized joint-bilateral mean
/// of the depths already known at the start of the pass. The window doubles
/// when a pass makes no progress and halves after one that does; once it
/// reaches four times its base size the support threshold is dropped and
/// the remaining holes fill inward by spatial weight alone. Seeds are never
/// modified and every filled value is a convex combination of known depths.
pub fn upsample_depth(sparse: &SparseDepth, image: &ColorImage, params: UpsampleParams) -> Result<DepthMap> {
    let (w, h) = (sparse.width(), sparse.height());
    if image.width != w || image.height != h {
        return Err(Error::Shape(format!(
            "depth {}x{} vs image {}x{}",
            w, h, image.width, image.height
        )));
    }
    if sparse.depth.valid_count() == 0 {
        return Err(Error::NoDepthSupport);
    }
    let mut out = sparse.depth.clone();
    let base_radius = params.sigma_spatial.ceil().max(1.0) as usize;
    let mut radius = base_radius;
    let mut threshold = MIN_SUPPORT;
    let inv_2ss = 1.0 / (2.0 * params.sigma_spatial * params.sigma_spatial);
    let inv_2sr = 1.0 / (2.0 * params.sigma_range * params.sigma_range);
    let max_radius = w.max(h);
    // beyond this window color-incompatible holes (sky) fill by distance
    let color_cap = (4 * base_radius).min(max_radius);

    let mut missing: Vec<usize> = (0..w * h).filter(|&i| !out.is_valid(i)).collect();
    while !missing.is_empty() {
        let mut filled = Vec::new();
        for &i in &missing {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let c0 = image.pixels[i];
            let r = radius as isize;
            let mut sum_w = 0.0;
            let mut sum_wd = 0.0;
            let mut sum_s = 0.0;
            let mut sum_sd = 0.0;
            let mut reference = None;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let j = ny as usize * w + nx as usize;
                    if !out.is_valid(j) {
                        continue;
                    }
                    let d = out.depth[j];
                    let d_ref = *reference.get_or_insert(d);
                    lo = lo.min(d);
                    hi = hi.max(d);
                    let ds2 = ((nx - x) * (nx - x) + (ny - y) * (ny - y)) as f64;
                    let c1 = image.pixels[j];
                    let dc2: f64 = (0..3)
                        .map(|k| {
                            let t = c0[k] as f64 - c1[k] as f64;
                            t * t
                        })
                        .sum();
                    let ws = (-ds2 * inv_2ss).exp();
                    let wgt = ws * (-dc2 * inv_2sr).exp();
                    sum_w += wgt;
                    sum_wd += wgt * (d - d_ref);
                    sum_s += ws;
                    sum_sd += ws * (d - d_ref);
                }
            }
            let Some(d_ref) = reference else { continue };
            let value = if sum_w >= threshold && sum_w > 0.0 {
                d_ref + sum_wd / sum_w
            } else if threshold == 0.0 && sum_s > 0.0 {
                // color weights underflowed everywhere; fall back to distance only
                d_ref + sum_sd / sum_s
            } else if threshold == 0.0 {
                d_ref
            } else {
                continue;
            };
            filled.push((i, value.clamp(lo, hi)));
        }
        if filled.is_empty() {
            if threshold > 0.0 && radius >= color_cap {
                threshold = 0.0;
            } else {
                radius = (radius * 2).min(max_radius);
            }
            continue;
        }
        for &(i, d) in &filled {
            out.depth[i] = d;
            out.source[i] = DepthSource::Interpolated;
        }
        // shrink gradually: large holes (sky) would otherwise regrow the
        // window from the base radius on every pass
        radius = (radius / 2).max(base_radius);
        missing.retain(|&i| !out.is_valid(i));
    }
    Ok(out)
}

/// Builds the feature image from a dense depth map. X, Y and Z are the
/// camera-frame coordinates of the back-projected pixel, each mapped
/// affinely onto `[0, 255]` by its per-frame range.
pub fn build_feature_image(image: &ColorImage, dense: &DepthMap, calib: &CameraCalibration) -> Result<FeatureImage> {
    let (w, h) = (image.width, image.height);
    if dense.width != w || dense.height != h {
        return Err(Error::Shape("depth and image dimensions differ".into()));
    }
    if !dense.is_dense() {
        return Err(Error::Shape("depth map is not dense".into()));
    }
    let points: Vec<Point3<f64>> = (0..w * h)
        .map(|i| calib.back_project((i % w) as f64, (i / w) as f64, dense.depth[i]))
        .collect();
    let axis = |k: usize| {
        let (min, max) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[k]), hi.max(p[k]))
        });
        AxisScaling { min, max }
    };
    let scaling = [axis(0), axis(1), axis(2)];
    let features = points
        .iter()
        .zip(&image.pixels)
        .map(|(p, rgb)| {
            [
                rgb[0] as f64,
                rgb[1] as f64,
                rgb[2] as f64,
                scaling[0].apply(p.x),
                scaling[1].apply(p.y),
                scaling[2].apply(p.z),
            ]
        })
        .collect();
    Ok(FeatureImage {
        width: w,
        height: h,
        features,
        scaling,
    })
}
