//! Object hypotheses from the lidar scan: a gated RANSAC ground plane,
//! Euclidean clusters of the remaining points, and their image footprint.

mod kdtree;

use std::collections::VecDeque;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::registration::SparseDepth;
use crate::scene::{CameraCalibration, PointCloud};

pub use kdtree::KdTree;

/// Ground plane `normal . p + offset = 0` in the lidar frame, normal pointing up.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inliers: Vec<usize>,
}

impl GroundPlane {
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }
}

/// Axis-aligned bounds in the lidar frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Cuboid {
    fn of(cloud: &PointCloud, members: &[usize]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &m in members {
            let p = cloud.points[m];
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Self { min, max }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn corners(&self) -> [Point3<f64>; 8] {
        let mut out = [Point3::origin(); 8];
        for (n, c) in out.iter_mut().enumerate() {
            *c = Point3::new(
                if n & 1 == 0 { self.min[0] } else { self.max[0] },
                if n & 2 == 0 { self.min[1] } else { self.max[1] },
                if n & 4 == 0 { self.min[2] } else { self.max[2] },
            );
        }
        out
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// A connected set of non-ground points before image attachment.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCluster {
    /// Sorted point indices.
    pub members: Vec<usize>,
    pub cuboid: Cuboid,
    pub centroid: Point3<f64>,
}

/// An object hypothesis with its image footprint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectCluster {
    /// Object label, `1..=O`.
    pub id: usize,
    pub members: Vec<usize>,
    pub cuboid: Cuboid,
    pub patch: PatchBox,
    /// Seed pixels whose registered point belongs to this cluster.
    pub seeds: Vec<usize>,
    /// Lowest member's signed height above the ground plane, meters.
    pub bottom_height: f64,
}

/// Everything the CRF needs to know about the scan geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub width: usize,
    pub height: usize,
    pub ground: GroundPlane,
    pub clusters: Vec<ObjectCluster>,
    /// Seed pixels registered to ground inliers.
    pub ground_seeds: Vec<usize>,
    /// Ground patch is every row strictly below this one.
    pub horizon_row: f64,
}

impl HypothesisSet {
    /// Number of object hypotheses `O`.
    pub fn num_objects(&self) -> usize {
        self.clusters.len()
    }

    pub fn sky_label(&self) -> usize {
        self.clusters.len() + 1
    }

    /// Per-pixel seed owner: object label for seeds of ground/clusters.
    pub fn seed_labels(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.width * self.height];
        for &p in &self.ground_seeds {
            out[p] = Some(0);
        }
        for c in &self.clusters {
            for &p in &c.seeds {
                out[p] = Some(c.id);
            }
        }
        out
    }

    pub fn in_ground_patch(&self, pixel: usize) -> bool {
        (pixel / self.width) as f64 > self.horizon_row
    }

    /// JSON summary used by `inspect`.
    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "width": self.width,
            "height": self.height,
            "ground": {
                "normal": [self.ground.normal.x, self.ground.normal.y, self.ground.normal.z],
                "offset": self.ground.offset,
                "inliers": self.ground.inliers.len(),
                "seeds": self.ground_seeds.len(),
            },
            "horizon_row": self.horizon_row,
            "object_count": self.clusters.len(),
            "clusters": self.clusters.iter().map(|c| serde_json::json!({
                "id": c.id,
                "points": c.members.len(),
                "seeds": c.seeds.len(),
                "cuboid": c.cuboid,
                "patch": c.patch,
                "bottom_height": c.bottom_height,
            })).collect::<Vec<_>>(),
        })
    }
}

fn plane_through(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<(Vector3<f64>, f64)> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let n = n / len;
    Some((n, -n.dot(&a.coords)))
}

/// Total least-squares plane through `points`, normal oriented up (+z).
fn fit_plane(cloud: &PointCloud, idx: &[usize]) -> Option<(Vector3<f64>, f64)> {
    if idx.len() < 3 {
        return None;
    }
    let n = idx.len() as f64;
    let centroid = idx.iter().fold(Vector3::zeros(), |acc, &i| acc + cloud.points[i].coords) / n;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = cloud.points[i].coords - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    let normal = orient_up(normal.normalize());
    Some((normal, -normal.dot(&centroid)))
}

fn orient_up(n: Vector3<f64>) -> Vector3<f64> {
    if n.z < 0.0 {
        -n
    } else {
        n
    }
}

/// RANSAC ground plane restricted to points inside the height gate, then
/// refined by least squares on the consensus set.
pub fn estimate_ground_plane(cloud: &PointCloud, config: &PipelineConfig) -> Result<GroundPlane> {
    let gated: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let below = -cloud.points[i].z;
            below >= config.height_gate_min && below <= config.height_gate_max
        })
        .collect();
    if gated.len() < 3 {
        return Err(Error::GroundNotFound(gated.len()));
    }
    // all samples drawn up front so the search is order independent
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed("ransac"));
    let samples: Vec<[usize; 3]> = (0..config.ransac_iterations)
        .map(|_| {
            let a = rng.random_range(0..gated.len());
            let b = rng.random_range(0..gated.len());
            let c = rng.random_range(0..gated.len());
            [gated[a], gated[b], gated[c]]
        })
        .collect();
    let count_inliers = |n: &Vector3<f64>, d: f64| {
        gated
            .iter()
            .filter(|&&i| (n.dot(&cloud.points[i].coords) + d).abs() <= config.ransac_threshold)
            .count()
    };
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for s in &samples {
        let Some((n, d)) = plane_through(&cloud.points[s[0]], &cloud.points[s[1]], &cloud.points[s[2]]) else {
            continue;
        };
        let count = count_inliers(&n, d);
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, n, d));
        }
    }
    let (_, n, d) = best.ok_or(Error::GroundNotFound(0))?;
    let within = |n: &Vector3<f64>, d: f64| -> Vec<usize> {
        gated
            .iter()
            .copied()
            .filter(|&i| (n.dot(&cloud.points[i].coords) + d).abs() <= config.ransac_threshold)
            .collect()
    };
    let consensus = within(&n, d);
    let (normal, offset) = fit_plane(cloud, &consensus).unwrap_or((orient_up(n), if n.z < 0.0 { -d } else { d }));
    let inliers = within(&normal, offset);
    Ok(GroundPlane {
        normal,
        offset,
        inliers,
    })
}

/// Connected components of `candidates` under `dist <= tolerance`, found
/// with kd-tree radius queries. Clusters are ordered by their smallest
/// point index.
pub fn cluster_points(cloud: &PointCloud, candidates: &[usize], tolerance: f64) -> Vec<PointCluster> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let tree = KdTree::build(sorted.iter().map(|&i| cloud.points[i].coords.into()).collect());
    let mut visited = vec![false; sorted.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    let mut found = Vec::new();
    for start in 0..sorted.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(k) = queue.pop_front() {
            members.push(sorted[k]);
            found.clear();
            tree.within_radius(cloud.points[sorted[k]].coords.into(), tolerance, &mut found);
            for &j in &found {
                if !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        let centroid = Point3::from(
            members.iter().fold(Vector3::zeros(), |acc, &i| acc + cloud.points[i].coords) / members.len() as f64,
        );
        clusters.push(PointCluster {
            cuboid: Cuboid::of(cloud, &members),
            members,
            centroid,
        });
    }
    clusters
}

/// Drops clusters that are too small, or far away and sparse. Thresholds
/// are inclusive: a cluster of exactly `cluster_min_size` points is kept.
pub fn filter_clusters(clusters: Vec<PointCluster>, config: &PipelineConfig) -> Vec<PointCluster> {
    clusters
        .into_iter()
        .filter(|c| {
            let n = c.members.len();
            if n < config.cluster_min_size {
                return false;
            }
            !(c.centroid.coords.norm() > config.far_range && n < config.far_min_size)
        })
        .collect()
}

/// Row where the ground plane's vanishing line crosses the center column,
/// clamped to the image.
pub fn compute_horizon(ground: &GroundPlane, calib: &CameraCalibration, width: usize, height: usize) -> Result<f64> {
    let v = horizon_row_unclamped(ground, calib, (width as f64 - 1.0) / 2.0)?;
    Ok(v.clamp(0.0, height as f64 - 1.0))
}

fn horizon_row_unclamped(ground: &GroundPlane, calib: &CameraCalibration, column: f64) -> Result<f64> {
    let n_cam = calib.rotation * ground.normal;
    let k_inv = calib
        .intrinsic
        .try_inverse()
        .ok_or_else(|| Error::InvalidCalibration("singular intrinsic matrix".into()))?;
    // vanishing line l = K^-T n
    let l = k_inv.transpose() * n_cam;
    let scale = l.norm();
    if l.y.abs() <= 1e-12 * scale.max(1e-300) || scale == 0.0 {
        return Err(Error::HorizonUndefined);
    }
    Ok(-(l.x * column + l.z) / l.y)
}

/// Attaches image geometry to the kept clusters and assembles the
/// hypothesis set. Clusters with no point inside the image or no seed pixel
/// are dropped; survivors are renumbered `1..=O`.
pub fn attach_image_geometry(
    clusters: &[PointCluster],
    cloud: &PointCloud,
    calib: &CameraCalibration,
    sparse: &SparseDepth,
    ground: &GroundPlane,
) -> Result<HypothesisSet> {
    let (w, h) = (sparse.width(), sparse.height());
    let mut owner = vec![usize::MAX; cloud.len()];
    for (k, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            owner[m] = k;
        }
    }
    let mut seeds_of = vec![Vec::new(); clusters.len()];
    let mut is_ground = vec![false; cloud.len()];
    for &i in &ground.inliers {
        is_ground[i] = true;
    }
    let mut ground_seeds = Vec::new();
    for s in &sparse.seeds {
        if is_ground[s.point] {
            ground_seeds.push(s.pixel);
        } else if owner[s.point] != usize::MAX {
            seeds_of[owner[s.point]].push(s.pixel);
        }
    }

    let mut out = Vec::new();
    for (k, c) in clusters.iter().enumerate() {
        let Some(patch) = patch_box(cloud, &c.members, calib, w, h) else {
            log::warn!("cluster with {} points lies outside the image; dropped", c.members.len());
            continue;
        };
        if seeds_of[k].is_empty() {
            log::warn!("cluster with {} points has no visible seed; dropped", c.members.len());
            continue;
        }
        let bottom_height = c
            .members
            .iter()
            .map(|&m| ground.signed_distance(&cloud.points[m]))
            .fold(f64::INFINITY, f64::min);
        out.push(ObjectCluster {
            id: out.len() + 1,
            members: c.members.clone(),
            cuboid: c.cuboid,
            patch,
            seeds: std::mem::take(&mut seeds_of[k]),
            bottom_height,
        });
    }
    let horizon_row = compute_horizon(ground, calib, w, h)?;
    Ok(HypothesisSet {
        width: w,
        height: h,
        ground: ground.clone(),
        clusters: out,
        ground_seeds,
        horizon_row,
    })
}

/// Tight bounds of the members' projections (points in front of the
/// camera), clipped to the image. `None` if no member lands inside.
pub fn patch_box(
    cloud: &PointCloud,
    members: &[usize],
    calib: &CameraCalibration,
    width: usize,
    height: usize,
) -> Option<PatchBox> {
    let mut any_inside = false;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &m in members {
        let pc = calib.to_camera(&cloud.points[m]);
        let Some((u, v)) = calib.project_camera(&pc) else {
            continue;
        };
        let (u, v) = (u.round(), v.round());
        any_inside |= u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64;
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    if !any_inside {
        return None;
    }
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64 - 1.0) as usize;
    Some(PatchBox {
        x0: clip(x0, width),
        y0: clip(y0, height),
        x1: clip(x1, width),
        y1: clip(y1, height),
    })
}

/// Runs ground estimation, clustering, filtering and attachment.
pub fn generate_hypotheses(
    cloud: &PointCloud,
    calib: &CameraCalibration,
    sparse: &SparseDepth,
    config: &PipelineConfig,
) -> Result<HypothesisSet> {
    let ground = estimate_ground_plane(cloud, config)?;
    let mut is_ground = vec![false; cloud.len()];
    for &i in &ground.inliers {
        is_ground[i] = true;
    }
    let rest: Vec<usize> = (0..cloud.len()).filter(|&i| !is_ground[i]).collect();
    let clusters = filter_clusters(cluster_points(cloud, &rest, config.cluster_tolerance), config);
    attach_image_geometry(&clusters, cloud, calib, sparse, &ground)
}
