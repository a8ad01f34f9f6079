//! Deterministic road scenes with exact ground truth.
//!
//! A scene is a ground plane, a sky, and boxes and vertical cylinders
//! standing on the ground. The lidar sits at the origin of its frame
//! (x forward, y left, z up) and casts rings of rays; the camera renders the
//! same geometry through a pinhole. Every pixel's truth is the first surface
//! its center ray hits.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scene::{CameraCalibration, Category, ColorImage, LabelMaps, PointCloud};

const EPS: f64 = 1e-9;

/// Solid shape resting on its base, in object coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Extents along the object's heading, across it, and up.
    Box { length: f64, width: f64, height: f64 },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { height, .. } | Shape::Cylinder { height, .. } => height,
        }
    }

    /// Radius of a vertical cylinder enclosing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { length, width, .. } => 0.5 * length.hypot(width),
            Shape::Cylinder { radius, .. } => radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub shape: Shape,
    /// Footprint center, lidar frame.
    pub center: [f64; 2],
    /// Heading about the vertical axis, radians.
    pub yaw: f64,
    /// Height of the shape's bottom face, lidar frame.
    pub base: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    fn to_local(&self, p: &Point3<f64>) -> Vector3<f64> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), -self.yaw);
        r * Vector3::new(p.x - self.center[0], p.y - self.center[1], p.z - self.base)
    }

    fn to_local_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), -self.yaw) * d
    }

    fn to_world_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw) * d
    }

    /// Nearest hit along `o + t d` with `t > EPS`, and the outward normal.
    pub fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let p = self.to_local(o);
        let v = self.to_local_dir(d);
        let hit = match self.shape {
            Shape::Box { length, width, height } => {
                slab(&p, &v, [-length / 2.0, -width / 2.0, 0.0], [length / 2.0, width / 2.0, height])
            }
            Shape::Cylinder { radius, height } => cylinder(&p, &v, radius, height),
        };
        hit.map(|(t, n)| (t, self.to_world_dir(&n)))
    }

    /// Distance from `p` to the shape's surface (zero on the surface).
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        let q = self.to_local(p);
        match self.shape {
            Shape::Box { length, width, height } => {
                let half = Vector3::new(length / 2.0, width / 2.0, height / 2.0);
                let c = Vector3::new(q.x, q.y, q.z - height / 2.0);
                let outside = Vector3::new(
                    (c.x.abs() - half.x).max(0.0),
                    (c.y.abs() - half.y).max(0.0),
                    (c.z.abs() - half.z).max(0.0),
                );
                let inside = (c.x.abs() - half.x).max(c.y.abs() - half.y).max(c.z.abs() - half.z).min(0.0);
                (outside.norm() + inside).abs()
            }
            Shape::Cylinder { radius, height } => {
                let radial = q.x.hypot(q.y) - radius;
                let axial = (q.z - height / 2.0).abs() - height / 2.0;
                let outside = radial.max(0.0).hypot(axial.max(0.0));
                (outside + radial.max(axial).min(0.0)).abs()
            }
        }
    }

    /// The eight corners of the enclosing box (a cylinder's bounding box).
    pub fn corners(&self) -> [Point3<f64>; 8] {
        let (hl, hw, h) = match self.shape {
            Shape::Box { length, width, height } => (length / 2.0, width / 2.0, height),
            Shape::Cylinder { radius, height } => (radius, radius, height),
        };
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let mut out = [Point3::origin(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = Vector3::new(
                if i & 1 == 0 { -hl } else { hl },
                if i & 2 == 0 { -hw } else { hw },
                if i & 4 == 0 { 0.0 } else { h },
            );
            let w = r * local;
            *c = Point3::new(self.center[0] + w.x, self.center[1] + w.y, self.base + w.z);
        }
        out
    }
}

fn slab(p: &Vector3<f64>, v: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut normal = Vector3::zeros();
    for a in 0..3 {
        if v[a].abs() < 1e-15 {
            if p[a] < lo[a] || p[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut near, mut far) = ((lo[a] - p[a]) / v[a], (hi[a] - p[a]) / v[a]);
        let mut sign = -1.0;
        if near > far {
            std::mem::swap(&mut near, &mut far);
            sign = 1.0;
        }
        if near > t0 {
            t0 = near;
            normal = Vector3::zeros();
            normal[a] = sign;
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > EPS).then_some((t0, normal))
}

fn cylinder(p: &Vector3<f64>, v: &Vector3<f64>, r: f64, h: f64) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut offer = |t: f64, n: Vector3<f64>| {
        if t > EPS && best.is_none_or(|(b, _)| t < b) {
            best = Some((t, n));
        }
    };
    let a = v.x * v.x + v.y * v.y;
    if a > 1e-15 {
        let b = 2.0 * (p.x * v.x + p.y * v.y);
        let c = p.x * p.x + p.y * p.y - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = p.z + t * v.z;
            if (0.0..=h).contains(&z) {
                let q = p + v * t;
                offer(t, Vector3::new(q.x / r, q.y / r, 0.0));
            }
        }
    }
    if v.z.abs() > 1e-15 {
        for (plane, nz) in [(h, 1.0), (0.0, -1.0)] {
            let t = (plane - p.z) / v.z;
            let q = p + v * t;
            if q.x * q.x + q.y * q.y <= r * r {
                offer(t, Vector3::new(0.0, 0.0, nz));
            }
        }
    }
    best
}

/// Darker albedo on an axis-aligned ground rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowPatch {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Albedo multiplier in `(0, 1]`.
    pub factor: f64,
}

/// Difficulty tier of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    /// No sensor noise, few objects.
    Clean,
    /// Color and range noise, slight ground tilt. This and the later tiers
    /// also carry surface texture and lane markings.
    Noisy,
    /// Shadow-like dark patches on the road.
    Shadows,
    /// Many objects with occlusion.
    Clutter,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Clean, Tier::Noisy, Tier::Shadows, Tier::Clutter];
}

/// Everything that determines a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub tier: Tier,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Sensor height above the ground at the origin, meters.
    pub lidar_height: f64,
    /// Ground pitch about the lateral axis, radians (positive rises ahead).
    pub ground_tilt: f64,
    /// Camera center in the lidar frame.
    pub camera_offset: [f64; 3],
    /// Downward camera pitch, radians.
    pub camera_pitch: f64,
    pub rings: usize,
    /// Ring elevations span `[min, max]`, degrees.
    pub ring_elevation: [f64; 2],
    pub azimuth_steps: usize,
    /// Horizontal sweep centered on the forward axis, degrees.
    pub azimuth_span: f64,
    pub max_range: f64,
    pub depth_noise: f64,
    pub color_noise: f64,
    pub road_color: [f64; 3],
    /// Amplitude of the multiplicative albedo texture; 0 renders flat
    /// surfaces.
    #[serde(default)]
    pub texture: f64,
    /// Dashed white lane lines at these lateral offsets, meters.
    #[serde(default)]
    pub lanes: Vec<f64>,
    pub objects: Vec<SceneObject>,
    pub shadows: Vec<ShadowPatch>,
}

impl SceneSpec {
    /// Ground, sky and sensors only.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            tier: Tier::Clean,
            width: 200,
            height: 64,
            focal: 100.0,
            lidar_height: 1.73,
            ground_tilt: 0.0,
            camera_offset: [0.0, 0.0, -0.08],
            camera_pitch: 0.0,
            rings: 64,
            ring_elevation: [-24.8, 2.0],
            azimuth_steps: 360,
            azimuth_span: 120.0,
            max_range: 80.0,
            depth_noise: 0.0,
            color_noise: 0.0,
            road_color: [92.0, 92.0, 98.0],
            texture: 0.0,
            lanes: Vec::new(),
            objects: Vec::new(),
            shadows: Vec::new(),
        }
    }

    pub fn calibration(&self) -> CameraCalibration {
        let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), self.camera_pitch);
        let rotation = pitch.matrix() * base;
        let c = Vector3::from(self.camera_offset);
        let k = Matrix3::new(
            self.focal,
            0.0,
            (self.width as f64 - 1.0) / 2.0,
            0.0,
            self.focal,
            (self.height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraCalibration::new(k, rotation, -(rotation * c))
    }

    /// Unit normal (pointing up) and offset of the ground plane `n.p + d = 0`.
    pub fn ground_plane(&self) -> (Vector3<f64>, f64) {
        let t = self.ground_tilt;
        let n = Vector3::new(-t.sin(), 0.0, t.cos());
        (n, self.lidar_height * t.cos())
    }

    /// Ground height below `(x, y)`.
    pub fn ground_z(&self, x: f64, _y: f64) -> f64 {
        -self.lidar_height + x * self.ground_tilt.tan()
    }
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Ground(f64),
    Object(usize, f64, Vector3<f64>),
    Sky,
}

fn cast(spec: &SceneSpec, o: &Point3<f64>, d: &Vector3<f64>) -> Hit {
    let mut best = Hit::Sky;
    let mut best_t = f64::INFINITY;
    let (n, off) = spec.ground_plane();
    let denom = n.dot(d);
    if denom < -1e-15 {
        let t = -(n.dot(&o.coords) + off) / denom;
        if t > EPS {
            best = Hit::Ground(t);
            best_t = t;
        }
    }
    for (k, obj) in spec.objects.iter().enumerate() {
        if let Some((t, normal)) = obj.intersect(o, d) {
            if t < best_t {
                best_t = t;
                best = Hit::Object(k, t, normal);
            }
        }
    }
    best
}

/// One generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub spec: SceneSpec,
    pub image: ColorImage,
    pub cloud: PointCloud,
    pub calib: CameraCalibration,
    /// Object 0 is the ground, `k` the `k`-th spec object, last the sky.
    pub truth: LabelMaps,
    pub sky_mask: Vec<bool>,
    /// Truth object label of every lidar point.
    pub point_objects: Vec<u16>,
}

fn sky_color(elevation: f64) -> [f64; 3] {
    let s = (elevation / 0.5).clamp(0.0, 1.0);
    [215.0 - 75.0 * s, 230.0 - 45.0 * s, 245.0 - 10.0 * s]
}

const LIGHT: [f64; 3] = [0.3, 0.5, 0.8];

const LANE_COLOR: [f64; 3] = [212.0, 212.0, 204.0];
const LANE_HALF_WIDTH: f64 = 0.08;
/// Dash length and period along the road, meters.
const LANE_DASH: (f64, f64) = (3.0, 6.0);
/// Texture lattice spacing, meters.
const TEXTURE_CELL: f64 = 0.4;

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let mut h = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Bilinear value noise in `[-1, 1]` over surface coordinates in meters.
fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (u, v) = (u / TEXTURE_CELL, v / TEXTURE_CELL);
    let (i, j) = (u.floor(), v.floor());
    let (fu, fv) = (u - i, v - j);
    let (i, j) = (i as i64, j as i64);
    let a = lattice(seed, i, j) * (1.0 - fu) + lattice(seed, i + 1, j) * fu;
    let b = lattice(seed, i, j + 1) * (1.0 - fu) + lattice(seed, i + 1, j + 1) * fu;
    a * (1.0 - fv) + b * fv
}

fn on_lane(spec: &SceneSpec, x: f64, y: f64) -> bool {
    spec.lanes.iter().any(|&l| (y - l).abs() < LANE_HALF_WIDTH) && x.rem_euclid(LANE_DASH.1) < LANE_DASH.0
}

/// Renders and scans `spec`.
pub fn generate(spec: &SceneSpec) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f4a3);
    let calib = spec.calibration();
    let (w, h) = (spec.width, spec.height);
    let n_obj = spec.objects.len();
    let sky_label = (n_obj + 1) as u16;
    let cam = calib.to_lidar(&Point3::origin());
    let light = Vector3::from(LIGHT).normalize();

    let mut pixels = Vec::with_capacity(w * h);
    let mut objects = Vec::with_capacity(w * h);
    let mut categories = Vec::with_capacity(w * h);
    let mut sky_mask = Vec::with_capacity(w * h);
    let color_noise = Normal::new(0.0, spec.color_noise.max(0.0)).expect("finite sigma");
    for y in 0..h {
        for x in 0..w {
            let pc = calib.back_project(x as f64, y as f64, 1.0);
            let d = (calib.rotation.transpose() * pc.coords).normalize();
            let (label, category, rgb) = match cast(spec, &cam, &d) {
                Hit::Ground(t) => {
                    let p = cam + d * t;
                    let shade = spec
                        .shadows
                        .iter()
                        .filter(|s| p.x >= s.min[0] && p.x <= s.max[0] && p.y >= s.min[1] && p.y <= s.max[1])
                        .map(|s| s.factor)
                        .fold(1.0, f64::min);
                    let albedo = if on_lane(spec, p.x, p.y) { LANE_COLOR } else { spec.road_color };
                    let shade = shade * (1.0 + spec.texture * value_noise(spec.seed, p.x, p.y));
                    (0, Category::Road, albedo.map(|c| c * shade))
                }
                Hit::Object(k, t, n) => {
                    let o = &spec.objects[k];
                    let p = cam + d * t;
                    let grain = value_noise(spec.seed ^ (k as u64 + 1), p.x + p.y, p.z);
                    let shade = (0.65 + 0.35 * n.dot(&light).max(0.0)) * (1.0 + spec.texture * grain);
                    ((k + 1) as u16, o.category, o.color.map(|c| c * shade))
                }
                Hit::Sky => (sky_label, Category::Sky, sky_color(d.z.asin())),
            };
            let rgb = rgb.map(|c| {
                let noisy = if spec.color_noise > 0.0 { c + color_noise.sample(&mut rng) } else { c };
                noisy.round().clamp(0.0, 255.0) as u8
            });
            pixels.push(rgb);
            objects.push(label);
            categories.push(category);
            sky_mask.push(label == sky_label);
        }
    }

    let range_noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    let mut point_objects = Vec::new();
    let origin = Point3::origin();
    for ring in 0..spec.rings {
        let [lo, hi] = spec.ring_elevation;
        let el = if spec.rings > 1 {
            lo + (hi - lo) * ring as f64 / (spec.rings - 1) as f64
        } else {
            lo
        }
        .to_radians();
        for step in 0..spec.azimuth_steps {
            let az = (-spec.azimuth_span / 2.0 + spec.azimuth_span * (step as f64 + 0.5) / spec.azimuth_steps as f64)
                .to_radians();
            let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let (label, t) = match cast(spec, &origin, &d) {
                Hit::Ground(t) => (0, t),
                Hit::Object(k, t, _) => ((k + 1) as u16, t),
                Hit::Sky => continue,
            };
            if t > spec.max_range {
                continue;
            }
            let t = if spec.depth_noise > 0.0 { t + range_noise.sample(&mut rng) } else { t };
            points.push(origin + d * t);
            point_objects.push(label);
        }
    }

    let image = ColorImage::new(w, h, pixels).expect("rendered image matches its size");
    Frame {
        id: format!("{:06}", spec.seed),
        spec: spec.clone(),
        image,
        cloud: PointCloud::new(points),
        calib,
        truth: LabelMaps {
            width: w,
            height: h,
            num_objects: n_obj,
            objects,
            categories,
        },
        sky_mask,
        point_objects,
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 255.0))
}

/// Class-typical shape, color and lateral placement band `[|y| min, max]`.
fn sample_object(rng: &mut ChaCha8Rng, category: Category) -> (Shape, [f64; 3], [f64; 2]) {
    let mut u = |a: f64, b: f64| rng.random_range(a..b);
    let (shape, color, band) = match category {
        Category::Vehicle => {
            let shape = Shape::Box {
                length: u(3.6, 4.6),
                width: u(1.6, 1.9),
                height: u(1.35, 1.7),
            };
            (shape, [0.0; 3], [0.0, 6.0])
        }
        Category::Cyclist => (
            Shape::Box {
                length: u(1.5, 1.9),
                width: u(0.5, 0.7),
                height: u(1.6, 1.85),
            },
            [205.0, 120.0, 40.0],
            [0.0, 6.0],
        ),
        Category::Pedestrian => (
            Shape::Cylinder {
                radius: u(0.28, 0.35),
                height: u(1.6, 1.9),
            },
            [125.0, 60.0, 145.0],
            [2.0, 8.0],
        ),
        Category::Sitter => (
            Shape::Box {
                length: u(0.7, 0.9),
                width: u(0.6, 0.8),
                height: u(1.1, 1.3),
            },
            [55.0, 135.0, 135.0],
            [3.0, 8.0],
        ),
        Category::Pole => (
            Shape::Cylinder {
                radius: u(0.14, 0.2),
                height: u(4.0, 6.0),
            },
            [150.0, 150.0, 140.0],
            [4.0, 9.0],
        ),
        Category::Greenbelt => (
            Shape::Box {
                length: u(3.0, 7.0),
                width: u(0.8, 1.4),
                height: u(0.6, 1.0),
            },
            [50.0, 140.0, 50.0],
            [4.0, 8.0],
        ),
        _ => (
            Shape::Box {
                length: u(6.0, 14.0),
                width: u(1.0, 2.5),
                height: u(2.5, 4.5),
            },
            [165.0, 125.0, 90.0],
            [7.0, 11.0],
        ),
    };
    let color = if category == Category::Vehicle {
        const PAINT: [[f64; 3]; 4] = [[170.0, 35.0, 35.0], [35.0, 55.0, 165.0], [190.0, 190.0, 198.0], [45.0, 45.0, 52.0]];
        let paint = PAINT[rng.random_range(0..PAINT.len())];
        jitter(rng, paint, 12.0)
    } else {
        jitter(rng, color, 15.0)
    };
    (shape, color, band)
}

const CLASS_WEIGHTS: [(Category, f64); 7] = [
    (Category::Vehicle, 0.28),
    (Category::Cyclist, 0.1),
    (Category::Pedestrian, 0.16),
    (Category::Sitter, 0.08),
    (Category::Pole, 0.12),
    (Category::Greenbelt, 0.1),
    (Category::Roadside, 0.16),
];

fn pick_category(rng: &mut ChaCha8Rng) -> Category {
    let total: f64 = CLASS_WEIGHTS.iter().map(|(_, w)| w).sum();
    let mut r = rng.random_range(0.0..total);
    for (c, w) in CLASS_WEIGHTS {
        if r < w {
            return c;
        }
        r -= w;
    }
    Category::Roadside
}

/// Random scene of the given tier; a pure function of `(seed, tier)`.
pub fn random_spec(seed: u64, tier: Tier) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SceneSpec::empty(seed);
    spec.tier = tier;
    let (lo, hi) = match tier {
        Tier::Clean => (1, 4),
        Tier::Noisy | Tier::Shadows => (2, 5),
        Tier::Clutter => (5, 8),
    };
    if tier == Tier::Noisy {
        spec.color_noise = 6.0;
        spec.depth_noise = 0.02;
        spec.ground_tilt = rng.random_range(-0.5f64..0.5).to_radians();
    }
    spec.road_color = jitter(&mut rng, spec.road_color, 6.0);
    if tier != Tier::Clean {
        spec.texture = 0.12;
        spec.lanes = vec![-1.8, 1.8];
    }
    let count = rng.random_range(lo..=hi);
    // clutter packs objects closer, so they occlude each other
    let (near, far) = if tier == Tier::Clutter { (6.0, 20.0) } else { (6.0, 26.0) };
    let gap = if tier == Tier::Clutter { 0.3 } else { 1.0 };
    for _ in 0..count {
        let category = pick_category(&mut rng);
        for _attempt in 0..100 {
            let (shape, color, band) = sample_object(&mut rng, category);
            let x = rng.random_range(near..far);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * rng.random_range(band[0]..band[1]);
            let r = shape.footprint_radius();
            // fully inside the horizontal field of view, with a margin
            if y.abs() + r > 0.85 * (x - r) {
                continue;
            }
            let clear = spec.objects.iter().all(|o| {
                let dist = (o.center[0] - x).hypot(o.center[1] - y);
                dist > o.shape.footprint_radius() + r + gap
            });
            if !clear {
                continue;
            }
            let yaw = match category {
                Category::Greenbelt | Category::Roadside => rng.random_range(-0.05..0.05),
                _ => rng.random_range(-0.4..0.4),
            };
            let mut object = SceneObject {
                category,
                shape,
                center: [x, y],
                yaw,
                base: 0.0,
                color,
            };
            object.base = object
                .corners()
                .iter()
                .map(|c| spec.ground_z(c.x, c.y))
                .fold(f64::NEG_INFINITY, f64::max);
            spec.objects.push(object);
            break;
        }
    }
    if tier == Tier::Shadows {
        for _ in 0..rng.random_range(2..=4) {
            let x = rng.random_range(6.0..22.0);
            let y = rng.random_range(-5.0..5.0);
            let (a, b) = (rng.random_range(1.0..4.0), rng.random_range(0.8..2.5));
            spec.shadows.push(ShadowPatch {
                min: [x - a, y - b],
                max: [x + a, y + b],
                factor: rng.random_range(0.4..0.65),
            });
        }
    }
    spec
}

/// `count` frames with seeds `master..master + count`, tiers cycling
/// through [`Tier::ALL`].
pub fn generate_suite(count: usize, master_seed: u64) -> Vec<Frame> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate(&random_spec(master_seed + i as u64, Tier::ALL[i % Tier::ALL.len()])))
        .collect()
}

/// `count` frames of a single tier, seeds `master..master + count`.
pub fn generate_tier(count: usize, master_seed: u64, tier: Tier) -> Vec<Frame> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate(&random_spec(master_seed + i as u64, tier)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_box() -> SceneSpec {
        let mut spec = SceneSpec::empty(1);
        spec.objects.push(SceneObject {
            category: Category::Vehicle,
            shape: Shape::Box {
                length: 4.0,
                width: 1.8,
                height: 1.5,
            },
            center: [10.0, 1.0],
            yaw: 0.3,
            base: -1.73,
            color: [170.0, 35.0, 35.0],
        });
        spec
    }

    #[test]
    fn same_seed_same_frame() {
        let a = generate(&random_spec(5, Tier::Noisy));
        let b = generate(&random_spec(5, Tier::Noisy));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_returns_lie_on_surfaces() {
        let spec = single_box();
        let f = generate(&spec);
        let (n, d) = spec.ground_plane();
        assert!(f.point_objects.iter().any(|&o| o == 1));
        for (p, &o) in f.cloud.points.iter().zip(&f.point_objects) {
            let residual = if o == 0 {
                (n.dot(&p.coords) + d).abs()
            } else {
                spec.objects[o as usize - 1].surface_distance(p)
            };
            assert!(residual < 1e-9, "{o}: {residual}");
        }
    }

    #[test]
    fn truth_box_matches_projected_corners() {
        let spec = single_box();
        let f = generate(&spec);
        let calib = &f.calib;
        let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in spec.objects[0].corners() {
            let (u, v) = calib.project_camera(&calib.to_camera(&c)).unwrap();
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, &o) in f.truth.objects.iter().enumerate() {
            if o == 1 {
                let (x, y) = (i % f.truth.width, i / f.truth.width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
        // labeled pixel centers are integer points inside the projected
        // hull, whose bounding box is that of the projected corners
        for (got, lo) in [(x0, u0), (y0, v0)] {
            assert!(got as f64 >= lo && (got as f64) < lo + 2.0, "{got} vs {lo}");
        }
        for (got, hi) in [(x1, u1), (y1, v1)] {
            assert!(got as f64 <= hi && got as f64 > hi - 2.0, "{got} vs {hi}");
        }
    }

    #[test]
    fn empty_scene_is_ground_and_sky() {
        let f = generate(&SceneSpec::empty(3));
        assert_eq!(f.truth.num_objects, 0);
        assert!(f.truth.categories.iter().all(|&c| c == Category::Road || c == Category::Sky));
        assert!(f.sky_mask.iter().any(|&s| s) && f.sky_mask.iter().any(|&s| !s));
        // a level camera puts the horizon at the principal row
        let row = f.truth.height / 2;
        assert_eq!(f.truth.categories[(row + 1) * f.truth.width], Category::Road);
        assert_eq!(f.truth.categories[(row - 1) * f.truth.width], Category::Sky);
    }

    #[test]
    fn suite_seeding_and_tiers() {
        let suite = generate_suite(4, 100);
        let ids: Vec<&str> = suite.iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids, ["000100", "000101", "000102", "000103"]);
        assert_eq!(suite[2].spec.tier, Tier::Shadows);
        assert!(!suite[2].spec.shadows.is_empty());
    }

    #[test]
    fn shadows_stay_road() {
        let spec = random_spec(102, Tier::Shadows);
        let f = generate(&spec);
        let dark = f
            .truth
            .objects
            .iter()
            .zip(&f.image.pixels)
            .filter(|(&o, p)| o == 0 && (p[0] as f64) < spec.road_color[0] * 0.7)
            .count();
        assert!(dark > 0);
        assert!(f.truth.objects.iter().zip(&f.truth.categories).all(|(&o, &c)| o != 0 || c == Category::Road));
    }

    #[test]
    fn points_inside_shapes_carry_their_label() {
        for seed in 0..6 {
            let spec = random_spec(seed, Tier::Clutter);
            let f = generate(&spec);
            for (p, &o) in f.cloud.points.iter().zip(&f.point_objects) {
                for (k, obj) in spec.objects.iter().enumerate() {
                    if obj.surface_distance(p) < 1e-7 {
                        assert_eq!(o as usize, k + 1);
                    }
                }
            }
            for obj in &spec.objects {
                for c in obj.corners().iter().take(4) {
                    assert!(c.z >= spec.ground_z(c.x, c.y) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        for seed in 0..20 {
            let spec = random_spec(seed, Tier::Clutter);
            for (i, a) in spec.objects.iter().enumerate() {
                for b in &spec.objects[i + 1..] {
                    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
                    assert!(d > a.shape.footprint_radius() + b.shape.footprint_radius());
                }
            }
        }
    }
}
