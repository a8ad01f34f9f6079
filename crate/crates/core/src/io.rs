//! On-disk frames: velodyne scans, calibration files, images, and the
//! directory layout shared by real and generated data.
//!
//! ```text
//! root/image_02/<id>.png
//! root/velodyne/<id>.bin       (or <id>.txt with "x y z" lines)
//! root/calib/<id>.txt
//! root/gt/<id>_objects.png     (optional, 16-bit object labels)
//! root/gt/<id>_categories.png  (optional, 16-bit category ids)
//! root/sky/<id>.png            (optional, nonzero = sky)
//! ```

use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Point3, Vector3};

use crate::crf::{read_label_png, write_label_png};
use crate::error::{Error, IoContext, Result};
use crate::scene::{CameraCalibration, Category, ColorImage, LabelMaps, PointCloud};
use crate::synthetic::Frame;

/// Little-endian `f32` quadruplets `(x, y, z, reflectance)`.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!("{}: {} bytes is not a multiple of 16", path.display(), bytes.len())));
    }
    let mut cursor = &bytes[..];
    let mut points = Vec::with_capacity(bytes.len() / 16);
    while !cursor.is_empty() {
        let mut v = [0f32; 4];
        cursor.read_f32_into::<LittleEndian>(&mut v).at(path)?;
        points.push(Point3::new(v[0] as f64, v[1] as f64, v[2] as f64));
    }
    Ok(PointCloud::new(points))
}

/// Writes the cloud with zero reflectance.
pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.write_f32::<LittleEndian>(v).at(path)?;
        }
    }
    std::fs::write(path, out).at(path)
}

/// Whitespace- or comma-separated `x y z` lines; blank lines and `#`
/// comments are skipped, extra columns ignored.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).at(path)?;
    let mut points = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if v.len() < 3 {
            return Err(Error::Format(format!("{}:{}: expected x y z", path.display(), n + 1)));
        }
        points.push(Point3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud::new(points))
}

fn parse_calibration_entries(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (key, values) = l
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("calibration line without a key: {l}")))?;
            let values = values
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Format(format!("calibration {key}: {e}")))?;
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

/// Closest orthonormal matrix; published calibrations round their
/// rotations to a few digits.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    u * v_t
}

fn matrix3(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

/// Parses either `K` (3x3) and `Tr` (3x4 `[R|t]`, lidar to camera) rows, or
/// the KITTI `P2`, `R0_rect` and `Tr_velo_to_cam` rows. For the latter the
/// rectified camera-2 frame is the camera frame:
/// `K = P2[:, :3]`, `R = R0 R_velo`, `t = R0 t_velo + K^-1 P2[:, 3]`.
pub fn parse_calibration(text: &str) -> Result<CameraCalibration> {
    let entries = parse_calibration_entries(text)?;
    let get = |key: &str, len: usize| -> Result<Option<&Vec<f64>>> {
        match entries.iter().find(|(k, _)| k == key) {
            Some((_, v)) if v.len() == len => Ok(Some(v)),
            Some((_, v)) => Err(Error::Format(format!("calibration {key}: expected {len} values, got {}", v.len()))),
            None => Ok(None),
        }
    };
    let calib = if let (Some(k), Some(tr)) = (get("K", 9)?, get("Tr", 12)?) {
        let r = Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]);
        CameraCalibration::new(matrix3(k), r, Vector3::new(tr[3], tr[7], tr[11]))
    } else if let (Some(p2), Some(tr)) = (get("P2", 12)?, get("Tr_velo_to_cam", 12)?) {
        let k = Matrix3::new(p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10]);
        let r0 = get("R0_rect", 9)?.map(|v| matrix3(v)).unwrap_or_else(Matrix3::identity);
        let r_velo = Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]);
        let t_velo = Vector3::new(tr[3], tr[7], tr[11]);
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCalibration("singular P2".into()))?;
        let b = k_inv * Vector3::new(p2[3], p2[7], p2[11]);
        CameraCalibration::new(k, nearest_rotation(&(r0 * r_velo)), r0 * t_velo + b)
    } else {
        return Err(Error::Format("calibration needs K and Tr, or P2 and Tr_velo_to_cam".into()));
    };
    calib.validate()?;
    Ok(calib)
}

pub fn read_calibration(path: &Path) -> Result<CameraCalibration> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_calibration(&text).map_err(|e| Error::Other(format!("{}: {e}", path.display())))
}

/// Writes `K` and `Tr` rows with round-trip precision.
pub fn write_calibration(path: &Path, calib: &CameraCalibration) -> Result<()> {
    let k = &calib.intrinsic;
    let (r, t) = (&calib.rotation, &calib.translation);
    let mut s = String::from("K:");
    for i in 0..3 {
        for j in 0..3 {
            s += &format!(" {:?}", k[(i, j)]);
        }
    }
    s += "\nTr:";
    for i in 0..3 {
        for j in 0..3 {
            s += &format!(" {:?}", r[(i, j)]);
        }
        s += &format!(" {:?}", t[i]);
    }
    s += "\n";
    std::fs::write(path, s).at(path)
}

pub fn read_image(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    ColorImage::new(w as usize, h as usize, pixels)
}

pub fn write_image(path: &Path, image: &ColorImage) -> Result<()> {
    let raw: Vec<u8> = image.pixels.iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Nonzero pixels of a grayscale image.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0[0] > 0).collect()))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let raw = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Paths of one frame inside a dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePaths {
    pub image: PathBuf,
    pub velodyne: PathBuf,
    pub calib: PathBuf,
    pub truth_objects: PathBuf,
    pub truth_categories: PathBuf,
    pub sky: PathBuf,
}

impl FramePaths {
    pub fn new(root: &Path, id: &str) -> Self {
        let bin = root.join("velodyne").join(format!("{id}.bin"));
        let txt = root.join("velodyne").join(format!("{id}.txt"));
        Self {
            image: root.join("image_02").join(format!("{id}.png")),
            velodyne: if !bin.exists() && txt.exists() { txt } else { bin },
            calib: root.join("calib").join(format!("{id}.txt")),
            truth_objects: root.join("gt").join(format!("{id}_objects.png")),
            truth_categories: root.join("gt").join(format!("{id}_categories.png")),
            sky: root.join("sky").join(format!("{id}.png")),
        }
    }
}

/// A frame as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub id: String,
    pub image: ColorImage,
    pub cloud: PointCloud,
    pub calib: CameraCalibration,
    pub truth: Option<LabelMaps>,
    pub sky_mask: Option<Vec<bool>>,
}

impl From<&Frame> for FrameInput {
    fn from(f: &Frame) -> Self {
        Self {
            id: f.id.clone(),
            image: f.image.clone(),
            cloud: f.cloud.clone(),
            calib: f.calib.clone(),
            truth: Some(f.truth.clone()),
            sky_mask: Some(f.sky_mask.clone()),
        }
    }
}

/// Sorted ids of every image under `root/image_02`.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("image_02");
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .at(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

fn check_size(what: &Path, (w, h): (usize, usize), image: &ColorImage) -> Result<()> {
    if (w, h) != (image.width, image.height) {
        return Err(Error::Shape(format!(
            "{} is {w}x{h}, image is {}x{}",
            what.display(),
            image.width,
            image.height
        )));
    }
    Ok(())
}

/// Loads one frame; ground truth and sky mask are read when present.
pub fn load_frame(root: &Path, id: &str) -> Result<FrameInput> {
    let paths = FramePaths::new(root, id);
    if !paths.calib.exists() {
        return Err(Error::Other(format!("missing calibration file {}", paths.calib.display())));
    }
    let image = read_image(&paths.image)?;
    let cloud = if paths.velodyne.extension().is_some_and(|x| x == "txt") {
        read_xyz(&paths.velodyne)?
    } else {
        read_velodyne_bin(&paths.velodyne)?
    };
    let calib = read_calibration(&paths.calib)?;
    let truth = if paths.truth_objects.exists() && paths.truth_categories.exists() {
        let (w, h, objects) = read_label_png(&paths.truth_objects)?;
        check_size(&paths.truth_objects, (w, h), &image)?;
        let (w, h, ids) = read_label_png(&paths.truth_categories)?;
        check_size(&paths.truth_categories, (w, h), &image)?;
        let categories = ids
            .iter()
            .map(|&id| Category::from_id(id).ok_or_else(|| Error::Format(format!("category id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let sky = objects.iter().copied().max().unwrap_or(1);
        Some(LabelMaps {
            width: w,
            height: h,
            num_objects: sky.saturating_sub(1) as usize,
            objects,
            categories,
        })
    } else {
        None
    };
    let sky_mask = if paths.sky.exists() {
        let (w, h, m) = read_mask(&paths.sky)?;
        check_size(&paths.sky, (w, h), &image)?;
        Some(m)
    } else {
        None
    };
    Ok(FrameInput {
        id: id.to_string(),
        image,
        cloud,
        calib,
        truth,
        sky_mask,
    })
}

/// Writes a generated frame, its truth, sky mask and scene description.
pub fn write_frame(root: &Path, frame: &Frame) -> Result<()> {
    for sub in ["image_02", "velodyne", "calib", "gt", "sky", "spec"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).at(&d)?;
    }
    let id = &frame.id;
    let paths = FramePaths::new(root, id);
    write_image(&paths.image, &frame.image)?;
    write_velodyne_bin(&root.join("velodyne").join(format!("{id}.bin")), &frame.cloud)?;
    write_calibration(&paths.calib, &frame.calib)?;
    let t = &frame.truth;
    write_label_png(&paths.truth_objects, t.width, t.height, &t.objects)?;
    write_label_png(&paths.truth_categories, t.width, t.height, &t.category_ids())?;
    write_mask(&paths.sky, t.width, t.height, &frame.sky_mask)?;
    let spec_path = root.join("spec").join(format!("{id}.json"));
    let mut f = std::fs::File::create(&spec_path).at(&spec_path)?;
    f.write_all(serde_json::to_string_pretty(&frame.spec)?.as_bytes()).at(&spec_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, random_spec, Tier};

    #[test]
    fn frame_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = generate(&random_spec(9, Tier::Clean));
        write_frame(dir.path(), &frame).unwrap();
        assert_eq!(list_frames(dir.path()).unwrap(), vec![frame.id.clone()]);
        let back = load_frame(dir.path(), &frame.id).unwrap();
        assert_eq!(back.image, frame.image);
        assert_eq!(back.calib, frame.calib);
        assert_eq!(back.truth.as_ref().unwrap().objects, frame.truth.objects);
        assert_eq!(back.truth.as_ref().unwrap().categories, frame.truth.categories);
        assert_eq!(back.sky_mask.unwrap(), frame.sky_mask);
        assert_eq!(back.cloud.len(), frame.cloud.len());
        for (a, b) in back.cloud.points.iter().zip(&frame.cloud.points) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn missing_calibration_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let frame = generate(&random_spec(9, Tier::Clean));
        write_frame(dir.path(), &frame).unwrap();
        std::fs::remove_file(dir.path().join("calib").join(format!("{}.txt", frame.id))).unwrap();
        let err = load_frame(dir.path(), &frame.id).unwrap_err();
        assert!(err.to_string().contains("missing calibration"));
    }

    fn kitti_text(p2: [f64; 12], r0: &Matrix3<f64>, r: &Matrix3<f64>, t: [f64; 3]) -> String {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let m = |m: &Matrix3<f64>| row(&[m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]);
        let tr = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0], r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1], r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]];
        format!(
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nP2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            row(&p2),
            m(r0),
            row(&tr)
        )
    }

    #[test]
    fn kitti_calibration_composes_rectification() {
        let p2 = [700.0, 0.0, 600.0, 45.0, 0.0, 700.0, 180.0, -0.3, 0.0, 0.0, 1.0, 0.004];
        let r0 = *nalgebra::Rotation3::from_euler_angles(0.004, -0.007, 0.01).matrix();
        let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let r = nalgebra::Rotation3::from_euler_angles(0.01, 0.0, -0.005).matrix() * base;
        let t = [-0.0027, -0.0753, -0.2721];
        let c = parse_calibration(&kitti_text(p2, &r0, &r, t)).unwrap();
        for p in [Point3::new(10.0, 1.0, -1.0), Point3::new(30.0, -6.0, 0.5)] {
            // P2 * [R0 (R p + t); 1]
            let x = r0 * (r * p.coords + Vector3::from(t));
            let w = p2[8] * x.x + p2[9] * x.y + p2[10] * x.z + p2[11];
            let u = (p2[0] * x.x + p2[1] * x.y + p2[2] * x.z + p2[3]) / w;
            let v = (p2[4] * x.x + p2[5] * x.y + p2[6] * x.z + p2[7]) / w;
            let (uu, vv) = c.project_camera(&c.to_camera(&p)).unwrap();
            assert!((u - uu).abs() < 1e-9 && (v - vv).abs() < 1e-9);
        }
    }

    #[test]
    fn rounded_kitti_rotations_are_accepted() {
        let text = "P2: 700 0 600 45 0 700 180 -0.3 0 0 1 0.004\n\
                    R0_rect: 0.9999 0.0098 -0.0074 -0.0099 0.9999 -0.0043 0.0074 0.0044 0.9999\n\
                    Tr_velo_to_cam: 0.0007 -0.9999 -0.0104 -0.0027 0.0105 0.0104 -0.9999 -0.0753 0.9999 0.0008 0.0105 -0.2721\n";
        let c = parse_calibration(text).unwrap();
        let rrt = c.rotation * c.rotation.transpose();
        assert!((rrt - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn plain_calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let calib = generate(&random_spec(1, Tier::Clean)).calib;
        let path = dir.path().join("c.txt");
        write_calibration(&path, &calib).unwrap();
        assert_eq!(read_calibration(&path).unwrap(), calib);
        std::fs::write(&path, "K: 1 0 0 0 1 0 0 0 1\n").unwrap();
        assert!(read_calibration(&path).is_err());
    }

    #[test]
    fn xyz_text_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# header\n1 2 3\n\n4,5,6,0.5\n").unwrap();
        let c = read_xyz(&path).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)]);
        std::fs::write(&path, "1 2\n").unwrap();
        assert!(read_xyz(&path).is_err());
    }
}
