//! Label images, overlays and energy reports.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::inference::LabelingResult;
use crate::error::{Error, IoContext, Result};
use crate::scene::{ColorImage, LabelMaps};

/// Writes a single-channel 16-bit PNG.
pub fn write_label_png(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} labels for a {width}x{height} image", values.len())))?;
    buf.save(path)?;
    Ok(())
}

/// Reads a single-channel 16-bit (or 8-bit) label PNG.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Distinct, stable color for an object label.
pub fn object_color(label: u16) -> [u8; 3] {
    if label == 0 {
        return [128, 64, 128];
    }
    // golden-ratio hue walk
    let h = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = (1.0 - (h % 2.0 - 1.0).abs()) * 255.0;
    let (r, g, b) = match h as u32 {
        0 => (255.0, x, 0.0),
        1 => (x, 255.0, 0.0),
        2 => (0.0, 255.0, x),
        3 => (0.0, x, 255.0),
        4 => (x, 0.0, 255.0),
        _ => (255.0, 0.0, x),
    };
    [r as u8, g as u8, b as u8]
}

/// Half-transparent color overlay on the source image.
pub fn write_overlay(path: &Path, image: &ColorImage, colors: impl Fn(usize) -> [u8; 3]) -> Result<()> {
    let mut out = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(image.width as u32, image.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let (a, b) = (image.pixels[i], colors(i));
        *px = Rgb([0, 1, 2].map(|k| ((a[k] as u16 + b[k] as u16) / 2) as u8));
    }
    out.save(path)?;
    Ok(())
}

/// Writes `objects.png`, `categories.png`, both overlays and
/// `energy.json` under `dir` with the given file stem prefix.
pub fn export_result(
    dir: &Path,
    stem: &str,
    image: &ColorImage,
    maps: &LabelMaps,
    result: &LabelingResult,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let p = |name: &str| dir.join(format!("{stem}_{name}"));
    let objects = p("objects.png");
    write_label_png(&objects, maps.width, maps.height, &maps.objects)?;
    let categories = p("categories.png");
    write_label_png(&categories, maps.width, maps.height, &maps.category_ids())?;
    let object_overlay = p("objects_overlay.png");
    write_overlay(&object_overlay, image, |i| object_color(maps.objects[i]))?;
    let category_overlay = p("categories_overlay.png");
    write_overlay(&category_overlay, image, |i| maps.categories[i].color())?;
    let report = p("energy.json");
    std::fs::write(&report, serde_json::to_string_pretty(&result.report())?).at(&report)?;
    Ok(vec![objects, categories, object_overlay, category_overlay, report])
}
