//! PNG and CSV exports for CMC curves and attention maps.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::cli::AttentionRecord;
use crate::error::{Error, Result};

const WIDTH: u32 = 320;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 24;

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Pixel position of `CMC(k)` for `k` in `1..=n`.
fn point(k: usize, n: usize, v: f64) -> (i64, i64) {
    let span = (WIDTH - 2 * MARGIN) as f64;
    let x = MARGIN as f64 + if n > 1 { (k - 1) as f64 / (n - 1) as f64 * span } else { 0.0 };
    let y = (HEIGHT - MARGIN) as f64 - v.clamp(0.0, 1.0) * (HEIGHT - 2 * MARGIN) as f64;
    (x.round() as i64, y.round() as i64)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 as f64 + t * (b.0 - a.0) as f64;
        let y = a.1 as f64 + t * (b.1 - a.1) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

/// CSV with one row per rank `k = 1..=|gallery|`, and a line chart of the same points.
pub fn write_cmc(curve: &[f64], csv_path: &Path, png_path: &Path) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::Data("empty CMC curve".into()));
    }
    let mut csv = String::from("k,cmc\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{v}\n", i + 1));
    }
    ensure_parent(csv_path)?;
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for q in 1..4 {
        let (_, y) = point(1, 1, q as f64 / 4.0);
        line(&mut img, (MARGIN as i64, y), ((WIDTH - MARGIN) as i64, y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    let (x0, y0) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    line(&mut img, (x0, y0), ((WIDTH - MARGIN) as i64, y0), axis);
    line(&mut img, (x0, y0), (x0, MARGIN as i64), axis);
    let n = curve.len();
    let ink = Rgb([200, 30, 30]);
    let pts: Vec<(i64, i64)> = curve.iter().enumerate().map(|(i, &v)| point(i + 1, n, v)).collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], ink);
    }
    for &(x, y) in &pts {
        for dx in -1..=1 {
            for dy in -1..=1 {
                put(&mut img, x + dx, y + dy, ink);
            }
        }
    }
    ensure_parent(png_path)?;
    img.save(png_path).map_err(|e| save_err(png_path, e))
}

/// Nearest-cell attention value for image pixel `(r, c)`.
fn cell(m: &AttentionRecord, dims: [usize; 2], r: usize, c: usize) -> f64 {
    let i = (r * m.height / dims[0]).min(m.height - 1);
    let j = (c * m.width / dims[1]).min(m.width - 1);
    m.values[i * m.width + j]
}

/// Grayscale heatmap with intensity `round(255 · Ψ̂)` and no rescaling, plus
/// the input image scaled by the attention of each pixel's cell.
pub fn write_heatmap(m: &AttentionRecord, dims: [usize; 2], heat_path: &Path, overlay_path: &Path) -> Result<()> {
    let [h, w] = dims;
    if m.values.len() != m.height * m.width || m.image.len() != h * w * 3 || m.height == 0 || m.width == 0 {
        return Err(Error::Data(format!("attention record for sample {} is malformed", m.sample_index)));
    }
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let heat = GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([to_u8(cell(m, dims, r as usize, c as usize))]));
    let overlay = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        let a = cell(m, dims, r, c);
        let p = (r * w + c) * 3;
        Rgb([to_u8(m.image[p] * a), to_u8(m.image[p + 1] * a), to_u8(m.image[p + 2] * a)])
    });
    ensure_parent(heat_path)?;
    heat.save(heat_path).map_err(|e| save_err(heat_path, e))?;
    ensure_parent(overlay_path)?;
    overlay.save(overlay_path).map_err(|e| save_err(overlay_path, e))
}
