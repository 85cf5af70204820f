//! Deterministic visualization of a 2D affordance on the target image.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::transfer::Affordance2D;

const INLIER: Rgb<u8> = Rgb([40, 200, 40]);
const OUTLIER: Rgb<u8> = Rgb([220, 40, 40]);
const CONTACT: Rgb<u8> = Rgb([30, 90, 255]);
const ARROW: Rgb<u8> = Rgb([255, 210, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn round(p: &Point2<f64>) -> (i64, i64) {
    ((p.x + 0.5).floor() as i64, (p.y + 0.5).floor() as i64)
}

/// Bresenham line, endpoints included.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn disc(img: &mut RgbImage, (cx, cy): (i64, i64), radius: i64, color: Rgb<u8>) {
    for y in -radius..=radius {
        for x in -radius..=radius {
            if x * x + y * y <= radius * radius {
                put(img, cx + x, cy + y, color);
            }
        }
    }
}

fn square(img: &mut RgbImage, (cx, cy): (i64, i64), half: i64, color: Rgb<u8>) {
    for y in -half..=half {
        for x in -half..=half {
            if x.abs() == half || y.abs() == half {
                put(img, cx + x, cy + y, color);
            }
        }
    }
}

/// Draws waypoint markers (green inliers, red outliers), the contact point,
/// and an arrow along the fitted direction.
pub fn draw_affordance(img: &mut RgbImage, a: &Affordance2D) {
    let size = img.width().min(img.height()) as f64;
    for (p, inlier) in a.waypoints.iter().zip(&a.inliers) {
        square(img, round(p), 2, if *inlier { INLIER } else { OUTLIER });
    }

    let length = (0.2 * size).max(12.0);
    let dir = a.direction();
    let tip = a.contact + dir.into_inner() * length;
    let start = round(&a.contact);
    let end = round(&tip);
    line(img, start, end, ARROW);
    let head = (0.3 * length).min(10.0);
    for angle in [2.6_f64, -2.6] {
        let (s, c) = angle.sin_cos();
        let barb = nalgebra::Vector2::new(c * dir.x - s * dir.y, s * dir.x + c * dir.y);
        line(img, end, round(&(tip + barb * head)), ARROW);
    }
    disc(img, start, 3, CONTACT);
}

pub fn render_overlay(image_path: &Path, a: &Affordance2D) -> Result<RgbImage> {
    let img = image::open(image_path).map_err(|e| match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingAsset(image_path.to_path_buf())
        }
        other => Error::InvalidData(format!("{}: {other}", image_path.display())),
    })?;
    let mut rgb = img.to_rgb8();
    draw_affordance(&mut rgb, a);
    Ok(rgb)
}

/// Encodes `img` as PNG and writes it atomically.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidData(format!("png encoding failed: {e}")))?;
    crate::formats::write_atomic(path, &bytes)
}
