//! Image and mask containers plus PNG round-trips and homography warps.

use crate::error::{Error, Result};
use image::{GrayImage, RgbImage};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use std::path::Path;

/// H x W x 3 image with values in `[0, 1]`.
pub type ImageGrid = Array3<f64>;

/// H x W binary mask.
pub type Mask = Array2<bool>;

pub fn save_png(img: &ImageGrid, path: &Path) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                quantize(img[[i, j, 0]]),
                quantize(img[[i, j, 1]]),
                quantize(img[[i, j, 2]]),
            ];
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, image::Luma([if mask[[i, j]] { 255 } else { 0 }]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] >= 128;
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Warps `img` with the pixel-space homography `warp` (source -> target),
/// bilinear resampling, black fill outside the source.
pub fn warp_image_bilinear(
    img: &ImageGrid,
    warp: &Matrix3<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<ImageGrid> {
    let inv = warp
        .try_inverse()
        .ok_or_else(|| Error::Geometry("singular warp homography".into()))?;
    let (h, w, _) = img.dim();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for i in 0..out_h {
        for j in 0..out_w {
            let src = inv * Vector3::new(j as f64, i as f64, 1.0);
            if src.z.abs() < 1e-12 {
                continue;
            }
            let (x, y) = (src.x / src.z, src.y / src.z);
            if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for c in 0..3 {
                let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
                let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
                out[[i, j, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour variant for binary masks; outside fills with `false`.
pub fn warp_mask_nearest(
    mask: &Mask,
    warp: &Matrix3<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<Mask> {
    let inv = warp
        .try_inverse()
        .ok_or_else(|| Error::Geometry("singular warp homography".into()))?;
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((out_h, out_w), false);
    for i in 0..out_h {
        for j in 0..out_w {
            let src = inv * Vector3::new(j as f64, i as f64, 1.0);
            if src.z.abs() < 1e-12 {
                continue;
            }
            let x = (src.x / src.z).round();
            let y = (src.y / src.z).round();
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            out[[i, j]] = mask[[y as usize, x as usize]];
        }
    }
    Ok(out)
}
