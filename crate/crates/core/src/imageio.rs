//! PNG reading and writing for grids and masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn quantise(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a 1- or 3-channel grid as an 8-bit PNG.
pub fn save_png(grid: &Grid, path: &Path) -> Result<()> {
    let (c, h, w) = grid.shape();
    let res = match c {
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantise(grid.get(0, y as usize, x as usize))])
            });
            img.save(path)
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([quantise(grid.get(0, y, x)), quantise(grid.get(1, y, x)), quantise(grid.get(2, y, x))])
            });
            img.save(path)
        }
        _ => return Err(Error::Shape(format!("cannot write a {c}-channel grid as PNG"))),
    };
    res.map_err(|e| image_err(path, e))
}

/// Load a PNG as a grid in `[0, 1]`. Grayscale files give one channel, colour
/// files three.
pub fn load_png(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut g = Grid::zeros(3, h, w);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                g.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(g)
    } else {
        let l = img.to_luma8();
        let data = l.pixels().map(|p| p[0] as f32 / 255.0).collect();
        Grid::from_vec(1, h, w, data)
    }
}

/// Save a mask as 8-bit grayscale, defect pixels 255.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Load an 8-bit single-channel mask. Only the values 0 and 255 are accepted.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(image_err(
                path,
                format!("mask must be 8-bit single-channel, got {:?}", other.color()),
            ))
        }
    };
    let mut data = Vec::with_capacity(gray.len());
    for (i, p) in gray.pixels().enumerate() {
        data.push(match p[0] {
            0 => 0,
            255 => 1,
            v => return Err(image_err(path, format!("mask pixel {i} has value {v}; only 0 and 255 are allowed"))),
        });
    }
    BinaryMask::from_vec(gray.height() as usize, gray.width() as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        save_mask_png(&m, &p).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), m);

        let bad: GrayImage = ImageBuffer::from_fn(2, 2, |x, _| Luma([if x == 0 { 0 } else { 128 }]));
        let q = dir.path().join("bad.png");
        bad.save(&q).unwrap();
        assert!(matches!(load_mask_png(&q), Err(Error::Image { .. })));
    }

    #[test]
    fn grid_round_trip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let g = Grid::from_vec(1, 2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        save_png(&g, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
