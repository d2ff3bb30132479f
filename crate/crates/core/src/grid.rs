//! Pixel and latent grids, binary masks and the small set of mask morphology
//! operations shared by the pipeline stages.
//!
//! Grids are stored channel-major (`C × H × W`, row-major inside a channel).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A dense `C × H × W` array of `f32`.
///
/// Used both for images (values in `[0, 1]`) and for latents (unbounded);
/// [`ImageGrid`] and [`LatentGrid`] are aliases that document intent.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub type ImageGrid = Grid;
pub type LatentGrid = Grid;

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            channels > 0 && height > 0 && width > 0,
            Error::Shape(format!("grid dimensions must be positive, got {channels}x{height}x{width}"))
        );
        ensure!(
            data.len() == channels * height * width,
            Error::Shape(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            ))
        );
        Ok(Grid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        );
        Ok(())
    }

    pub fn check_mask(&self, mask: &BinaryMask, what: &str) -> Result<()> {
        ensure!(
            self.height == mask.height() && self.width == mask.width(),
            Error::Shape(format!(
                "{what}: grid {}x{} vs mask {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            ))
        );
        Ok(())
    }

    /// All values finite and inside `[0, 1]`.
    pub fn is_valid_image(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&mut self) -> usize {
        let mut clamped = 0;
        for v in &mut self.data {
            let c = v.clamp(0.0, 1.0);
            if c != *v {
                clamped += 1;
            }
            *v = c;
        }
        clamped
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copy out the window `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Grid> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            ))
        );
        let mut out = Grid::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = ((c * self.height) + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Write `patch` back at `(y0, x0)`.
    pub fn paste(&mut self, patch: &Grid, y0: usize, x0: usize) -> Result<()> {
        ensure!(
            patch.channels == self.channels
                && y0 + patch.height <= self.height
                && x0 + patch.width <= self.width,
            Error::Shape(format!(
                "paste {:?} at ({y0},{x0}) into {:?}",
                patch.shape(),
                self.shape()
            ))
        );
        for c in 0..self.channels {
            for y in 0..patch.height {
                let dst = ((c * self.height) + y0 + y) * self.width + x0;
                let src = (c * patch.height + y) * patch.width;
                self.data[dst..dst + patch.width]
                    .copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Grid {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Grid {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, self.height - 1 - y, x));
                }
            }
        }
        out
    }
}

/// Tight inclusive pixel rectangle `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Window `(y0, x0, h, w)` covering this box grown by `margin`, with
    /// origin and size multiples of `multiple`, clipped to a `height × width`
    /// frame whose sides are themselves multiples of `multiple`.
    pub fn aligned_window(&self, margin: usize, multiple: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let m = multiple.max(1);
        let y0 = self.y_min.saturating_sub(margin) / m * m;
        let x0 = self.x_min.saturating_sub(margin) / m * m;
        let y1 = ((self.y_max + 1 + margin).min(height)).div_ceil(m) * m;
        let x1 = ((self.x_max + 1 + margin).min(width)).div_ceil(m) * m;
        (y0, x0, y1.min(height) - y0, x1.min(width) - x0)
    }
}

/// Height × width indicator, `1` marks a defect pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Error::Shape(format!("mask dimensions must be positive, got {height}x{width}"))
        );
        ensure!(
            data.len() == height * width,
            Error::Shape(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            ))
        );
        ensure!(
            data.iter().all(|&v| v <= 1),
            Error::Data("mask values must be 0 or 1".into())
        );
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = BinaryMask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.data[y * width + x] = 1;
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `1 − mask`.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        ensure!(
            self.same_shape(other),
            Error::Shape("mask union of different shapes".into())
        );
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// `self ∧ ¬other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        ensure!(
            self.same_shape(other),
            Error::Shape("mask difference of different shapes".into())
        );
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a & (1 - b))
                .collect(),
        })
    }

    /// Tight bounding rectangle, `None` for an empty mask.
    pub fn bbox(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => PixelBox {
                            x_min: x,
                            y_min: y,
                            x_max: x,
                            y_max: y,
                        },
                        Some(b) => PixelBox {
                            x_min: b.x_min.min(x),
                            y_min: b.y_min.min(y),
                            x_max: b.x_max.max(x),
                            y_max: b.y_max.max(y),
                        },
                    });
                }
            }
        }
        b
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        // Separable: rows then columns.
        let (h, w) = (self.height, self.width);
        let mut rows = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.get(y, x) {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(w - 1);
                    for xx in lo..=hi {
                        rows.set(y, xx, true);
                    }
                }
            }
        }
        let mut out = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if rows.get(y, x) {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(h - 1);
                    for yy in lo..=hi {
                        out.set(yy, x, true);
                    }
                }
            }
        }
        out
    }

    /// Clear the outermost one-pixel frame. Returns the mask and whether
    /// anything was removed.
    pub fn clear_border(&self) -> (BinaryMask, bool) {
        let mut out = self.clone();
        let mut changed = false;
        let (h, w) = (self.height, self.width);
        for y in 0..h {
            for x in 0..w {
                if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && out.get(y, x) {
                    out.set(y, x, false);
                    changed = true;
                }
            }
        }
        (out, changed)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<BinaryMask> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            Error::Shape(format!(
                "mask crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            ))
        );
        Ok(BinaryMask::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// Max-pool over `f × f` blocks.
    pub fn downsample(&self, f: usize) -> Result<BinaryMask> {
        ensure!(f >= 1, Error::Parameter("compression factor must be >= 1".into()));
        ensure!(
            self.height % f == 0 && self.width % f == 0,
            Error::Shape(format!(
                "mask {}x{} not divisible by factor {f}",
                self.height, self.width
            ))
        );
        if f == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / f, self.width / f);
        let mut out = BinaryMask::zeros(h, w);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / f, x / f, true);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Mask as `f32` plane (1.0 / 0.0).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Intersection over union of two same-shape masks.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            uni += (a | b) as usize;
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Mask translated so its centroid sits at the grid centre.
    pub fn centered(&self) -> BinaryMask {
        let n = self.count();
        if n == 0 {
            return self.clone();
        }
        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                }
            }
        }
        let dy = (self.height as f64 / 2.0 - sy / n as f64 + 0.5).floor() as isize;
        let dx = (self.width as f64 / 2.0 - sx / n as f64 + 0.5).floor() as isize;
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            let yy = y as isize - dy;
            let xx = x as isize - dx;
            yy >= 0
                && xx >= 0
                && (yy as usize) < self.height
                && (xx as usize) < self.width
                && self.get(yy as usize, xx as usize)
        })
    }
}
