//! Seeded surface textures and thin stroke defects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid, PixelBox};

/// The two surface families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Light, low-contrast brushed stripes.
    #[serde(rename = "surface-a")]
    A,
    /// Dark, granular.
    #[serde(rename = "surface-b")]
    B,
}

impl Domain {
    /// Prompt word for the surface.
    pub fn word(self) -> &'static str {
        match self {
            Domain::A => "surface-a",
            Domain::B => "surface-b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "surface-a" | "a" => Ok(Domain::A),
            "surface-b" | "b" => Ok(Domain::B),
            other => Err(Error::Parameter(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Multiplier on every texture amplitude.
    #[serde(default = "one")]
    pub contrast: f32,
}

fn one() -> f32 {
    1.0
}

impl TextureSpec {
    pub fn new(domain: Domain, height: usize, width: usize, seed: u64) -> Self {
        TextureSpec {
            domain,
            height,
            width,
            seed,
            contrast: 1.0,
        }
    }
}

/// Smooth lattice noise in `[-1, 1]` with the given cell size.
fn value_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Nominal mean intensity of each domain.
pub fn domain_mean(domain: Domain) -> f32 {
    match domain {
        Domain::A => 0.72,
        Domain::B => 0.32,
    }
}

pub fn synth_background(spec: &TextureSpec) -> Result<Grid> {
    let (h, w) = (spec.height, spec.width);
    ensure!(h > 0 && w > 0, Error::Parameter("texture size must be positive".into()));
    ensure!(
        spec.contrast.is_finite() && spec.contrast >= 0.0,
        Error::Parameter(format!("contrast must be >= 0, got {}", spec.contrast))
    );
    let k = spec.contrast;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = domain_mean(spec.domain);
    let data: Vec<f32> = match spec.domain {
        Domain::A => {
            let period: f32 = rng.random_range(5.0..9.0);
            let angle: f32 = rng.random_range(-0.3..0.3);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (s, c) = angle.sin_cos();
            let low = value_noise(&mut rng, h, w, 16);
            let grain = Normal::new(0.0f32, 0.01).expect("valid std");
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f32, (i % w) as f32);
                    let u = -x * s + y * c;
                    let stripe = (std::f32::consts::TAU * u / period + phase).sin();
                    base + k * (0.035 * stripe + 0.03 * low[i] + grain.sample(&mut rng))
                })
                .collect()
        }
        Domain::B => {
            let fine = value_noise(&mut rng, h, w, 3);
            let coarse = value_noise(&mut rng, h, w, 12);
            let grain = Normal::new(0.0f32, 0.025).expect("valid std");
            (0..h * w)
                .map(|i| base + k * (0.06 * fine[i] + 0.03 * coarse[i] + grain.sample(&mut rng)))
                .collect()
        }
    };
    let mut g = Grid::from_vec(1, h, w, data)?;
    // Small dark pits: round, so they are confusable with scratches only
    // by a detector that ignores shape.
    for _ in 0..rng.random_range(0..=3) {
        let r: f32 = rng.random_range(0.6..1.4);
        let cx = rng.random_range(2.0..(w as f32 - 2.0).max(2.5));
        let cy = rng.random_range(2.0..(h as f32 - 2.0).max(2.5));
        let depth: f32 = rng.random_range(0.06..0.15);
        g = render_spot(&g, cx, cy, r, -k * depth);
    }
    g.clamp01();
    Ok(g)
}

/// An anti-aliased polyline that shifts intensity by `intensity` at full
/// coverage (negative darkens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectStroke {
    /// `(x, y)` control points in pixel coordinates.
    pub points: Vec<[f32; 2]>,
    pub width: f32,
    pub intensity: f32,
}

impl DefectStroke {
    pub fn length(&self) -> f32 {
        self.points
            .windows(2)
            .map(|p| ((p[1][0] - p[0][0]).powi(2) + (p[1][1] - p[0][1]).powi(2)).sqrt())
            .sum()
    }
}

/// Parameter ranges for random strokes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeDistribution {
    pub length: (f32, f32),
    pub width: (f32, f32),
    /// Magnitude range of the intensity offset.
    pub intensity: (f32, f32),
    /// Probability the stroke brightens instead of darkening.
    pub bright_prob: f64,
    /// Interior control points.
    pub bends: usize,
    /// Maximum lateral offset of a bend, as a fraction of the length.
    pub bend: f32,
    /// Distance kept from the frame.
    pub border: f32,
}

impl StrokeDistribution {
    /// Thin, faint dark scratches: the benchmark defect.
    pub fn scratch() -> Self {
        StrokeDistribution {
            length: (14.0, 40.0),
            width: (0.8, 1.6),
            intensity: (0.06, 0.14),
            bright_prob: 0.0,
            bends: 1,
            bend: 0.12,
            border: 4.0,
        }
    }

    /// Broader generic marks of either polarity.
    pub fn generic_mark() -> Self {
        StrokeDistribution {
            length: (6.0, 48.0),
            width: (0.8, 3.0),
            intensity: (0.1, 0.35),
            bright_prob: 0.5,
            bends: 2,
            bend: 0.25,
            border: 3.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> DefectStroke {
        let (h, w) = (height as f32, width as f32);
        let b = self.border.min(h / 4.0).min(w / 4.0);
        let max_len = self.length.1.min((h - 2.0 * b).hypot(w - 2.0 * b) * 0.9);
        let len = rng.random_range(self.length.0.min(max_len)..=max_len);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (dx, dy) = (angle.cos() * len, angle.sin() * len);
        // Shrink until the straight chord fits, then place it.
        let scale = ((w - 2.0 * b - 1.0) / dx.abs().max(1e-3)).min((h - 2.0 * b - 1.0) / dy.abs().max(1e-3)).min(1.0);
        let (dx, dy) = (dx * scale, dy * scale);
        let (xl, xh) = (b - dx.min(0.0), w - 1.0 - b - dx.max(0.0));
        let (yl, yh) = (b - dy.min(0.0), h - 1.0 - b - dy.max(0.0));
        let x0 = rng.random_range(xl..=xh.max(xl));
        let y0 = rng.random_range(yl..=yh.max(yl));
        let chord = (dx * dx + dy * dy).sqrt();
        let (nx, ny) = (-dy / chord.max(1e-3), dx / chord.max(1e-3));
        let mut points = vec![[x0, y0]];
        for k in 1..=self.bends {
            let f = k as f32 / (self.bends + 1) as f32;
            let off = rng.random_range(-self.bend..=self.bend) * chord;
            let px = (x0 + f * dx + off * nx).clamp(b, w - 1.0 - b);
            let py = (y0 + f * dy + off * ny).clamp(b, h - 1.0 - b);
            points.push([px, py]);
        }
        points.push([x0 + dx, y0 + dy]);
        let width = rng.random_range(self.width.0..=self.width.1);
        let mag = rng.random_range(self.intensity.0..=self.intensity.1);
        let intensity = if rng.random_bool(self.bright_prob) { mag } else { -mag };
        DefectStroke {
            points,
            width,
            intensity,
        }
    }
}

fn segment_distance(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = vx * vx + vy * vy;
    let t = if l2 > 0.0 {
        (((px - a[0]) * vx + (py - a[1]) * vy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * vx, a[1] + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Coverage of pixel centre `(x, y)` by the stroke, in `[0, 1]`.
fn coverage(stroke: &DefectStroke, x: f32, y: f32) -> f32 {
    let d = stroke
        .points
        .windows(2)
        .map(|s| segment_distance(x, y, s[0], s[1]))
        .fold(f32::INFINITY, f32::min);
    (stroke.width / 2.0 + 0.5 - d).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Grid,
    pub mask: BinaryMask,
    pub bbox: Option<PixelBox>,
    pub domain: Domain,
    pub defect: bool,
}

/// Render `stroke` onto `background`. Returns the defect image and the mask
/// of pixels whose value changed by more than one 8-bit level; all other
/// pixels are exactly the background.
pub fn render_stroke(background: &Grid, stroke: &DefectStroke) -> Result<(Grid, BinaryMask)> {
    let (c, h, w) = background.shape();
    ensure!(stroke.points.len() >= 2, Error::Parameter("stroke needs at least two points".into()));
    ensure!(
        stroke.width > 0.0 && stroke.width.is_finite() && stroke.intensity.is_finite(),
        Error::Parameter("stroke width must be positive and values finite".into())
    );
    ensure!(
        stroke
            .points
            .iter()
            .all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f32 && p[1] <= (h - 1) as f32),
        Error::Parameter("stroke leaves the image".into())
    );
    let mut img = background.clone();
    let mut mask = BinaryMask::zeros(h, w);
    let r = stroke.width / 2.0 + 1.0;
    let xs = stroke.points.iter().map(|p| p[0]);
    let ys = stroke.points.iter().map(|p| p[1]);
    let x_lo = (xs.clone().fold(f32::INFINITY, f32::min) - r).floor().max(0.0) as usize;
    let x_hi = ((xs.fold(f32::NEG_INFINITY, f32::max) + r).ceil() as usize).min(w - 1);
    let y_lo = (ys.clone().fold(f32::INFINITY, f32::min) - r).floor().max(0.0) as usize;
    let y_hi = ((ys.fold(f32::NEG_INFINITY, f32::max) + r).ceil() as usize).min(h - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let cov = coverage(stroke, x as f32, y as f32);
            if cov <= 0.0 {
                continue;
            }
            let mut changed = false;
            let mut vals = Vec::with_capacity(c);
            for ch in 0..c {
                let b = background.get(ch, y, x);
                let v = (b + stroke.intensity * cov).clamp(0.0, 1.0);
                changed |= (v - b).abs() > 1.0 / 255.0;
                vals.push(v);
            }
            if changed {
                mask.set(y, x, true);
                for (ch, v) in vals.into_iter().enumerate() {
                    img.set(ch, y, x, v);
                }
            }
        }
    }
    Ok((img, mask))
}

pub fn synth_scratch(background: &Grid, stroke: &DefectStroke, domain: Domain) -> Result<LabeledSample> {
    let (image, mask) = render_stroke(background, stroke)?;
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Data("degenerate defect: the stroke changed no pixel".into()))?;
    Ok(LabeledSample {
        image,
        mask,
        bbox: Some(bbox),
        domain,
        defect: true,
    })
}

/// A soft round spot, used only for generic pretraining marks.
pub fn render_spot(background: &Grid, cx: f32, cy: f32, radius: f32, intensity: f32) -> Grid {
    let mut img = background.clone();
    let (c, h, w) = background.shape();
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                for ch in 0..c {
                    let v = (background.get(ch, y, x) + intensity * cov).clamp(0.0, 1.0);
                    img.set(ch, y, x, v);
                }
            }
        }
    }
    img
}
