//! Seamless integration of a generated defect: first/second-moment colour
//! matching to the surround, then gradient-domain blending.

mod poisson;

pub use poisson::{poisson_blend, BlendOutcome, PoissonSystem, Solver, CG_MAX_ITERATIONS, DIRECT_LIMIT};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generation::SynthesisResult;
use crate::grid::{BinaryMask, Grid};

/// Floor on the source standard deviation.
pub const EPS_SIGMA: f64 = 1e-4;

/// Per-channel population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Statistics over the pixels selected by `sel`.
pub fn masked_stats(image: &Grid, sel: &BinaryMask) -> Result<ColorStats> {
    image.check_mask(sel, "masked_stats")?;
    let n = sel.count();
    ensure!(n > 0, Error::Data("statistics over an empty pixel set".into()));
    let mut mean = Vec::with_capacity(image.channels());
    let mut std = Vec::with_capacity(image.channels());
    for c in 0..image.channels() {
        let vals: Vec<f64> = image
            .channel(c)
            .iter()
            .zip(sel.data())
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v as f64)
            .collect();
        let mu = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Ok(ColorStats { mean, std })
}

/// Statistics over the ring `dilate(mask, ring_width) \ mask`. An empty ring
/// falls back to whole-image statistics.
pub fn ring_stats(image: &Grid, mask: &BinaryMask, ring_width: usize) -> Result<ColorStats> {
    image.check_mask(mask, "ring_stats")?;
    let ring = mask.dilate(ring_width).minus(mask)?;
    if ring.is_empty() {
        warn!("empty statistics ring (width {ring_width}); using whole-image statistics");
        return masked_stats(image, &BinaryMask::ones(image.height(), image.width()));
    }
    masked_stats(image, &ring)
}

/// `(x − μ_src) / max(σ_src, ε_σ) · σ_dst + μ_dst`, clamped to `[0, 1]`.
pub fn match_value(x: f64, mu_src: f64, sd_src: f64, mu_dst: f64, sd_dst: f64) -> f64 {
    ((x - mu_src) / sd_src.max(EPS_SIGMA) * sd_dst + mu_dst).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Rgb,
    /// Full-range BT.601 luma/chroma. Single-channel images are unaffected.
    YCbCr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    /// A ring around the mask.
    #[default]
    Ring,
    /// Every pixel of the frame.
    Global,
}

fn to_ycbcr(g: &Grid) -> Grid {
    if g.channels() != 3 {
        return g.clone();
    }
    let mut out = g.clone();
    for i in 0..g.plane_len() {
        let (r, gg, b) = (g.channel(0)[i], g.channel(1)[i], g.channel(2)[i]);
        out.channel_mut(0)[i] = 0.299 * r + 0.587 * gg + 0.114 * b;
        out.channel_mut(1)[i] = 0.5 - 0.168736 * r - 0.331264 * gg + 0.5 * b;
        out.channel_mut(2)[i] = 0.5 + 0.5 * r - 0.418688 * gg - 0.081312 * b;
    }
    out
}

fn from_ycbcr(g: &Grid) -> Grid {
    if g.channels() != 3 {
        return g.clone();
    }
    let mut out = g.clone();
    for i in 0..g.plane_len() {
        let (y, cb, cr) = (g.channel(0)[i], g.channel(1)[i] - 0.5, g.channel(2)[i] - 0.5);
        out.channel_mut(0)[i] = y + 1.402 * cr;
        out.channel_mut(1)[i] = y - 0.344136 * cb - 0.714136 * cr;
        out.channel_mut(2)[i] = y + 1.772 * cb;
    }
    out
}

/// Apply the per-channel moment transform to the pixels under `mask` (all
/// pixels when `None`).
pub fn match_color_lighting(patch: &Grid, mask: Option<&BinaryMask>, src: &ColorStats, dst: &ColorStats) -> Result<Grid> {
    let c = patch.channels();
    ensure!(
        src.mean.len() == c && src.std.len() == c && dst.mean.len() == c && dst.std.len() == c,
        Error::Shape(format!("colour statistics do not have {c} channels"))
    );
    ensure!(
        src.mean.iter().chain(&src.std).chain(&dst.mean).chain(&dst.std).all(|v| v.is_finite()),
        Error::Parameter("colour statistics must be finite".into())
    );
    if let Some(m) = mask {
        patch.check_mask(m, "match_color_lighting")?;
    }
    let mut out = patch.clone();
    for ch in 0..c {
        let plane = out.channel_mut(ch);
        for (i, v) in plane.iter_mut().enumerate() {
            if mask.map_or(true, |m| m.data()[i] != 0) {
                *v = match_value(*v as f64, src.mean[ch], src.std[ch], dst.mean[ch], dst.std[ch]) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    pub color_match: bool,
    pub ring_width: usize,
    pub color_mode: ColorMode,
    pub scope: StatsScope,
    pub solver: Solver,
    pub tol: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            color_match: true,
            ring_width: 3,
            color_mode: ColorMode::Rgb,
            scope: StatsScope::Ring,
            solver: Solver::Auto,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntegrationOutcome {
    pub image: Grid,
    pub clamped: usize,
    pub shrunk: bool,
}

/// Colour-match `source` to `background` and blend it over `mask`.
///
/// Source statistics are taken from the source's own surround (or whole
/// frame), so the defect keeps its contrast against that surround while any
/// global colour or lighting drift of the source is removed.
pub fn integrate_images(source: &Grid, background: &Grid, mask: &BinaryMask, cfg: &IntegrationConfig) -> Result<IntegrationOutcome> {
    source.check_same_shape(background, "integrate")?;
    background.check_mask(mask, "integrate")?;
    let (inner, shrunk) = mask.clear_border();
    if inner.is_empty() {
        warn!("defect mask is empty after border shrink; returning the background");
        return Ok(IntegrationOutcome {
            image: background.clone(),
            clamped: 0,
            shrunk,
        });
    }
    let matched = if cfg.color_match {
        let (s, b) = match cfg.color_mode {
            ColorMode::Rgb => (source.clone(), background.clone()),
            ColorMode::YCbCr => (to_ycbcr(source), to_ycbcr(background)),
        };
        let (src, dst) = match cfg.scope {
            StatsScope::Ring => (ring_stats(&s, &inner, cfg.ring_width)?, ring_stats(&b, &inner, cfg.ring_width)?),
            StatsScope::Global => {
                let all = BinaryMask::ones(s.height(), s.width());
                (masked_stats(&s, &all)?, masked_stats(&b, &all)?)
            }
        };
        let m = match_color_lighting(&s, None, &src, &dst)?;
        match cfg.color_mode {
            ColorMode::Rgb => m,
            ColorMode::YCbCr => from_ycbcr(&m),
        }
    } else {
        source.clone()
    };
    let out = poisson_blend(&matched, background, &inner, cfg.solver, cfg.tol)?;
    Ok(IntegrationOutcome {
        image: out.image,
        clamped: out.clamped,
        shrunk,
    })
}

/// Integrate a generation result; its decoded, pre-composite output is the
/// blend source.
pub fn integrate(result: &SynthesisResult, background: &Grid, cfg: &IntegrationConfig) -> Result<IntegrationOutcome> {
    integrate_images(&result.generated, background, &result.mask, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stats() {
        let g = Grid::filled(1, 6, 6, 0.5);
        let mut m = BinaryMask::zeros(6, 6);
        m.set(3, 3, true);
        let s = ring_stats(&g, &m, 1).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (0.5, 0.0));
    }

    #[test]
    fn two_pixel_ring() {
        let g = Grid::from_vec(1, 1, 3, vec![0.0, 0.7, 1.0]).unwrap();
        let m = BinaryMask::from_vec(1, 3, vec![0, 1, 0]).unwrap();
        let s = ring_stats(&g, &m, 1).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (0.5, 0.5));
    }

    #[test]
    fn zero_ring_width_falls_back_to_whole_image() {
        let g = Grid::from_vec(1, 1, 2, vec![0.2, 0.6]).unwrap();
        let m = BinaryMask::from_vec(1, 2, vec![1, 0]).unwrap();
        let s = ring_stats(&g, &m, 0).unwrap();
        assert!((s.mean[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn transform_examples() {
        assert!((match_value(0.6, 0.5, 0.1, 0.2, 0.05) - 0.25).abs() < 1e-12);
        assert_eq!(match_value(0.3, 0.3, 0.0, 0.7, 0.2), 0.7);
        assert_eq!(match_value(0.42, 0.4, 0.1, 0.4, 0.1), 0.42);
    }

    #[test]
    fn ycbcr_round_trip() {
        let g = Grid::from_vec(3, 1, 2, vec![0.1, 0.9, 0.4, 0.3, 0.7, 0.2]).unwrap();
        let back = from_ycbcr(&to_ycbcr(&g));
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn source_equal_to_background_is_identity() {
        let bg = Grid::from_vec(1, 8, 8, (0..64).map(|i| 0.3 + 0.2 * ((i % 5) as f32 / 5.0)).collect()).unwrap();
        let m = BinaryMask::from_fn(8, 8, |y, x| (3..5).contains(&y) && (2..6).contains(&x));
        let out = integrate_images(&bg, &bg, &m, &IntegrationConfig::default()).unwrap();
        for (a, b) in out.image.data().iter().zip(bg.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_on_border_only_returns_background() {
        let bg = Grid::filled(1, 4, 4, 0.5);
        let src = Grid::filled(1, 4, 4, 0.1);
        let m = BinaryMask::from_fn(4, 4, |y, _| y == 0);
        let out = integrate_images(&src, &bg, &m, &IntegrationConfig::default()).unwrap();
        assert_eq!(out.image, bg);
    }
}
