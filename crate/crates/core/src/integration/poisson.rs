//! Gradient-domain blending with Dirichlet boundary values from the target.
//!
//! The system is solved for the correction `δ = f − t` over the interior:
//! `4 δ_p − Σ_{q ∈ N(p) ∩ Ω} δ_q = Σ_{q ∈ N(p)} [(s_p − s_q) − (t_p − t_q)]`,
//! which is algebraically the same system as for `f` but is exactly zero
//! when the source equals the target.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid};

/// Interior size at or below which `Solver::Auto` factorises directly.
pub const DIRECT_LIMIT: usize = 10_000;
pub const CG_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Auto,
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone)]
pub struct BlendOutcome {
    pub image: Grid,
    /// Pixels clamped into `[0, 1]` after the solve.
    pub clamped: usize,
    /// The mask touched the frame and was shrunk by one pixel.
    pub shrunk: bool,
    /// Largest conjugate-gradient iteration count over channels (0 for direct).
    pub iterations: usize,
}

/// Interior pixels of a mask and the sparse 5-point operator over them.
#[derive(Debug, Clone)]
pub struct PoissonSystem {
    height: usize,
    width: usize,
    /// Row-major pixel index of each unknown.
    pixels: Vec<usize>,
    /// Unknown index per pixel, `usize::MAX` outside the interior.
    index: Vec<usize>,
    /// Interior neighbours of each unknown.
    neighbours: Vec<Vec<usize>>,
}

impl PoissonSystem {
    /// The mask must not touch the frame.
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        let mut index = vec![usize::MAX; h * w];
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    ensure!(
                        y > 0 && x > 0 && y + 1 < h && x + 1 < w,
                        Error::Parameter(format!("interior pixel ({x},{y}) touches the image border"))
                    );
                    index[y * w + x] = pixels.len();
                    pixels.push(y * w + x);
                }
            }
        }
        let neighbours = pixels
            .iter()
            .map(|&p| {
                [p - w, p - 1, p + 1, p + w]
                    .iter()
                    .filter_map(|&q| (index[q] != usize::MAX).then_some(index[q]))
                    .collect()
            })
            .collect();
        Ok(PoissonSystem {
            height: h,
            width: w,
            pixels,
            index,
            neighbours,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.len() {
            let mut v = 4.0 * x[i];
            for &j in &self.neighbours[i] {
                v -= x[j];
            }
            y[i] = v;
        }
    }

    /// Right-hand side of the correction system for one channel.
    pub fn rhs(&self, source: &[f32], target: &[f32]) -> Vec<f64> {
        let w = self.width;
        self.pixels
            .iter()
            .map(|&p| {
                let (sp, tp) = (source[p] as f64, target[p] as f64);
                [p - w, p - 1, p + 1, p + w]
                    .iter()
                    .map(|&q| (sp - source[q] as f64) - (tp - target[q] as f64))
                    .sum()
            })
            .collect()
    }

    /// Half-bandwidth of `A` in the row-major unknown ordering.
    fn bandwidth(&self) -> usize {
        (0..self.len())
            .flat_map(|i| self.neighbours[i].iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Banded Cholesky factorisation and solve.
    pub fn solve_direct(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let bw = self.bandwidth();
        let stride = bw + 1;
        // l[i * stride + (j + bw - i)] holds L[i][j] for i - bw <= j <= i.
        let mut l = vec![0.0f64; n * stride];
        let a = |i: usize, j: usize| -> f64 {
            if i == j {
                4.0
            } else if self.neighbours[i].contains(&j) {
                -1.0
            } else {
                0.0
            }
        };
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw));
                let mut sum = a(i, j);
                for k in k0..j {
                    sum -= l[i * stride + (k + bw - i)] * l[j * stride + (k + bw - j)];
                }
                if i == j {
                    ensure!(
                        sum > 0.0,
                        Error::NoConvergence {
                            iterations: 0,
                            residual: f64::NAN,
                        }
                    );
                    l[i * stride + bw] = sum.sqrt();
                } else {
                    l[i * stride + (j + bw - i)] = sum / l[j * stride + bw];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= l[i * stride + (k + bw - i)] * y[k];
            }
            y[i] = s / l[i * stride + bw];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + 1 + bw).min(n) {
                s -= l[k * stride + (i + bw - k)] * x[k];
            }
            x[i] = s / l[i * stride + bw];
        }
        Ok(x)
    }

    /// Jacobi-preconditioned conjugate gradient to relative residual `tol`.
    /// Returns the solution and the iteration count.
    pub fn solve_cg(&self, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
        let n = self.len();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok((x, 0));
        }
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().map(|v| v / 4.0).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        let mut rel = 1.0;
        for it in 0..max_iter {
            self.apply(&p, &mut ap);
            let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            if rel <= tol {
                return Ok((x, it + 1));
            }
            for i in 0..n {
                z[i] = r[i] / 4.0;
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual: rel,
        })
    }

    /// Write `target + δ` over the interior of `out`.
    fn scatter(&self, delta: &[f64], target: &[f32], out: &mut [f32]) {
        for (i, &p) in self.pixels.iter().enumerate() {
            out[p] = (target[p] as f64 + delta[i]) as f32;
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn unknown_at(&self, pixel: usize) -> Option<usize> {
        let i = self.index[pixel];
        (i != usize::MAX).then_some(i)
    }
}

/// Blend `source` into `target` over `mask`. A mask that touches the frame
/// is shrunk by one pixel first.
pub fn poisson_blend(source: &Grid, target: &Grid, mask: &BinaryMask, solver: Solver, tol: f64) -> Result<BlendOutcome> {
    source.check_same_shape(target, "poisson_blend")?;
    target.check_mask(mask, "poisson_blend")?;
    ensure!(tol > 0.0 && tol.is_finite(), Error::Parameter(format!("tolerance must be positive, got {tol}")));
    let (mask, shrunk) = mask.clear_border();
    if shrunk {
        warn!("blend mask touched the image border; shrunk by one pixel");
    }
    let sys = PoissonSystem::new(&mask)?;
    let mut image = target.clone();
    let mut iterations = 0;
    if !sys.is_empty() {
        let direct = match solver {
            Solver::Auto => sys.len() <= DIRECT_LIMIT,
            Solver::Direct => true,
            Solver::ConjugateGradient => false,
        };
        for c in 0..target.channels() {
            let b = sys.rhs(source.channel(c), target.channel(c));
            let delta = if direct {
                sys.solve_direct(&b)?
            } else {
                let (d, it) = sys.solve_cg(&b, tol, CG_MAX_ITERATIONS)?;
                iterations = iterations.max(it);
                d
            };
            let t = target.channel(c).to_vec();
            sys.scatter(&delta, &t, image.channel_mut(c));
        }
    }
    let clamped = image.clamp01();
    Ok(BlendOutcome {
        image,
        clamped,
        shrunk,
        iterations,
    })
}
