//! Forward noising, classifier-free guidance and the ancestral reverse step.

use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use super::{NoisePredictor, PromptEncoding};
use crate::error::{ensure, Error, Result};
use crate::grid::Grid;

/// Unit-normal grid of the given shape.
pub fn sample_noise<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> Grid {
    let data = (0..channels * height * width)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Grid::from_vec(channels, height, width, data).expect("positive shape")
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`. `t = 0` returns `z0` unchanged.
pub fn forward_diffuse(z0: &Grid, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    z0.check_same_shape(eps, "forward_diffuse")?;
    ensure!(
        t <= sched.steps(),
        Error::Parameter(format!("step {t} outside 0..={}", sched.steps()))
    );
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    Grid::from_vec(z0.channels(), z0.height(), z0.width(), data)
}

/// `eps_uncond + s (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Grid, eps_cond: &Grid, scale: f64) -> Result<Grid> {
    eps_uncond.check_same_shape(eps_cond, "cfg_combine")?;
    ensure!(
        scale >= 0.0 && scale.is_finite(),
        Error::Parameter(format!("guidance scale must be >= 0, got {scale}"))
    );
    let s = scale as f32;
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    Grid::from_vec(eps_uncond.channels(), eps_uncond.height(), eps_uncond.width(), data)
}

/// Clean-sample estimate `(z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(z_t: &Grid, t: usize, eps_hat: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    z_t.check_same_shape(eps_hat, "predict_x0")?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| ((z as f64 - b * e as f64) / a) as f32)
        .collect();
    Grid::from_vec(z_t.channels(), z_t.height(), z_t.width(), data)
}

/// Optional clamp of the clean-sample estimate inside a reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip {
    pub lo: f32,
    pub hi: f32,
}

/// One ancestral step given an already-computed noise estimate.
///
/// `noise` supplies the stochastic term; it is ignored at `t = 1`.
pub fn posterior_step(
    z_t: &Grid,
    t: usize,
    eps_hat: &Grid,
    sched: &NoiseSchedule,
    noise: Option<&Grid>,
    clip: Option<Clip>,
) -> Result<Grid> {
    let mut x0 = predict_x0(z_t, t, eps_hat, sched)?;
    if let Some(c) = clip {
        x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(c.lo, c.hi));
    }
    let beta = sched.beta(t);
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let one_minus = 1.0 - ab_t;
    // Degenerate (noise-free) steps: the posterior collapses onto x0.
    let (c0, ct, var) = if one_minus <= 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (
            ab_prev.sqrt() * beta / one_minus,
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / one_minus,
            (1.0 - ab_prev) / one_minus * beta,
        )
    };
    let sigma = var.max(0.0).sqrt();
    let mut out = Vec::with_capacity(z_t.data().len());
    match noise {
        Some(n) if t > 1 => {
            n.check_same_shape(z_t, "posterior noise")?;
            for ((&x, &z), &e) in x0.data().iter().zip(z_t.data()).zip(n.data()) {
                out.push((c0 * x as f64 + ct * z as f64 + sigma * e as f64) as f32);
            }
        }
        _ => {
            for (&x, &z) in x0.data().iter().zip(z_t.data()) {
                out.push((c0 * x as f64 + ct * z as f64) as f32);
            }
        }
    }
    Grid::from_vec(z_t.channels(), z_t.height(), z_t.width(), out)
}

/// One ancestral DDPM step `z_t → z_{t-1}` with an (unguided) model call.
pub fn reverse_step<M: NoisePredictor + ?Sized, R: Rng>(
    model: &M,
    z_t: &Grid,
    t: usize,
    cond: Option<&PromptEncoding>,
    sched: &NoiseSchedule,
    rng: &mut R,
    clip: Option<Clip>,
) -> Result<Grid> {
    sched.check_step(t)?;
    let eps = model.predict_noise(z_t, t, cond)?;
    let noise = (t > 1).then(|| sample_noise(rng, z_t.channels(), z_t.height(), z_t.width()));
    posterior_step(z_t, t, &eps, sched, noise.as_ref(), clip)
}

/// Full unguided ancestral sampling from pure noise, guided by `scale` when
/// a conditional prompt is given (`scale = 1` uses only the conditional branch).
pub fn sample<M: NoisePredictor + ?Sized, R: Rng>(
    model: &M,
    shape: (usize, usize, usize),
    cond: Option<&PromptEncoding>,
    scale: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    clip: Option<Clip>,
) -> Result<Grid> {
    let (c, h, w) = shape;
    let mut z = sample_noise(rng, c, h, w);
    for t in (1..=sched.steps()).rev() {
        let eps = match cond {
            Some(p) if scale != 1.0 => {
                let u = model.predict_noise(&z, t, None)?;
                let k = model.predict_noise(&z, t, Some(p))?;
                cfg_combine(&u, &k, scale)?
            }
            _ => model.predict_noise(&z, t, cond)?,
        };
        let noise = (t > 1).then(|| sample_noise(rng, c, h, w));
        z = posterior_step(&z, t, &eps, sched, noise.as_ref(), clip)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, ScheduleShape};

    #[test]
    fn closed_form_scalar() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let z0 = Grid::filled(1, 1, 1, 1.0);
        let e = Grid::filled(1, 1, 1, 1.0);
        let out = forward_diffuse(&z0, 1, &e, &s).unwrap();
        assert!((out.get(0, 0, 0) as f64 - (0.5 + 0.75f64.sqrt())).abs() < 1e-6);
    }

    #[test]
    fn step_zero_is_identity() {
        let s = build_schedule(4, 0.1, 0.2, ScheduleShape::Linear).unwrap();
        let z0 = Grid::filled(1, 2, 2, 0.3);
        let e = Grid::filled(1, 2, 2, 5.0);
        assert_eq!(forward_diffuse(&z0, 0, &e, &s).unwrap(), z0);
    }

    #[test]
    fn cfg_rejects_negative_scale() {
        let a = Grid::zeros(1, 1, 1);
        assert!(cfg_combine(&a, &a, -1.0).is_err());
    }
}
