//! Noise-prediction training of the denoiser.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use super::denoiser::Denoiser;
use super::prompt::PromptEncoding;
use super::schedule::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::nn::{clip_grad_norm, Adam, Real};

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Grid,
    pub prompt: PromptEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch: usize,
    /// Square latent crop per sample; `None` trains on whole latents.
    pub crop: Option<usize>,
    /// Probability of replacing the prompt by the null prompt.
    pub prompt_drop: f64,
    pub grad_clip: Option<f64>,
    /// Random horizontal/vertical flips.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 2e-3,
            seed: 0,
            batch: 4,
            crop: Some(32),
            prompt_drop: 0.1,
            grad_clip: Some(1.0),
            flips: true,
        }
    }
}

/// Mean-squared noise-prediction loss for one latent `z0` at step `t` with
/// noise `eps`. Parameter gradients are accumulated into `grads`, scaled by
/// `weight`, when given.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss<T: Real>(
    model: &Denoiser<T>,
    z0: &[T],
    height: usize,
    width: usize,
    t: usize,
    eps: &[T],
    prompt: &PromptEncoding,
    sched: &NoiseSchedule,
    grads: Option<&mut [T]>,
    weight: f64,
) -> Result<f64> {
    sched.check_step(t)?;
    ensure!(
        z0.len() == eps.len(),
        Error::Shape("latent and noise differ in size".into())
    );
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    let z_t: Vec<T> = z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect();
    let ctx = model.context(prompt)?;
    let (out, cache) = model.forward_raw(&z_t, height, width, t, &ctx)?;
    let n = out.len() as f64;
    let mut loss = 0.0;
    let scale = T::c(2.0 * weight / n);
    let grad_out: Vec<T> = out
        .iter()
        .zip(eps)
        .map(|(&o, &e)| {
            let d = o - e;
            loss += d.as_f64() * d.as_f64();
            scale * d
        })
        .collect();
    if let Some(g) = grads {
        let dctx = model.backward_raw(&cache, &grad_out, Some(&mut *g), true);
        if let Some(dctx) = dctx {
            model.context_backward(prompt, &dctx, Some(g));
        }
    }
    Ok(loss / n)
}

/// Train `model` in place on `data`. The autoencoder is only used to encode
/// (it stays frozen). Returns the per-step mean loss.
pub fn train_denoiser(
    model: &mut Denoiser,
    data: &[TrainingExample],
    sched: &NoiseSchedule,
    autoencoder: &Autoencoder,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    ensure!(!data.is_empty(), Error::Data("training set is empty".into()));
    ensure!(cfg.batch >= 1, Error::Parameter("batch must be >= 1".into()));
    ensure!(
        (0.0..=1.0).contains(&cfg.prompt_drop),
        Error::Parameter(format!("prompt drop probability {} outside [0,1]", cfg.prompt_drop))
    );
    let ctx_len = model.config().context_len;
    let m = model.spatial_multiple();
    let latents = data
        .iter()
        .map(|ex| autoencoder.encode(&ex.image))
        .collect::<Result<Vec<_>>>()?;
    for z in &latents {
        ensure!(
            z.channels() == model.config().in_channels,
            Error::Shape(format!(
                "latent has {} channels, model expects {}",
                z.channels(),
                model.config().in_channels
            ))
        );
    }
    if let Some(c) = cfg.crop {
        ensure!(
            c >= m && c % m == 0,
            Error::Parameter(format!("crop {c} must be a positive multiple of {m}"))
        );
    }
    let null = PromptEncoding::null(ctx_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<f32>::new(model.params().len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let weight = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let mut grads = vec![0.0f32; model.params().len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..data.len());
            let z = &latents[i];
            let (h, w) = match cfg.crop {
                Some(c) => (c.min(z.height()), c.min(z.width())),
                None => (z.height(), z.width()),
            };
            ensure!(
                h % m == 0 && w % m == 0,
                Error::Shape(format!("latent {h}x{w} is not a multiple of {m}"))
            );
            let y0 = rng.random_range(0..=z.height() - h);
            let x0 = rng.random_range(0..=z.width() - w);
            let mut patch = z.crop(y0, x0, h, w)?;
            if cfg.flips {
                if rng.random_bool(0.5) {
                    patch = patch.flip_horizontal();
                }
                if rng.random_bool(0.5) {
                    patch = patch.flip_vertical();
                }
            }
            let t = rng.random_range(1..=sched.steps());
            let eps: Vec<f32> = (0..patch.data().len())
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let prompt = if rng.random_bool(cfg.prompt_drop) {
                &null
            } else {
                &data[i].prompt
            };
            loss += weight
                * denoising_loss(model, patch.data(), h, w, t, &eps, prompt, sched, Some(&mut grads), weight)?;
        }
        let norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => clip_grad_norm(&mut grads, 0.0),
        };
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                loss,
                grad_norm: norm,
            });
        }
        adam.update(model.params_mut(), &grads);
        if step % 100 == 0 {
            debug!("denoiser step {step}: loss {loss:.5} grad norm {norm:.4}");
        }
        trace.push(loss);
    }
    Ok(trace)
}
