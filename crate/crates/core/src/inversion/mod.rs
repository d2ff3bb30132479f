//! Learning a placeholder-word vector for a defect from a few masked
//! references, with the noise-prediction loss restricted to defect cells.

mod embedding;
mod reference;

pub use embedding::{load_embedding, save_embedding, ConceptEmbedding, EmbeddingMetadata};
pub use reference::{ReferenceSample, ReferenceSet, MORPHOLOGY_WARN_IOU};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{token_id, Autoencoder, Denoiser, NoiseSchedule, PromptEncoding};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::nn::{Adam, Real};

/// Latent-resolution mask: a cell is set if any pixel of its `f × f` block is.
pub fn downsample_mask(m: &BinaryMask, f: usize) -> Result<BinaryMask> {
    m.downsample(f)
}

/// `Σ m (eps − eps_hat)² / (C · |m|)`.
pub fn masked_loss(eps: &Grid, eps_hat: &Grid, m_lat: &BinaryMask) -> Result<f64> {
    eps.check_same_shape(eps_hat, "masked_loss")?;
    eps.check_mask(m_lat, "masked_loss")?;
    let count = m_lat.count();
    ensure!(count > 0, Error::Data("empty defect mask".into()));
    let n = eps.plane_len();
    let mut sum = 0.0f64;
    for c in 0..eps.channels() {
        let (a, b) = (eps.channel(c), eps_hat.channel(c));
        for i in 0..n {
            if m_lat.data()[i] != 0 {
                let d = a[i] as f64 - b[i] as f64;
                sum += d * d;
            }
        }
    }
    Ok(sum / (eps.channels() * count) as f64)
}

/// Masked noise-prediction loss for one latent window and its gradient with
/// respect to the placeholder vector `v`. Model parameters are untouched.
#[allow(clippy::too_many_arguments)]
pub fn concept_loss_grad<T: Real>(
    model: &Denoiser<T>,
    z0: &[T],
    height: usize,
    width: usize,
    mask: &[u8],
    t: usize,
    eps: &[T],
    prompt: &PromptEncoding,
    v: &[T],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<T>)> {
    sched.check_step(t)?;
    let plane = height * width;
    ensure!(
        mask.len() == plane && z0.len() == eps.len() && z0.len() % plane == 0,
        Error::Shape("latent, noise and mask sizes disagree".into())
    );
    let channels = z0.len() / plane;
    let count = mask.iter().filter(|&&m| m != 0).count();
    ensure!(count > 0, Error::Data("empty defect mask".into()));
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    let z_t: Vec<T> = z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect();
    let ctx = model.context_with(prompt, Some(v))?;
    let (out, cache) = model.forward_raw(&z_t, height, width, t, &ctx)?;
    let norm = (channels * count) as f64;
    let scale = T::c(2.0 / norm);
    let mut loss = 0.0;
    let mut grad_out = vec![T::zero(); out.len()];
    for (i, g) in grad_out.iter_mut().enumerate() {
        if mask[i % plane] != 0 {
            let d = out[i] - eps[i];
            loss += d.as_f64() * d.as_f64();
            *g = scale * d;
        }
    }
    let dctx = model
        .backward_raw(&cache, &grad_out, None, true)
        .expect("context gradient requested");
    let dv = model
        .context_backward(prompt, &dctx, None)
        .ok_or_else(|| Error::Parameter("prompt has no placeholder slot".into()))?;
    Ok((loss / norm, dv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConceptOptimizer {
    Sgd,
    /// Per-coordinate adaptive step without momentum.
    #[default]
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_word: String,
    pub optimizer: ConceptOptimizer,
    pub token: String,
    /// Source surface label written into the embedding metadata.
    pub domain: String,
    /// Context kept around each mask, in latent cells. `None` uses the
    /// denoiser's receptive radius, which makes the window exact.
    pub margin: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 2000,
            lr: 5e-3,
            seed: 0,
            init_word: "defect".into(),
            optimizer: ConceptOptimizer::RmsProp,
            token: "S*".into(),
            domain: String::new(),
            margin: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionRun {
    pub embedding: ConceptEmbedding,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

struct Window {
    z: Grid,
    mask: BinaryMask,
}

/// Optimise only the placeholder vector against a frozen model and
/// autoencoder.
pub fn learn_concept(
    model: &Denoiser,
    autoencoder: &Autoencoder,
    refs: &ReferenceSet,
    sched: &NoiseSchedule,
    cfg: &InversionConfig,
) -> Result<InversionRun> {
    ensure!(cfg.lr > 0.0 && cfg.lr.is_finite(), Error::Parameter(format!("learning rate {}", cfg.lr)));
    let init = token_id(&cfg.init_word)
        .ok_or_else(|| Error::Parameter(format!("initialisation word {:?} is not in the vocabulary", cfg.init_word)))?;
    let ctx_len = model.config().context_len;
    let prompt = PromptEncoding::parse(refs.template(), ctx_len)?;
    ensure!(
        prompt.placeholder_slot().is_some(),
        Error::Parameter("template has no placeholder".into())
    );
    let f = autoencoder.factor();
    let margin = cfg.margin.unwrap_or_else(|| model.receptive_radius());
    let mult = model.spatial_multiple();
    let mut windows = Vec::with_capacity(refs.len());
    for (i, s) in refs.samples().iter().enumerate() {
        let z = autoencoder.encode(&s.image)?;
        let m = downsample_mask(&s.mask, f)?;
        ensure!(
            z.height() % mult == 0 && z.width() % mult == 0,
            Error::Shape(format!("reference {i}: latent {}x{} is not a multiple of {mult}", z.height(), z.width()))
        );
        let bbox = m.bbox().ok_or_else(|| Error::Data(format!("reference {i}: empty defect mask")))?;
        let (y0, x0, h, w) = bbox.aligned_window(margin, mult, z.height(), z.width());
        windows.push(Window {
            z: z.crop(y0, x0, h, w)?,
            mask: m.crop(y0, x0, h, w)?,
        });
    }

    let mut v = model.token_embedding(init);
    let mut opt = match cfg.optimizer {
        ConceptOptimizer::Sgd => None,
        ConceptOptimizer::RmsProp => {
            let mut a = Adam::<f32>::new(v.len(), cfg.lr);
            a.beta1 = 0.0;
            Some(a)
        }
        ConceptOptimizer::Adam => Some(Adam::<f32>::new(v.len(), cfg.lr)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let w = &windows[rng.random_range(0..windows.len())];
        let t = rng.random_range(1..=sched.steps());
        let eps: Vec<f32> = (0..w.z.data().len()).map(|_| rng.sample(StandardNormal)).collect();
        let (loss, dv) = concept_loss_grad(
            model,
            w.z.data(),
            w.z.height(),
            w.z.width(),
            w.mask.data(),
            t,
            &eps,
            &prompt,
            &v,
            sched,
        )?;
        let gn = dv.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !gn.is_finite() {
            return Err(Error::NonFinite {
                step,
                loss,
                grad_norm: gn,
            });
        }
        match opt.as_mut() {
            Some(a) => a.update(&mut v, &dv),
            None => {
                let lr = cfg.lr as f32;
                for (x, g) in v.iter_mut().zip(&dv) {
                    *x -= lr * g;
                }
            }
        }
        if step % 200 == 0 {
            debug!("concept step {step}: loss {loss:.5} |dv| {gn:.4}");
        }
        losses.push(loss);
        grad_norms.push(gn);
    }
    Ok(InversionRun {
        embedding: ConceptEmbedding {
            token: cfg.token.clone(),
            vector: v,
            metadata: EmbeddingMetadata {
                domain: cfg.domain.clone(),
                seed: cfg.seed,
                steps: cfg.steps,
                init_word: cfg.init_word.clone(),
            },
        },
        losses,
        grad_norms,
    })
}
