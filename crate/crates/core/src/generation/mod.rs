//! Inpainting a learned defect onto a clean background: per-step blending of
//! the forward-noised background with the guided reverse prediction, then a
//! hard pixel-space composite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg_combine, forward_diffuse, posterior_step, sample_noise, Autoencoder, Clip, Denoiser, NoisePredictor,
    NoiseSchedule, PromptEncoding,
};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid, PixelBox};
use crate::inversion::ConceptEmbedding;

/// Linear guidance ramp from `s_start` at `t = T` to `s_end` at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub s_start: f64,
    pub s_end: f64,
    pub steps: usize,
}

impl GuidanceSchedule {
    pub fn new(s_start: f64, s_end: f64, steps: usize) -> Result<Self> {
        let gs = GuidanceSchedule { s_start, s_end, steps };
        gs.validate()?;
        Ok(gs)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Error::Parameter("guidance schedule needs at least one step".into()));
        ensure!(
            self.s_start.is_finite() && self.s_end.is_finite() && self.s_start >= 0.0 && self.s_start <= self.s_end,
            Error::Parameter(format!(
                "guidance scales must satisfy 0 <= s_start <= s_end, got {} and {}",
                self.s_start, self.s_end
            ))
        );
        Ok(())
    }
}

pub fn guidance_scale_at(t: usize, gs: &GuidanceSchedule) -> Result<f64> {
    ensure!(
        (1..=gs.steps).contains(&t),
        Error::Parameter(format!("step {t} outside 1..={}", gs.steps))
    );
    if gs.steps == 1 {
        return Ok(gs.s_end);
    }
    let frac = (gs.steps - t) as f64 / (gs.steps - 1) as f64;
    Ok(gs.s_start + (gs.s_end - gs.s_start) * frac)
}

/// One blended step. `m_bg` marks cells that are re-anchored to the noised
/// background; the others take the guided reverse prediction.
///
/// Noise is drawn in a fixed order (reverse branch, then background branch)
/// so the background cells depend only on `x0`, the schedule and the seed.
#[allow(clippy::too_many_arguments)]
pub fn blended_reverse_step<M: NoisePredictor + ?Sized, R: Rng>(
    x_t: &Grid,
    t: usize,
    x0: &Grid,
    m_bg: &BinaryMask,
    model: &M,
    cond: &PromptEncoding,
    sched: &NoiseSchedule,
    gs: &GuidanceSchedule,
    rng: &mut R,
    clip: Option<Clip>,
) -> Result<Grid> {
    x_t.check_same_shape(x0, "blended_reverse_step background")?;
    x_t.check_mask(m_bg, "blended_reverse_step mask")?;
    sched.check_step(t)?;
    let (c, h, w) = x_t.shape();
    let s = guidance_scale_at(t, gs)?;
    let eps_u = model.predict_noise(x_t, t, None)?;
    let eps_c = model.predict_noise(x_t, t, Some(cond))?;
    let eps = cfg_combine(&eps_u, &eps_c, s)?;
    let rev_noise = (t > 1).then(|| sample_noise(rng, c, h, w));
    let p = posterior_step(x_t, t, &eps, sched, rev_noise.as_ref(), clip)?;
    let q = if t > 1 {
        let n = sample_noise(rng, c, h, w);
        forward_diffuse(x0, t - 1, &n, sched)?
    } else {
        x0.clone()
    };
    Ok(select(m_bg, &q, &p))
}

/// `m ? a : b`, per cell and channel.
fn select(m: &BinaryMask, a: &Grid, b: &Grid) -> Grid {
    let mut out = b.clone();
    let n = m.height() * m.width();
    for ch in 0..out.channels() {
        let dst = out.channel_mut(ch);
        let src = a.channel(ch);
        for i in 0..n {
            if m.data()[i] != 0 {
                dst[i] = src[i];
            }
        }
    }
    out
}

/// Tight inclusive bounding box of the mask.
pub fn derive_bbox(mask: &BinaryMask) -> Result<PixelBox> {
    mask.bbox().ok_or_else(|| Error::Parameter("empty defect mask".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub s_start: f64,
    pub s_end: f64,
    /// Pixels by which the defect mask is grown before blending.
    pub dilation: usize,
    /// Latent context kept around the mask; `None` uses the receptive radius,
    /// which leaves the masked cells' distribution unchanged.
    pub margin: Option<usize>,
    /// Clamp of the clean-sample estimate inside each reverse step.
    pub clip: Option<(f32, f32)>,
    pub prompt: String,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            s_start: 1.0,
            s_end: 7.5,
            dilation: 0,
            margin: None,
            clip: Some((0.0, 1.0)),
            prompt: "a photo of S*".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub background: Grid,
    pub defect_mask: BinaryMask,
    pub embedding: ConceptEmbedding,
    pub seed: u64,
    pub options: GenerationOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub token: String,
    pub seed: u64,
    pub steps: usize,
    pub s_start: f64,
    pub s_end: f64,
    pub prompt: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Composite: generated inside the defect mask, background elsewhere.
    pub image: Grid,
    /// Decoded output before compositing (background-anchored outside the
    /// blend window).
    pub generated: Grid,
    pub mask: BinaryMask,
    pub bbox: PixelBox,
    pub provenance: Provenance,
    /// Pixels clamped into `[0, 1]` after decoding.
    pub clamped: usize,
}

pub fn generate_defect(
    req: &GenerationRequest,
    model: &Denoiser,
    autoencoder: &Autoencoder,
    sched: &NoiseSchedule,
) -> Result<SynthesisResult> {
    let opts = &req.options;
    let bg = &req.background;
    bg.check_mask(&req.defect_mask, "generation request")?;
    ensure!(!req.defect_mask.is_empty(), Error::Parameter("empty defect mask".into()));
    ensure!(
        req.embedding.dim() == model.embed_dim(),
        Error::Shape(format!(
            "embedding has dimension {}, model expects {}",
            req.embedding.dim(),
            model.embed_dim()
        ))
    );
    let gs = GuidanceSchedule::new(opts.s_start, opts.s_end, sched.steps())?;
    let prompt = PromptEncoding::parse(&opts.prompt, model.config().context_len)?;
    ensure!(
        prompt.placeholder_slot().is_some(),
        Error::Parameter(format!("prompt {:?} has no placeholder", opts.prompt))
    );
    let prompt = prompt.with_concept(req.embedding.vector.clone());
    let clip = if autoencoder.is_identity() {
        opts.clip.map(|(lo, hi)| Clip { lo, hi })
    } else {
        None
    };

    let blend_mask = req.defect_mask.dilate(opts.dilation);
    let z0 = autoencoder.encode(bg)?;
    let m_lat = blend_mask.downsample(autoencoder.factor())?;
    let mult = model.spatial_multiple();
    ensure!(
        z0.height() % mult == 0 && z0.width() % mult == 0,
        Error::Shape(format!("latent {}x{} is not a multiple of {mult}", z0.height(), z0.width()))
    );
    let margin = opts.margin.unwrap_or_else(|| model.receptive_radius());
    let bbox = m_lat.bbox().expect("non-empty mask");
    let (y0, x0, h, w) = bbox.aligned_window(margin, mult, z0.height(), z0.width());
    let z0_win = z0.crop(y0, x0, h, w)?;
    let m_bg = m_lat.crop(y0, x0, h, w)?.complement();

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut x = sample_noise(&mut rng, z0.channels(), h, w);
    for t in (1..=sched.steps()).rev() {
        x = blended_reverse_step(&x, t, &z0_win, &m_bg, model, &prompt, sched, &gs, &mut rng, clip)?;
    }
    let mut z = z0;
    z.paste(&x, y0, x0)?;
    let mut generated = autoencoder.decode(&z)?;
    let clamped = generated.clamp01();

    let mut image = bg.clone();
    let n = bg.plane_len();
    for c in 0..bg.channels() {
        let src = generated.channel(c).to_vec();
        let dst = image.channel_mut(c);
        for i in 0..n {
            if req.defect_mask.data()[i] != 0 {
                dst[i] = src[i];
            }
        }
    }
    Ok(SynthesisResult {
        image,
        generated,
        mask: req.defect_mask.clone(),
        bbox: derive_bbox(&req.defect_mask)?,
        provenance: Provenance {
            token: req.embedding.token.clone(),
            seed: req.seed,
            steps: sched.steps(),
            s_start: opts.s_start,
            s_end: opts.s_end,
            prompt: opts.prompt.clone(),
        },
        clamped,
    })
}
