//! Image ↔ latent maps: the identity (pixel-space diffusion) and a learned
//! patch autoencoder with spatial compression `f`.
//!
//! The learned encoder maps each non-overlapping `f × f` patch to one latent
//! cell independently, so latent locality is exact at patch granularity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::nn::ops::{silu, silu_backward};
use crate::nn::{Adam, Init, ParamLayout, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAutoencoderConfig {
    pub channels: usize,
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for PatchAutoencoderConfig {
    fn default() -> Self {
        PatchAutoencoderConfig {
            channels: 1,
            factor: 4,
            latent_channels: 8,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        AutoencoderTraining {
            steps: 3000,
            batch: 256,
            lr: 2e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

impl Dense {
    fn declare(l: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        let w = l.push(format!("{name}.weight"), &[dout, din], Init::Uniform { fan_in: din, gain: 1.0 });
        let b = l.push(format!("{name}.bias"), &[dout], Init::Zero);
        Dense { w, b, din, dout }
    }

    /// `Y = W X + b` over `n` columns.
    fn forward(&self, p: &[f32], x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0.0; self.dout * n];
        for o in 0..self.dout {
            y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = p[self.b + o]);
        }
        f32::gemm(self.dout, self.din, n, 1.0, &p[self.w..self.w + self.dout * self.din], false, x, false, 1.0, &mut y);
        y
    }

    fn backward(&self, p: &[f32], x: &[f32], gy: &[f32], n: usize, g: &mut [f32]) -> Vec<f32> {
        f32::gemm(self.dout, n, self.din, 1.0, gy, false, x, true, 1.0, &mut g[self.w..self.w + self.dout * self.din]);
        for o in 0..self.dout {
            g[self.b + o] += gy[o * n..(o + 1) * n].iter().sum::<f32>();
        }
        let mut gx = vec![0.0; self.din * n];
        f32::gemm(self.din, self.dout, n, 1.0, &p[self.w..self.w + self.dout * self.din], true, gy, false, 0.0, &mut gx);
        gx
    }
}

#[derive(Debug, Clone)]
pub struct PatchAutoencoder {
    config: PatchAutoencoderConfig,
    layout: ParamLayout,
    enc1: Dense,
    enc2: Dense,
    dec1: Dense,
    dec2: Dense,
    params: Vec<f32>,
}

fn build(cfg: &PatchAutoencoderConfig) -> (ParamLayout, [Dense; 4]) {
    let pd = cfg.channels * cfg.factor * cfg.factor;
    let mut l = ParamLayout::default();
    let e1 = Dense::declare(&mut l, "encoder.fc1", pd, cfg.hidden);
    let e2 = Dense::declare(&mut l, "encoder.fc2", cfg.hidden, cfg.latent_channels);
    let d1 = Dense::declare(&mut l, "decoder.fc1", cfg.latent_channels, cfg.hidden);
    let d2 = Dense::declare(&mut l, "decoder.fc2", cfg.hidden, pd);
    (l, [e1, e2, d1, d2])
}

impl PatchAutoencoder {
    pub fn new(config: PatchAutoencoderConfig, seed: u64) -> Result<Self> {
        ensure!(
            config.factor >= 2 && config.factor.is_power_of_two(),
            Error::Config(format!("compression factor must be a power of two >= 2, got {}", config.factor))
        );
        ensure!(
            config.channels > 0 && config.latent_channels > 0 && config.hidden > 0,
            Error::Config("autoencoder widths must be positive".into())
        );
        let (layout, [enc1, enc2, dec1, dec2]) = build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.initialise(&mut rng);
        Ok(PatchAutoencoder {
            config,
            layout,
            enc1,
            enc2,
            dec1,
            dec2,
            params,
        })
    }

    pub fn from_params(config: PatchAutoencoderConfig, params: Vec<f32>) -> Result<Self> {
        let mut ae = PatchAutoencoder::new(config, 0)?;
        ensure!(
            params.len() == ae.layout.total,
            Error::Shape(format!("autoencoder expects {} parameters, got {}", ae.layout.total, params.len()))
        );
        ae.params = params;
        Ok(ae)
    }

    pub fn config(&self) -> &PatchAutoencoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    fn patch_dim(&self) -> usize {
        self.config.channels * self.config.factor * self.config.factor
    }

    /// Columns are patches in row-major latent order.
    fn to_patches(&self, x: &Grid) -> Vec<f32> {
        let f = self.config.factor;
        let (c, h, w) = x.shape();
        let (hl, wl) = (h / f, w / f);
        let n = hl * wl;
        let mut out = vec![0.0; self.patch_dim() * n];
        for ci in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let row = (ci * f + dy) * f + dx;
                    for ly in 0..hl {
                        for lx in 0..wl {
                            out[row * n + ly * wl + lx] = x.get(ci, ly * f + dy, lx * f + dx);
                        }
                    }
                }
            }
        }
        out
    }

    fn from_patches(&self, cols: &[f32], hl: usize, wl: usize) -> Grid {
        let f = self.config.factor;
        let c = self.config.channels;
        let n = hl * wl;
        let mut g = Grid::zeros(c, hl * f, wl * f);
        for ci in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let row = (ci * f + dy) * f + dx;
                    for ly in 0..hl {
                        for lx in 0..wl {
                            g.set(ci, ly * f + dy, lx * f + dx, cols[row * n + ly * wl + lx]);
                        }
                    }
                }
            }
        }
        g
    }

    fn encode_cols(&self, patches: &[f32], n: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let h_pre = self.enc1.forward(&self.params, patches, n);
        let h = silu(&h_pre);
        let z = self.enc2.forward(&self.params, &h, n);
        (h_pre, h, z)
    }

    fn decode_cols(&self, z: &[f32], n: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let h_pre = self.dec1.forward(&self.params, z, n);
        let h = silu(&h_pre);
        let x = self.dec2.forward(&self.params, &h, n);
        (h_pre, h, x)
    }

    pub fn encode(&self, x: &Grid) -> Result<Grid> {
        let f = self.config.factor;
        ensure!(
            x.channels() == self.config.channels,
            Error::Shape(format!("autoencoder expects {} channels, got {}", self.config.channels, x.channels()))
        );
        ensure!(
            x.height() % f == 0 && x.width() % f == 0,
            Error::Shape(format!("image {}x{} not divisible by factor {f}", x.height(), x.width()))
        );
        let (hl, wl) = (x.height() / f, x.width() / f);
        let (_, _, z) = self.encode_cols(&self.to_patches(x), hl * wl);
        Grid::from_vec(self.config.latent_channels, hl, wl, z)
    }

    pub fn decode(&self, z: &Grid) -> Result<Grid> {
        ensure!(
            z.channels() == self.config.latent_channels,
            Error::Shape(format!(
                "latent has {} channels, autoencoder expects {}",
                z.channels(),
                self.config.latent_channels
            ))
        );
        let (_, _, x) = self.decode_cols(z.data(), z.plane_len());
        Ok(self.from_patches(&x, z.height(), z.width()))
    }

    /// Fit on random patches of `images` by mean-squared reconstruction error.
    /// Returns the per-step loss.
    pub fn train(&mut self, images: &[Grid], cfg: &AutoencoderTraining) -> Result<Vec<f64>> {
        ensure!(!images.is_empty(), Error::Data("autoencoder training set is empty".into()));
        let f = self.config.factor;
        let pd = self.patch_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::<f32>::new(self.params.len(), cfg.lr);
        let mut trace = Vec::with_capacity(cfg.steps);
        let n = cfg.batch.max(1);
        for step in 0..cfg.steps {
            let mut batch = vec![0.0f32; pd * n];
            for j in 0..n {
                let img = &images[rng.random_range(0..images.len())];
                let y0 = rng.random_range(0..=img.height() - f);
                let x0 = rng.random_range(0..=img.width() - f);
                for ci in 0..self.config.channels {
                    for dy in 0..f {
                        for dx in 0..f {
                            batch[((ci * f + dy) * f + dx) * n + j] = img.get(ci, y0 + dy, x0 + dx);
                        }
                    }
                }
            }
            let (eh_pre, eh, z) = self.encode_cols(&batch, n);
            let (dh_pre, dh, xr) = self.decode_cols(&z, n);
            let count = (pd * n) as f32;
            let mut loss = 0.0f64;
            let gx: Vec<f32> = xr
                .iter()
                .zip(&batch)
                .map(|(&a, &b)| {
                    loss += ((a - b) as f64).powi(2);
                    2.0 * (a - b) / count
                })
                .collect();
            loss /= count as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    loss,
                    grad_norm: f64::NAN,
                });
            }
            let mut g = vec![0.0f32; self.params.len()];
            let gdh = self.dec2.backward(&self.params, &dh, &gx, n, &mut g);
            let gdh_pre = silu_backward(&dh_pre, &gdh);
            let gz = self.dec1.backward(&self.params, &z, &gdh_pre, n, &mut g);
            let geh = self.enc2.backward(&self.params, &eh, &gz, n, &mut g);
            let geh_pre = silu_backward(&eh_pre, &geh);
            self.enc1.backward(&self.params, &batch, &geh_pre, n, &mut g);
            adam.update(&mut self.params, &g);
            trace.push(loss);
        }
        Ok(trace)
    }
}

/// The map between images and the space diffusion runs in.
#[derive(Debug, Clone, Default)]
pub enum Autoencoder {
    /// Pixel-space diffusion: `z = x`, `f = 1`.
    #[default]
    Identity,
    Learned(PatchAutoencoder),
}

impl Autoencoder {
    pub fn factor(&self) -> usize {
        match self {
            Autoencoder::Identity => 1,
            Autoencoder::Learned(ae) => ae.config.factor,
        }
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        match self {
            Autoencoder::Identity => image_channels,
            Autoencoder::Learned(ae) => ae.config.latent_channels,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Autoencoder::Identity)
    }

    pub fn encode(&self, x: &Grid) -> Result<Grid> {
        match self {
            Autoencoder::Identity => Ok(x.clone()),
            Autoencoder::Learned(ae) => ae.encode(x),
        }
    }

    pub fn decode(&self, z: &Grid) -> Result<Grid> {
        match self {
            Autoencoder::Identity => Ok(z.clone()),
            Autoencoder::Learned(ae) => ae.decode(z),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Autoencoder::Identity => h.update(b"identity"),
            Autoencoder::Learned(ae) => {
                for p in &ae.params {
                    h.update(p.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Peak signal-to-noise ratio in dB for signals with peak 1.
pub fn psnr(a: &Grid, b: &Grid) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
