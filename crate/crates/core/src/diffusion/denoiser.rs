//! Small two-level U-Net noise predictor `eps_theta(z_t, t, tau(y))`.
//!
//! Layout: conv_in → res(C0) → pool → res(C1) → cross-attn → res(C1) →
//! up → concat skip → res(C0) → conv_out. Time enters every residual block
//! through a sinusoidal embedding; the prompt enters only through the single
//! cross-attention block. There is no normalisation layer, so the network is
//! strictly local with radius [`Denoiser::receptive_radius`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{PromptEncoding, PLACEHOLDER_TOKEN, VOCABULARY};
use super::NoisePredictor;
use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::nn::ops::{self, AttnCache};
use crate::nn::{Conv2d, CrossAttention, Init, Linear, ParamLayout, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub mid_width: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
    /// Token-embedding dimension `d`; a concept vector has this length.
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub context_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 1,
            base_width: 16,
            mid_width: 32,
            time_dim: 32,
            temb_dim: 64,
            embed_dim: 32,
            attn_dim: 32,
            context_len: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels > 0
                && self.base_width > 0
                && self.mid_width > 0
                && self.temb_dim > 0
                && self.embed_dim > 0
                && self.attn_dim > 0
                && self.context_len > 0,
            Error::Config("denoiser widths must be positive".into())
        );
        ensure!(
            self.time_dim >= 2 && self.time_dim % 2 == 0,
            Error::Config("time_dim must be even".into())
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv2d,
    temb: Linear,
    conv2: Conv2d,
}

impl ResBlock {
    fn declare(layout: &mut ParamLayout, name: &str, ch: usize, temb: usize) -> Self {
        ResBlock {
            conv1: Conv2d::declare(layout, &format!("{name}.conv1"), ch, ch, 3, 1, 1.0),
            temb: Linear::declare(layout, &format!("{name}.temb"), temb, ch, 1.0),
            conv2: Conv2d::declare(layout, &format!("{name}.conv2"), ch, ch, 3, 1, 0.5),
        }
    }
}

struct ResCache<T> {
    x: Vec<T>,
    cols1: Vec<T>,
    h1: Vec<T>,
    cols2: Vec<T>,
}

#[derive(Debug, Clone)]
struct Arch {
    time: Linear,
    tok_emb: usize,
    pos_emb: usize,
    conv_in: Conv2d,
    rb1: ResBlock,
    down: Conv2d,
    rb2: ResBlock,
    attn: CrossAttention,
    rb3: ResBlock,
    up: Conv2d,
    merge: Conv2d,
    rb4: ResBlock,
    conv_out: Conv2d,
}

fn build_arch(cfg: &DenoiserConfig) -> (Arch, ParamLayout) {
    let mut l = ParamLayout::default();
    let (c0, c1) = (cfg.base_width, cfg.mid_width);
    let time = Linear::declare(&mut l, "time_embed", cfg.time_dim, cfg.temb_dim, 1.0);
    let tok_emb = l.push(
        "token_embedding",
        &[VOCABULARY.len(), cfg.embed_dim],
        Init::Normal { std: 0.5 },
    );
    let pos_emb = l.push(
        "position_embedding",
        &[cfg.context_len, cfg.embed_dim],
        Init::Normal { std: 0.1 },
    );
    let conv_in = Conv2d::declare(&mut l, "conv_in", cfg.in_channels, c0, 3, 1, 1.0);
    let rb1 = ResBlock::declare(&mut l, "down.res", c0, cfg.temb_dim);
    let down = Conv2d::declare(&mut l, "down.proj", c0, c1, 1, 1, 1.0);
    let rb2 = ResBlock::declare(&mut l, "mid.res1", c1, cfg.temb_dim);
    let attn = CrossAttention::declare(&mut l, "mid.attn", c1, cfg.embed_dim, cfg.attn_dim);
    let rb3 = ResBlock::declare(&mut l, "mid.res2", c1, cfg.temb_dim);
    let up = Conv2d::declare(&mut l, "up.proj", c1, c0, 1, 1, 1.0);
    let merge = Conv2d::declare(&mut l, "up.merge", 2 * c0, c0, 1, 1, 1.0);
    let rb4 = ResBlock::declare(&mut l, "up.res", c0, cfg.temb_dim);
    let conv_out = Conv2d::declare(&mut l, "conv_out", c0, cfg.in_channels, 3, 1, 0.5);
    (
        Arch {
            time,
            tok_emb,
            pos_emb,
            conv_in,
            rb1,
            down,
            rb2,
            attn,
            rb3,
            up,
            merge,
            rb4,
            conv_out,
        },
        l,
    )
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    temb_pre: Vec<T>,
    temb: Vec<T>,
    tsin: Vec<T>,
    ctx: Vec<T>,
    cols_in: Vec<T>,
    rb1: ResCache<T>,
    cols_down: Vec<T>,
    rb2: ResCache<T>,
    attn_in: Vec<T>,
    attn: AttnCache<T>,
    rb3: ResCache<T>,
    cols_up: Vec<T>,
    cols_merge: Vec<T>,
    rb4: ResCache<T>,
    h4: Vec<T>,
    cols_out: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Real = f32> {
    config: DenoiserConfig,
    layout: ParamLayout,
    arch: Arch,
    params: Vec<T>,
}

pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::c(arg.sin());
        out[half + i] = T::c(arg.cos());
    }
    out
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let (arch, layout) = build_arch(&config);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = layout.initialise(&mut rng);
        Ok(Denoiser {
            config,
            layout,
            arch,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build_arch(&config);
        ensure!(
            params.len() == layout.total,
            Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            ))
        );
        Ok(Denoiser {
            config,
            layout,
            arch,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        2
    }

    /// Chebyshev radius, in input cells, beyond which an input cell cannot
    /// influence an output cell.
    pub fn receptive_radius(&self) -> usize {
        let a = &self.arch;
        let full = a.conv_in.radius()
            + a.rb1.conv1.radius()
            + a.rb1.conv2.radius()
            + a.rb4.conv1.radius()
            + a.rb4.conv2.radius()
            + a.conv_out.radius();
        let half = a.rb2.conv1.radius() + a.rb2.conv2.radius() + a.rb3.conv1.radius() + a.rb3.conv2.radius();
        // One cell of slack each for pooling and nearest upsampling alignment.
        full + 2 * half + 2
    }

    /// SHA-256 of the parameter bytes, for frozen-model checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.as_f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Resolved `L × d` context for a prompt (token + position embeddings,
    /// the placeholder slot taking the concept vector).
    pub fn context(&self, prompt: &PromptEncoding) -> Result<Vec<T>> {
        self.context_with(prompt, None)
    }

    /// As [`Denoiser::context`], with the placeholder vector supplied at
    /// model precision instead of from the prompt.
    pub fn context_with(&self, prompt: &PromptEncoding, concept: Option<&[T]>) -> Result<Vec<T>> {
        let (len, d) = (self.config.context_len, self.config.embed_dim);
        ensure!(
            prompt.tokens().len() == len,
            Error::Shape(format!(
                "prompt has {} tokens, model context is {len}",
                prompt.tokens().len()
            ))
        );
        let mut ctx = vec![T::zero(); len * d];
        for (l, &tok) in prompt.tokens().iter().enumerate() {
            let row = &mut ctx[l * d..(l + 1) * d];
            if tok == PLACEHOLDER_TOKEN {
                let missing = || Error::Parameter("prompt has a placeholder but no concept vector".into());
                let len_v = match concept {
                    Some(v) => v.len(),
                    None => prompt.concept().ok_or_else(missing)?.len(),
                };
                ensure!(
                    len_v == d,
                    Error::Shape(format!("concept vector has length {len_v}, model expects {d}"))
                );
                match concept {
                    Some(v) => row.copy_from_slice(v),
                    None => {
                        let v = prompt.concept().ok_or_else(missing)?;
                        for (r, &x) in row.iter_mut().zip(v) {
                            *r = T::from_f32(x);
                        }
                    }
                }
            } else {
                let off = self.arch.tok_emb + tok as usize * d;
                row.copy_from_slice(&self.params[off..off + d]);
            }
            let pos = self.arch.pos_emb + l * d;
            for (r, &p) in row.iter_mut().zip(&self.params[pos..pos + d]) {
                *r += p;
            }
        }
        Ok(ctx)
    }

    /// Scatter a context gradient into embedding-table gradients and return
    /// the gradient with respect to the concept vector (if the prompt has a
    /// placeholder).
    pub fn context_backward(
        &self,
        prompt: &PromptEncoding,
        dctx: &[T],
        grads: Option<&mut [T]>,
    ) -> Option<Vec<T>> {
        let d = self.config.embed_dim;
        let mut dconcept = None;
        let mut grads = grads;
        for (l, &tok) in prompt.tokens().iter().enumerate() {
            let row = &dctx[l * d..(l + 1) * d];
            if tok == PLACEHOLDER_TOKEN {
                dconcept = Some(row.to_vec());
            }
            if let Some(g) = grads.as_deref_mut() {
                if tok != PLACEHOLDER_TOKEN {
                    let off = self.arch.tok_emb + tok as usize * d;
                    for (gi, &r) in g[off..off + d].iter_mut().zip(row) {
                        *gi += r;
                    }
                }
                let pos = self.arch.pos_emb + l * d;
                for (gi, &r) in g[pos..pos + d].iter_mut().zip(row) {
                    *gi += r;
                }
            }
        }
        dconcept
    }

    pub fn token_embedding(&self, token: u16) -> Vec<T> {
        let d = self.config.embed_dim;
        let off = self.arch.tok_emb + token as usize * d;
        self.params[off..off + d].to_vec()
    }

    fn res_forward(&self, rb: &ResBlock, x: Vec<T>, h: usize, w: usize, temb: &[T]) -> (Vec<T>, ResCache<T>) {
        let p = &self.params;
        let hw = h * w;
        let a1 = ops::silu(&x);
        let (mut h1, cols1) = rb.conv1.forward(p, &a1, h, w);
        let tp = rb.temb.forward(p, temb);
        for (ch, &b) in tp.iter().enumerate() {
            h1[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
        let a2 = ops::silu(&h1);
        let (h2, cols2) = rb.conv2.forward(p, &a2, h, w);
        let y: Vec<T> = x.iter().zip(&h2).map(|(&a, &b)| a + b).collect();
        (y, ResCache { x, cols1, h1, cols2 })
    }

    fn res_backward(
        &self,
        rb: &ResBlock,
        c: &ResCache<T>,
        h: usize,
        w: usize,
        temb: &[T],
        gy: &[T],
        mut grads: Option<&mut [T]>,
        g_temb: &mut [T],
    ) -> Vec<T> {
        let p = &self.params;
        let hw = h * w;
        let g_a2 = rb
            .conv2
            .backward(p, &c.cols2, h, w, gy, grads.as_deref_mut(), true)
            .expect("input grad");
        let g_h1 = ops::silu_backward(&c.h1, &g_a2);
        if grads.is_some() {
            let g_tp: Vec<T> = (0..rb.temb.dout)
                .map(|ch| g_h1[ch * hw..(ch + 1) * hw].iter().copied().sum())
                .collect();
            let gt = rb
                .temb
                .backward(p, temb, &g_tp, grads.as_deref_mut(), true)
                .expect("input grad");
            for (a, b) in g_temb.iter_mut().zip(gt) {
                *a += b;
            }
        }
        let g_a1 = rb
            .conv1
            .backward(p, &c.cols1, h, w, &g_h1, grads, true)
            .expect("input grad");
        let mut gx = ops::silu_backward(&c.x, &g_a1);
        for (a, &b) in gx.iter_mut().zip(gy) {
            *a += b;
        }
        gx
    }

    /// Raw forward pass on a `in_channels × h × w` buffer with a resolved
    /// context.
    pub fn forward_raw(&self, x: &[T], h: usize, w: usize, t: usize, ctx: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        ensure!(
            h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0,
            Error::Shape(format!("spatial size {h}x{w} must be even"))
        );
        ensure!(
            x.len() == cfg.in_channels * h * w,
            Error::Shape(format!(
                "input has {} values, expected {}x{h}x{w}",
                x.len(),
                cfg.in_channels
            ))
        );
        ensure!(
            ctx.len() == cfg.context_len * cfg.embed_dim,
            Error::Shape("context size mismatch".into())
        );
        let p = &self.params;
        let a = &self.arch;
        let c0 = cfg.base_width;
        let (hl, wl) = (h / 2, w / 2);

        let tsin = timestep_embedding::<T>(t, cfg.time_dim);
        let temb_pre = a.time.forward(p, &tsin);
        let temb = ops::silu(&temb_pre);

        let (x0, cols_in) = a.conv_in.forward(p, x, h, w);
        let (h1, rb1) = self.res_forward(&a.rb1, x0, h, w, &temb);
        let pooled = ops::avg_pool2(&h1, c0, h, w);
        let (d, cols_down) = a.down.forward(p, &pooled, hl, wl);
        let (h2, rb2) = self.res_forward(&a.rb2, d, hl, wl, &temb);
        let (h2a, attn) = a.attn.forward(p, &h2, hl * wl, ctx, cfg.context_len);
        let (h3, rb3) = self.res_forward(&a.rb3, h2a, hl, wl, &temb);
        let (ulow, cols_up) = a.up.forward(p, &h3, hl, wl);
        let u = ops::upsample2(&ulow, c0, hl, wl);
        let mut cat = u;
        cat.extend_from_slice(&h1);
        let (m, cols_merge) = a.merge.forward(p, &cat, h, w);
        let (h4, rb4) = self.res_forward(&a.rb4, m, h, w, &temb);
        let act = ops::silu(&h4);
        let (out, cols_out) = a.conv_out.forward(p, &act, h, w);
        Ok((
            out,
            ForwardCache {
                h,
                w,
                temb_pre,
                temb,
                tsin,
                ctx: ctx.to_vec(),
                cols_in,
                rb1,
                cols_down,
                rb2,
                attn_in: h2,
                attn,
                rb3,
                cols_up,
                cols_merge,
                rb4,
                h4,
                cols_out,
            },
        ))
    }

    /// Backward pass. Parameter gradients are accumulated into `grads` when
    /// given; the context gradient is returned when `need_ctx`.
    pub fn backward_raw(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &[T],
        mut grads: Option<&mut [T]>,
        need_ctx: bool,
    ) -> Option<Vec<T>> {
        let cfg = &self.config;
        let p = &self.params;
        let a = &self.arch;
        let (h, w) = (cache.h, cache.w);
        let (hl, wl) = (h / 2, w / 2);
        let c0 = cfg.base_width;
        let mut g_temb = vec![T::zero(); cfg.temb_dim];

        let g_act = a
            .conv_out
            .backward(p, &cache.cols_out, h, w, grad_out, grads.as_deref_mut(), true)
            .expect("input grad");
        let g_h4 = ops::silu_backward(&cache.h4, &g_act);
        let g_m = self.res_backward(&a.rb4, &cache.rb4, h, w, &cache.temb, &g_h4, grads.as_deref_mut(), &mut g_temb);
        let g_cat = a
            .merge
            .backward(p, &cache.cols_merge, h, w, &g_m, grads.as_deref_mut(), true)
            .expect("input grad");
        let (g_u, g_skip) = g_cat.split_at(c0 * h * w);
        let g_ulow = ops::upsample2_backward(g_u, c0, hl, wl);
        let g_h3 = a
            .up
            .backward(p, &cache.cols_up, hl, wl, &g_ulow, grads.as_deref_mut(), true)
            .expect("input grad");
        let g_h2a = self.res_backward(&a.rb3, &cache.rb3, hl, wl, &cache.temb, &g_h3, grads.as_deref_mut(), &mut g_temb);
        let (g_h2, g_ctx) = a.attn.backward(
            p,
            &cache.attn_in,
            hl * wl,
            &cache.ctx,
            cfg.context_len,
            &cache.attn,
            &g_h2a,
            grads.as_deref_mut(),
            need_ctx,
        );
        let g_d = self.res_backward(&a.rb2, &cache.rb2, hl, wl, &cache.temb, &g_h2, grads.as_deref_mut(), &mut g_temb);
        let g_pool = a
            .down
            .backward(p, &cache.cols_down, hl, wl, &g_d, grads.as_deref_mut(), true)
            .expect("input grad");
        let mut g_h1 = ops::avg_pool2_backward(&g_pool, c0, h, w);
        for (x, &y) in g_h1.iter_mut().zip(g_skip) {
            *x += y;
        }
        if grads.is_some() {
            let g_x0 = self.res_backward(&a.rb1, &cache.rb1, h, w, &cache.temb, &g_h1, grads.as_deref_mut(), &mut g_temb);
            a.conv_in
                .backward(p, &cache.cols_in, h, w, &g_x0, grads.as_deref_mut(), false);
            let g_pre = ops::silu_backward(&cache.temb_pre, &g_temb);
            a.time.backward(p, &cache.tsin, &g_pre, grads, false);
        }
        g_ctx
    }

    pub fn predict(&self, z_t: &Grid, t: usize, prompt: &PromptEncoding) -> Result<Grid> {
        ensure!(
            z_t.channels() == self.config.in_channels,
            Error::Shape(format!(
                "model expects {} channels, got {}",
                self.config.in_channels,
                z_t.channels()
            ))
        );
        let ctx = self.context(prompt)?;
        let x: Vec<T> = z_t.data().iter().map(|&v| T::from_f32(v)).collect();
        let (out, _) = self.forward_raw(&x, z_t.height(), z_t.width(), t, &ctx)?;
        Grid::from_vec(
            z_t.channels(),
            z_t.height(),
            z_t.width(),
            out.into_iter().map(|v| v.as_f32()).collect(),
        )
    }
}

impl<T: Real> NoisePredictor for Denoiser<T> {
    fn predict_noise(&self, z_t: &Grid, t: usize, cond: Option<&PromptEncoding>) -> Result<Grid> {
        match cond {
            Some(p) => self.predict(z_t, t, p),
            None => self.predict(z_t, t, &PromptEncoding::null(self.config.context_len)),
        }
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 1,
            base_width: 4,
            mid_width: 6,
            time_dim: 8,
            temb_dim: 8,
            embed_dim: 5,
            attn_dim: 4,
            context_len: 4,
        }
    }

    #[test]
    fn shape_and_determinism() {
        let m: Denoiser = Denoiser::new(tiny(), 3).unwrap();
        let z = Grid::from_vec(1, 6, 8, (0..48).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        let a = m.predict_noise(&z, 5, None).unwrap();
        let b = m.predict_noise(&z, 5, None).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn receptive_radius_bounds_influence() {
        let m: Denoiser = Denoiser::new(tiny(), 4).unwrap();
        let n = 48;
        let base = Grid::zeros(1, n, n);
        let out0 = m.predict_noise(&base, 3, None).unwrap();
        let mut poked = base.clone();
        poked.set(0, 24, 24, 1.0);
        let out1 = m.predict_noise(&poked, 3, None).unwrap();
        let r = m.receptive_radius();
        let mut reach = 0usize;
        for y in 0..n {
            for x in 0..n {
                if out0.get(0, y, x) != out1.get(0, y, x) {
                    reach = reach.max(y.abs_diff(24)).max(x.abs_diff(24));
                }
            }
        }
        assert!(reach > 0 && reach <= r, "reach {reach} radius {r}");
    }

    #[test]
    fn placeholder_requires_concept() {
        let m: Denoiser = Denoiser::new(tiny(), 1).unwrap();
        let p = PromptEncoding::parse("a S*", 4).unwrap();
        assert!(m.context(&p).is_err());
        let bad = p.clone().with_concept(vec![0.0; 3]);
        assert!(matches!(m.context(&bad), Err(Error::Shape(_))));
        assert!(m.context(&p.with_concept(vec![0.0; 5])).is_ok());
    }
}
