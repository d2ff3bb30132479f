//! Forward and backward kernels over channel-major single-sample tensors.
//!
//! Every layer here is spatially local or acts per pixel. Nothing pools over
//! the whole image, so an output pixel depends only on inputs inside the
//! network's receptive field.

use super::params::{Init, ParamLayout};
use super::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `grad_in = grad_out · silu'(x)`.
pub fn silu_backward<T: Real>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_backward<T: Real>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2-D convolution with "same" zero padding and optional dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        gain: f64,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = cin * k * k;
        let w = layout.push(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::Uniform { fan_in, gain },
        );
        let b = layout.push(format!("{name}.bias"), &[cout], Init::Zero);
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            dilation,
        }
    }

    /// Reach of the kernel from its centre, in pixels.
    pub fn radius(&self) -> usize {
        (self.k / 2) * self.dilation
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let hw = h * w;
        if self.k == 1 {
            return x[..self.cin * hw].to_vec();
        }
        let kk = self.k * self.k;
        let r = (self.k / 2) as isize;
        let d = self.dilation as isize;
        let mut cols = vec![T::zero(); self.cin * kk * hw];
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * hw;
                    let dy = (ky as isize - r) * d;
                    let dx = (kx as isize - r) * d;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize) - dx.max(0)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = sy as usize * w;
                        let dst = row + y * w;
                        let sx0 = (x_lo as isize + dx) as usize;
                        cols[dst + x_lo..dst + x_hi]
                            .copy_from_slice(&plane[src + sx0..src + sx0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize) -> Vec<T> {
        let hw = h * w;
        if self.k == 1 {
            return cols.to_vec();
        }
        let kk = self.k * self.k;
        let r = (self.k / 2) as isize;
        let d = self.dilation as isize;
        let mut x = vec![T::zero(); self.cin * hw];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * hw;
                    let dy = (ky as isize - r) * d;
                    let dx = (kx as isize - r) * d;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize) - dx.max(0)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = ci * hw + sy as usize * w;
                        let src = row + y * w;
                        let sx0 = (x_lo as isize + dx) as usize;
                        for i in 0..(x_hi - x_lo) {
                            x[dst + sx0 + i] += cols[src + x_lo + i];
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output (`cout × h × w`) and the column buffer needed by
    /// [`Conv2d::backward`].
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let hw = h * w;
        let cols = self.im2col(x, h, w);
        let kdim = self.cin * self.k * self.k;
        let mut out = vec![T::zero(); self.cout * hw];
        for co in 0..self.cout {
            let b = p[self.b + co];
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            self.cout,
            kdim,
            hw,
            T::one(),
            &p[self.w..self.w + self.cout * kdim],
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        (out, cols)
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when `need_input`).
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cols: &[T],
        h: usize,
        w: usize,
        grad_out: &[T],
        grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Option<Vec<T>> {
        let hw = h * w;
        let kdim = self.cin * self.k * self.k;
        if let Some(g) = grads {
            T::gemm(
                self.cout,
                hw,
                kdim,
                T::one(),
                grad_out,
                false,
                cols,
                true,
                T::one(),
                &mut g[self.w..self.w + self.cout * kdim],
            );
            for co in 0..self.cout {
                let s: T = grad_out[co * hw..(co + 1) * hw].iter().copied().sum();
                g[self.b + co] += s;
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * hw];
        T::gemm(
            kdim,
            self.cout,
            hw,
            T::one(),
            &p[self.w..self.w + self.cout * kdim],
            true,
            grad_out,
            false,
            T::zero(),
            &mut dcols,
        );
        Some(self.col2im(&dcols, h, w))
    }
}

/// Dense layer on a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn declare(layout: &mut ParamLayout, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        let w = layout.push(
            format!("{name}.weight"),
            &[dout, din],
            Init::Uniform { fan_in: din, gain },
        );
        let b = layout.push(format!("{name}.bias"), &[dout], Init::Zero);
        Linear { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T]) -> Vec<T> {
        (0..self.dout)
            .map(|o| {
                let row = &p[self.w + o * self.din..self.w + (o + 1) * self.din];
                p[self.b + o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        grad_out: &[T],
        grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Option<Vec<T>> {
        if let Some(g) = grads {
            for o in 0..self.dout {
                let go = grad_out[o];
                g[self.b + o] += go;
                let row = &mut g[self.w + o * self.din..self.w + (o + 1) * self.din];
                for (r, &xv) in row.iter_mut().zip(x) {
                    *r += go * xv;
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut gx = vec![T::zero(); self.din];
        for o in 0..self.dout {
            let go = grad_out[o];
            let row = &p[self.w + o * self.din..self.w + (o + 1) * self.din];
            for (gi, &wv) in gx.iter_mut().zip(row) {
                *gi += go * wv;
            }
        }
        Some(gx)
    }
}

/// 2×2 average pooling. `h` and `w` must be even.
pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::c(0.25);
    let mut out = vec![T::zero(); c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ci * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ci * ho + y) * wo + xx] = s * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::c(0.25);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ci * h + y) * w + xx] = g[(ci * ho + y / 2) * wo + xx / 2] * q;
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of a `c × h × w` tensor.
pub fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![T::zero(); c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ci * ho + y) * wo + xx] = x[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ci * h + y / 2) * w + xx / 2] += g[(ci * ho + y) * wo + xx];
            }
        }
    }
    out
}

/// Per-pixel cross-attention from a feature map onto a token context,
/// with a residual connection: `y = x + Wo · softmax(Kᵀ Q / √a) V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttention {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub channels: usize,
    pub ctx_dim: usize,
    pub attn_dim: usize,
}

pub struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    o: Vec<T>,
}

impl CrossAttention {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        channels: usize,
        ctx_dim: usize,
        attn_dim: usize,
    ) -> Self {
        let wq = layout.push(
            format!("{name}.to_q"),
            &[attn_dim, channels],
            Init::Uniform { fan_in: channels, gain: 1.0 },
        );
        let wk = layout.push(
            format!("{name}.to_k"),
            &[attn_dim, ctx_dim],
            Init::Uniform { fan_in: ctx_dim, gain: 1.0 },
        );
        let wv = layout.push(
            format!("{name}.to_v"),
            &[attn_dim, ctx_dim],
            Init::Uniform { fan_in: ctx_dim, gain: 1.0 },
        );
        let wo = layout.push(
            format!("{name}.to_out.weight"),
            &[channels, attn_dim],
            Init::Uniform { fan_in: attn_dim, gain: 1.0 },
        );
        let bo = layout.push(format!("{name}.to_out.bias"), &[channels], Init::Zero);
        CrossAttention {
            wq,
            wk,
            wv,
            wo,
            bo,
            channels,
            ctx_dim,
            attn_dim,
        }
    }

    /// `x` is `channels × n`, `ctx` is `len × ctx_dim`.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], n: usize, ctx: &[T], len: usize) -> (Vec<T>, AttnCache<T>) {
        let (c, d, a) = (self.channels, self.ctx_dim, self.attn_dim);
        let mut q = vec![T::zero(); a * n];
        T::gemm(a, c, n, T::one(), &p[self.wq..self.wq + a * c], false, x, false, T::zero(), &mut q);
        let mut k = vec![T::zero(); a * len];
        T::gemm(a, d, len, T::one(), &p[self.wk..self.wk + a * d], false, ctx, true, T::zero(), &mut k);
        let mut v = vec![T::zero(); a * len];
        T::gemm(a, d, len, T::one(), &p[self.wv..self.wv + a * d], false, ctx, true, T::zero(), &mut v);

        // Scores S = Kᵀ Q / √a, shape len × n; softmax over the token axis.
        let scale = T::one() / T::c(a as f64).sqrt();
        let mut s = vec![T::zero(); len * n];
        T::gemm(len, a, n, scale, &k, true, &q, false, T::zero(), &mut s);
        for j in 0..n {
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(s[l * n + j]);
            }
            let mut z = T::zero();
            for l in 0..len {
                let e = (s[l * n + j] - mx).exp();
                s[l * n + j] = e;
                z += e;
            }
            for l in 0..len {
                s[l * n + j] /= z;
            }
        }
        let attn = s;

        let mut o = vec![T::zero(); a * n];
        T::gemm(a, len, n, T::one(), &v, false, &attn, false, T::zero(), &mut o);
        let mut y = x.to_vec();
        for ch in 0..c {
            let b = p[self.bo + ch];
            y[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        T::gemm(c, a, n, T::one(), &p[self.wo..self.wo + c * a], false, &o, false, T::one(), &mut y);
        (
            y,
            AttnCache {
                q,
                k,
                v,
                a: attn,
                o,
            },
        )
    }

    /// Returns `(grad_x, grad_ctx)`; `grad_ctx` only when requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        n: usize,
        ctx: &[T],
        len: usize,
        cache: &AttnCache<T>,
        grad_y: &[T],
        mut grads: Option<&mut [T]>,
        need_ctx: bool,
    ) -> (Vec<T>, Option<Vec<T>>) {
        let (c, d, a) = (self.channels, self.ctx_dim, self.attn_dim);
        let scale = T::one() / T::c(a as f64).sqrt();

        if let Some(g) = grads.as_deref_mut() {
            T::gemm(c, n, a, T::one(), grad_y, false, &cache.o, true, T::one(), &mut g[self.wo..self.wo + c * a]);
            for ch in 0..c {
                let s: T = grad_y[ch * n..(ch + 1) * n].iter().copied().sum();
                g[self.bo + ch] += s;
            }
        }
        let mut d_o = vec![T::zero(); a * n];
        T::gemm(a, c, n, T::one(), &p[self.wo..self.wo + c * a], true, grad_y, false, T::zero(), &mut d_o);

        let mut dv = vec![T::zero(); a * len];
        T::gemm(a, n, len, T::one(), &d_o, false, &cache.a, true, T::zero(), &mut dv);
        let mut da = vec![T::zero(); len * n];
        T::gemm(len, a, n, T::one(), &cache.v, true, &d_o, false, T::zero(), &mut da);

        // Softmax backward per pixel, then fold in the score scale.
        let mut ds = vec![T::zero(); len * n];
        for j in 0..n {
            let mut dot = T::zero();
            for l in 0..len {
                dot += cache.a[l * n + j] * da[l * n + j];
            }
            for l in 0..len {
                ds[l * n + j] = cache.a[l * n + j] * (da[l * n + j] - dot) * scale;
            }
        }
        let mut dk = vec![T::zero(); a * len];
        T::gemm(a, n, len, T::one(), &cache.q, false, &ds, true, T::zero(), &mut dk);
        let mut dq = vec![T::zero(); a * n];
        T::gemm(a, len, n, T::one(), &cache.k, false, &ds, false, T::zero(), &mut dq);

        if let Some(g) = grads.as_deref_mut() {
            T::gemm(a, n, c, T::one(), &dq, false, x, true, T::one(), &mut g[self.wq..self.wq + a * c]);
            T::gemm(a, len, d, T::one(), &dk, false, ctx, false, T::one(), &mut g[self.wk..self.wk + a * d]);
            T::gemm(a, len, d, T::one(), &dv, false, ctx, false, T::one(), &mut g[self.wv..self.wv + a * d]);
        }

        let mut dx = grad_y.to_vec();
        T::gemm(c, a, n, T::one(), &p[self.wq..self.wq + a * c], true, &dq, false, T::one(), &mut dx);

        let dctx = need_ctx.then(|| {
            let mut dc = vec![T::zero(); len * d];
            T::gemm(len, a, d, T::one(), &dk, true, &p[self.wk..self.wk + a * d], false, T::one(), &mut dc);
            T::gemm(len, a, d, T::one(), &dv, true, &p[self.wv..self.wv + a * d], false, T::one(), &mut dc);
            dc
        });
        (dx, dctx)
    }
}
