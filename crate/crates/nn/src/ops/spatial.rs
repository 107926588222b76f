//! NHWC convolution, normalization and resampling ops.

use std::cell::RefCell;

use crate::gemm::gemm;
use crate::graph::{val, wants, Graph, Var};
use crate::par;
use crate::tensor::Tensor;

/// Images per im2col chunk. Fixed so reductions do not depend on thread count.
const CONV_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Self {
        assert_eq!(x.rank(), 4, "conv2d input must be NHWC");
        assert_eq!(w.rank(), 4, "conv2d weight must be [KH,KW,Ci,Co]");
        let (n, h, wd, ci) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (kh, kw, wci, co) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert!(stride >= 1);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Self {
            n,
            h,
            w: wd,
            ci,
            kh,
            kw,
            co,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_per(&self) -> usize {
        self.h * self.w * self.ci
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    fn chunks(&self) -> usize {
        self.n.div_ceil(CONV_CHUNK)
    }

    fn chunk_range(&self, c: usize) -> (usize, usize) {
        let s = c * CONV_CHUNK;
        (s, (s + CONV_CHUNK).min(self.n) - s)
    }

    fn im2col(&self, x: &[f32], count: usize, col: &mut [f32]) {
        let k = self.k();
        let ci = self.ci;
        let span = self.kw * ci;
        for b in 0..count {
            let img = &x[b * self.in_per()..(b + 1) * self.in_per()];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &mut col[((b * self.ho + oy) * self.wo + ox) * k..][..k];
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let inside_x = ix0 >= 0 && ix0 as usize + self.kw <= self.w;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[ky * span..(ky + 1) * span];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let base = iy as usize * self.w;
                        if inside_x {
                            let src = (base + ix0 as usize) * ci;
                            dst.copy_from_slice(&img[src..src + span]);
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = ix0 + kx as isize;
                            let d = &mut dst[kx * ci..(kx + 1) * ci];
                            if ix < 0 || ix >= self.w as isize {
                                d.fill(0.0);
                            } else {
                                let src = (base + ix as usize) * ci;
                                d.copy_from_slice(&img[src..src + ci]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back into `x`, which must be zeroed.
    fn col2im(&self, col: &[f32], count: usize, x: &mut [f32]) {
        let k = self.k();
        let ci = self.ci;
        let span = self.kw * ci;
        for b in 0..count {
            let img = &mut x[b * self.in_per()..(b + 1) * self.in_per()];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &col[((b * self.ho + oy) * self.wo + ox) * k..][..k];
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let inside_x = ix0 >= 0 && ix0 as usize + self.kw <= self.w;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &row[ky * span..(ky + 1) * span];
                        let base = iy as usize * self.w;
                        if inside_x {
                            let d = (base + ix0 as usize) * ci;
                            for (o, s) in img[d..d + span].iter_mut().zip(src) {
                                *o += s;
                            }
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let d = (base + ix as usize) * ci;
                            for (o, s) in img[d..d + ci].iter_mut().zip(&src[kx * ci..(kx + 1) * ci]) {
                                *o += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a per-thread scratch buffer of `len` floats. Contents are
/// unspecified; callers overwrite what they read.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut v = s.borrow_mut();
        if v.len() < len {
            v.resize(len, 0.0);
        }
        f(&mut v[..len])
    })
}

/// Plain convolution without the tape; shared by the op and its tests.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let geo = ConvGeom::new(x, w, stride, pad);
    let (k, co, opx) = (geo.k(), geo.co, geo.out_px());
    let mut data = vec![0.0f32; geo.n * opx * co];
    par::for_each_chunk_mut(&mut data, CONV_CHUNK * opx * co, |c, out| {
        let (start, count) = geo.chunk_range(c);
        let xin = &x.data()[start * geo.in_per()..(start + count) * geo.in_per()];
        let rows = count * opx;
        if geo.pointwise() {
            gemm(rows, k, co, xin, false, w.data(), false, out, 0.0);
        } else {
            with_scratch(rows * k, |col| {
                geo.im2col(xin, count, col);
                gemm(rows, k, co, col, false, w.data(), false, out, 0.0);
            });
        }
    });
    Tensor::new(&[geo.n, geo.ho, geo.wo, co], data)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let geo = ConvGeom::new(x, w, stride, pad);
    let (k, co, opx) = (geo.k(), geo.co, geo.out_px());
    let gw = need_w.then(|| {
        let parts = par::map_range(geo.chunks(), |c| {
            let (start, count) = geo.chunk_range(c);
            let rows = count * opx;
            let xin = &x.data()[start * geo.in_per()..(start + count) * geo.in_per()];
            let gout = &g.data()[start * opx * co..(start + count) * opx * co];
            let mut acc = vec![0.0f32; k * co];
            if geo.pointwise() {
                gemm(k, rows, co, xin, true, gout, false, &mut acc, 0.0);
            } else {
                with_scratch(rows * k, |col| {
                    geo.im2col(xin, count, col);
                    gemm(k, rows, co, col, true, gout, false, &mut acc, 0.0);
                });
            }
            acc
        });
        let mut all = vec![0.0f32; k * co];
        for part in parts {
            for (a, p) in all.iter_mut().zip(&part) {
                *a += p;
            }
        }
        Tensor::new(w.shape(), all)
    });
    let gx = need_x.then(|| {
        let mut all = vec![0.0f32; x.len()];
        par::for_each_chunk_mut(&mut all, CONV_CHUNK * geo.in_per(), |c, gxc| {
            let (start, count) = geo.chunk_range(c);
            let rows = count * opx;
            let gout = &g.data()[start * opx * co..(start + count) * opx * co];
            if geo.pointwise() {
                gemm(rows, co, k, gout, false, w.data(), true, gxc, 0.0);
            } else {
                with_scratch(rows * k, |gcol| {
                    gemm(rows, co, k, gout, false, w.data(), true, gcol, 0.0);
                    geo.col2im(gcol, count, gxc);
                });
            }
        });
        Tensor::new(x.shape(), all)
    });
    (gx, gw)
}

/// Per-channel sums of `f(value, channel)`, accumulated in f32 over blocks
/// of rows and in f64 across blocks.
fn channel_sums(data: &[f32], c: usize, f: impl Fn(f32, usize) -> f32) -> Vec<f64> {
    let mut total = vec![0.0f64; c];
    let mut part = vec![0.0f32; c];
    for block in data.chunks(c * 256) {
        part.fill(0.0);
        for r in block.chunks_exact(c) {
            for (j, (p, &v)) in part.iter_mut().zip(r).enumerate() {
                *p += f(v, j);
            }
        }
        for (t, &p) in total.iter_mut().zip(&part) {
            *t += p as f64;
        }
    }
    total
}

/// Per-channel `(Σa, Σa·b)` with the same blocked accumulation.
fn paired_channel_sums(a: &[f32], b: &[f32], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sa = vec![0.0f64; c];
    let mut sab = vec![0.0f64; c];
    let mut pa = vec![0.0f32; c];
    let mut pab = vec![0.0f32; c];
    for (ba, bb) in a.chunks(c * 256).zip(b.chunks(c * 256)) {
        pa.fill(0.0);
        pab.fill(0.0);
        for (ra, rb) in ba.chunks_exact(c).zip(bb.chunks_exact(c)) {
            for (((x, y), &u), &v) in pa.iter_mut().zip(pab.iter_mut()).zip(ra).zip(rb) {
                *x += u;
                *y += u * v;
            }
        }
        for j in 0..c {
            sa[j] += pa[j] as f64;
            sab[j] += pab[j] as f64;
        }
    }
    (sa, sab)
}

/// Batch statistics returned by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased variance.
    pub var: Vec<f32>,
}

impl Graph {
    /// 2-D convolution, NHWC input and `[KH, KW, Ci, Co]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let y = conv2d_forward(self.value(x), self.value(w), stride, pad);
        self.push(y, &[x, w], move |n, g| {
            let (gx, gw) = conv2d_backward(
                val(n, x),
                val(n, w),
                g,
                stride,
                pad,
                wants(n, x),
                wants(n, w),
            );
            let mut out = Vec::with_capacity(2);
            if let Some(gx) = gx {
                out.push((x, gx));
            }
            if let Some(gw) = gw {
                out.push((w, gw));
            }
            out
        })
    }

    /// Normalizes over every axis but the last using batch statistics.
    pub fn batch_norm(&mut self, x: Var, eps: f32) -> (Var, BatchStats) {
        let t = self.value(x);
        let c = t.last_dim();
        let rows = t.rows();
        let mean: Vec<f32> = channel_sums(t.data(), c, |v, _| v)
            .into_iter()
            .map(|s| (s / rows as f64) as f32)
            .collect();
        let var: Vec<f32> = channel_sums(t.data(), c, |v, j| {
            let d = v - mean[j];
            d * d
        })
        .into_iter()
        .map(|s| (s / rows as f64) as f32)
        .collect();
        let inv: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut y = t.clone();
        for r in y.data_mut().chunks_exact_mut(c) {
            for ((o, &m), &s) in r.iter_mut().zip(&mean).zip(&inv) {
                *o = (*o - m) * s;
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let out = self.push(y, &[x], move |n, g| {
            let xs = val(n, x);
            let m = rows as f64;
            // gx = inv·g + b·x + c per channel, with b, c from Σg and Σg·x.
            let (sum_g, sum_gx) = paired_channel_sums(g.data(), xs.data(), c);
            let mut coef_b = vec![0.0f32; c];
            let mut coef_c = vec![0.0f32; c];
            for j in 0..c {
                let iv = inv[j] as f64;
                let centered = sum_gx[j] - mean[j] as f64 * sum_g[j];
                let k3 = iv * iv * iv * centered / m;
                coef_b[j] = -k3 as f32;
                coef_c[j] = (-iv * sum_g[j] / m + k3 * mean[j] as f64) as f32;
            }
            let mut gx = g.clone();
            for (o, xr) in gx.data_mut().chunks_exact_mut(c).zip(xs.data().chunks_exact(c)) {
                for ((((ov, &xv), &a), &b), &cc) in o.iter_mut().zip(xr).zip(&inv).zip(&coef_b).zip(&coef_c) {
                    *ov = a * *ov + b * xv + cc;
                }
            }
            vec![(x, gx)]
        });
        (out, stats)
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (nb, h, w, c) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; nb * ho * wo * c];
        let d = t.data();
        for b in 0..nb {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for j in 0..c {
                            out[o + j] += 0.25 * d[i + j];
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(&[nb, ho, wo, c], out), &[x], move |_, g| {
            let mut gx = vec![0.0f32; nb * h * w * c];
            let gd = g.data();
            for b in 0..nb {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = ((b * ho + oy) * wo + ox) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                            for j in 0..c {
                                gx[i + j] += 0.25 * gd[o + j];
                            }
                        }
                    }
                }
            }
            vec![(x, Tensor::new(&[nb, h, w, c], gx))]
        })
    }

    /// 2×2 max pooling, stride 2. Ties resolve to the first window element.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (nb, h, w, c) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; nb * ho * wo * c];
        let mut arg = vec![0u32; nb * ho * wo * c];
        let d = t.data();
        for b in 0..nb {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for j in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + j;
                            if d[i] > best {
                                best = d[i];
                                bi = i;
                            }
                        }
                        out[o + j] = best;
                        arg[o + j] = bi as u32;
                    }
                }
            }
        }
        self.push(Tensor::new(&[nb, ho, wo, c], out), &[x], move |_, g| {
            let mut gx = vec![0.0f32; nb * h * w * c];
            for (gv, &i) in g.data().iter().zip(&arg) {
                gx[i as usize] += gv;
            }
            vec![(x, Tensor::new(&[nb, h, w, c], gx))]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (nb, h, w, c) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; nb * ho * wo * c];
        let d = t.data();
        for b in 0..nb {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    let i = ((b * h + oy / 2) * w + ox / 2) * c;
                    out[o..o + c].copy_from_slice(&d[i..i + c]);
                }
            }
        }
        self.push(Tensor::new(&[nb, ho, wo, c], out), &[x], move |_, g| {
            let mut gx = vec![0.0f32; nb * h * w * c];
            let gd = g.data();
            for b in 0..nb {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = ((b * ho + oy) * wo + ox) * c;
                        let i = ((b * h + oy / 2) * w + ox / 2) * c;
                        for j in 0..c {
                            gx[i + j] += gd[o + j];
                        }
                    }
                }
            }
            vec![(x, Tensor::new(&[nb, h, w, c], gx))]
        })
    }
}
