//! Elementwise, reduction, shape and dense linear-algebra ops.

use crate::gemm::gemm;
use crate::graph::{val, wants, Graph, Var};
use crate::tensor::Tensor;

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a `[rows, k]` buffer.
pub fn softmax_rows(data: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (r, o) in data.chunks(k).zip(out.chunks_mut(k)) {
        softmax_row(r, o);
    }
    out
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, &[a, b], move |n, g| {
            let mut out = Vec::with_capacity(2);
            if wants(n, a) {
                out.push((a, g.clone()));
            }
            if wants(n, b) {
                out.push((b, g.clone()));
            }
            out
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, &[a, b], move |n, g| {
            let mut out = Vec::with_capacity(2);
            if wants(n, a) {
                out.push((a, g.clone()));
            }
            if wants(n, b) {
                out.push((b, g.map(|v| -v)));
            }
            out
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, &[a, b], move |n, g| {
            let mut out = Vec::with_capacity(2);
            if wants(n, a) {
                out.push((a, g.zip_map(val(n, b), |gv, bv| gv * bv)));
            }
            if wants(n, b) {
                out.push((b, g.zip_map(val(n, a), |gv, av| gv * av)));
            }
            out
        })
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, &[a], move |_, g| vec![(a, g.map(|v| v * factor))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, &[a], move |_, g| vec![(a, g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, &[a], move |n, g| {
            vec![(a, g.zip_map(val(n, a), |gv, x| if x > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, &[a], move |n, g| {
            vec![(
                a,
                g.zip_map(val(n, a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 - s)
                }),
            )]
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, &[a], move |n, g| {
            vec![(a, g.zip_map(val(n, a), |gv, x| gv * sigmoid(x)))]
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let count = t.len();
        let v = Tensor::scalar((t.data().iter().map(|&x| x as f64).sum::<f64>() / count as f64) as f32);
        self.push(v, &[a], move |n, g| {
            vec![(a, Tensor::full(val(n, a).shape(), g.data()[0] / count as f32))]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|&x| x as f64).sum::<f64>() as f32);
        self.push(v, &[a], move |n, g| {
            vec![(a, Tensor::full(val(n, a).shape(), g.data()[0]))]
        })
    }

    /// Adds `bias[C]` along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(bias).len();
        assert_eq!(self.value(x).last_dim(), c, "bias length mismatch");
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(v, &[x, bias], move |n, g| {
            let mut out = Vec::with_capacity(2);
            if wants(n, x) {
                out.push((x, g.clone()));
            }
            if wants(n, bias) {
                let mut gb = vec![0.0f32; c];
                for row in g.data().chunks(c) {
                    for (o, gv) in gb.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
                out.push((bias, Tensor::new(val(n, bias).shape(), gb)));
            }
            out
        })
    }

    /// `x * gamma + beta` over the last (channel) axis. `gamma`/`beta` are
    /// either `[C]` (shared) or `[N, C]` (one row per leading-axis sample).
    pub fn affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let n_samples = xs.dim(0);
        let glen = self.value(gamma).len();
        assert_eq!(glen, self.value(beta).len());
        let per_sample = if glen == c {
            false
        } else {
            assert_eq!(glen, n_samples * c, "affine parameter shape mismatch");
            true
        };
        let rows_per_sample = xs.rows() / n_samples.max(1);
        let block = rows_per_sample * c;
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let params = move |i: usize| if per_sample { i * c..(i + 1) * c } else { 0..c };
        let mut v = xs.clone();
        for (i, sample) in v.data_mut().chunks_mut(block.max(1)).enumerate() {
            let (gs, bs) = (&gm[params(i)], &bt[params(i)]);
            for row in sample.chunks_exact_mut(c) {
                for ((o, &a), &b) in row.iter_mut().zip(gs).zip(bs) {
                    *o = *o * a + b;
                }
            }
        }
        self.push(v, &[x, gamma, beta], move |n, g| {
            let xv = val(n, x);
            let gmv = val(n, gamma).data();
            let mut out = Vec::with_capacity(3);
            if wants(n, x) {
                let mut gx = g.clone();
                for (i, sample) in gx.data_mut().chunks_mut(block.max(1)).enumerate() {
                    let gs = &gmv[params(i)];
                    for row in sample.chunks_exact_mut(c) {
                        for (o, &a) in row.iter_mut().zip(gs) {
                            *o *= a;
                        }
                    }
                }
                out.push((x, gx));
            }
            let need_g = wants(n, gamma);
            let need_b = wants(n, beta);
            if need_g || need_b {
                let mut gg = vec![0.0f32; glen];
                let mut gb = vec![0.0f32; glen];
                let samples = g.data().chunks(block.max(1)).zip(xv.data().chunks(block.max(1)));
                for (i, (gsample, xsample)) in samples.enumerate() {
                    let r = params(i);
                    let (ggs, gbs) = (&mut gg[r.clone()], &mut gb[r]);
                    for (grow, xrow) in gsample.chunks_exact(c).zip(xsample.chunks_exact(c)) {
                        for (((a, b), &gv), &xv) in ggs.iter_mut().zip(gbs.iter_mut()).zip(grow).zip(xrow) {
                            *a += gv * xv;
                            *b += gv;
                        }
                    }
                }
                if need_g {
                    out.push((gamma, Tensor::new(val(n, gamma).shape(), gg)));
                }
                if need_b {
                    out.push((beta, Tensor::new(val(n, beta).shape(), gb)));
                }
            }
            out
        })
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * sv);
        self.push(v, &[x, s], move |n, g| {
            let mut out = Vec::with_capacity(2);
            if wants(n, x) {
                let sv = val(n, s).data()[0];
                out.push((x, g.map(|e| e * sv)));
            }
            if wants(n, s) {
                let d: f64 = g
                    .data()
                    .iter()
                    .zip(val(n, x).data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                out.push((s, Tensor::new(val(n, s).shape(), vec![d as f32])));
            }
            out
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.push(v, &[x], move |n, g| {
            vec![(x, g.clone().reshape(val(n, x).shape()))]
        })
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        assert_eq!(ta.rows(), tb.rows(), "concat_last row mismatch");
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks(ca).zip(tb.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(&shape, data), &[a, b], move |n, g| {
            let mut out = Vec::with_capacity(2);
            let rows = g.rows();
            if wants(n, a) {
                let mut d = Vec::with_capacity(rows * ca);
                for r in g.data().chunks(ca + cb) {
                    d.extend_from_slice(&r[..ca]);
                }
                out.push((a, Tensor::new(val(n, a).shape(), d)));
            }
            if wants(n, b) {
                let mut d = Vec::with_capacity(rows * cb);
                for r in g.data().chunks(ca + cb) {
                    d.extend_from_slice(&r[ca..]);
                }
                out.push((b, Tensor::new(val(n, b).shape(), d)));
            }
            out
        })
    }

    /// Keeps channels `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in t.data().chunks(c) {
            data.extend_from_slice(&r[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(&shape, data), &[x], move |n, g| {
            let xs = val(n, x);
            let mut gx = Tensor::zeros(xs.shape());
            for (o, gi) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                o[start..start + len].copy_from_slice(gi);
            }
            vec![(x, gx)]
        })
    }

    /// Sums the last axis away (`[.., C] -> [..]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let data: Vec<f32> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, data), &[x], move |n, g| {
            let xs = val(n, x);
            let mut gx = Vec::with_capacity(xs.len());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv, c));
            }
            vec![(x, Tensor::new(xs.shape(), gx))]
        })
    }

    /// Sums the spatial axes of an NHWC tensor, giving `[N, C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 4);
        let (nb, hw, c) = (t.dim(0), t.dim(1) * t.dim(2), t.dim(3));
        let mut data = vec![0.0f32; nb * c];
        for (i, sample) in t.data().chunks(hw * c).enumerate() {
            let o = &mut data[i * c..(i + 1) * c];
            for px in sample.chunks(c) {
                for (a, b) in o.iter_mut().zip(px) {
                    *a += b;
                }
            }
        }
        self.push(Tensor::new(&[nb, c], data), &[x], move |n, g| {
            let xs = val(n, x);
            let mut gx = Vec::with_capacity(xs.len());
            for i in 0..nb {
                let row = &g.data()[i * c..(i + 1) * c];
                for _ in 0..hw {
                    gx.extend_from_slice(row);
                }
            }
            vec![(x, Tensor::new(xs.shape(), gx))]
        })
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let hw = (t.dim(1) * t.dim(2)) as f32;
        let s = self.sum_spatial(x);
        self.scale(s, 1.0 / hw)
    }

    /// `a[M,K] · b[K,N]`, or `a · bᵀ` with `b[N,K]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        let (m, k) = (ta.dim(0), ta.dim(1));
        let nn = if trans_b { tb.dim(0) } else { tb.dim(1) };
        assert_eq!(if trans_b { tb.dim(1) } else { tb.dim(0) }, k, "matmul inner dim");
        let mut out = vec![0.0; m * nn];
        gemm(m, k, nn, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        self.push(Tensor::new(&[m, nn], out), &[a, b], move |n, g| {
            let (ta, tb) = (val(n, a), val(n, b));
            let mut res = Vec::with_capacity(2);
            if wants(n, a) {
                let mut ga = vec![0.0; m * k];
                // ga = g · bᵀ  (or g · b when b was stored transposed)
                gemm(m, nn, k, g.data(), false, tb.data(), !trans_b, &mut ga, 0.0);
                res.push((a, Tensor::new(&[m, k], ga)));
            }
            if wants(n, b) {
                let mut gb = vec![0.0; k * nn];
                if trans_b {
                    gemm(nn, m, k, g.data(), true, ta.data(), false, &mut gb, 0.0);
                    res.push((b, Tensor::new(&[nn, k], gb)));
                } else {
                    gemm(k, m, nn, ta.data(), true, g.data(), false, &mut gb, 0.0);
                    res.push((b, Tensor::new(&[k, nn], gb)));
                }
            }
            res
        })
    }

    /// Batched matmul: `a[B,M,K] · b[B,K,N]` (or `b[B,N,K]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 3);
        assert_eq!(tb.rank(), 3);
        let (bs, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
        assert_eq!(tb.dim(0), bs);
        let nn = if trans_b { tb.dim(1) } else { tb.dim(2) };
        let mut out = vec![0.0; bs * m * nn];
        for i in 0..bs {
            gemm(
                m,
                k,
                nn,
                &ta.data()[i * m * k..],
                false,
                &tb.data()[i * k * nn..],
                trans_b,
                &mut out[i * m * nn..],
                0.0,
            );
        }
        self.push(Tensor::new(&[bs, m, nn], out), &[a, b], move |n, g| {
            let (ta, tb) = (val(n, a), val(n, b));
            let mut res = Vec::with_capacity(2);
            if wants(n, a) {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        nn,
                        k,
                        &g.data()[i * m * nn..],
                        false,
                        &tb.data()[i * k * nn..],
                        !trans_b,
                        &mut ga[i * m * k..],
                        0.0,
                    );
                }
                res.push((a, Tensor::new(&[bs, m, k], ga)));
            }
            if wants(n, b) {
                let mut gb = vec![0.0; bs * k * nn];
                for i in 0..bs {
                    if trans_b {
                        gemm(
                            nn,
                            m,
                            k,
                            &g.data()[i * m * nn..],
                            true,
                            &ta.data()[i * m * k..],
                            false,
                            &mut gb[i * k * nn..],
                            0.0,
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            nn,
                            &ta.data()[i * m * k..],
                            true,
                            &g.data()[i * m * nn..],
                            false,
                            &mut gb[i * k * nn..],
                            0.0,
                        );
                    }
                }
                res.push((b, Tensor::new(tb.shape(), gb)));
            }
            res
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = t.last_dim();
        let y = Tensor::new(t.shape(), softmax_rows(t.data(), k));
        let saved = y.clone();
        self.push(y, &[x], move |_, g| {
            let mut gx = vec![0.0; g.len()];
            for ((o, gr), yr) in gx.chunks_mut(k).zip(g.data().chunks(k)).zip(saved.data().chunks(k)) {
                let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(x, Tensor::new(saved.shape(), gx))]
        })
    }

    /// Mean over rows of `-Σ_k target·log_softmax(logits)`; `targets` are
    /// probability rows (hard labels one-hot encoded by the caller).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape(), targets.shape(), "targets must match logits");
        let k = t.last_dim();
        let rows = t.rows();
        let mut total = 0.0f64;
        for (lr, tr) in t.data().chunks(k).zip(targets.data().chunks(k)) {
            let max = lr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + lr.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            for (&l, &tv) in lr.iter().zip(tr) {
                if tv != 0.0 {
                    total -= (tv * (l - lse)) as f64;
                }
            }
        }
        let loss = Tensor::scalar((total / rows as f64) as f32);
        let targets = targets.clone();
        self.push(loss, &[logits], move |n, g| {
            let t = val(n, logits);
            let scale = g.data()[0] / rows as f32;
            let sm = softmax_rows(t.data(), k);
            let mut gx = vec![0.0; t.len()];
            for ((o, sr), tr) in gx.chunks_mut(k).zip(sm.chunks(k)).zip(targets.data().chunks(k)) {
                let mass: f32 = tr.iter().sum();
                for j in 0..k {
                    o[j] = (sr[j] * mass - tr[j]) * scale;
                }
            }
            vec![(logits, Tensor::new(t.shape(), gx))]
        })
    }

    /// Looks up rows of `table[K, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let (k, d) = (t.dim(0), t.dim(1));
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < k, "embedding index {i} out of range {k}");
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        self.push(Tensor::new(&[indices.len(), d], data), &[table], move |n, g| {
            let mut gt = Tensor::zeros(val(n, table).shape());
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                for (o, gv) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *o += gv;
                }
            }
            vec![(table, gt)]
        })
    }
}
