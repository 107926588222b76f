//! Spectral normalization with a persistent power-iteration vector.

use crate::graph::{val, Graph, Var};
use crate::tensor::Tensor;

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
    let d = n.max(1e-12);
    v.iter_mut().for_each(|x| *x /= d);
}

/// One power-iteration step on `m` viewed as `[rows, cols]`.
/// Returns `(u', v, sigma)` with `sigma = u'ᵀ m v`.
pub fn power_iteration(m: &[f32], cols: usize, u: &[f32]) -> (Vec<f32>, Vec<f32>, f32) {
    let rows = m.len() / cols;
    assert_eq!(u.len(), rows, "power-iteration vector length");
    let mut v = vec![0.0f32; cols];
    for (r, row) in m.chunks(cols).enumerate() {
        for (o, &x) in v.iter_mut().zip(row) {
            *o += u[r] * x;
        }
    }
    normalize(&mut v);
    let mut u2: Vec<f32> = m
        .chunks(cols)
        .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    normalize(&mut u2);
    let sigma: f32 = m
        .chunks(cols)
        .zip(&u2)
        .map(|(row, &ur)| ur * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f32>())
        .sum();
    (u2, v, sigma)
}

impl Graph {
    /// Returns `w / sigma(w)` where `w` is viewed as `[len / last_dim, last_dim]`,
    /// plus the refreshed power-iteration vector and the sigma estimate.
    /// The vectors are treated as constants in the backward pass.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f32]) -> (Var, Vec<f32>, f32) {
        let t = self.value(w);
        let cols = t.last_dim();
        let (u2, v, sigma) = power_iteration(t.data(), cols, u);
        let sigma = sigma.max(1e-12);
        let out = t.map(|x| x / sigma);
        let (uu, vv) = (u2.clone(), v);
        let var = self.push(out, &[w], move |n, g| {
            let wt = val(n, w);
            let dot: f32 = g.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            let coef = dot / (sigma * sigma);
            let mut gw = Vec::with_capacity(wt.len());
            for (r, grow) in g.data().chunks(cols).enumerate() {
                for (c, &gv) in grow.iter().enumerate() {
                    gw.push(gv / sigma - coef * uu[r] * vv[c]);
                }
            }
            vec![(w, Tensor::new(wt.shape(), gw))]
        });
        (var, u2, sigma)
    }
}
