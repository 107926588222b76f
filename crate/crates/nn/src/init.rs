//! Weight initializers. Weights are stored `[fan_in..., fan_out]` (last axis
//! is the output dimension).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
    /// Kaiming normal with ReLU gain: `std = sqrt(2 / fan_in)`.
    HeNormal,
    /// Orthogonal rows/columns (gain 1).
    Orthogonal,
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let fan_out = *shape.last().unwrap_or(&1);
        let fan_in = (n / fan_out.max(1)).max(1);
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => Tensor::new(shape, normals(n, rng).map(|v| v * std).collect()),
            Init::HeNormal => {
                let std = (2.0 / fan_in as f32).sqrt();
                Tensor::new(shape, normals(n, rng).map(|v| v * std).collect())
            }
            Init::Orthogonal => Tensor::new(shape, orthogonal(fan_in, fan_out, rng)),
        }
    }
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> impl Iterator<Item = f32> + '_ {
    (0..n).map(move |_| {
        let v: f32 = StandardNormal.sample(rng);
        v
    })
}

/// Row-major `[rows, cols]` matrix whose rows (if `rows <= cols`) or columns
/// (otherwise) are orthonormal.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f32> {
    // Orthonormalize the `short` vectors of length `long`.
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x
            })
            .collect();
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0f32; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x as f32;
            } else {
                out[j * cols + i] = x as f32;
            }
        }
    }
    out
}
