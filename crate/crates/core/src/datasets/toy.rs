//! Procedural "shapes" datasets: one geometric shape per class, drawn with
//! random colours, pose, scale, background gradient, clutter and sensor
//! noise. Sample `i` of a split depends only on `(seed, split, i)`.

use krlab_nn::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSpec, LabeledDataset, Split, SIDE};
use crate::error::Result;

pub(crate) const SHAPE_COUNT: usize = 8;

/// Inside-test for shape `k` in its unit frame.
fn inside(k: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match k {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => {
            // Triangle with apex up.
            let (ax, ay, bx, by, cx, cy) = (0.0, -0.95, 0.9, 0.7, -0.9, 0.7);
            let s = |px: f32, py: f32, qx: f32, qy: f32| (u - qx) * (py - qy) - (px - qx) * (v - qy);
            let d1 = s(ax, ay, bx, by);
            let d2 = s(bx, by, cx, cy);
            let d3 = s(cx, cy, ax, ay);
            !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
        }
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => (0.3..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u * u + 4.0 * v * v <= 1.0,
        _ => r2 <= 1.0 && v >= -0.1,
    }
}

const PALETTE: [[f32; 3]; SHAPE_COUNT] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.9],
    [0.2, 0.85, 0.9],
    [0.95, 0.6, 0.2],
    [0.6, 0.6, 0.6],
];

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ s.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (index as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
}

/// Renders one `32×32×channels` image of class `label`.
pub fn render_toy_sample(label: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut col = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let bg = col();
    let bg2 = col();
    // Foreground colour leans towards a per-class palette entry.
    let tint = col();
    let hue = PALETTE[label % SHAPE_COUNT];
    let fg = [0, 1, 2].map(|c| 0.6 * hue[c] + 0.4 * tint[c]);
    let clutter_col = col();
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let grad_dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let radius: f32 = rng.random_range(6.0..12.0);
    let cx: f32 = rng.random_range(8.0..24.0);
    let cy: f32 = rng.random_range(8.0..24.0);
    let blend: f32 = rng.random_range(0.6..1.0);
    let noise_sd: f32 = rng.random_range(0.02..0.08);
    // A random stroke as clutter.
    let (lx0, ly0, lx1, ly1) = (
        rng.random_range(0.0..32.0f32),
        rng.random_range(0.0..32.0f32),
        rng.random_range(0.0..32.0f32),
        rng.random_range(0.0..32.0f32),
    );
    let clutter = rng.random_bool(0.4);
    let (ca, sa) = (angle.cos(), angle.sin());
    let (gx, gy) = (grad_dir.cos(), grad_dir.sin());
    let noise = Normal::new(0.0f32, noise_sd).expect("valid sd");
    let mut rgb = vec![0.0f32; SIDE * SIDE * 3];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut cover = 0.0f32;
            let mut stroke = 0.0f32;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let px = x as f32 + ox;
                let py = y as f32 + oy;
                let (dx, dy) = ((px - cx) / radius, (py - cy) / radius);
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                if inside(label, u, v) {
                    cover += 0.25;
                }
                if clutter {
                    let (vx, vy) = (lx1 - lx0, ly1 - ly0);
                    let len2 = (vx * vx + vy * vy).max(1e-6);
                    let t = (((px - lx0) * vx + (py - ly0) * vy) / len2).clamp(0.0, 1.0);
                    let (qx, qy) = (lx0 + t * vx - px, ly0 + t * vy - py);
                    if qx * qx + qy * qy <= 0.8 {
                        stroke += 0.25;
                    }
                }
            }
            let t = 0.5 + 0.5 * (((x as f32 - 16.0) * gx + (y as f32 - 16.0) * gy) / 16.0).clamp(-1.0, 1.0);
            let o = (y * SIDE + x) * 3;
            for c in 0..3 {
                let base = bg[c] * (1.0 - t) + bg2[c] * t;
                let shape = base * (1.0 - blend) + fg[c] * blend;
                let mut v = base * (1.0 - cover) + shape * cover;
                v = v * (1.0 - stroke) + clutter_col[c] * stroke;
                rgb[o + c] = v;
            }
        }
    }
    for v in rgb.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    if channels == 1 {
        rgb.chunks(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect()
    } else {
        rgb
    }
}

fn render_split(spec: &DatasetSpec, seed: u64, split: Split) -> Result<LabeledDataset> {
    let n = spec.size(split);
    let k = spec.num_classes;
    let c = spec.channels;
    let images = par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, i));
        render_toy_sample(i % k, c, &mut rng)
    });
    let mut data = Vec::with_capacity(n * SIDE * SIDE * c);
    for img in images {
        data.extend_from_slice(&img);
    }
    let labels = (0..n).map(|i| i % k).collect();
    LabeledDataset::new(&spec.name, split, k, Tensor::new(&[n, SIDE, SIDE, c], data), labels)
}

pub(crate) fn generate(spec: &DatasetSpec, seed: u64) -> Result<[LabeledDataset; 3]> {
    spec.validate()?;
    Ok([
        render_split(spec, seed, Split::Train)?,
        render_split(spec, seed, Split::Val)?,
        render_split(spec, seed, Split::Test)?,
    ])
}
