//! Classifier-training augmentations: flip / reflect-pad / crop,
//! TrivialAugment, MixUp and label smoothing.
//!
//! Images are single HWC slices or `[B, H, W, C]` batches in `[0, 1]`;
//! labels are probability rows `[B, K]`, so hard and soft targets share one
//! code path. Every transform takes an explicit RNG.

use krlab_nn::{par, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{KrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Reflect padding before the random crop; 0 disables cropping.
    pub padding: usize,
    pub trivial_augment: bool,
    pub mixup: bool,
    pub mixup_alpha: f32,
    pub label_smoothing: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            padding: 2,
            trivial_augment: true,
            mixup: true,
            mixup_alpha: 0.2,
            label_smoothing: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            padding: 0,
            trivial_augment: false,
            mixup: false,
            mixup_alpha: 0.2,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(KrError::Config(format!("mixup_alpha must be > 0, got {}", self.mixup_alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(KrError::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// `(1 − ε)·y + ε/K` for every row of `labels`.
pub fn smooth_labels(labels: &Tensor, eps: f32) -> Tensor {
    let k = labels.last_dim() as f32;
    labels.map(|v| (1.0 - eps) * v + eps / k)
}

/// Convex combination of each sample with `perm[i]`.
pub fn mix_with(images: &Tensor, labels: &Tensor, lambda: f32, perm: &[usize]) -> (Tensor, Tensor) {
    let mix = |t: &Tensor| {
        let other = t.gather_rows(perm);
        t.zip_map(&other, |a, b| lambda * a + (1.0 - lambda) * b)
    };
    (mix(images), mix(labels))
}

/// MixUp with `λ ~ Beta(α, α)` and a random pairing permutation.
/// Returns the mixed batch and the drawn `λ`.
pub fn mixup<R: Rng + ?Sized>(images: &Tensor, labels: &Tensor, alpha: f32, rng: &mut R) -> Result<(Tensor, Tensor, f32)> {
    let b = images.dim(0);
    if b < 2 {
        return Err(KrError::invalid(format!("mixup needs a batch of at least 2, got {b}")));
    }
    if labels.rows() != b {
        return Err(KrError::invalid("mixup: image and label batch sizes differ"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| KrError::Config(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng).clamp(0.0, 1.0);
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let (x, y) = mix_with(images, labels, lambda, &perm);
    Ok((x, y, lambda))
}

/// Optional horizontal flip (p = 0.5), reflect-pad by `padding`, then a
/// uniformly placed crop back to the input size.
pub fn flip_pad_crop<R: Rng + ?Sized>(
    img: &[f32],
    side: usize,
    c: usize,
    flip: bool,
    padding: usize,
    rng: &mut R,
) -> Vec<f32> {
    let do_flip = flip && rng.random_bool(0.5);
    let (dy, dx) = if padding > 0 {
        (rng.random_range(0..=2 * padding), rng.random_range(0..=2 * padding))
    } else {
        (0, 0)
    };
    let reflect = |i: isize| -> usize {
        let n = side as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut out = vec![0.0; side * side * c];
    for y in 0..side {
        let sy = reflect((y + dy) as isize - padding as isize);
        for x in 0..side {
            let px = reflect((x + dx) as isize - padding as isize);
            let sx = if do_flip { side - 1 - px } else { px };
            let src = (sy * side + sx) * c;
            out[(y * side + x) * c..][..c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// The TrivialAugment transform catalogue (the "wide" variant).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaOp {
    Identity,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Color,
    Contrast,
    Sharpness,
    Posterize,
    Solarize,
    AutoContrast,
    Equalize,
}

impl TaOp {
    pub const ALL: [TaOp; 14] = [
        TaOp::Identity,
        TaOp::ShearX,
        TaOp::ShearY,
        TaOp::TranslateX,
        TaOp::TranslateY,
        TaOp::Rotate,
        TaOp::Brightness,
        TaOp::Color,
        TaOp::Contrast,
        TaOp::Sharpness,
        TaOp::Posterize,
        TaOp::Solarize,
        TaOp::AutoContrast,
        TaOp::Equalize,
    ];

    /// Magnitude range `(lo, hi)` and whether the sign is randomized.
    fn range(self) -> (f32, f32, bool) {
        match self {
            TaOp::ShearX | TaOp::ShearY => (0.0, 0.99, true),
            TaOp::TranslateX | TaOp::TranslateY => (0.0, 32.0, true),
            TaOp::Rotate => (0.0, 135.0, true),
            TaOp::Brightness | TaOp::Color | TaOp::Contrast | TaOp::Sharpness => (0.0, 0.99, true),
            TaOp::Posterize => (2.0, 8.0, false),
            TaOp::Solarize => (0.0, 1.0, false),
            TaOp::Identity | TaOp::AutoContrast | TaOp::Equalize => (0.0, 0.0, false),
        }
    }
}

const BINS: usize = 31;

/// Draws one op uniformly and a magnitude uniformly from its 31 bins.
pub fn sample_ta<R: Rng + ?Sized>(rng: &mut R) -> (TaOp, f32) {
    let op = TaOp::ALL[rng.random_range(0..TaOp::ALL.len())];
    let (lo, hi, signed) = op.range();
    let bin = rng.random_range(0..BINS);
    let mut m = lo + (hi - lo) * bin as f32 / (BINS - 1) as f32;
    if op == TaOp::Posterize {
        // bins map to 8..2 bits
        m = (8.0 - (6.0 * bin as f32 / (BINS - 1) as f32)).round();
    }
    if op == TaOp::Solarize {
        m = 1.0 - m;
    }
    if signed && rng.random_bool(0.5) {
        m = -m;
    }
    (op, m)
}

/// One TrivialAugment draw applied to a square HWC image.
pub fn trivial_augment<R: Rng + ?Sized>(img: &[f32], side: usize, c: usize, rng: &mut R) -> Vec<f32> {
    let (op, m) = sample_ta(rng);
    apply_ta(img, side, c, op, m)
}

pub fn apply_ta(img: &[f32], side: usize, c: usize, op: TaOp, m: f32) -> Vec<f32> {
    let mut out = match op {
        TaOp::Identity => img.to_vec(),
        // inverse maps from output to source coordinates
        TaOp::ShearX => warp(img, side, c, |x, y| (x + m * y, y)),
        TaOp::ShearY => warp(img, side, c, |x, y| (x, y + m * x)),
        TaOp::TranslateX => {
            let t = m.trunc();
            warp(img, side, c, |x, y| (x - t, y))
        }
        TaOp::TranslateY => {
            let t = m.trunc();
            warp(img, side, c, |x, y| (x, y - t))
        }
        TaOp::Rotate => {
            let (s, co) = m.to_radians().sin_cos();
            let ctr = (side as f32 - 1.0) / 2.0;
            warp(img, side, c, |x, y| {
                let (u, v) = (x - ctr, y - ctr);
                (co * u - s * v + ctr, s * u + co * v + ctr)
            })
        }
        TaOp::Brightness => blend(img, &vec![0.0; img.len()], 1.0 + m),
        TaOp::Color => blend(img, &grayscale(img, c), 1.0 + m),
        TaOp::Contrast => {
            let g = grayscale(img, c);
            let mean = g.iter().sum::<f32>() / g.len() as f32;
            blend(img, &vec![mean; img.len()], 1.0 + m)
        }
        TaOp::Sharpness => blend(img, &smoothed(img, side, c), 1.0 + m),
        TaOp::Posterize => {
            let shift = 8 - m as u32;
            img.iter()
                .map(|&v| {
                    let q = ((v * 255.0).round() as u32) >> shift << shift;
                    q as f32 / 255.0
                })
                .collect()
        }
        TaOp::Solarize => img.iter().map(|&v| if v >= m { 1.0 - v } else { v }).collect(),
        TaOp::AutoContrast => autocontrast(img, c),
        TaOp::Equalize => equalize(img, c),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Bilinear resampling through an inverse coordinate map; outside is 0.
fn warp(img: &[f32], side: usize, c: usize, map: impl Fn(f32, f32) -> (f32, f32)) -> Vec<f32> {
    let n = side as isize;
    let px = |x: isize, y: isize, ch: usize| -> f32 {
        if x < 0 || y < 0 || x >= n || y >= n {
            0.0
        } else {
            img[(y as usize * side + x as usize) * c + ch]
        }
    };
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            let (sx, sy) = map(x as f32, y as f32);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = px(x0, y0, ch) * (1.0 - tx) + px(x0 + 1, y0, ch) * tx;
                let bot = px(x0, y0 + 1, ch) * (1.0 - tx) + px(x0 + 1, y0 + 1, ch) * tx;
                out[(y * side + x) * c + ch] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// `degenerate + f·(img − degenerate)`.
fn blend(img: &[f32], degenerate: &[f32], f: f32) -> Vec<f32> {
    img.iter().zip(degenerate).map(|(&a, &d)| d + f * (a - d)).collect()
}

/// Luminance replicated over the channels.
fn grayscale(img: &[f32], c: usize) -> Vec<f32> {
    if c == 1 {
        return img.to_vec();
    }
    let mut out = Vec::with_capacity(img.len());
    for px in img.chunks_exact(c) {
        let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        out.extend(std::iter::repeat_n(l, c));
    }
    out
}

/// 3×3 smoothing (centre weight 5) with the border left untouched.
fn smoothed(img: &[f32], side: usize, c: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for y in 1..side - 1 {
        for x in 1..side - 1 {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let w = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += w * img[((y + dy - 1) * side + x + dx - 1) * c + ch];
                    }
                }
                out[(y * side + x) * c + ch] = acc / 13.0;
            }
        }
    }
    out
}

fn autocontrast(img: &[f32], c: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for ch in 0..c {
        let vals = img.iter().skip(ch).step_by(c);
        let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        if hi > lo {
            for v in out.iter_mut().skip(ch).step_by(c) {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
fn equalize(img: &[f32], c: usize) -> Vec<f32> {
    let level = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as usize;
    let mut out = img.to_vec();
    for ch in 0..c {
        let mut hist = [0usize; 256];
        for &v in img.iter().skip(ch).step_by(c) {
            hist[level(v)] += 1;
        }
        let total: usize = hist.iter().sum();
        let last = hist.iter().rposition(|&h| h > 0).map_or(0, |i| hist[i]);
        let step = (total - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0.0f32; 256];
        let mut cum = step / 2;
        for (l, h) in hist.iter().enumerate() {
            lut[l] = (cum / step).min(255) as f32 / 255.0;
            cum += h;
        }
        for v in out.iter_mut().skip(ch).step_by(c) {
            *v = lut[level(*v)];
        }
    }
    out
}

/// Full training-time stack on a batch: flip/pad-crop → TrivialAugment →
/// MixUp → label smoothing. Per-sample streams are seeded from `rng`, so the
/// result does not depend on how the work is scheduled.
pub fn augment_batch<R: Rng + ?Sized>(
    images: &Tensor,
    labels: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let shape = images.shape().to_vec();
    let (b, side, c) = (shape[0], shape[1], shape[3]);
    let per = side * side * c;
    let seeds: Vec<u64> = (0..b).map(|_| rng.random()).collect();
    let geometric = cfg.horizontal_flip || cfg.padding > 0 || cfg.trivial_augment;
    let mut x = if geometric {
        let src = images.data();
        let imgs = par::map_range(b, |i| {
            let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
            let mut img = flip_pad_crop(&src[i * per..(i + 1) * per], side, c, cfg.horizontal_flip, cfg.padding, &mut r);
            if cfg.trivial_augment {
                img = trivial_augment(&img, side, c, &mut r);
            }
            img
        });
        Tensor::new(&shape, imgs.concat())
    } else {
        images.clone()
    };
    let mut y = labels.clone();
    if cfg.mixup && b >= 2 {
        let (mx, my, _) = mixup(&x, &y, cfg.mixup_alpha, rng)?;
        x = mx;
        y = my;
    }
    if cfg.label_smoothing > 0.0 {
        y = smooth_labels(&y, cfg.label_smoothing);
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, c: usize) -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..32 * 32 * c).map(|_| r.random::<f32>()).collect()
    }

    #[test]
    fn smoothing_examples() {
        let y = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.8, 0.2]);
        let s = smooth_labels(&y, 0.1);
        let want = [0.95, 0.05, 0.5, 0.5, 0.77, 0.23];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_identity_and_convexity() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![0.2, 0.6]);
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let (mx, my) = mix_with(&x, &y, 1.0, &[1, 0]);
        assert_eq!((mx, my), (x.clone(), y.clone()));
        let (mx, my) = mix_with(&x, &y, 0.5, &[1, 0]);
        assert_eq!(my.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!((mx.data()[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn mixup_rejects_single_sample() {
        let x = Tensor::zeros(&[1, 2, 2, 1]);
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]);
        assert!(mixup(&x, &y, 0.2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn beta_draws_stay_in_unit_interval() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::zeros(&[2, 1, 1, 1]);
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        for _ in 0..10_000 {
            let (_, _, l) = mixup(&x, &y, 0.2, &mut r).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn identity_paths() {
        let img = image(1, 3);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(flip_pad_crop(&img, 32, 3, false, 0, &mut r), img);
        assert_eq!(apply_ta(&img, 32, 3, TaOp::Identity, 0.0), img);
        let batch = Tensor::new(&[1, 32, 32, 3], img.clone());
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]);
        let (bx, by) = augment_batch(&batch, &y, &AugmentConfig::none(), &mut r).unwrap();
        assert_eq!((bx, by), (batch, y));
    }

    #[test]
    fn every_op_stays_in_range() {
        for c in [1, 3] {
            let img = image(2, c);
            for op in TaOp::ALL {
                let (lo, hi, _) = op.range();
                for m in [lo, hi, -hi] {
                    let m = if op == TaOp::Posterize { m.clamp(2.0, 8.0) } else { m };
                    let out = apply_ta(&img, 32, c, op, m);
                    assert_eq!(out.len(), img.len());
                    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?} {m}");
                }
            }
        }
    }

    #[test]
    fn flip_reverses_rows() {
        let img = image(4, 1);
        // find a seed that flips
        for s in 0..20 {
            let out = flip_pad_crop(&img, 32, 1, true, 0, &mut ChaCha8Rng::seed_from_u64(s));
            if out != img {
                assert_eq!(out[0], img[31]);
                return;
            }
        }
        panic!("no flip in 20 draws");
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let batch = Tensor::new(&[4, 32, 32, 3], (0..4).flat_map(|s| image(s, 3)).collect());
        let y = crate::datasets::one_hot(&[0, 1, 2, 0], 3);
        let run = |s| augment_batch(&batch, &y, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).0, run(6).0);
    }

    #[test]
    fn equalize_spreads_a_narrow_histogram() {
        let img: Vec<f32> = (0..1024).map(|i| 0.4 + 0.1 * (i % 4) as f32 / 3.0).collect();
        let out = equalize(&img, 1);
        let hi = out.iter().cloned().fold(0.0f32, f32::max);
        let lo = out.iter().cloned().fold(1.0f32, f32::min);
        assert!(hi - lo > 0.5, "{lo}..{hi}");
    }
}
