//! Adversarial training of the class-conditional generator.
//!
//! Each optimizer step runs `d_updates_per_g` discriminator updates on fresh
//! real batches and then one generator update; an EMA copy of the generator
//! is maintained and written to a checkpoint every `checkpoint_every`
//! epochs. An epoch is one pass of the discriminator over the real training
//! set, so it holds `floor(N / B)` discriminator batches.

use std::path::{Path, PathBuf};

use krlab_nn::optim::{Adam, AdamConfig};
use krlab_nn::{ops, Binder, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datasets::LabeledDataset;
use crate::error::{KrError, Result};
use crate::nets::{ema_update, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Profile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialLoss {
    Logistic,
    Hinge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub d_updates_per_g: usize,
    pub loss: AdversarialLoss,
    /// One-sided smoothing of the real target.
    pub d_label_smoothing: f32,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub ema_decay: f32,
    /// Generator step at which averaging starts; before it the EMA copy
    /// tracks the live weights.
    pub ema_start: u64,
    pub checkpoint_every: usize,
}

impl GanTrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let full = Self {
            epochs: 500,
            batch_size: 64,
            d_updates_per_g: 4,
            loss: AdversarialLoss::Logistic,
            d_label_smoothing: 0.1,
            g_optimizer: AdamConfig::adam(2e-4, 0.5, 0.999),
            d_optimizer: AdamConfig::adamw(2e-4, 0.5, 0.999, 0.004),
            ema_decay: 0.9999,
            ema_start: 1000,
            checkpoint_every: 5,
        };
        match profile {
            Profile::Full => full,
            // A 30-epoch run on 3000 images makes only a few hundred
            // generator steps, so averaging starts early with a short window.
            Profile::Tiny => Self {
                epochs: 30,
                ema_decay: 0.99,
                ema_start: 50,
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KrError::Config(format!("gan: {m}")));
        if self.d_updates_per_g == 0 {
            return bad("d_updates_per_g must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.d_label_smoothing) {
            return bad("d_label_smoothing must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        Ok(())
    }

    /// Epochs at which checkpoints are written.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs / self.checkpoint_every).map(|i| i * self.checkpoint_every).collect()
    }
}

/// A saved generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: PathBuf,
    /// Validation CAS, filled in by checkpoint selection.
    pub cas_validation: Option<f64>,
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("gan_epoch_{epoch:04}.ckpt")
}

/// Per-epoch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochMetrics {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanRun {
    pub checkpoints: Vec<CheckpointRecord>,
    pub metrics: Vec<GanEpochMetrics>,
    pub d_steps: u64,
    pub g_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanCheckpointMeta {
    pub epoch: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub g_steps: u64,
}

// ----- losses -----------------------------------------------------------------

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn sp(x: f32) -> f64 {
    ops::softplus(x) as f64
}

/// `mean[(1−ε)·softplus(−r) + ε·softplus(r)] + mean[softplus(f)]`.
pub fn logistic_d_loss(real: &[f32], fake: &[f32], eps: f32) -> f64 {
    let e = eps as f64;
    mean(real.iter().map(|&r| (1.0 - e) * sp(-r) + e * sp(r))) + mean(fake.iter().map(|&f| sp(f)))
}

/// Non-saturating `mean softplus(−f)`.
pub fn logistic_g_loss(fake: &[f32]) -> f64 {
    mean(fake.iter().map(|&f| sp(-f)))
}

/// `(mean relu(1−r) + mean relu(1+f), −mean f)`.
pub fn hinge_losses(real: &[f32], fake: &[f32]) -> (f64, f64) {
    let d = mean(real.iter().map(|&r| (1.0 - r as f64).max(0.0))) + mean(fake.iter().map(|&f| (1.0 + f as f64).max(0.0)));
    (d, -mean(fake.iter().map(|&f| f as f64)))
}

/// Discriminator loss on the graph.
pub fn d_loss_var(g: &mut Graph, kind: AdversarialLoss, real: Var, fake: Var, eps: f32) -> Var {
    match kind {
        AdversarialLoss::Logistic => {
            let neg_r = g.scale(real, -1.0);
            let sp_neg = g.softplus(neg_r);
            let sp_pos = g.softplus(real);
            let a = g.scale(sp_neg, 1.0 - eps);
            let b = g.scale(sp_pos, eps);
            let rt = g.add(a, b);
            let rt = g.mean_all(rt);
            let ft = g.softplus(fake);
            let ft = g.mean_all(ft);
            g.add(rt, ft)
        }
        AdversarialLoss::Hinge => {
            let neg_r = g.scale(real, -1.0);
            let r1 = g.add_scalar(neg_r, 1.0);
            let r1 = g.relu(r1);
            let rt = g.mean_all(r1);
            let f1 = g.add_scalar(fake, 1.0);
            let f1 = g.relu(f1);
            let ft = g.mean_all(f1);
            g.add(rt, ft)
        }
    }
}

/// Generator loss on the graph.
pub fn g_loss_var(g: &mut Graph, kind: AdversarialLoss, fake: Var) -> Var {
    let neg = g.scale(fake, -1.0);
    match kind {
        AdversarialLoss::Logistic => {
            let s = g.softplus(neg);
            g.mean_all(s)
        }
        AdversarialLoss::Hinge => g.mean_all(neg),
    }
}

// ----- training ---------------------------------------------------------------

/// Standard-normal latents `[n, dim]` scaled by `sigma`.
pub fn normal_latents<R: Rng + ?Sized>(n: usize, dim: usize, sigma: f32, rng: &mut R) -> Tensor {
    Tensor::new(
        &[n, dim],
        (0..n * dim).map(|_| sigma * rng.sample::<f32, _>(StandardNormal)).collect(),
    )
}

fn check_finite(v: f32, what: &str, epoch: usize, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(KrError::NonFinite {
            context: format!("{what}, epoch {epoch}, generator step {step}"),
        })
    }
}

/// Trains G and D on `train`, writing checkpoints into `out_dir`.
///
/// On a non-finite loss the current states are written to
/// `gan_nonfinite.ckpt` before the error is returned.
pub fn train_gan(
    train: &LabeledDataset,
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    cfg: &GanTrainConfig,
    seed: u64,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&GanEpochMetrics),
) -> Result<GanRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(KrError::invalid("GAN training set is empty"));
    }
    if gen_cfg.num_classes != train.num_classes || disc_cfg.num_classes != train.num_classes {
        return Err(KrError::Config("network class count differs from the dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generator::new(gen_cfg.clone(), rng.random())?;
    let mut disc = Discriminator::new(disc_cfg.clone(), rng.random())?;
    let mut ema = gen.store.clone();
    let mut g_opt = Adam::new(cfg.g_optimizer);
    let mut d_opt = Adam::new(cfg.d_optimizer);
    let k = train.num_classes;
    let n = train.len();
    let b = cfg.batch_size.min(n);
    let d_batches = n / b;
    let g_per_epoch = d_batches / cfg.d_updates_per_g;
    if g_per_epoch == 0 {
        return Err(KrError::Config(format!(
            "{n} samples at batch {b} give fewer than {} discriminator batches per epoch",
            cfg.d_updates_per_g
        )));
    }
    let meta = |epoch, g_steps| GanCheckpointMeta {
        epoch,
        generator: gen_cfg.clone(),
        discriminator: disc_cfg.clone(),
        g_steps,
    };
    let (mut d_steps, mut g_steps) = (0u64, 0u64);
    let mut run = GanRun {
        checkpoints: Vec::new(),
        metrics: Vec::new(),
        d_steps: 0,
        g_steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut dl, mut gl, mut dr, mut df) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for step in 0..g_per_epoch {
            for u in 0..cfg.d_updates_per_g {
                let start = (step * cfg.d_updates_per_g + u) * b;
                let idx = &order[start..start + b];
                let real = train.images.gather_rows(idx);
                let real_labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let z = normal_latents(b, gen_cfg.latent_dim, 1.0, &mut rng);
                let fake_labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
                let fake = {
                    let mut g = Graph::new();
                    let mut p = Binder::new(&mut gen.store, true, false);
                    let zv = g.input(z);
                    let x = gen.arch.forward(&mut g, &mut p, zv, &fake_labels)?;
                    g.value(x).clone()
                };
                let mut g = Graph::new();
                let mut p = Binder::new(&mut disc.store, true, true);
                let x = g.input(Tensor::cat_rows(&[real, fake]));
                let labels: Vec<usize> = real_labels.iter().chain(&fake_labels).copied().collect();
                let logits = disc.arch.forward(&mut g, &mut p, x, &labels)?;
                let row = g.reshape(logits, &[1, 2 * b]);
                let r = g.slice_last(row, 0, b);
                let f = g.slice_last(row, b, b);
                let loss = d_loss_var(&mut g, cfg.loss, r, f, cfg.d_label_smoothing);
                let lv = g.value(loss).data()[0];
                if let Err(e) = check_finite(lv, "discriminator loss", epoch, g_steps) {
                    drop(p);
                    dump_snapshot(out_dir, &gen.store, &ema, &disc.store, &meta(epoch, g_steps))?;
                    return Err(e);
                }
                let mut grads = g.backward(loss);
                let pg = p.collect(&mut grads);
                drop(p);
                d_opt.step(&mut disc.store, &pg);
                d_steps += 1;
                dl += lv as f64;
                let lo = g.value(logits).data();
                dr += lo[..b].iter().map(|&v| v as f64).sum::<f64>() / b as f64;
                df += lo[b..].iter().map(|&v| v as f64).sum::<f64>() / b as f64;
            }
            let z = normal_latents(b, gen_cfg.latent_dim, 1.0, &mut rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let mut g = Graph::new();
            let mut gp = Binder::new(&mut gen.store, true, true);
            let zv = g.input(z);
            let x = gen.arch.forward(&mut g, &mut gp, zv, &labels)?;
            let mut dp = Binder::new(&mut disc.store, false, false);
            let logits = disc.arch.forward(&mut g, &mut dp, x, &labels)?;
            drop(dp);
            let loss = g_loss_var(&mut g, cfg.loss, logits);
            let lv = g.value(loss).data()[0];
            if let Err(e) = check_finite(lv, "generator loss", epoch, g_steps) {
                drop(gp);
                dump_snapshot(out_dir, &gen.store, &ema, &disc.store, &meta(epoch, g_steps))?;
                return Err(e);
            }
            let mut grads = g.backward(loss);
            let pg = gp.collect(&mut grads);
            drop(gp);
            g_opt.step(&mut gen.store, &pg);
            ema_update(&mut ema, &gen.store, cfg.ema_decay, g_steps, cfg.ema_start)?;
            g_steps += 1;
            gl += lv as f64;
        }
        let nd = (g_per_epoch * cfg.d_updates_per_g) as f64;
        let m = GanEpochMetrics {
            epoch,
            d_loss: dl / nd,
            g_loss: gl / g_per_epoch as f64,
            d_real: dr / nd,
            d_fake: df / nd,
        };
        on_epoch(&m);
        run.metrics.push(m);
        if epoch % cfg.checkpoint_every == 0 {
            let path = out_dir.join(checkpoint_file_name(epoch));
            save_checkpoint(
                &path,
                &meta(epoch, g_steps),
                &[("ema", &ema), ("generator", &gen.store), ("discriminator", &disc.store)],
            )?;
            run.checkpoints.push(CheckpointRecord {
                epoch,
                path,
                cas_validation: None,
            });
        }
    }
    run.d_steps = d_steps;
    run.g_steps = g_steps;
    Ok(run)
}

fn dump_snapshot(out: &Path, gen: &ParamStore, ema: &ParamStore, disc: &ParamStore, meta: &GanCheckpointMeta) -> Result<()> {
    save_checkpoint(
        &out.join("gan_nonfinite.ckpt"),
        meta,
        &[("ema", ema), ("generator", gen), ("discriminator", disc)],
    )
}

/// Loads the EMA generator stored in a GAN checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, GanCheckpointMeta)> {
    let mut ck = load_checkpoint::<GanCheckpointMeta>(path)?;
    let store = ck.take("ema")?;
    let gen = Generator::from_store(ck.meta.generator.clone(), store)?;
    Ok((gen, ck.meta))
}
