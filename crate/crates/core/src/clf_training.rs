//! Classifier training (teacher, students, shadow models) and accuracy /
//! classification-accuracy-score evaluation.
//!
//! Targets are always probability rows, so real data (one-hot), synthetic
//! soft labels and MixUp share one loss. The returned model is the snapshot
//! with the best validation accuracy.

use std::path::Path;

use krlab_nn::optim::{Sgd, SgdConfig};
use krlab_nn::{ops, Binder, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datasets::LabeledDataset;
use crate::error::{KrError, Result};
use crate::nets::{Classifier, ClassifierConfig, Profile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_lr: f32,
    pub warmup_epochs: usize,
    pub momentum: f32,
    pub nesterov: bool,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub augment: AugmentConfig,
}

impl ClfTrainConfig {
    /// Teacher / final-student recipe for `profile`.
    pub fn for_profile(profile: Profile) -> Self {
        let full = Self {
            epochs: 500,
            batch_size: 256,
            peak_lr: 0.5,
            warmup_lr: 1e-5,
            warmup_epochs: 10,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            augment: AugmentConfig::default(),
        };
        match profile {
            Profile::Full => full,
            Profile::Tiny => Self {
                epochs: 20,
                batch_size: 128,
                warmup_epochs: 2,
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KrError::Config(format!("classifier training: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.peak_lr <= self.warmup_lr {
            return bad("peak_lr must exceed warmup_lr".into());
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        self.augment.validate()
    }
}

/// Learning rate at (possibly fractional) epoch `e`: linear warm-up from
/// `warmup_lr` to `peak_lr` over `[0, W)`, then cosine annealing to 0 at `E`.
pub fn lr_at(e: f64, cfg: &ClfTrainConfig) -> Result<f32> {
    let big_e = cfg.epochs as f64;
    if !(0.0..=big_e).contains(&e) {
        return Err(KrError::invalid(format!("epoch {e} outside [0, {big_e}]")));
    }
    let w = cfg.warmup_epochs as f64;
    let (lo, peak) = (cfg.warmup_lr as f64, cfg.peak_lr as f64);
    let lr = if e < w {
        lo + (peak - lo) * e / w
    } else {
        0.5 * peak * (1.0 + (std::f64::consts::PI * (e - w) / (big_e - w)).cos())
    };
    Ok(lr as f32)
}

/// Training data polled once per epoch. Regenerating synthetic sources
/// refresh their contents in [`DataSource::epoch`].
pub trait DataSource {
    /// Images `[N,32,32,C]` and probability targets `[N,K]` for `epoch`
    /// (0-based).
    fn epoch(&mut self, epoch: usize) -> Result<(&Tensor, &Tensor)>;
}

/// A fixed dataset with hard labels one-hot encoded.
#[derive(Clone, Debug)]
pub struct RealSource {
    images: Tensor,
    targets: Tensor,
}

impl RealSource {
    pub fn new(ds: &LabeledDataset) -> Self {
        Self {
            images: ds.images.clone(),
            targets: ds.one_hot(),
        }
    }

    /// A fixed soft-labelled set.
    pub fn soft(images: Tensor, targets: Tensor) -> Self {
        Self { images, targets }
    }
}

impl DataSource for RealSource {
    fn epoch(&mut self, _epoch: usize) -> Result<(&Tensor, &Tensor)> {
        Ok((&self.images, &self.targets))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    /// Best-validation snapshot.
    pub model: Classifier,
    pub cfg: ClfTrainConfig,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub curves: Vec<EpochRecord>,
    /// Largest post-clip gradient norm seen.
    pub max_clipped_norm: f64,
}

/// Evaluation batch size.
pub const EVAL_BATCH: usize = 256;

/// Trains a classifier on `source`, selecting the best epoch on `val`.
/// `on_epoch` returning `false` stops training after that epoch.
pub fn train_classifier(
    source: &mut dyn DataSource,
    model_cfg: &ClassifierConfig,
    cfg: &ClfTrainConfig,
    val: &LabeledDataset,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(KrError::invalid("validation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Classifier::new(model_cfg.clone(), rng.random())?;
    let mut opt = Sgd::new(SgdConfig {
        momentum: cfg.momentum,
        nesterov: cfg.nesterov,
        weight_decay: cfg.weight_decay,
    });
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut max_clipped = 0.0f64;
    for epoch in 0..cfg.epochs {
        let (images, targets) = source.epoch(epoch)?;
        let n = images.dim(0);
        if n == 0 {
            return Err(KrError::invalid("training source is empty"));
        }
        if targets.rows() != n || targets.last_dim() != model_cfg.num_classes {
            return Err(KrError::invalid(format!(
                "targets {:?} do not match {n} images and {} classes",
                targets.shape(),
                model_cfg.num_classes
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let steps = n.div_ceil(cfg.batch_size);
        let mut loss_sum = 0.0f64;
        let mut lr = 0.0;
        for s in 0..steps {
            let idx = &order[s * cfg.batch_size..((s + 1) * cfg.batch_size).min(n)];
            let x = images.gather_rows(idx);
            let y = targets.gather_rows(idx);
            let (x, y) = augment_batch(&x, &y, &cfg.augment, &mut rng)?;
            lr = lr_at(epoch as f64 + s as f64 / steps as f64, cfg)?;
            let mut g = Graph::new();
            let mut p = Binder::new(&mut model.store, true, true);
            let xv = g.input(x);
            let logits = model.arch.forward(&mut g, &mut p, xv);
            let loss = g.softmax_cross_entropy(logits, &y);
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(KrError::NonFinite {
                    context: format!("classifier loss, epoch {epoch}, step {s}"),
                });
            }
            let mut grads = g.backward(loss);
            let mut pg = p.collect(&mut grads);
            drop(p);
            pg.clip_global_norm(cfg.clip_norm as f64);
            max_clipped = max_clipped.max(pg.global_norm());
            opt.step(&mut model.store, &pg, lr);
            loss_sum += lv as f64 * idx.len() as f64;
        }
        let val_acc = evaluate_accuracy(&mut model, val)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n as f64,
            val_acc,
        };
        let go_on = on_epoch(&rec);
        curves.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            best = Some((val_acc, epoch + 1, model.store.clone()));
        }
        if !go_on {
            break;
        }
    }
    let (best_val_acc, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainedClassifier {
        model,
        cfg: cfg.clone(),
        best_val_acc,
        best_epoch,
        curves,
        max_clipped_norm: max_clipped,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.last_dim();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn evaluate_accuracy(model: &mut Classifier, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(KrError::invalid("cannot evaluate on an empty set"));
    }
    let logits = model.logits(&data.images, EVAL_BATCH)?;
    Ok(accuracy_from_logits(&logits, &data.labels))
}

/// Classification accuracy score: accuracy on real data of a model trained
/// on synthetic data. Numerically identical to [`evaluate_accuracy`].
pub fn compute_cas(student: &mut TrainedClassifier, real_eval: &LabeledDataset) -> Result<f64> {
    evaluate_accuracy(&mut student.model, real_eval)
}

/// Softmax probabilities `[N, K]` in evaluation mode.
pub fn predict_proba(model: &mut Classifier, images: &Tensor) -> Result<Tensor> {
    let logits = model.logits(images, EVAL_BATCH)?;
    let k = logits.last_dim();
    Ok(Tensor::new(logits.shape(), ops::softmax_rows(logits.data(), k)))
}

/// Writes `epoch,lr,train_loss,val_acc`.
pub fn write_curves_csv(path: &Path, curves: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| KrError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| KrError::Serde(e.to_string()))?;
    for r in curves {
        w.serialize(r).map_err(|e| KrError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| KrError::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierCheckpointMeta {
    pub role: String,
    pub classifier: ClassifierConfig,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

pub fn classifier_file_name(role: &str) -> String {
    format!("clf_{role}.ckpt")
}

pub fn save_classifier(path: &Path, role: &str, t: &TrainedClassifier) -> Result<()> {
    let meta = ClassifierCheckpointMeta {
        role: role.to_string(),
        classifier: t.model.cfg.clone(),
        best_val_acc: t.best_val_acc,
        best_epoch: t.best_epoch,
    };
    save_checkpoint(path, &meta, &[("model", &t.model.store)])
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, ClassifierCheckpointMeta)> {
    let mut ck = load_checkpoint::<ClassifierCheckpointMeta>(path)?;
    let store = ck.take("model")?;
    Ok((Classifier::from_store(ck.meta.classifier.clone(), store)?, ck.meta))
}
