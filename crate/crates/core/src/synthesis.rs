//! Synthetic training sets from a frozen generator.
//!
//! Three strategies:
//! * **Baseline** — one draw of `N_real` images at σ = 1, conditioning labels
//!   as hard targets, never refreshed;
//! * **Gap filler** — images kept only when the teacher agrees with the
//!   conditioning label with confidence ≥ τ, refreshed every `r` epochs;
//! * **GKD** — every image kept, the teacher's softmax as the target,
//!   `s × N_real` images refreshed every `r` epochs.

use krlab_nn::{ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf_training::{argmax, DataSource, EVAL_BATCH};
use crate::datasets::{one_hot, LabeledDataset, Split};
use crate::error::{KrError, Result};
use crate::gan_training::normal_latents;
use crate::nets::{Classifier, Generator};

/// Minimum gap-filler acceptance rate before generation is declared
/// degenerate.
pub const ACCEPTANCE_FLOOR: f64 = 1e-3;
pub const DEFAULT_CONFIDENCE: f32 = 0.5;
const GEN_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub std_dev: f32,
    pub regeneration_rate: usize,
    pub cardinality_scale: usize,
}

impl Default for GenerationParams {
    /// The values used while selecting a checkpoint.
    fn default() -> Self {
        Self {
            std_dev: 1.0,
            regeneration_rate: 10,
            cardinality_scale: 1,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=2.5).contains(&self.std_dev) {
            return Err(KrError::Config(format!("std_dev {} outside [1.0, 2.5]", self.std_dev)));
        }
        if !(1..=10).contains(&self.regeneration_rate) {
            return Err(KrError::Config(format!(
                "regeneration_rate {} outside 1..=10",
                self.regeneration_rate
            )));
        }
        if !(1..=10).contains(&self.cardinality_scale) {
            return Err(KrError::Config(format!(
                "cardinality_scale {} outside 1..=10",
                self.cardinality_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    GapFiller,
    Gkd,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::GapFiller, Strategy::Gkd];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::GapFiller => "gap_filler",
            Strategy::Gkd => "gkd",
        }
    }
}

/// Anything that maps latents and class labels to images.
pub trait ImageGenerator {
    fn latent_dim(&self) -> usize;
    fn generate(&mut self, latents: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

/// Anything that scores images with class logits.
pub trait Labeler {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor>;
}

impl ImageGenerator for Generator {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn generate(&mut self, latents: &Tensor, labels: &[usize]) -> Result<Tensor> {
        Generator::generate(self, latents, labels, GEN_BATCH)
    }
}

impl Labeler for Classifier {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        Classifier::logits(self, images, EVAL_BATCH)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub strategy: Strategy,
    pub checkpoint_epoch: Option<usize>,
    pub params: GenerationParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabeledDataset {
    pub images: Tensor,
    pub soft_labels: Tensor,
    /// Labels the generator was conditioned on; metadata only.
    pub condition_labels: Vec<usize>,
    pub meta: GenerationMeta,
}

impl SoftLabeledDataset {
    pub fn len(&self) -> usize {
        self.condition_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.condition_labels.is_empty()
    }

    /// The images with their conditioning labels, e.g. for dumping.
    pub fn to_labeled(&self, name: &str, num_classes: usize) -> Result<LabeledDataset> {
        LabeledDataset::new(name, Split::Train, num_classes, self.images.clone(), self.condition_labels.clone())
    }
}

/// i.i.d. `N(0, σ²)` latents `[m, dim]`.
pub fn sample_latents(m: usize, dim: usize, sigma: f32, seed: u64) -> Result<Tensor> {
    if m == 0 || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(KrError::invalid(format!("sample_latents: m={m}, sigma={sigma}")));
    }
    Ok(normal_latents(m, dim, sigma, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Balanced conditioning labels `offset, offset+1, … (mod k)`.
pub fn round_robin(m: usize, k: usize, offset: usize) -> Vec<usize> {
    (0..m).map(|i| (offset + i) % k).collect()
}

fn softmax(logits: &Tensor) -> Tensor {
    Tensor::new(logits.shape(), ops::softmax_rows(logits.data(), logits.last_dim()))
}

/// Exactly `m` images labelled by the teacher's softmax; nothing discarded.
pub fn generate_gkd(
    gen: &mut dyn ImageGenerator,
    teacher: &mut dyn Labeler,
    k: usize,
    params: &GenerationParams,
    m: usize,
    seed: u64,
) -> Result<SoftLabeledDataset> {
    let labels = round_robin(m, k, 0);
    let z = sample_latents(m, gen.latent_dim(), params.std_dev, seed)?;
    let images = gen.generate(&z, &labels)?;
    let soft = softmax(&teacher.logits(&images)?);
    Ok(SoftLabeledDataset {
        images,
        soft_labels: soft,
        condition_labels: labels,
        meta: GenerationMeta {
            strategy: Strategy::Gkd,
            checkpoint_epoch: None,
            params: *params,
            seed,
        },
    })
}

/// Counters from a filtered generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub generated: usize,
    pub kept: usize,
}

/// Keeps images the teacher assigns to their conditioning label with
/// probability ≥ `tau`, generating batches until `m` are kept.
pub fn generate_filtered(
    gen: &mut dyn ImageGenerator,
    teacher: &mut dyn Labeler,
    k: usize,
    params: &GenerationParams,
    m: usize,
    tau: f32,
    seed: u64,
) -> Result<(LabeledDataset, FilterStats)> {
    if m == 0 {
        return Err(KrError::invalid("generate_filtered: m must be positive"));
    }
    if !(tau >= 1.0 / k as f32 && tau < 1.0) {
        return Err(KrError::Config(format!("confidence threshold {tau} outside [1/K, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = gen.latent_dim();
    let mut kept_images: Vec<Tensor> = Vec::new();
    let mut kept_labels = Vec::with_capacity(m);
    let mut generated = 0usize;
    // Rates are judged only once enough samples exist to resolve the floor.
    let min_judged = (1.0 / ACCEPTANCE_FLOOR).ceil() as usize;
    while kept_labels.len() < m {
        let labels = round_robin(GEN_BATCH, k, generated);
        let z = normal_latents(GEN_BATCH, dim, params.std_dev, &mut rng);
        let images = gen.generate(&z, &labels)?;
        let probs = softmax(&teacher.logits(&images)?);
        generated += GEN_BATCH;
        let keep: Vec<usize> = probs
            .data()
            .chunks(k)
            .zip(&labels)
            .enumerate()
            .filter(|(_, (row, &l))| {
                let top = argmax(row);
                top == l && row[top] >= tau
            })
            .map(|(i, _)| i)
            .take(m - kept_labels.len())
            .collect();
        kept_labels.extend(keep.iter().map(|&i| labels[i]));
        kept_images.push(images.gather_rows(&keep));
        let rate = kept_labels.len() as f64 / generated as f64;
        if generated >= min_judged && rate < ACCEPTANCE_FLOOR {
            return Err(KrError::AcceptanceFloor {
                rate,
                floor: ACCEPTANCE_FLOOR,
            });
        }
    }
    let images = Tensor::cat_rows(&kept_images);
    let ds = LabeledDataset::new("synthetic", Split::Train, k, images, kept_labels)?;
    Ok((ds, FilterStats { generated, kept: m }))
}

/// One-shot `n_real` images at σ = 1 with their conditioning labels.
pub fn generate_baseline(gen: &mut dyn ImageGenerator, k: usize, n_real: usize, seed: u64) -> Result<LabeledDataset> {
    let labels = round_robin(n_real, k, 0);
    let z = sample_latents(n_real, gen.latent_dim(), 1.0, seed)?;
    let images = gen.generate(&z, &labels)?;
    LabeledDataset::new("synthetic", Split::Train, k, images, labels)
}

/// True iff the synthetic set is refreshed at the start of epoch `e`.
pub fn should_regenerate(e: usize, r: usize) -> bool {
    assert!(r >= 1, "regeneration rate must be at least 1");
    e.is_multiple_of(r)
}

/// Seed of the `event`-th regeneration.
fn event_seed(seed: u64, event: usize) -> u64 {
    seed ^ (event as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A [`DataSource`] that regenerates its synthetic set on schedule.
pub struct RegeneratingSource<'a> {
    gen: &'a mut dyn ImageGenerator,
    teacher: Option<&'a mut dyn Labeler>,
    strategy: Strategy,
    params: GenerationParams,
    k: usize,
    n_real: usize,
    tau: f32,
    seed: u64,
    images: Tensor,
    targets: Tensor,
    /// Number of generation events so far.
    pub events: usize,
    /// Filter counters summed over events (gap filler only).
    pub filter: FilterStats,
}

impl<'a> RegeneratingSource<'a> {
    /// `teacher` is required for GKD and the gap filler.
    pub fn new(
        gen: &'a mut dyn ImageGenerator,
        teacher: Option<&'a mut dyn Labeler>,
        strategy: Strategy,
        params: GenerationParams,
        k: usize,
        n_real: usize,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if strategy != Strategy::Baseline && teacher.is_none() {
            return Err(KrError::Config(format!("strategy {} needs a teacher", strategy.as_str())));
        }
        Ok(Self {
            gen,
            teacher,
            strategy,
            params,
            k,
            n_real,
            tau: DEFAULT_CONFIDENCE,
            seed,
            images: Tensor::zeros(&[0]),
            targets: Tensor::zeros(&[0]),
            events: 0,
            filter: FilterStats { generated: 0, kept: 0 },
        })
    }

    pub fn with_confidence(mut self, tau: f32) -> Self {
        self.tau = tau;
        self
    }

    /// Synthetic set size per event.
    pub fn target_size(&self) -> usize {
        match self.strategy {
            Strategy::Baseline => self.n_real,
            Strategy::GapFiller | Strategy::Gkd => self.params.cardinality_scale * self.n_real,
        }
    }

    fn regenerate(&mut self) -> Result<()> {
        let seed = event_seed(self.seed, self.events);
        let m = self.target_size();
        match self.strategy {
            Strategy::Baseline => {
                let ds = generate_baseline(self.gen, self.k, m, seed)?;
                self.targets = ds.one_hot();
                self.images = ds.images;
            }
            Strategy::GapFiller => {
                let teacher = self.teacher.as_deref_mut().expect("checked in new");
                let (ds, stats) = generate_filtered(self.gen, teacher, self.k, &self.params, m, self.tau, seed)?;
                self.filter.generated += stats.generated;
                self.filter.kept += stats.kept;
                self.targets = one_hot(&ds.labels, self.k);
                self.images = ds.images;
            }
            Strategy::Gkd => {
                let teacher = self.teacher.as_deref_mut().expect("checked in new");
                let ds = generate_gkd(self.gen, teacher, self.k, &self.params, m, seed)?;
                self.images = ds.images;
                self.targets = ds.soft_labels;
            }
        }
        self.events += 1;
        Ok(())
    }
}

impl DataSource for RegeneratingSource<'_> {
    fn epoch(&mut self, epoch: usize) -> Result<(&Tensor, &Tensor)> {
        let due = match self.strategy {
            Strategy::Baseline => self.events == 0,
            _ => should_regenerate(epoch, self.params.regeneration_rate) || self.events == 0,
        };
        if due {
            self.regenerate()?;
        }
        Ok((&self.images, &self.targets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Generator whose image encodes the label; latents are ignored.
    pub(crate) struct StubGen;

    impl ImageGenerator for StubGen {
        fn latent_dim(&self) -> usize {
            4
        }
        fn generate(&mut self, latents: &Tensor, labels: &[usize]) -> Result<Tensor> {
            let n = labels.len();
            assert_eq!(latents.rows(), n);
            let mut data = Vec::with_capacity(n * 32 * 32);
            for &l in labels {
                data.extend(std::iter::repeat_n(l as f32 / 10.0, 32 * 32));
            }
            Ok(Tensor::new(&[n, 32, 32, 1], data))
        }
    }

    struct Uniform(usize);
    impl Labeler for Uniform {
        fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(&[images.dim(0), self.0]))
        }
    }

    /// Reads the label back from the pixel value, with large margin.
    struct Oracle(usize);
    impl Labeler for Oracle {
        fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
            let n = images.dim(0);
            let per = images.len() / n;
            let mut out = vec![0.0; n * self.0];
            for i in 0..n {
                let l = (images.data()[i * per] * 10.0).round() as usize;
                out[i * self.0 + l] = 20.0;
            }
            Ok(Tensor::new(&[n, self.0], out))
        }
    }

    #[test]
    fn gkd_is_balanced_and_normalized() {
        let ds = generate_gkd(&mut StubGen, &mut Uniform(10), 10, &GenerationParams::default(), 1000, 1).unwrap();
        assert_eq!(ds.len(), 1000);
        for c in 0..10 {
            assert_eq!(ds.condition_labels.iter().filter(|&&l| l == c).count(), 100);
        }
        for row in ds.soft_labels.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (v - 0.1).abs() < 1e-6));
        }
    }

    #[test]
    fn filter_with_oracle_keeps_everything() {
        let (ds, stats) =
            generate_filtered(&mut StubGen, &mut Oracle(4), 4, &GenerationParams::default(), 200, 0.9, 3).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(stats.generated, GEN_BATCH);
        assert!(ds.labels.iter().enumerate().all(|(i, &l)| l == i % 4));
    }

    #[test]
    fn filter_with_uniform_teacher_hits_floor() {
        let err = generate_filtered(&mut StubGen, &mut Uniform(4), 4, &GenerationParams::default(), 10, 0.26, 3).unwrap_err();
        assert!(matches!(err, KrError::AcceptanceFloor { .. }), "{err}");
    }

    #[test]
    fn baseline_uses_conditioning_labels() {
        let ds = generate_baseline(&mut StubGen, 3, 31, 0).unwrap();
        assert_eq!(ds.len(), 31);
        assert_eq!(ds.labels, round_robin(31, 3, 0));
    }

    #[test]
    fn regeneration_schedule() {
        assert!(should_regenerate(0, 10));
        assert!(should_regenerate(10, 10));
        assert!(!should_regenerate(11, 10));
        assert!((0..7).all(|e| should_regenerate(e, 1)));
    }

    #[test]
    fn source_counts_events_and_freezes_baseline() {
        let params = GenerationParams {
            regeneration_rate: 3,
            ..GenerationParams::default()
        };
        let mut g = StubGen;
        let mut t = Uniform(2);
        let mut src = RegeneratingSource::new(&mut g, Some(&mut t), Strategy::Gkd, params, 2, 8, 0).unwrap();
        for e in 0..10 {
            src.epoch(e).unwrap();
        }
        assert_eq!(src.events, 4); // ceil(10 / 3)
        let mut g = StubGen;
        let mut src = RegeneratingSource::new(&mut g, None, Strategy::Baseline, params, 2, 8, 0).unwrap();
        let first = src.epoch(0).unwrap().0.clone();
        for e in 1..7 {
            assert_eq!(src.epoch(e).unwrap().0, &first);
        }
        assert_eq!(src.events, 1);
    }

    #[test]
    fn params_ranges() {
        assert!(GenerationParams::default().validate().is_ok());
        let bad = GenerationParams {
            std_dev: 2.6,
            ..GenerationParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
