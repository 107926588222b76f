//! Image classification datasets: registry, ingestion, on-disk cache and the
//! shadow-model resplitting of a validation set.
//!
//! Every dataset is served as three [`LabeledDataset`] splits of 32×32 NHWC
//! images in `[0,1]`. Built-in datasets are read from raw files under
//! `<root>/raw/`; the procedural `toy-shapes` family is rendered on demand.
//! Both are cached as `<root>/<name>/<split>.bin` plus `<root>/<name>/meta.json`.

mod cache;
mod raw;
mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use krlab_nn::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrError, Result};

pub(crate) use cache::atomic_write;
pub use cache::{read_split, write_split, CacheMeta, SplitFile};
pub use raw::bilinear_resize;
pub use toy::render_toy_sample;

/// Side length of every ingested image.
pub const SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Images `[N,32,32,C]` with integer labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    /// Builds and validates a dataset.
    pub fn new(name: &str, split: Split, num_classes: usize, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let ds = Self {
            name: name.to_string(),
            split,
            num_classes,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.dim(3)
    }

    /// Checks shape, pixel range and label range.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| KrError::Dataset {
            name: self.name.clone(),
            reason,
        };
        let s = self.images.shape();
        if self.labels.is_empty() {
            return Err(bad(format!("{} split is empty", self.split.as_str())));
        }
        if s.len() != 4 || s[0] != self.labels.len() || s[1] != SIDE || s[2] != SIDE || !matches!(s[3], 1 | 3) {
            return Err(bad(format!("image tensor {s:?} does not match {} labels of 32x32x{{1,3}}", self.labels.len())));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(bad(format!("label {l} outside [0, {})", self.num_classes)));
        }
        if !self.images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(bad("pixel values outside [0,1]".into()));
        }
        Ok(())
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            num_classes: self.num_classes,
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Labels as one-hot rows `[N, K]`.
    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.labels, self.num_classes)
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (row, &l) in t.data_mut().chunks_mut(k).zip(labels) {
        row[l] = 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub channels: usize,
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(KrError::Dataset {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("empty name");
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("every split needs at least one sample");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if !matches!(self.channels, 1 | 3) {
            return bad("channels must be 1 or 3");
        }
        Ok(())
    }
}

/// Where a registered dataset's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cifar10,
    Cifar100,
    FashionMnist,
    /// A MedMNIST `.npz` archive, by file stem (e.g. `bloodmnist`).
    MedMnist(String),
    /// Procedurally rendered shapes.
    Toy { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub spec: DatasetSpec,
    pub source: Source,
}

/// Known datasets keyed by name.
#[derive(Clone, Debug)]
pub struct Registry {
    entries: BTreeMap<String, RegistryEntry>,
}

pub const TOY_SHAPES: &str = "toy-shapes";

fn spec(name: &str, k: usize, train: usize, val: usize, test: usize, c: usize) -> DatasetSpec {
    DatasetSpec {
        name: name.to_string(),
        num_classes: k,
        train,
        val,
        test,
        channels: c,
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    /// The built-in datasets plus the default toy dataset.
    ///
    /// MedMNIST class counts and split sizes follow the upstream MedMNIST v2
    /// metadata (PneumoniaMNIST is binary, RetinaMNIST has 5 grades,
    /// OrganSMNIST has 11 organs).
    pub fn builtin() -> Self {
        let med = |name: &str, k, tr, va, te, c| RegistryEntry {
            spec: spec(name, k, tr, va, te, c),
            source: Source::MedMnist(name.to_lowercase()),
        };
        let list = vec![
            RegistryEntry {
                spec: spec("CIFAR10", 10, 40000, 10000, 10000, 3),
                source: Source::Cifar10,
            },
            RegistryEntry {
                spec: spec("CIFAR100", 100, 40000, 10000, 10000, 3),
                source: Source::Cifar100,
            },
            RegistryEntry {
                spec: spec("FashionMNIST", 10, 50000, 10000, 10000, 1),
                source: Source::FashionMnist,
            },
            med("BloodMNIST", 8, 11959, 1712, 3421, 3),
            med("DermaMNIST", 7, 7007, 1003, 2005, 3),
            med("OrganCMNIST", 11, 12975, 2392, 8216, 1),
            med("OrganSMNIST", 11, 13932, 2452, 8827, 1),
            med("PneumoniaMNIST", 2, 4708, 524, 624, 1),
            med("RetinaMNIST", 5, 1080, 120, 400, 3),
            RegistryEntry {
                spec: spec(TOY_SHAPES, 3, 3000, 600, 600, 3),
                source: Source::Toy { seed: 7 },
            },
        ];
        Self {
            entries: list.into_iter().map(|e| (e.spec.name.clone(), e)).collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&RegistryEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| KrError::UnknownDataset(name.to_string()))
    }

    /// Registers a procedural shapes dataset under `spec.name`.
    pub fn register_toy_dataset(&mut self, spec: DatasetSpec, generator_seed: u64) -> Result<String> {
        spec.validate()?;
        if spec.num_classes > TOY_SHAPES_COUNT {
            return Err(KrError::Dataset {
                name: spec.name.clone(),
                reason: format!("toy datasets support at most {TOY_SHAPES_COUNT} classes"),
            });
        }
        if let Some(existing) = self.entries.get(&spec.name) {
            if !matches!(existing.source, Source::Toy { .. }) || spec.name == TOY_SHAPES {
                return Err(KrError::Dataset {
                    name: spec.name.clone(),
                    reason: "name collides with a built-in dataset".into(),
                });
            }
        }
        let name = spec.name.clone();
        self.entries.insert(
            name.clone(),
            RegistryEntry {
                spec,
                source: Source::Toy { seed: generator_seed },
            },
        );
        Ok(name)
    }

    /// Loads all three splits, using the cache under `root` when it matches.
    pub fn load_dataset(&self, name: &str, root: &Path) -> Result<[LabeledDataset; 3]> {
        let entry = self.get(name)?;
        if let Some(splits) = cache::load_cached(root, entry)? {
            return Ok(splits);
        }
        let splits = match &entry.source {
            Source::Toy { seed } => toy::generate(&entry.spec, *seed)?,
            other => raw::ingest(&entry.spec, other, &root.join("raw"))?,
        };
        for (s, split) in splits.iter().zip(Split::ALL) {
            let want = entry.spec.size(split);
            if s.len() != want {
                return Err(KrError::Dataset {
                    name: name.to_string(),
                    reason: format!("{} split has {} samples, spec says {want}", split.as_str(), s.len()),
                });
            }
            s.validate()?;
        }
        cache::store(root, entry, &splits)?;
        Ok(splits)
    }
}

const TOY_SHAPES_COUNT: usize = toy::SHAPE_COUNT;

/// Disjoint member / holdout / non-member parts of a validation set.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSplit {
    pub member_part: LabeledDataset,
    pub holdout_part: LabeledDataset,
    pub nonmember_part: LabeledDataset,
    /// Indices into the source set, in part order.
    pub member_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
    pub nonmember_idx: Vec<usize>,
    pub seed: u64,
}

/// Part sizes `(member, holdout, nonmember)` for `n` samples.
pub fn shadow_sizes(n: usize) -> (usize, usize, usize) {
    // round(0.45 n), ties upward, in exact integer arithmetic
    let m = (45 * n + 50) / 100;
    (m, n - 2 * m, m)
}

/// Shuffles `val` with `seed` and cuts it 45/10/45.
pub fn make_shadow_split(val: &LabeledDataset, seed: u64) -> Result<ShadowSplit> {
    let n = val.len();
    if n < 20 {
        return Err(KrError::invalid(format!("shadow split needs at least 20 samples, got {n}")));
    }
    let (m, h, _) = shadow_sizes(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let member_idx = idx[..m].to_vec();
    let holdout_idx = idx[m..m + h].to_vec();
    let nonmember_idx = idx[m + h..].to_vec();
    Ok(ShadowSplit {
        member_part: val.subset(&member_idx),
        holdout_part: val.subset(&holdout_idx),
        nonmember_part: val.subset(&nonmember_idx),
        member_idx,
        holdout_idx,
        nonmember_idx,
        seed,
    })
}
