//! Run configuration: profile defaults, TOML overrides, validation and the
//! canonical hash that names a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clf_training::ClfTrainConfig;
use crate::datasets::Registry;
use crate::error::{KrError, Result};
use crate::gan_training::GanTrainConfig;
use crate::nets::{ClassifierConfig, DiscriminatorConfig, GeneratorConfig, Profile};
use crate::pipeline::{rung_epochs, SearchSpace, TunerConfig};
use crate::privacy::AttackFeatures;
use crate::synthesis::{GenerationParams, Strategy, DEFAULT_CONFIDENCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherStage {
    pub model: ClassifierConfig,
    pub train: ClfTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanStage {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: GanTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentStage {
    pub model: ClassifierConfig,
    /// Recipe of the final student; `train.epochs` is its epoch count.
    pub train: ClfTrainConfig,
    /// Student epochs per checkpoint evaluation and per tuning trial.
    pub budget_epochs: usize,
    /// Generation parameters used while ranking checkpoints.
    pub checkpoint_params: GenerationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyStage {
    pub strategies: Vec<Strategy>,
    /// Student seeds per strategy.
    pub seeds: usize,
    /// Gap-filler confidence threshold τ.
    pub confidence: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaStage {
    pub shadows: usize,
    pub features: AttackFeatures,
    pub selection_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub profile: Profile,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 lets the runtime decide. Not part of the hash.
    pub workers: usize,
    /// Artifact root. Not part of the hash.
    pub output_root: PathBuf,
    /// Dataset cache root. Not part of the hash.
    pub data_root: PathBuf,
    pub teacher: TeacherStage,
    pub gan: GanStage,
    pub student: StudentStage,
    pub tuner: TunerConfig,
    pub strategies: StrategyStage,
    pub mia: MiaStage,
}

/// Largest accepted seed: the stored TOML config holds signed 64-bit integers.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn check_seed(seed: u64) -> Result<()> {
    if seed > MAX_SEED {
        return Err(KrError::Config(format!("seed {seed} exceeds the maximum {MAX_SEED}")));
    }
    Ok(())
}

impl RunConfig {
    /// Fully materialized defaults for `dataset` under `profile`.
    pub fn defaults(registry: &Registry, dataset: &str, profile: Profile, seed: u64) -> Result<Self> {
        check_seed(seed)?;
        let spec = &registry.get(dataset)?.spec;
        let (k, c) = (spec.num_classes, spec.channels);
        let clf = ClassifierConfig::for_profile(profile, k, c);
        let train = ClfTrainConfig::for_profile(profile);
        let (budget, trials, space, startup, strategies, shadows) = match profile {
            Profile::Full => (100, 50, SearchSpace::default(), 10, Strategy::ALL.to_vec(), 10),
            Profile::Tiny => (
                train.epochs,
                8,
                SearchSpace {
                    cardinality_scale: (1, 2),
                    ..SearchSpace::default()
                },
                4,
                vec![Strategy::Baseline, Strategy::Gkd],
                2,
            ),
        };
        let tuner = TunerConfig {
            space,
            startup_trials: startup,
            rung_epochs: rung_epochs(budget),
            ..TunerConfig::new(trials, budget)
        };
        Ok(Self {
            dataset: dataset.to_string(),
            profile,
            seed,
            deterministic: true,
            workers: 0,
            output_root: PathBuf::from("runs"),
            data_root: PathBuf::from("data"),
            teacher: TeacherStage {
                model: clf.clone(),
                train: train.clone(),
            },
            gan: GanStage {
                generator: GeneratorConfig::for_profile(profile, k, c),
                discriminator: DiscriminatorConfig::for_profile(profile, k, c),
                train: GanTrainConfig::for_profile(profile),
            },
            student: StudentStage {
                model: clf,
                train,
                budget_epochs: budget,
                checkpoint_params: GenerationParams::default(),
            },
            tuner,
            strategies: StrategyStage {
                strategies,
                seeds: 3,
                confidence: DEFAULT_CONFIDENCE,
            },
            mia: MiaStage {
                shadows,
                features: AttackFeatures::Logits,
                selection_fraction: 0.2,
            },
        })
    }

    /// Defaults merged with a TOML override document. Keys in the document
    /// replace defaults; unknown keys are rejected. `dataset` and `profile`
    /// arguments win over the document.
    pub fn parse(registry: &Registry, dataset: Option<&str>, profile: Option<Profile>, seed: Option<u64>, overrides: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(overrides).map_err(|e| KrError::Config(e.to_string()))?;
        let pick = |key: &str| doc.get(key).and_then(|v| v.as_str()).map(str::to_string);
        let dataset = match dataset {
            Some(d) => d.to_string(),
            None => pick("dataset").ok_or_else(|| KrError::Config("no dataset given".into()))?,
        };
        let profile = match profile {
            Some(p) => p,
            None => pick("profile").map(|p| p.parse()).transpose()?.unwrap_or(Profile::Tiny),
        };
        let seed = match seed {
            Some(s) => s,
            None => match doc.get("seed") {
                Some(v) => v
                    .as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| KrError::Config("seed must be a non-negative integer".into()))?,
                None => 0,
            },
        };
        let base = Self::defaults(registry, &dataset, profile, seed)?;
        let mut merged = toml::Value::try_from(&base).map_err(|e| KrError::Serde(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(doc));
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| KrError::Config(e.to_string()))?;
        cfg.dataset = dataset;
        cfg.profile = profile;
        cfg.seed = seed;
        cfg.validate(registry)?;
        Ok(cfg)
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        check_seed(self.seed)?;
        let spec = &registry.get(&self.dataset)?.spec;
        let (k, c) = (spec.num_classes, spec.channels);
        self.teacher.model.validate()?;
        self.teacher.train.validate()?;
        self.gan.generator.validate()?;
        self.gan.discriminator.validate()?;
        self.gan.train.validate()?;
        self.student.model.validate()?;
        self.student.train.validate()?;
        self.student.checkpoint_params.validate()?;
        self.tuner.validate()?;
        for (what, kk, cc) in [
            ("teacher", self.teacher.model.num_classes, self.teacher.model.input_channels),
            ("student", self.student.model.num_classes, self.student.model.input_channels),
            ("generator", self.gan.generator.num_classes, self.gan.generator.output_channels),
            ("discriminator", self.gan.discriminator.num_classes, self.gan.discriminator.input_channels),
        ] {
            if kk != k || cc != c {
                return Err(KrError::Config(format!(
                    "{what} is configured for {kk} classes / {cc} channels but `{}` has {k} / {c}",
                    self.dataset
                )));
            }
        }
        if self.student.budget_epochs == 0 {
            return Err(KrError::Config("student.budget_epochs must be positive".into()));
        }
        if self.tuner.rung_epochs.last() != Some(&self.student.budget_epochs) {
            return Err(KrError::Config(format!(
                "the last tuning rung {:?} must equal student.budget_epochs {}",
                self.tuner.rung_epochs.last(),
                self.student.budget_epochs
            )));
        }
        if self.gan.train.checkpoint_epochs().is_empty() {
            return Err(KrError::Config("GAN training produces no checkpoints".into()));
        }
        if self.strategies.strategies.is_empty() || self.strategies.seeds == 0 {
            return Err(KrError::Config("strategy comparison needs at least one strategy and one seed".into()));
        }
        if !(self.strategies.confidence > 0.0 && self.strategies.confidence <= 1.0) {
            return Err(KrError::Config(format!("confidence {} outside (0, 1]", self.strategies.confidence)));
        }
        if self.mia.shadows == 0 {
            return Err(KrError::Config("mia.shadows must be positive".into()));
        }
        if !(self.mia.selection_fraction > 0.0 && self.mia.selection_fraction < 1.0) {
            return Err(KrError::Config(format!(
                "mia.selection_fraction {} outside (0, 1)",
                self.mia.selection_fraction
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every result-affecting field.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.workers = 0;
        canon.output_root = PathBuf::new();
        canon.data_root = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// `<dataset>-<profile>-s<seed>-<12 hex of the hash>`.
    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}-{}", self.dataset, self.profile.as_str(), self.seed, &self.hash()[..12])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| KrError::Serde(e.to_string()))
    }
}

/// Recursive table merge; non-table values in `over` replace `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
