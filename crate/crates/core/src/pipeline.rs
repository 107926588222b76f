//! Checkpoint selection and generation-parameter tuning.
//!
//! Every generator checkpoint is scored by the CAS of a student trained on
//! its GKD data with default parameters; the best checkpoint is then tuned
//! with a Tree-structured Parzen Estimator over (σ, r, s), pruning weak
//! trials at successive-halving rungs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf_training::{train_classifier, ClfTrainConfig, EpochRecord, TrainedClassifier};
use crate::datasets::LabeledDataset;
use crate::error::{KrError, Result};
use crate::gan_training::CheckpointRecord;
use crate::nets::{Classifier, ClassifierConfig, Generator};
use crate::synthesis::{FilterStats, GenerationParams, RegeneratingSource, Strategy};

// ----- checkpoint optimisation ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// `None` when the student for this checkpoint failed.
    pub val_cas: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointCurve {
    pub points: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_cas: f64,
    pub teacher_val_accuracy: f64,
}

/// Index of the maximum; ties go to the earliest. NaN never wins.
pub fn argmax_earliest(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if !v.is_nan() && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Scores one checkpoint. The real implementation trains a GKD student;
/// tests inject fixed values.
pub trait CheckpointEvaluator {
    fn evaluate(&mut self, checkpoint: &CheckpointRecord) -> Result<f64>;
}

impl<F: FnMut(&CheckpointRecord) -> Result<f64>> CheckpointEvaluator for F {
    fn evaluate(&mut self, checkpoint: &CheckpointRecord) -> Result<f64> {
        self(checkpoint)
    }
}

/// Evaluates every checkpoint; individual failures are recorded, not fatal.
pub fn checkpoint_optimisation(
    checkpoints: &[CheckpointRecord],
    evaluator: &mut dyn CheckpointEvaluator,
    teacher_val_accuracy: f64,
) -> Result<CheckpointCurve> {
    if checkpoints.is_empty() {
        return Err(KrError::invalid("checkpoint optimisation needs at least one checkpoint"));
    }
    let points: Vec<CurvePoint> = checkpoints
        .iter()
        .map(|c| match evaluator.evaluate(c) {
            Ok(v) => CurvePoint {
                epoch: c.epoch,
                val_cas: Some(v),
                error: None,
            },
            Err(e) => CurvePoint {
                epoch: c.epoch,
                val_cas: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let values: Vec<Option<f64>> = points.iter().map(|p| p.val_cas).collect();
    let best = argmax_earliest(&values).ok_or_else(|| KrError::invalid("every checkpoint evaluation failed"))?;
    Ok(CheckpointCurve {
        best_epoch: points[best].epoch,
        best_cas: values[best].expect("argmax is defined"),
        points,
        teacher_val_accuracy,
    })
}

// ----- students -----------------------------------------------------------------

/// What a student is trained from and evaluated on.
pub struct StudentSetup<'a> {
    pub teacher: &'a mut Classifier,
    pub num_classes: usize,
    /// Size of the real training set, `N_real`.
    pub n_real: usize,
    pub val: &'a LabeledDataset,
    pub model_cfg: &'a ClassifierConfig,
    pub train_cfg: &'a ClfTrainConfig,
    /// Gap-filler confidence threshold.
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLedger {
    pub generation_events: usize,
    pub filter: FilterStats,
}

/// Trains one student on synthetic data from `gen`.
pub fn train_student(
    setup: &mut StudentSetup<'_>,
    gen: &mut Generator,
    strategy: Strategy,
    params: GenerationParams,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<(TrainedClassifier, SourceLedger)> {
    let teacher: Option<&mut dyn crate::synthesis::Labeler> = match strategy {
        Strategy::Baseline => None,
        _ => Some(&mut *setup.teacher),
    };
    let mut source = RegeneratingSource::new(gen, teacher, strategy, params, setup.num_classes, setup.n_real, seed)?
        .with_confidence(setup.confidence);
    let student = train_classifier(&mut source, setup.model_cfg, setup.train_cfg, setup.val, seed ^ 0x5EED, on_epoch)?;
    Ok((
        student,
        SourceLedger {
            generation_events: source.events,
            filter: source.filter,
        },
    ))
}

// ----- search space and trials ------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub std_dev: (f64, f64),
    pub regeneration_rate: (usize, usize),
    pub cardinality_scale: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            std_dev: (1.0, 2.5),
            regeneration_rate: (1, 10),
            cardinality_scale: (1, 10),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.std_dev;
        if !(1.0 <= lo && lo < hi && hi <= 2.5) {
            return Err(KrError::Config(format!("std_dev range ({lo}, {hi}) must lie within [1.0, 2.5]")));
        }
        for (name, (lo, hi)) in [
            ("regeneration_rate", self.regeneration_rate),
            ("cardinality_scale", self.cardinality_scale),
        ] {
            if !(1 <= lo && lo <= hi && hi <= 10) {
                return Err(KrError::Config(format!("{name} range ({lo}, {hi}) must lie within 1..=10")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &GenerationParams) -> bool {
        let s = p.std_dev as f64;
        s >= self.std_dev.0
            && s <= self.std_dev.1
            && (self.regeneration_rate.0..=self.regeneration_rate.1).contains(&p.regeneration_rate)
            && (self.cardinality_scale.0..=self.cardinality_scale.1).contains(&p.cardinality_scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerConfig {
    pub n_trials: usize,
    pub space: SearchSpace,
    pub gamma: f64,
    pub startup_trials: usize,
    pub candidates: usize,
    pub eta: usize,
    /// Student epochs at which intermediate CAS is reported; the last rung
    /// is the full budget.
    pub rung_epochs: Vec<usize>,
}

/// Successive-halving rungs for a student budget: `B/9`, `B/3`, `B`
/// (rounded, deduplicated, at least 1).
pub fn rung_epochs(budget: usize) -> Vec<usize> {
    let mut r: Vec<usize> = [budget as f64 / 9.0, budget as f64 / 3.0, budget as f64]
        .iter()
        .map(|v| (v.round() as usize).max(1))
        .collect();
    r.dedup();
    r
}

impl TunerConfig {
    pub fn new(n_trials: usize, budget: usize) -> Self {
        Self {
            n_trials,
            space: SearchSpace::default(),
            gamma: 0.25,
            startup_trials: 10.min(n_trials),
            candidates: 24,
            eta: 3,
            rung_epochs: rung_epochs(budget),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.n_trials == 0 {
            return Err(KrError::Config("n_trials must be positive".into()));
        }
        if self.n_trials < self.startup_trials {
            return Err(KrError::Config(format!(
                "n_trials {} is below startup_trials {}",
                self.n_trials, self.startup_trials
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(KrError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.candidates == 0 || self.eta < 2 {
            return Err(KrError::Config("candidates must be ≥ 1 and eta ≥ 2".into()));
        }
        if self.rung_epochs.is_empty() || self.rung_epochs.windows(2).any(|w| w[0] >= w[1]) || self.rung_epochs[0] == 0 {
            return Err(KrError::Config(format!("rung epochs {:?} must be positive and increasing", self.rung_epochs)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Pruned,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: GenerationParams,
    /// `(epoch, CAS)` at each rung reached.
    pub rungs: Vec<(usize, f64)>,
    pub final_cas: Option<f64>,
    pub status: TrialStatus,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Ordering key for TPE: deeper rungs first, then the last value.
    fn rank_key(&self) -> Option<(usize, f64)> {
        match self.status {
            TrialStatus::Complete => self.final_cas.map(|v| (usize::MAX, v)),
            TrialStatus::Pruned => self.rungs.last().map(|&(_, v)| (self.rungs.len(), v)),
            TrialStatus::Failed => None,
        }
    }
}

// ----- TPE ----------------------------------------------------------------------

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Scott's rule with a floor so single points still spread.
fn bandwidth(obs: &[f64], lo: f64, hi: f64, floor: f64) -> f64 {
    let n = obs.len();
    let range = hi - lo;
    if n < 2 {
        return (range / 4.0).max(floor);
    }
    let mean = obs.iter().sum::<f64>() / n as f64;
    let sd = (obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    (1.06 * sd * (n as f64).powf(-0.2)).clamp(floor, range)
}

/// Truncated Gaussian mixture on `[lo, hi]` with a uniform prior component.
struct ContinuousKde {
    mus: Vec<f64>,
    h: f64,
    lo: f64,
    hi: f64,
}

impl ContinuousKde {
    fn new(obs: &[f64], lo: f64, hi: f64) -> Self {
        Self {
            mus: obs.to_vec(),
            h: bandwidth(obs, lo, hi, (hi - lo) / 50.0),
            lo,
            hi,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.mus.len() + 1) as f64
    }

    fn pdf(&self, x: f64) -> f64 {
        let w = self.weight();
        let prior = w / (self.hi - self.lo);
        prior
            + self
                .mus
                .iter()
                .map(|&m| {
                    let z = normal_cdf((self.hi - m) / self.h) - normal_cdf((self.lo - m) / self.h);
                    w * normal_pdf((x - m) / self.h) / (self.h * z.max(1e-300))
                })
                .sum::<f64>()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let c = rng.random_range(0..=self.mus.len());
        if c == self.mus.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let m = self.mus[c];
        for _ in 0..64 {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let x = m + self.h * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        m.clamp(self.lo, self.hi)
    }
}

/// Discretized Gaussian kernels over the integers `lo..=hi`, as a pmf.
fn integer_pmf(obs: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let span = (hi - lo + 1) as f64;
    let h = bandwidth(obs, lo as f64 - 0.5, hi as f64 + 0.5, 0.5);
    let w = 1.0 / (obs.len() + 1) as f64;
    let mut pmf: Vec<f64> = (lo..=hi).map(|_| w / span).collect();
    for &m in obs {
        let mass: Vec<f64> = (lo..=hi)
            .map(|v| normal_cdf((v as f64 + 0.5 - m) / h) - normal_cdf((v as f64 - 0.5 - m) / h))
            .collect();
        let total: f64 = mass.iter().sum();
        for (p, q) in pmf.iter_mut().zip(mass) {
            *p += w * q / total.max(1e-300);
        }
    }
    pmf
}

fn sample_pmf(pmf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * pmf.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

fn uniform_params(space: &SearchSpace, rng: &mut ChaCha8Rng) -> GenerationParams {
    GenerationParams {
        std_dev: rng.random_range(space.std_dev.0..=space.std_dev.1) as f32,
        regeneration_rate: rng.random_range(space.regeneration_rate.0..=space.regeneration_rate.1),
        cardinality_scale: rng.random_range(space.cardinality_scale.0..=space.cardinality_scale.1),
    }
}

fn best_integer(good: &[f64], bad: &[f64], (lo, hi): (usize, usize), n_cand: usize, rng: &mut ChaCha8Rng) -> usize {
    let l = integer_pmf(good, lo, hi);
    let g = integer_pmf(bad, lo, hi);
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..n_cand {
        let i = sample_pmf(&l, rng);
        let score = l[i].ln() - g[i].ln();
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, i));
        }
    }
    lo + best.expect("at least one candidate").1
}

/// Proposes the next parameters from the trial history. With fewer than
/// two rankable trials, or when either side of the γ split is empty, the
/// draw is uniform.
pub fn tpe_suggest(history: &[TrialRecord], space: &SearchSpace, gamma: f64, candidates: usize, rng: &mut ChaCha8Rng) -> GenerationParams {
    let mut ranked: Vec<(&TrialRecord, (usize, f64))> =
        history.iter().filter_map(|t| t.rank_key().map(|k| (t, k))).collect();
    let n_good = (gamma * ranked.len() as f64).ceil() as usize;
    if ranked.len() < 2 || n_good == 0 || n_good >= ranked.len() {
        return uniform_params(space, rng);
    }
    // best first; stable sort keeps the earliest among ties
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.total_cmp(&a.1 .1)));
    let (good, bad) = ranked.split_at(n_good);
    let col = |set: &[(&TrialRecord, (usize, f64))], f: fn(&GenerationParams) -> f64| -> Vec<f64> {
        set.iter().map(|(t, _)| f(&t.params)).collect()
    };
    let (lo, hi) = space.std_dev;
    let l = ContinuousKde::new(&col(good, |p| p.std_dev as f64), lo, hi);
    let g = ContinuousKde::new(&col(bad, |p| p.std_dev as f64), lo, hi);
    let mut best_sigma: Option<(f64, f64)> = None;
    for _ in 0..candidates.max(1) {
        let x = l.sample(rng);
        let score = l.pdf(x).ln() - g.pdf(x).ln();
        if best_sigma.is_none_or(|(b, _)| score > b) {
            best_sigma = Some((score, x));
        }
    }
    let sigma = best_sigma.expect("at least one candidate").1;
    let r = best_integer(
        &col(good, |p| p.regeneration_rate as f64),
        &col(bad, |p| p.regeneration_rate as f64),
        space.regeneration_rate,
        candidates.max(1),
        rng,
    );
    let s = best_integer(
        &col(good, |p| p.cardinality_scale as f64),
        &col(bad, |p| p.cardinality_scale as f64),
        space.cardinality_scale,
        candidates.max(1),
        rng,
    );
    GenerationParams {
        // the f32 cast may round just past a bound
        std_dev: (sigma as f32).clamp(lo as f32, hi as f32),
        regeneration_rate: r,
        cardinality_scale: s,
    }
}

// ----- Hyperband ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneDecision {
    Keep,
    Prune,
}

/// Keeps a trial iff its value ranks within the top `ceil(n/η)` of the `n`
/// values at this rung (its own included; ties count in its favour).
pub fn hyperband_prune(value: f64, peers: &[f64], eta: usize) -> PruneDecision {
    if peers.is_empty() {
        return PruneDecision::Keep;
    }
    let n = peers.len() + 1;
    let rank = 1 + peers.iter().filter(|&&p| p > value).count();
    if rank <= n.div_ceil(eta.max(1)) {
        PruneDecision::Keep
    } else {
        PruneDecision::Prune
    }
}

// ----- tuning -------------------------------------------------------------------

/// Something that trains a student under given parameters.
pub trait Objective {
    /// Runs one trial. `report(epoch, cas)` must be called at each rung
    /// epoch; when it returns `false` the trial should stop. Returns the
    /// final CAS (ignored for pruned trials).
    fn run(&mut self, trial: usize, params: &GenerationParams, seed: u64, report: &mut dyn FnMut(usize, f64) -> bool) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best_params: GenerationParams,
    pub best_trial: usize,
    pub best_cas: f64,
    /// Best tuned CAS minus the default-parameter CAS.
    pub delta_cas: f64,
    pub default_cas: f64,
    pub trials: Vec<TrialRecord>,
}

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs `cfg.n_trials` TPE trials with rung pruning and returns the best
/// completed one.
pub fn tune(objective: &mut dyn Objective, cfg: &TunerConfig, default_cas: f64, seed: u64, mut on_trial: impl FnMut(&TrialRecord)) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(cfg.n_trials);
    let last_rung = *cfg.rung_epochs.last().expect("validated");
    for id in 0..cfg.n_trials {
        let params = if id < cfg.startup_trials {
            uniform_params(&cfg.space, &mut rng)
        } else {
            tpe_suggest(&trials, &cfg.space, cfg.gamma, cfg.candidates, &mut rng)
        };
        let mut rungs: Vec<(usize, f64)> = Vec::new();
        let mut pruned = false;
        let result = {
            let trials = &trials;
            let mut report = |epoch: usize, cas: f64| -> bool {
                if !cfg.rung_epochs.contains(&epoch) || rungs.iter().any(|&(e, _)| e == epoch) {
                    return true;
                }
                rungs.push((epoch, cas));
                if epoch == last_rung {
                    return true;
                }
                let peers: Vec<f64> = trials
                    .iter()
                    .filter_map(|t| t.rungs.iter().find(|&&(e, _)| e == epoch).map(|&(_, v)| v))
                    .collect();
                if hyperband_prune(cas, &peers, cfg.eta) == PruneDecision::Prune {
                    pruned = true;
                    return false;
                }
                true
            };
            objective.run(id, &params, trial_seed(seed, id), &mut report)
        };
        let record = match result {
            Err(e) => TrialRecord {
                id,
                params,
                rungs,
                final_cas: None,
                status: TrialStatus::Failed,
                error: Some(e.to_string()),
            },
            Ok(_) if pruned => TrialRecord {
                id,
                params,
                rungs,
                final_cas: None,
                status: TrialStatus::Pruned,
                error: None,
            },
            Ok(v) => TrialRecord {
                id,
                params,
                rungs,
                final_cas: Some(v),
                status: TrialStatus::Complete,
                error: None,
            },
        };
        on_trial(&record);
        trials.push(record);
    }
    let finals: Vec<Option<f64>> = trials
        .iter()
        .map(|t| if t.status == TrialStatus::Complete { t.final_cas } else { None })
        .collect();
    let best = argmax_earliest(&finals).ok_or(KrError::NoCompletedTrials)?;
    let best_cas = finals[best].expect("argmax is defined");
    Ok(TuneOutcome {
        best_params: trials[best].params,
        best_trial: best,
        best_cas,
        delta_cas: best_cas - default_cas,
        default_cas,
        trials,
    })
}

/// The real objective: a GKD student on the chosen checkpoint's generator,
/// with validation accuracy reported at rung epochs.
pub struct StudentObjective<'a, 'b> {
    pub setup: &'b mut StudentSetup<'a>,
    pub gen: &'b mut Generator,
}

impl Objective for StudentObjective<'_, '_> {
    fn run(&mut self, _trial: usize, params: &GenerationParams, seed: u64, report: &mut dyn FnMut(usize, f64) -> bool) -> Result<f64> {
        let (student, _) = train_student(self.setup, self.gen, Strategy::Gkd, *params, seed, |rec| report(rec.epoch, rec.val_acc))?;
        Ok(student.best_val_acc)
    }
}
