//! The resumable end-to-end run: teacher → GAN → checkpoint selection →
//! tuning → final student → strategy comparison → membership inference →
//! report, each stage persisted in the artifact store.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clf_training::{
    evaluate_accuracy, load_classifier, save_classifier, train_classifier, write_curves_csv, ClfTrainConfig, RealSource,
    TrainedClassifier,
};
use crate::config::RunConfig;
use crate::datasets::{LabeledDataset, Registry};
use crate::error::{KrError, Result};
use crate::gan_training::{checkpoint_file_name, load_generator, train_gan, CheckpointRecord, GanRun};
use crate::nets::{Classifier, Generator};
use crate::pipeline::{
    checkpoint_optimisation, train_student, tune, CheckpointCurve, SourceLedger, StudentObjective, StudentSetup,
    TuneOutcome,
};
use crate::privacy::{attack, build_attack_dataset, train_attack_models, train_shadow_models, AttackModelSet, MiaReport};
use crate::report::{
    cas_curve_csv, cas_curve_svg, emit_report, median, RunReport, StrategyComparison, StrategyMedian, StrategyResult,
    StudentSummary, TeacherSummary,
};
use crate::store::{ArtifactStore, Stage};
use crate::synthesis::{generate_gkd, Strategy};

const TEACHER_CKPT: &str = "clf_teacher.ckpt";
const STUDENT_CKPT: &str = "clf_student.ckpt";
const CKPT_BEST_STUDENT: &str = "clf_checkpoint_best.ckpt";

/// Deterministic per-purpose seed.
pub fn stage_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Recompute every stage.
    pub force: bool,
    /// Stop after this stage (the report is still written, marked partial).
    pub until: Option<Stage>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub run_dir: PathBuf,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointBest {
    epoch: usize,
    seed: u64,
    val_cas: f64,
    test_cas: f64,
    ledger: SourceLedger,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ShadowLedger {
    seed: u64,
    member_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
    nonmember_idx: Vec<usize>,
    holdout_acc: f64,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    store: &'a ArtifactStore,
    train: &'a LabeledDataset,
    val: &'a LabeledDataset,
    test: &'a LabeledDataset,
    log: &'a mut dyn FnMut(&str),
}

impl Ctx<'_> {
    fn teacher(&self) -> Result<Classifier> {
        Ok(load_classifier(&self.store.stage_dir(Stage::Teacher).join(TEACHER_CKPT))?.0)
    }

    fn gan_run(&self) -> Result<GanRun> {
        let mut run: GanRun = self.store.read_json(Stage::Gan, "gan.json")?;
        let dir = self.store.stage_dir(Stage::Gan);
        for c in &mut run.checkpoints {
            c.path = dir.join(checkpoint_file_name(c.epoch));
        }
        Ok(run)
    }

    fn best_generator(&self) -> Result<(Generator, CheckpointCurve)> {
        let curve: CheckpointCurve = self.store.read_json(Stage::CheckpointOpt, "curve.json")?;
        let path = self.store.stage_dir(Stage::Gan).join(checkpoint_file_name(curve.best_epoch));
        Ok((load_generator(&path)?.0, curve))
    }

    fn budget_cfg(&self) -> ClfTrainConfig {
        ClfTrainConfig {
            epochs: self.cfg.student.budget_epochs,
            ..self.cfg.student.train.clone()
        }
    }

    fn checkpoint_seed(&self) -> u64 {
        stage_seed(self.cfg.seed, "student-0")
    }
}

/// Runs (or resumes) every stage of `cfg`.
pub fn run_pipeline(cfg: &RunConfig, registry: &Registry, opts: &RunOptions, log: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    cfg.validate(registry)?;
    let store = ArtifactStore::open(cfg)?;
    let [train, val, test] = registry.load_dataset(&cfg.dataset, &cfg.data_root)?;
    let mut ctx = Ctx {
        cfg,
        store: &store,
        train: &train,
        val: &val,
        test: &test,
        log,
    };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut dirty = opts.force;
    let mut failure = None;
    for stage in Stage::ALL {
        if stage == Stage::Report {
            break;
        }
        if opts.until.is_some_and(|u| stage > u) {
            break;
        }
        if !dirty && store.completed(stage)?.is_some() {
            (ctx.log)(&format!("stage {}: up to date", stage.as_str()));
            skipped.push(stage);
            continue;
        }
        // everything downstream of a recomputed stage is recomputed too
        dirty = true;
        (ctx.log)(&format!("stage {}: running", stage.as_str()));
        let t0 = Instant::now();
        let result = run_stage(stage, &mut ctx).and_then(|files| store.finish(stage, &files, t0.elapsed().as_secs_f64()));
        match result {
            Ok(_) => executed.push(stage),
            Err(e) => {
                failure = Some(KrError::Stage {
                    stage: stage.as_str().to_string(),
                    source: Box::new(e),
                });
                break;
            }
        }
    }
    // the report is always rebuilt from whatever is complete
    let t0 = Instant::now();
    let report = collect_report(&store, cfg)?;
    store.fresh_stage_dir(Stage::Report)?;
    let files = emit_report(&report, &store.stage_dir(Stage::Report))?;
    store.finish(Stage::Report, &files, t0.elapsed().as_secs_f64())?;
    executed.push(Stage::Report);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome {
        report,
        run_dir: store.run_dir().to_path_buf(),
        executed,
        skipped,
    })
}

fn run_stage(stage: Stage, ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Teacher => stage_teacher(ctx),
        Stage::Gan => stage_gan(ctx),
        Stage::CheckpointOpt => stage_checkpoint_opt(ctx),
        Stage::Tuning => stage_tuning(ctx),
        Stage::Student => stage_student(ctx),
        Stage::Strategies => stage_strategies(ctx),
        Stage::Mia => stage_mia(ctx),
        Stage::Report => unreachable!("the report is emitted by the runner"),
    }
}

fn stage_teacher(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    let dir = ctx.store.fresh_stage_dir(Stage::Teacher)?;
    let cfg = ctx.cfg;
    let log = &mut *ctx.log;
    let mut t = train_classifier(
        &mut RealSource::new(ctx.train),
        &cfg.teacher.model,
        &cfg.teacher.train,
        ctx.val,
        stage_seed(cfg.seed, "teacher"),
        |r| {
            log(&format!("teacher epoch {} loss {:.4} val {:.4}", r.epoch, r.train_loss, r.val_acc));
            true
        },
    )?;
    let test_accuracy = evaluate_accuracy(&mut t.model, ctx.test)?;
    let ckpt = dir.join(TEACHER_CKPT);
    save_classifier(&ckpt, "teacher", &t)?;
    let curves = dir.join("curves.csv");
    write_curves_csv(&curves, &t.curves)?;
    let summary = ctx.store.write_json(
        Stage::Teacher,
        "teacher.json",
        &TeacherSummary {
            val_accuracy: t.best_val_acc,
            test_accuracy,
            best_epoch: t.best_epoch,
        },
    )?;
    Ok(vec![ckpt, curves, summary])
}

fn stage_gan(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    let dir = ctx.store.fresh_stage_dir(Stage::Gan)?;
    let g = &ctx.cfg.gan;
    let log = &mut *ctx.log;
    let run = train_gan(ctx.train, &g.generator, &g.discriminator, &g.train, stage_seed(ctx.cfg.seed, "gan"), &dir, |m| {
        log(&format!("gan epoch {} d {:.4} g {:.4}", m.epoch, m.d_loss, m.g_loss))
    })?;
    let mut files: Vec<PathBuf> = run.checkpoints.iter().map(|c| c.path.clone()).collect();
    let mut stored = run.clone();
    for c in &mut stored.checkpoints {
        c.path = PathBuf::from(checkpoint_file_name(c.epoch));
    }
    files.push(ctx.store.write_json(Stage::Gan, "gan.json", &stored)?);
    Ok(files)
}

fn stage_checkpoint_opt(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    let dir = ctx.store.fresh_stage_dir(Stage::CheckpointOpt)?;
    let mut teacher = ctx.teacher()?;
    let teacher_summary: TeacherSummary = ctx.store.read_json(Stage::Teacher, "teacher.json")?;
    let gan = ctx.gan_run()?;
    let budget = ctx.budget_cfg();
    let seed = ctx.checkpoint_seed();
    let cfg = ctx.cfg;
    let (train, val) = (ctx.train, ctx.val);
    let log = &mut *ctx.log;
    let mut best: Option<(f64, usize, TrainedClassifier, SourceLedger)> = None;
    let mut evaluate = |c: &CheckpointRecord| -> Result<f64> {
        let (mut gen, _) = load_generator(&c.path)?;
        let mut setup = StudentSetup {
            teacher: &mut teacher,
            num_classes: train.num_classes,
            n_real: train.len(),
            val,
            model_cfg: &cfg.student.model,
            train_cfg: &budget,
            confidence: cfg.strategies.confidence,
        };
        let (student, ledger) = train_student(&mut setup, &mut gen, Strategy::Gkd, cfg.student.checkpoint_params, seed, |_| true)?;
        let cas = student.best_val_acc;
        log(&format!("checkpoint {} val CAS {:.4}", c.epoch, cas));
        if best.as_ref().is_none_or(|(b, _, _, _)| cas > *b) {
            best = Some((cas, c.epoch, student, ledger));
        }
        Ok(cas)
    };
    let curve = checkpoint_optimisation(&gan.checkpoints, &mut evaluate, teacher_summary.val_accuracy)?;
    let (val_cas, epoch, mut student, ledger) = best.expect("curve has a best point");
    debug_assert_eq!(epoch, curve.best_epoch);
    let test_cas = evaluate_accuracy(&mut student.model, ctx.test)?;
    let ckpt = dir.join(CKPT_BEST_STUDENT);
    save_classifier(&ckpt, "checkpoint_best", &student)?;
    let csv = dir.join("cas_curve.csv");
    crate::datasets::atomic_write(&csv, cas_curve_csv(&curve).as_bytes())?;
    let svg = dir.join("cas_curve.svg");
    crate::datasets::atomic_write(&svg, cas_curve_svg(&curve).as_bytes())?;
    Ok(vec![
        ckpt,
        csv,
        svg,
        ctx.store.write_json(Stage::CheckpointOpt, "curve.json", &curve)?,
        ctx.store.write_json(
            Stage::CheckpointOpt,
            "best_student.json",
            &CheckpointBest {
                epoch,
                seed,
                val_cas,
                test_cas,
                ledger,
            },
        )?,
    ])
}

fn stage_tuning(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    ctx.store.fresh_stage_dir(Stage::Tuning)?;
    let mut teacher = ctx.teacher()?;
    let (mut gen, curve) = ctx.best_generator()?;
    let budget = ctx.budget_cfg();
    let cfg = ctx.cfg;
    let mut setup = StudentSetup {
        teacher: &mut teacher,
        num_classes: ctx.train.num_classes,
        n_real: ctx.train.len(),
        val: ctx.val,
        model_cfg: &cfg.student.model,
        train_cfg: &budget,
        confidence: cfg.strategies.confidence,
    };
    let mut objective = StudentObjective {
        setup: &mut setup,
        gen: &mut gen,
    };
    let log = &mut *ctx.log;
    let outcome = tune(&mut objective, &cfg.tuner, curve.best_cas, stage_seed(cfg.seed, "tuning"), |t| {
        log(&format!(
            "trial {} σ={:.3} r={} s={} {:?} {:?}",
            t.id, t.params.std_dev, t.params.regeneration_rate, t.params.cardinality_scale, t.status, t.final_cas
        ))
    })?;
    Ok(vec![ctx.store.write_json(Stage::Tuning, "tune.json", &outcome)?])
}

fn stage_student(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    let dir = ctx.store.fresh_stage_dir(Stage::Student)?;
    let mut teacher = ctx.teacher()?;
    let (mut gen, _) = ctx.best_generator()?;
    let tuned: TuneOutcome = ctx.store.read_json(Stage::Tuning, "tune.json")?;
    let cfg = ctx.cfg;
    let mut setup = StudentSetup {
        teacher: &mut teacher,
        num_classes: ctx.train.num_classes,
        n_real: ctx.train.len(),
        val: ctx.val,
        model_cfg: &cfg.student.model,
        train_cfg: &cfg.student.train,
        confidence: cfg.strategies.confidence,
    };
    let log = &mut *ctx.log;
    let (mut student, ledger) = train_student(
        &mut setup,
        &mut gen,
        Strategy::Gkd,
        tuned.best_params,
        stage_seed(cfg.seed, "final-student"),
        |r| {
            log(&format!("student epoch {} val {:.4}", r.epoch, r.val_acc));
            true
        },
    )?;
    let test_cas = evaluate_accuracy(&mut student.model, ctx.test)?;
    let ckpt = dir.join(STUDENT_CKPT);
    save_classifier(&ckpt, "student", &student)?;
    let summary = StudentSummary {
        params: tuned.best_params,
        val_cas: student.best_val_acc,
        test_cas,
        best_epoch: student.best_epoch,
        ledger,
    };
    Ok(vec![ckpt, ctx.store.write_json(Stage::Student, "student.json", &summary)?])
}

fn stage_strategies(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    ctx.store.fresh_stage_dir(Stage::Strategies)?;
    let mut teacher = ctx.teacher()?;
    let (mut gen, curve) = ctx.best_generator()?;
    let reuse: CheckpointBest = ctx.store.read_json(Stage::CheckpointOpt, "best_student.json")?;
    let budget = ctx.budget_cfg();
    let cfg = ctx.cfg;
    let params = cfg.student.checkpoint_params;
    let mut results = Vec::new();
    for &strategy in &cfg.strategies.strategies {
        for i in 0..cfg.strategies.seeds {
            let seed = if i == 0 {
                ctx.checkpoint_seed()
            } else {
                stage_seed(cfg.seed, &format!("student-{i}"))
            };
            // the checkpoint sweep already trained exactly this student
            if strategy == Strategy::Gkd && i == 0 && reuse.seed == seed && reuse.epoch == curve.best_epoch {
                results.push(StrategyResult {
                    strategy,
                    seed_index: i,
                    seed,
                    val_cas: reuse.val_cas,
                    test_cas: reuse.test_cas,
                    ledger: reuse.ledger,
                });
                continue;
            }
            let mut setup = StudentSetup {
                teacher: &mut teacher,
                num_classes: ctx.train.num_classes,
                n_real: ctx.train.len(),
                val: ctx.val,
                model_cfg: &cfg.student.model,
                train_cfg: &budget,
                confidence: cfg.strategies.confidence,
            };
            let (mut student, ledger) = train_student(&mut setup, &mut gen, strategy, params, seed, |_| true)?;
            let test_cas = evaluate_accuracy(&mut student.model, ctx.test)?;
            (ctx.log)(&format!(
                "strategy {} seed {i}: val {:.4} test {:.4}",
                strategy.as_str(),
                student.best_val_acc,
                test_cas
            ));
            results.push(StrategyResult {
                strategy,
                seed_index: i,
                seed,
                val_cas: student.best_val_acc,
                test_cas,
                ledger,
            });
        }
    }
    let medians = cfg
        .strategies
        .strategies
        .iter()
        .map(|&s| {
            let of = |f: fn(&StrategyResult) -> f64| {
                median(&results.iter().filter(|r| r.strategy == s).map(f).collect::<Vec<_>>())
            };
            StrategyMedian {
                strategy: s,
                median_val_cas: of(|r| r.val_cas),
                median_test_cas: of(|r| r.test_cas),
            }
        })
        .collect();
    let cmp = StrategyComparison {
        checkpoint_epoch: curve.best_epoch,
        params,
        results,
        medians,
    };
    Ok(vec![ctx.store.write_json(Stage::Strategies, "strategies.json", &cmp)?])
}

fn stage_mia(ctx: &mut Ctx<'_>) -> Result<Vec<PathBuf>> {
    ctx.store.fresh_stage_dir(Stage::Mia)?;
    let cfg = ctx.cfg;
    let mut shadows = train_shadow_models(
        ctx.val,
        cfg.mia.shadows,
        &cfg.teacher.model,
        &cfg.teacher.train,
        stage_seed(cfg.seed, "shadows"),
    )?;
    let ledger: Vec<ShadowLedger> = shadows
        .iter()
        .map(|s| ShadowLedger {
            seed: s.split.seed,
            member_idx: s.split.member_idx.clone(),
            holdout_idx: s.split.holdout_idx.clone(),
            nonmember_idx: s.split.nonmember_idx.clone(),
            holdout_acc: s.holdout_acc,
        })
        .collect();
    let samples = build_attack_dataset(&mut shadows, cfg.mia.features)?;
    let set = train_attack_models(
        &samples,
        ctx.train.num_classes,
        cfg.mia.features,
        cfg.mia.selection_fraction,
        stage_seed(cfg.seed, "attack-models"),
    )?;
    (ctx.log)(&format!("attack models: {:?} selection AUC {:?}", set.families(), set.selection_auc));
    let mut files = vec![
        ctx.store.write_json(Stage::Mia, "shadows.json", &ledger)?,
        ctx.store.write_json(Stage::Mia, "attack_models.json", &set)?,
    ];
    for target in ["teacher", "student"] {
        let r = attack_target(ctx.store, cfg, ctx.train, ctx.test, &set, target)?;
        (ctx.log)(&format!("mia {target}: AUC {:.4} AOP {:.4}", r.auc, r.aop));
        files.push(ctx.store.write_json(Stage::Mia, &format!("mia_{target}.json"), &r)?);
    }
    Ok(files)
}

/// Attacks a stored target with a fitted attack set. Both targets share
/// one subsampling seed so they are scored on the same samples.
fn attack_target(
    store: &ArtifactStore,
    cfg: &RunConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    set: &AttackModelSet,
    target: &str,
) -> Result<MiaReport> {
    let (mut model, accuracy) = match target {
        "teacher" => {
            let s: TeacherSummary = store.read_json(Stage::Teacher, "teacher.json")?;
            (load_classifier(&store.stage_dir(Stage::Teacher).join(TEACHER_CKPT))?.0, s.test_accuracy)
        }
        "student" => {
            let s: StudentSummary = store.read_json(Stage::Student, "student.json")?;
            (load_classifier(&store.stage_dir(Stage::Student).join(STUDENT_CKPT))?.0, s.test_cas)
        }
        other => return Err(KrError::Config(format!("unknown attack target `{other}` (expected teacher|student)"))),
    };
    attack(&mut model, target, accuracy, train, test, set, stage_seed(cfg.seed, "attack-subsample"))
}

/// Re-runs the attack on one target of a finished run using its stored
/// attack models.
pub fn run_mia_target(run_dir: &Path, registry: &Registry, target: &str) -> Result<MiaReport> {
    let cfg = ArtifactStore::load_config(run_dir)?;
    let store = ArtifactStore::open(&RunConfig {
        output_root: run_dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ..cfg.clone()
    })?;
    if store.completed(Stage::Mia)?.is_none() {
        return Err(KrError::invalid("the run has no completed mia stage"));
    }
    let set: AttackModelSet = store.read_json(Stage::Mia, "attack_models.json")?;
    let [train, _, test] = registry.load_dataset(&cfg.dataset, &cfg.data_root)?;
    attack_target(&store, &cfg, &train, &test, &set, target)
}

/// Assembles the report from every completed stage.
pub fn collect_report(store: &ArtifactStore, cfg: &RunConfig) -> Result<RunReport> {
    let mut stages = Vec::new();
    let mut done = |s: Stage| -> Result<bool> {
        Ok(match store.completed(s)? {
            Some(m) => {
                stages.push(m);
                true
            }
            None => false,
        })
    };
    let teacher = if done(Stage::Teacher)? {
        Some(store.read_json(Stage::Teacher, "teacher.json")?)
    } else {
        None
    };
    done(Stage::Gan)?;
    let curve = if done(Stage::CheckpointOpt)? {
        Some(store.read_json(Stage::CheckpointOpt, "curve.json")?)
    } else {
        None
    };
    let tuning = if done(Stage::Tuning)? {
        Some(store.read_json(Stage::Tuning, "tune.json")?)
    } else {
        None
    };
    let student = if done(Stage::Student)? {
        Some(store.read_json(Stage::Student, "student.json")?)
    } else {
        None
    };
    let strategies = if done(Stage::Strategies)? {
        Some(store.read_json(Stage::Strategies, "strategies.json")?)
    } else {
        None
    };
    let (mia_teacher, mia_student) = if done(Stage::Mia)? {
        (
            Some(store.read_json(Stage::Mia, "mia_teacher.json")?),
            Some(store.read_json(Stage::Mia, "mia_student.json")?),
        )
    } else {
        (None, None)
    };
    let mut report = RunReport {
        run_id: cfg.run_id(),
        config_hash: store.config_hash().to_string(),
        dataset: cfg.dataset.clone(),
        profile: cfg.profile,
        seed: cfg.seed,
        stages,
        teacher,
        checkpoint_curve: curve,
        tuning,
        student,
        strategies,
        mia_teacher,
        mia_student,
        partial: false,
    };
    report.partial = !report.is_complete();
    Ok(report)
}

/// `count` GKD samples from the best checkpoint of a run, with the tuned
/// parameters when tuning is complete.
pub fn dump_synthetic(run_dir: &Path, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg = ArtifactStore::load_config(run_dir)?;
    let store = ArtifactStore::open(&RunConfig {
        output_root: run_dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ..cfg.clone()
    })?;
    for s in [Stage::Teacher, Stage::Gan, Stage::CheckpointOpt] {
        if store.completed(s)?.is_none() {
            return Err(KrError::invalid(format!("the run has no completed {} stage", s.as_str())));
        }
    }
    let mut teacher = load_classifier(&store.stage_dir(Stage::Teacher).join(TEACHER_CKPT))?.0;
    let curve: CheckpointCurve = store.read_json(Stage::CheckpointOpt, "curve.json")?;
    let (mut gen, _) = load_generator(&store.stage_dir(Stage::Gan).join(checkpoint_file_name(curve.best_epoch)))?;
    let params = match store.completed(Stage::Tuning)? {
        Some(_) => store.read_json::<TuneOutcome>(Stage::Tuning, "tune.json")?.best_params,
        None => cfg.student.checkpoint_params,
    };
    let k = cfg.teacher.model.num_classes;
    let ds = generate_gkd(&mut gen, &mut teacher, k, &params, count, stage_seed(cfg.seed, "dump"))?;
    std::fs::create_dir_all(out).map_err(|e| KrError::io(out, e))?;
    let mut csv = String::from("index,condition_label");
    for c in 0..k {
        csv.push_str(&format!(",p{c}"));
    }
    csv.push('\n');
    for (i, row) in ds.soft_labels.data().chunks(k).enumerate() {
        csv.push_str(&format!("{i},{}", ds.condition_labels[i]));
        for p in row {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    let labels = out.join("soft_labels.csv");
    crate::datasets::atomic_write(&labels, csv.as_bytes())?;
    let grid = out.join("samples.ppm");
    crate::datasets::atomic_write(&grid, &ppm_grid(ds.images.data(), count, ds.images.dim(3), 8))?;
    Ok(vec![labels, grid])
}

/// Binary PPM mosaic of `n` 32×32 images, `per_row` across.
fn ppm_grid(pixels: &[f32], n: usize, c: usize, per_row: usize) -> Vec<u8> {
    let side = crate::datasets::SIDE;
    let cols = per_row.min(n).max(1);
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let i = (y / side) * cols + x / side;
            for ch in 0..3 {
                let v = if i < n {
                    let base = ((i * side + y % side) * side + x % side) * c;
                    pixels[base + if c == 1 { 0 } else { ch }]
                } else {
                    1.0
                };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
