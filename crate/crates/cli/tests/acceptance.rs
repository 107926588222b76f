//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the console.
//! Criteria 9 and 10 drive the `krlab` binary through two full tiny-profile
//! pipeline runs on the toy dataset and take the better part of two hours
//! on a single CPU core.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use krlab_core::clf_training::{lr_at, ClfTrainConfig, DataSource};
use krlab_core::datasets::{make_shadow_split, shadow_sizes, LabeledDataset, Registry, Split, TOY_SHAPES};
use krlab_core::gan_training::{
    d_loss_var, g_loss_var, hinge_losses, logistic_d_loss, logistic_g_loss, AdversarialLoss, GanTrainConfig,
};
use krlab_core::nets::{Classifier, ClassifierConfig, Generator, GeneratorConfig, Profile};
use krlab_core::nn::{Graph, Tensor};
use krlab_core::pipeline::{rung_epochs, tune, Objective, TunerConfig};
use krlab_core::privacy::auc;
use krlab_core::report::{read_report, verify_tables, RunReport, REFERENCE_AOP_CSV};
use krlab_core::synthesis::{generate_gkd, GenerationParams, ImageGenerator, RegeneratingSource, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ----- 1 ------------------------------------------------------------------------

fn aop_oracle() -> Outcome {
    let rows = verify_tables(REFERENCE_AOP_CSV).map_err(|e| e.to_string())?;
    ensure(rows.len() == 18, format!("{} rows, expected 18", rows.len()))?;
    let worst = rows
        .iter()
        .map(|r| (r.computed_aop - r.published_aop).abs())
        .fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.label.as_str()).collect();
    ensure(failed.is_empty(), format!("outside ±0.03 pp: {failed:?}"))?;
    let cli = Command::new(env!("CARGO_BIN_EXE_krlab"))
        .args(["report", "verify-tables"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(cli.status.success(), "`report verify-tables` did not exit 0")?;
    Ok(format!("18/18 rows, worst |Δ| = {worst:.4} pp"))
}

// ----- 2 ------------------------------------------------------------------------

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &a) in labels.iter().enumerate() {
        for (j, &b) in labels.iter().enumerate() {
            if a && !b {
                pairs += 1;
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / 2.0 / pairs as f64
}

fn auc_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    let mut with_ties = 0;
    for f in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=n.max(2));
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.37).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < n {
            with_ties += 1;
        }
        let (a, b) = (auc(&scores, &labels).map_err(|e| e.to_string())?, pairwise_auc(&scores, &labels));
        ensure(a == b, format!("fixture {f} (n={n}): rank {a} vs pairwise {b}"))?;
    }
    Ok(format!("100/100 fixtures exact, {with_ties} with ties"))
}

// ----- 3 ------------------------------------------------------------------------

fn null_calibration() -> Outcome {
    let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
    let inside = (0..100u64)
        .filter(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
            auc(&scores, &labels).is_ok_and(|a| (0.48..=0.52).contains(&a))
        })
        .count();
    ensure(inside >= 95, format!("{inside}/100 in [0.48, 0.52]"))?;
    Ok(format!("{inside}/100 in [0.48, 0.52]"))
}

// ----- 4 ------------------------------------------------------------------------

struct NullGen;

impl ImageGenerator for NullGen {
    fn latent_dim(&self) -> usize {
        1
    }
    fn generate(&mut self, _: &Tensor, labels: &[usize]) -> krlab_core::Result<Tensor> {
        Ok(Tensor::zeros(&[labels.len(), 32, 32, 1]))
    }
}

fn ledgers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..1000 {
        let n = rng.random_range(20..=4000);
        let (m, h, nm) = shadow_sizes(n);
        // nearest integer to 0.45·n (ties up), by exact comparison
        let want = (0..=n).min_by_key(|&c| ((100 * c as i64 - 45 * n as i64).abs(), usize::MAX - c)).unwrap();
        ensure(m == want && nm == want && m + h + nm == n, format!("n={n}: {m}/{h}/{nm}"))?;
        if n <= 1500 {
            let ds = LabeledDataset::new("p", Split::Val, 2, Tensor::zeros(&[n, 32, 32, 1]), (0..n).map(|i| i % 2).collect())
                .map_err(|e| e.to_string())?;
            let s = make_shadow_split(&ds, rng.random()).map_err(|e| e.to_string())?;
            let mut all: Vec<usize> = [&s.member_idx, &s.holdout_idx, &s.nonmember_idx].into_iter().flatten().copied().collect();
            all.sort_unstable();
            ensure(all == (0..n).collect::<Vec<_>>(), format!("n={n}: parts are not a partition"))?;
        }
    }
    for epochs in 1..=100 {
        for r in 1..=10 {
            let params = GenerationParams {
                std_dev: 1.0,
                regeneration_rate: r,
                cardinality_scale: 1,
            };
            let mut gen = NullGen;
            let mut teacher = Uniform;
            let mut gkd = RegeneratingSource::new(&mut gen, Some(&mut teacher), Strategy::Gkd, params, 2, 2, 0)
                .map_err(|e| e.to_string())?;
            for e in 0..epochs {
                gkd.epoch(e).map_err(|e| e.to_string())?;
            }
            ensure(gkd.events == epochs.div_ceil(r), format!("E={epochs} r={r}: {} events", gkd.events))?;
        }
    }
    for e in 1..=500 {
        let cfg = GanTrainConfig {
            epochs: e,
            ..GanTrainConfig::for_profile(Profile::Full)
        };
        ensure(cfg.checkpoint_epochs().len() == e / 5, format!("E={e}: checkpoint count"))?;
    }
    Ok("1000 split sizes, 1000 (E, r) schedules, 500 checkpoint counts".into())
}

struct Uniform;

impl krlab_core::synthesis::Labeler for Uniform {
    fn logits(&mut self, images: &Tensor) -> krlab_core::Result<Tensor> {
        Ok(Tensor::zeros(&[images.dim(0), 2]))
    }
}

// ----- 5 ------------------------------------------------------------------------

fn soft_labels() -> Outcome {
    let n_real = Registry::builtin().get(TOY_SHAPES).map_err(|e| e.to_string())?.spec.train;
    let mut gen = Generator::new(GeneratorConfig::for_profile(Profile::Tiny, 3, 3), 3).map_err(|e| e.to_string())?;
    let mut teacher = Classifier::new(ClassifierConfig::for_profile(Profile::Tiny, 3, 3), 4).map_err(|e| e.to_string())?;
    let params = GenerationParams::default();
    let ds = generate_gkd(&mut gen, &mut teacher, 3, &params, n_real, 5).map_err(|e| e.to_string())?;
    ensure(ds.len() == n_real, "wrong sample count")?;
    let mut worst = 0.0f64;
    for row in ds.soft_labels.data().chunks(3) {
        ensure(row.iter().all(|&v| v >= 0.0), "negative probability")?;
        worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-5, format!("row sum off by {worst:e}"))?;
    for c in 0..3 {
        let count = ds.condition_labels.iter().filter(|&&l| l == c).count();
        ensure(count == n_real / 3, format!("class {c}: {count}"))?;
    }
    Ok(format!("{n_real} rows, max |Σ−1| = {worst:.1e}, {} per class", n_real / 3))
}

// ----- 6 ------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn losses_and_gradients() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    // tabulated probes
    ensure(close(logistic_d_loss(&[0.0], &[0.0], 0.0), 2.0 * ln2, 1e-6), "logistic D at 0")?;
    ensure(close(logistic_d_loss(&[0.0], &[0.0], 0.1), 2.0 * ln2, 1e-6), "smoothed logistic D at 0")?;
    ensure(logistic_d_loss(&[80.0], &[-80.0], 0.0) < 1e-12, "logistic D limit")?;
    ensure(close(logistic_g_loss(&[0.0]), ln2, 1e-6), "logistic G at 0")?;
    ensure(logistic_g_loss(&[80.0]) < 1e-12, "logistic G limit")?;
    ensure(hinge_losses(&[1.0], &[-1.0]).0 == 0.0, "hinge D at (1, −1)")?;
    ensure(hinge_losses(&[0.0], &[0.0]) == (2.0, 0.0), "hinge at 0")?;
    ensure(hinge_losses(&[2.0], &[-2.0]) == (0.0, 2.0), "hinge at (2, −2)")?;
    // closed forms on a spread of logits
    let r = [0.3f32, -1.7, 2.2, 0.0];
    let f = [-0.4f32, 1.1, -2.5, 0.6];
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let eps = 0.1;
    let want_d = mean(&r.iter().map(|&x| (1.0 - eps) * softplus(-x as f64) + eps * softplus(x as f64)).collect::<Vec<_>>())
        + mean(&f.iter().map(|&x| softplus(x as f64)).collect::<Vec<_>>());
    ensure(close(logistic_d_loss(&r, &f, eps as f32), want_d, 1e-6), "logistic D closed form")?;
    let want_h = mean(&r.iter().map(|&x| (1.0 - x as f64).max(0.0)).collect::<Vec<_>>())
        + mean(&f.iter().map(|&x| (1.0 + x as f64).max(0.0)).collect::<Vec<_>>());
    ensure(close(hinge_losses(&r, &f).0, want_h, 1e-6), "hinge D closed form")?;

    // analytic vs central differences on scalar probes
    let mut worst = 0.0f64;
    let h = 1e-3f64;
    for x in [-2.0f32, -0.5, 0.0, 0.7, 1.9] {
        let g_grad = |x: f32| {
            let mut g = Graph::new();
            let v = g.leaf(Tensor::new(&[1], vec![x]));
            let l = g_loss_var(&mut g, AdversarialLoss::Logistic, v);
            g.backward(l).get(v).map(|t| t.data()[0] as f64).unwrap_or(0.0)
        };
        let numeric = (softplus(-(x as f64 + h)) - softplus(-(x as f64 - h))) / (2.0 * h);
        let analytic = g_grad(x);
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(1e-3));
        // D loss as a function of one real (0) or one fake (1) logit
        let (r0, f0) = (0.3f32, -0.2f32);
        for which in [0, 1] {
            let at = |x: f32| if which == 0 { (x, f0) } else { (r0, x) };
            let mut g = Graph::new();
            let (r, f) = at(x);
            let rv = g.leaf(Tensor::new(&[1], vec![r]));
            let fv = g.leaf(Tensor::new(&[1], vec![f]));
            let l = d_loss_var(&mut g, AdversarialLoss::Logistic, rv, fv, eps as f32);
            let grads = g.backward(l);
            let analytic = grads.get(if which == 0 { rv } else { fv }).map(|t| t.data()[0] as f64).unwrap_or(0.0);
            let scalar = |x: f64| {
                let (r, f) = if which == 0 { (x, f0 as f64) } else { (r0 as f64, x) };
                (1.0 - eps) * softplus(-r) + eps * softplus(r) + softplus(f)
            };
            let numeric = (scalar(x as f64 + h) - scalar(x as f64 - h)) / (2.0 * h);
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(1e-3));
        }
    }
    ensure(worst <= 1e-3, format!("worst relative gradient error {worst:.2e}"))?;
    Ok(format!("8 tabulated probes, worst gradient rel. error {worst:.1e}"))
}

// ----- 7 ------------------------------------------------------------------------

fn lr_schedule() -> Outcome {
    for epochs in [100usize, 500] {
        let cfg = ClfTrainConfig {
            epochs,
            ..ClfTrainConfig::for_profile(Profile::Full)
        };
        let at = |e: f64| lr_at(e, &cfg).map(f64::from).map_err(|e| e.to_string());
        let mid = 10.0 + (epochs as f64 - 10.0) / 2.0;
        for (e, want, tol) in [(0.0, 1e-5, 1e-9), (10.0, 0.5, 1e-6), (mid, 0.25, 1e-6), (epochs as f64, 0.0, 0.0)] {
            let got = at(e)?;
            ensure((got - want).abs() <= tol, format!("E={epochs}: lr({e}) = {got}, want {want}"))?;
        }
    }
    Ok("E ∈ {100, 500}: 1e-5, 0.5, 0.25, 0".into())
}

// ----- 8 ------------------------------------------------------------------------

struct Stub;

impl Objective for Stub {
    fn run(&mut self, _: usize, p: &GenerationParams, _: u64, report: &mut dyn FnMut(usize, f64) -> bool) -> krlab_core::Result<f64> {
        let v = -(p.std_dev as f64 - 2.0).powi(2);
        for e in rung_epochs(100) {
            if !report(e, v) {
                break;
            }
        }
        Ok(v)
    }
}

fn tuner_sanity() -> Outcome {
    let cfg = TunerConfig::new(50, 100);
    let mut hits = 0;
    for seed in 0..20 {
        let out = tune(&mut Stub, &cfg, 0.0, seed, |_| {}).map_err(|e| e.to_string())?;
        ensure(
            out.trials.iter().all(|t| cfg.space.contains(&t.params)),
            format!("seed {seed}: out-of-bounds parameters"),
        )?;
        if (out.best_params.std_dev as f64 - 2.0).abs() <= 0.15 {
            hits += 1;
        }
    }
    ensure(hits >= 18, format!("{hits}/20 runs with σ within 2 ± 0.15"))?;
    Ok(format!("{hits}/20 runs with σ within 2 ± 0.15, all in bounds"))
}

// ----- 9 / 10 -------------------------------------------------------------------

const E2E_LIMIT: Duration = Duration::from_secs(4 * 3600);

fn e2e_run(root: &Path) -> Result<(RunReport, Duration), String> {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_krlab"))
        .args(["--seed", "1", "--deterministic", "--root"])
        .arg(root)
        .args(["pipeline", "run", "--dataset", TOY_SHAPES, "--profile", "tiny"])
        .output()
        .map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    if !out.status.success() {
        return Err(format!(
            "pipeline run exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let run_dir: PathBuf = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run "))
        .ok_or("no run directory printed")?
        .into();
    let report = read_report(&run_dir.join("report").join("report.json")).map_err(|e| e.to_string())?;
    Ok((report, took))
}

fn tiny_end_to_end(first: &Result<(RunReport, Duration), String>) -> Outcome {
    let (r, took) = first.as_ref().map_err(|e| e.clone())?;
    ensure(*took < E2E_LIMIT, format!("took {took:?}"))?;
    ensure(r.is_complete() && !r.partial, "report is incomplete")?;
    let curve = r.checkpoint_curve.as_ref().ok_or("no curve")?;
    ensure(curve.points.len() == 6, format!("{} curve points", curve.points.len()))?;
    ensure(curve.points.iter().any(|p| p.epoch == curve.best_epoch), "best epoch not on the curve")?;
    let strat = r.strategies.as_ref().ok_or("no strategy comparison")?;
    let gkd = strat.median(Strategy::Gkd).ok_or("no GKD median")?.median_test_cas;
    let base = strat.median(Strategy::Baseline).ok_or("no baseline median")?.median_test_cas;
    let (t, s) = (r.mia_teacher.as_ref().ok_or("no teacher MIA")?, r.mia_student.as_ref().ok_or("no student MIA")?);
    let detail = format!(
        "{:.1} min; best checkpoint {} (val CAS {:.2}%); median test CAS GKD {:.2}% vs baseline {:.2}%; MIA AUC student {:.4} vs teacher {:.4}",
        took.as_secs_f64() / 60.0,
        curve.best_epoch,
        100.0 * curve.best_cas,
        100.0 * gkd,
        100.0 * base,
        s.auc,
        t.auc
    );
    ensure(gkd >= base - 0.01, format!("(b) failed: {detail}"))?;
    ensure(s.auc <= t.auc + 0.02, format!("(c) failed: {detail}"))?;
    Ok(detail)
}

fn determinism(first: &Result<(RunReport, Duration), String>, root: &Path) -> Outcome {
    let (a, _) = first.as_ref().map_err(|e| format!("first run failed: {e}"))?;
    let (b, _) = e2e_run(root)?;
    let (ma, mb) = (a.metrics(), b.metrics());
    if ma == mb {
        return Ok("metric values identical across two runs".into());
    }
    let (oa, ob) = (ma.as_object().cloned().unwrap_or_default(), mb.as_object().cloned().unwrap_or_default());
    let differing: Vec<&String> = oa.keys().filter(|k| oa.get(*k) != ob.get(*k)).collect();
    Err(format!("sections differ: {differing:?}"))
}

fn main() {
    // `cargo test -- --list` and filters: this target has no sub-tests
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, t0: Instant, o: Outcome| {
        let secs = t0.elapsed().as_secs_f64();
        match o {
            Ok(d) => println!("PASS {n:>2} {name} ({secs:.1}s): {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.1}s): {e}");
            }
        }
    };
    let quick: [Criterion; 8] = [
        ("AOP oracle", aop_oracle),
        ("AUC brute-force equivalence", auc_brute_force),
        ("null-attack calibration", null_calibration),
        ("split/schedule ledgers", ledgers),
        ("soft-label invariants", soft_labels),
        ("loss/gradient checks", losses_and_gradients),
        ("LR schedule", lr_schedule),
        ("tuner sanity", tuner_sanity),
    ];
    for (i, (name, f)) in quick.into_iter().enumerate() {
        let t0 = Instant::now();
        report(i + 1, name, t0, f());
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let t0 = Instant::now();
    let first = e2e_run(&tmp.path().join("a"));
    report(9, "tiny end-to-end", t0, tiny_end_to_end(&first));
    let t0 = Instant::now();
    report(10, "determinism", t0, determinism(&first, &tmp.path().join("b")));
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
