//! Network, GAN-training and classifier-training properties on small
//! fixtures.

use krlab_core::augment::AugmentConfig;
use krlab_core::checkpoint::load_checkpoint;
use krlab_core::clf_training::{evaluate_accuracy, lr_at, train_classifier, ClfTrainConfig, RealSource};
use krlab_core::datasets::{LabeledDataset, Registry, Split, TOY_SHAPES};
use krlab_core::gan_training::{load_generator, train_gan, GanCheckpointMeta, GanTrainConfig};
use krlab_core::nets::{
    ema_update, Classifier, ClassifierConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Profile,
};
use krlab_core::nn::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> [LabeledDataset; 3] {
    let tmp = tempfile::tempdir().unwrap();
    Registry::builtin().load_dataset(TOY_SHAPES, tmp.path()).unwrap()
}

fn random_images(n: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, 32, 32, c], (0..n * 1024 * c).map(|_| rng.random()).collect())
}

#[test]
fn tiny_profiles_are_smaller() {
    for (k, c) in [(3, 3), (10, 1)] {
        let count = |p| {
            (
                Generator::new(GeneratorConfig::for_profile(p, k, c), 0).unwrap().store.num_params(),
                Discriminator::new(DiscriminatorConfig::for_profile(p, k, c), 0).unwrap().store.num_params(),
                Classifier::new(ClassifierConfig::for_profile(p, k, c), 0).unwrap().store.num_params(),
            )
        };
        let (tiny, full) = (count(Profile::Tiny), count(Profile::Full));
        assert!(tiny.0 < full.0 && tiny.1 < full.1 && tiny.2 < full.2, "{tiny:?} vs {full:?}");
    }
}

#[test]
fn classifier_has_fourteen_weighted_layers_and_finite_logits() {
    let mut clf = Classifier::new(ClassifierConfig::for_profile(Profile::Tiny, 3, 3), 1).unwrap();
    assert_eq!(clf.weighted_layers(), 14);
    let logits = clf.logits(&random_images(8, 3, 2), 4).unwrap();
    assert_eq!(logits.shape(), &[8, 3]);
    assert!(logits.all_finite());
    let mut full = Classifier::new(ClassifierConfig::for_profile(Profile::Full, 10, 3), 1).unwrap();
    assert_eq!(full.stage_widths(), [64, 128, 256]);
    assert!(full.logits(&random_images(2, 3, 3), 2).unwrap().all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_output_is_bounded(seed in any::<u64>(), scale in 0.1f32..50.0) {
        let mut gen = Generator::new(GeneratorConfig::for_profile(Profile::Tiny, 3, 3), seed).unwrap();
        // blow the weights up to stress the output squashing
        for e in gen.store.entries_mut() {
            e.value.scale_assign(scale);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::new(&[4, 128], (0..512).map(|_| rng.random_range(-3.0..3.0)).collect());
        let x = gen.generate(&z, &[0, 1, 2, 0], 4).unwrap();
        prop_assert_eq!(x.shape(), &[4, 32, 32, 3]);
        prop_assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn store_of(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add_param("w", Tensor::new(&[values.len()], values.to_vec()));
    s
}

proptest! {
    #[test]
    fn ema_is_a_contraction(
        pairs in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..32),
        decay in 0.0f32..1.0,
        step in 0u64..20,
        start in 0u64..20,
    ) {
        let (e0, live): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let mut ema = store_of(&e0);
        let live_s = store_of(&live);
        ema_update(&mut ema, &live_s, decay, step, start).unwrap();
        let e1 = ema.entries()[0].value.data();
        for i in 0..live.len() {
            let before = (e0[i] - live[i]).abs();
            let after = (e1[i] - live[i]).abs();
            if step < start {
                prop_assert_eq!(e1[i], live[i]);
            } else {
                prop_assert!(after <= decay * before + 1e-5 * before.max(1.0));
            }
        }
    }
}

/// 128 toy images: with batch 16 and four D updates per G step this is two
/// generator steps per epoch.
fn small_gan_set() -> LabeledDataset {
    let [train, _, _] = toy();
    train.subset(&(0..128).collect::<Vec<_>>())
}

fn small_gan_cfg(ema_start: u64) -> GanTrainConfig {
    GanTrainConfig {
        epochs: 5,
        batch_size: 16,
        ema_start,
        ..GanTrainConfig::for_profile(Profile::Tiny)
    }
}

#[test]
fn gan_update_ratio_and_checkpoints() {
    let data = small_gan_set();
    let tmp = tempfile::tempdir().unwrap();
    let g = GeneratorConfig::for_profile(Profile::Tiny, 3, 3);
    let d = DiscriminatorConfig::for_profile(Profile::Tiny, 3, 3);
    let mut epochs_seen = 0;
    let run = train_gan(&data, &g, &d, &small_gan_cfg(0), 4, tmp.path(), |_| epochs_seen += 1).unwrap();
    assert_eq!(epochs_seen, 5);
    assert_eq!(run.g_steps, 10);
    assert_eq!(run.d_steps, 4 * run.g_steps);
    assert_eq!(run.checkpoints.len(), 1);
    assert_eq!(run.checkpoints[0].epoch, 5);
    assert!(run.metrics.iter().all(|m| m.d_loss.is_finite() && m.g_loss.is_finite()));

    // averaging from step 0 leaves the EMA behind the live weights
    let mut ck = load_checkpoint::<GanCheckpointMeta>(&run.checkpoints[0].path).unwrap();
    let (ema, live) = (ck.take("ema").unwrap(), ck.take("generator").unwrap());
    assert_ne!(ema.to_bytes(), live.to_bytes());

    // round trip: the loaded generator reproduces the EMA network exactly
    let (mut loaded, meta) = load_generator(&run.checkpoints[0].path).unwrap();
    assert_eq!(meta.epoch, 5);
    let mut direct = Generator::from_store(g.clone(), ema).unwrap();
    let z = Tensor::new(&[3, 128], (0..384).map(|i| ((i % 17) as f32 - 8.0) / 4.0).collect());
    let a = loaded.generate(&z, &[0, 1, 2], 3).unwrap();
    let b = direct.generate(&z, &[0, 1, 2], 3).unwrap();
    assert_eq!(a.data(), b.data());

    // same seed, same run
    let tmp2 = tempfile::tempdir().unwrap();
    let again = train_gan(&data, &g, &d, &small_gan_cfg(0), 4, tmp2.path(), |_| {}).unwrap();
    assert_eq!(run.metrics, again.metrics);
}

#[test]
fn ema_equals_live_before_start_step() {
    let data = small_gan_set();
    let tmp = tempfile::tempdir().unwrap();
    let g = GeneratorConfig::for_profile(Profile::Tiny, 3, 3);
    let d = DiscriminatorConfig::for_profile(Profile::Tiny, 3, 3);
    let run = train_gan(&data, &g, &d, &small_gan_cfg(1000), 2, tmp.path(), |_| {}).unwrap();
    let mut ck = load_checkpoint::<GanCheckpointMeta>(&run.checkpoints[0].path).unwrap();
    assert_eq!(ck.take("ema").unwrap().to_bytes(), ck.take("generator").unwrap().to_bytes());
}

#[test]
fn checkpoint_count_is_floor_of_epochs_over_interval() {
    for e in 1..=500 {
        let c = GanTrainConfig {
            epochs: e,
            ..GanTrainConfig::for_profile(Profile::Full)
        };
        let eps = c.checkpoint_epochs();
        assert_eq!(eps.len(), e / 5, "E={e}");
        assert!(eps.iter().all(|x| x % 5 == 0 && *x <= e));
    }
}

#[test]
fn lr_schedule_fixed_points() {
    for epochs in [100, 500] {
        let cfg = ClfTrainConfig {
            epochs,
            ..ClfTrainConfig::for_profile(Profile::Full)
        };
        let mid = 10.0 + (epochs as f64 - 10.0) / 2.0;
        assert!((lr_at(0.0, &cfg).unwrap() - 1e-5).abs() < 1e-9);
        assert!((lr_at(10.0, &cfg).unwrap() - 0.5).abs() < 1e-6);
        assert!((lr_at(mid, &cfg).unwrap() - 0.25).abs() < 1e-6);
        assert_eq!(lr_at(epochs as f64, &cfg).unwrap(), 0.0);
        // continuous at the warm-up boundary, non-increasing after it
        assert!((lr_at(10.0 - 1e-9, &cfg).unwrap() - 0.5).abs() < 1e-6);
        let mut prev = f32::INFINITY;
        for i in 0..=1000 {
            let e = 10.0 + (epochs as f64 - 10.0) * i as f64 / 1000.0;
            let lr = lr_at(e, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_at(epochs as f64 + 0.5, &cfg).is_err());
    }
}

#[test]
fn classifier_training_properties() {
    let [train, val, _] = toy();
    let train = train.subset(&(0..384).collect::<Vec<_>>());
    let val = val.subset(&(0..150).collect::<Vec<_>>());
    let model_cfg = ClassifierConfig::for_profile(Profile::Tiny, 3, 3);
    let cfg = ClfTrainConfig {
        epochs: 4,
        warmup_epochs: 2,
        batch_size: 32,
        ..ClfTrainConfig::for_profile(Profile::Tiny)
    };
    for seed in 0..2 {
        let mut t = train_classifier(&mut RealSource::new(&train), &model_cfg, &cfg, &val, seed, |_| true).unwrap();
        assert!(t.max_clipped_norm <= cfg.clip_norm as f64 + 1e-4);
        let logged_max = t.curves.iter().map(|c| c.val_acc).fold(0.0, f64::max);
        assert!(t.best_val_acc >= logged_max - 1e-12);
        assert!((evaluate_accuracy(&mut t.model, &val).unwrap() - t.best_val_acc).abs() < 1e-12);
    }
}

#[test]
fn loss_falls_during_warmup_on_a_learnable_problem() {
    // Class = mean brightness band; no augmentation, so the epoch loss is
    // a clean signal.
    let n = 240;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let data: Vec<f32> = labels
        .iter()
        .flat_map(|&l| std::iter::repeat_n(0.15 + 0.35 * l as f32, 1024 * 3))
        .collect();
    let ds = LabeledDataset::new("bands", Split::Train, 3, Tensor::new(&[n, 32, 32, 3], data), labels).unwrap();
    let cfg = ClfTrainConfig {
        epochs: 6,
        warmup_epochs: 5,
        batch_size: 24,
        peak_lr: 0.05,
        augment: AugmentConfig::none(),
        ..ClfTrainConfig::for_profile(Profile::Tiny)
    };
    let model_cfg = ClassifierConfig::for_profile(Profile::Tiny, 3, 3);
    let mut drops: Vec<f64> = (0..3)
        .map(|seed| {
            let t = train_classifier(&mut RealSource::new(&ds), &model_cfg, &cfg, &ds, seed, |_| true).unwrap();
            t.curves[0].train_loss - t.curves[4].train_loss
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn early_stop_keeps_best_snapshot() {
    let [train, val, _] = toy();
    let train = train.subset(&(0..256).collect::<Vec<_>>());
    let val = val.subset(&(0..90).collect::<Vec<_>>());
    let cfg = ClfTrainConfig {
        epochs: 6,
        warmup_epochs: 1,
        batch_size: 64,
        ..ClfTrainConfig::for_profile(Profile::Tiny)
    };
    let model_cfg = ClassifierConfig::for_profile(Profile::Tiny, 3, 3);
    let t = train_classifier(&mut RealSource::new(&train), &model_cfg, &cfg, &val, 0, |r| r.epoch < 2).unwrap();
    assert_eq!(t.curves.len(), 2);
    assert!(t.best_epoch <= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn accuracy_is_permutation_invariant(seed in any::<u64>()) {
        let n = 40;
        let images = random_images(n, 3, seed);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let ds = LabeledDataset::new("p", Split::Val, 3, images, labels).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let shuffled = ds.subset(&perm);
        let mut clf = Classifier::new(ClassifierConfig::for_profile(Profile::Tiny, 3, 3), seed).unwrap();
        let a = evaluate_accuracy(&mut clf, &ds).unwrap();
        let b = evaluate_accuracy(&mut clf, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }
}
