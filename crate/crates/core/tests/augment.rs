use krlab_core::augment::{augment_batch, mixup, smooth_labels, AugmentConfig};
use krlab_core::nn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob_rows(raw: &[f32], k: usize) -> Tensor {
    let mut data = raw.to_vec();
    for row in data.chunks_mut(k) {
        let s: f32 = row.iter().sum::<f32>() + 1e-3;
        for v in row.iter_mut() {
            *v = (*v + 1e-3 / k as f32) / s;
        }
    }
    Tensor::new(&[raw.len() / k, k], data)
}

fn rows_are_distributions(t: &Tensor) -> bool {
    t.data()
        .chunks(t.last_dim())
        .all(|r| r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f32>() - 1.0).abs() < 1e-4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn label_ops_keep_distributions(
        raw in proptest::collection::vec(0.0f32..1.0, 4 * 5),
        eps in 0.0f32..0.99,
        alpha in 0.05f32..4.0,
        seed in any::<u64>(),
    ) {
        let y = prob_rows(&raw, 5);
        prop_assert!(rows_are_distributions(&smooth_labels(&y, eps)));
        let x = Tensor::zeros(&[4, 2, 2, 1]);
        let (_, my, lambda) = mixup(&x, &y, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((0.0..=1.0).contains(&lambda));
        prop_assert!(rows_are_distributions(&my));
    }

    #[test]
    fn full_stack_keeps_range_and_shape(
        pixels in proptest::collection::vec(0.0f32..=1.0, 2 * 32 * 32 * 3),
        seed in any::<u64>(),
        flip in any::<bool>(),
        padding in 0usize..5,
        ta in any::<bool>(),
        mix in any::<bool>(),
    ) {
        let x = Tensor::new(&[2, 32, 32, 3], pixels);
        let y = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]);
        let cfg = AugmentConfig { horizontal_flip: flip, padding, trivial_augment: ta, mixup: mix, ..AugmentConfig::default() };
        let (ax, ay) = augment_batch(&x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(ax.shape(), x.shape());
        prop_assert!(ax.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(rows_are_distributions(&ay));
    }
}

#[test]
fn config_validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    assert!(AugmentConfig { mixup_alpha: 0.0, ..AugmentConfig::default() }.validate().is_err());
    assert!(AugmentConfig { label_smoothing: 1.0, ..AugmentConfig::default() }.validate().is_err());
}
