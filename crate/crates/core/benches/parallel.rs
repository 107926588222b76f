//! Parallel versus sequential execution of the hot network paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use krlab_core::nets::{Classifier, ClassifierConfig, Generator, GeneratorConfig, Profile};
use krlab_core::nn::{par, Tensor};
use krlab_core::synthesis::{round_robin, sample_latents};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const BATCH: usize = 64;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn classifier_logits(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::new(&[BATCH, 32, 32, 3], (0..BATCH * 32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut group = c.benchmark_group("classifier_logits");
    group.sample_size(10);
    for (name, on) in modes() {
        let mut clf = Classifier::new(ClassifierConfig::for_profile(Profile::Tiny, 10, 3), 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            b.iter(|| black_box(clf.logits(&images, BATCH).unwrap()));
        });
    }
    par::set_enabled(true);
    group.finish();
}

fn generator_sampling(c: &mut Criterion) {
    let latents = sample_latents(BATCH, 128, 1.0, 2).unwrap();
    let labels = round_robin(BATCH, 10, 0);
    let mut group = c.benchmark_group("generator_sampling");
    group.sample_size(10);
    for (name, on) in modes() {
        let mut gen = Generator::new(GeneratorConfig::for_profile(Profile::Tiny, 10, 3), 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            b.iter(|| black_box(gen.generate(&latents, &labels, BATCH).unwrap()));
        });
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, classifier_logits, generator_sampling);
criterion_main!(benches);
