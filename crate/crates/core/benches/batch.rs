use air_core::dataio::{sample_pairs, Image, LabeledDataset, PairingMode, Split};
use air_core::train::{batch_gradient, ArchConfig, ModelParams, Objective};
use air_core::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn digits(n: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = (0..n)
        .map(|_| {
            let (cr, cc) = (rng.gen_range(8.0..20.0), rng.gen_range(8.0..20.0));
            let px = (0..784)
                .map(|k| {
                    let (r, c) = ((k / 28) as f64, (k % 28) as f64);
                    (-((r - cr).powi(2) + (c - cc).powi(2)) / 18.0).exp() as f32
                })
                .collect();
            Image::new(28, 28, px).unwrap()
        })
        .collect();
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    LabeledDataset::new(images, labels, Split::Train).unwrap()
}

fn batch(c: &mut Criterion) {
    let ds = digits(200);
    let pairs = sample_pairs(&ds, 64, PairingMode::SameClass, 1).unwrap();
    let objective = Objective {
        loss: Default::default(),
        smoothness_weight: 0.0,
        dropout: 0.5,
    };
    let mut group = c.benchmark_group("batch_gradient_64");
    group.sample_size(10);
    for scales in [vec![7], vec![2, 7, 14]] {
        let arch = ArchConfig {
            scales: scales.clone(),
            ..ArchConfig::default()
        };
        let params = ModelParams::<f32>::init(arch, 0).unwrap();
        let label = format!("{scales:?}");
        for exec in [Exec::Sequential, Exec::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), &label), &exec, |b, &exec| {
                b.iter(|| batch_gradient(&params, &pairs, &objective, 3, 0, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
