//! Checks against the bundled MNIST subset at `data/mnist`.

use std::path::PathBuf;

use air_core::dataio::{load_dataset_dir, sample_pairs, PairingMode};
use air_core::train::{mean_mse, train_epoch, ArchConfig, TrainConfig, TrainState};
use air_core::Exec;

fn mnist() -> air_core::dataio::LabeledDataset {
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist"));
    load_dataset_dir(dir).expect("bundled MNIST subset")
}

#[test]
fn intensities_span_the_unit_interval() {
    let (train, test) = mnist().train_test_split(0);
    assert_eq!(train.len(), 8000);
    assert_eq!(test.len(), 2000);
    let px = || train.images().iter().flat_map(|im| im.pixels().iter().copied());
    assert_eq!(px().fold(f32::INFINITY, f32::min), 0.0);
    assert_eq!(px().fold(f32::NEG_INFINITY, f32::max), 1.0);
}

#[test]
fn one_epoch_beats_the_untrained_model_on_its_pairs() {
    let (train, _) = mnist().train_test_split(0);
    let config = TrainConfig {
        pairs_per_epoch: 500,
        seed: 0,
        ..TrainConfig::default()
    };
    let arch = ArchConfig {
        scales: vec![7],
        ..ArchConfig::default()
    };
    let mut state = TrainState::new(arch, config.clone()).unwrap();
    // the epoch draws its pairs from a fork of the run RNG; replay it
    let mut probe = state.rng.clone();
    let epoch_seed: u64 = rand::Rng::gen(&mut probe);
    let pairs = sample_pairs(&train, 500, PairingMode::SameClass, epoch_seed).unwrap();
    let before = mean_mse(&state.params, &pairs, Exec::Parallel).unwrap();
    let stats = train_epoch(
        &train,
        &mut state.params,
        &mut state.optimizer,
        &config,
        1,
        &mut state.rng,
        Exec::Parallel,
    )
    .unwrap();
    assert!(
        stats.mean_loss < before,
        "epoch mean {} vs untrained {before}",
        stats.mean_loss
    );
}
