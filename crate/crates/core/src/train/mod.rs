//! End-to-end unsupervised training: embed, encode/decode, deform, warp,
//! score against the fixed image and update every parameter with Adam.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod model;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_pairs, ImagePair, LabeledDataset, PairingMode};
use crate::error::{AirError, Result};
use crate::exec::Exec;
use crate::tensor::Scalar;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{loss, LossKind};
pub use model::{
    forward, pair_loss, pair_loss_and_gradient, ArchConfig, ForwardOutput, ModelParams, Objective, ScaleParams,
};

/// Mixes into the run seed for the validation pairs.
const VALIDATION_SEED_SALT: u64 = 0x005E_ED0F_0A11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub pairing_mode: PairingMode,
    pub loss: LossKind,
    pub smoothness_weight: f64,
    /// Fresh pairs drawn from the train split each epoch.
    pub pairs_per_epoch: usize,
    /// Tail of the train split held out for best-epoch selection.
    pub validation_fraction: f64,
    pub validation_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            epochs: 30,
            dropout: 0.5,
            seed: 0,
            pairing_mode: PairingMode::SameClass,
            loss: LossKind::Mse,
            smoothness_weight: 0.0,
            pairs_per_epoch: 10_000,
            validation_fraction: 0.05,
            validation_pairs: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AirError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            ));
        }
        if self.smoothness_weight < 0.0 {
            return bad("smoothness weight must be non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            smoothness_weight: self.smoothness_weight,
            dropout: self.dropout,
        }
    }
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// epoch counter and the run RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(arch: ArchConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(arch, config.seed)?;
        let optimizer = Adam::new(params.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: 0,
            rng,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    /// Mean MSE on the validation slice after the epoch, when one exists.
    pub validation_mse: Option<f64>,
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Mean loss and mean gradient over a batch. Per-pair passes may run in
/// parallel; the reduction is sequential in pair order, so the result does
/// not depend on `exec`.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    pairs: &[ImagePair<'_>],
    objective: &Objective,
    seed: u64,
    first_index: usize,
    exec: Exec,
) -> Result<(f64, Vec<T>)> {
    let results = exec.map(pairs.len(), |i| {
        let mut rng = pair_rng(seed, first_index + i);
        pair_loss_and_gradient(&pairs[i], params, objective, &mut rng)
    });
    let mut total = 0.0;
    let mut grad = vec![T::zero(); params.param_count()];
    for r in results {
        let (l, g) = r?;
        total += l.as_f64();
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = T::from_f64(pairs.len() as f64);
    for a in grad.iter_mut() {
        *a = *a / n;
    }
    Ok((total / pairs.len() as f64, grad))
}

/// One pass over freshly sampled pairs of `dataset`, updating `params` with
/// Adam after every batch. Returns the mean training loss.
pub fn train_epoch(
    dataset: &LabeledDataset,
    params: &mut ModelParams<f32>,
    optimizer: &mut Adam<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<EpochStats> {
    cfg.validate()?;
    let epoch_seed: u64 = rng.gen();
    let pairs = sample_pairs(dataset, cfg.pairs_per_epoch, cfg.pairing_mode, epoch_seed)?;
    let objective = cfg.objective();
    let adam = cfg.adam();
    let mut flat = params.flatten();
    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
        let (loss, grad) = batch_gradient(params, chunk, &objective, epoch_seed, b * cfg.batch_size, exec)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AirError::NonFiniteLoss { epoch, batch: b, loss });
        }
        optimizer.update(&mut flat, &grad, &adam)?;
        params.assign_flat(&flat)?;
        total += loss * chunk.len() as f64;
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        },
        batches,
        validation_mse: None,
    })
}

/// Mean inference-mode MSE between warped and fixed images over `pairs`.
pub fn mean_mse<T: Scalar>(params: &ModelParams<T>, pairs: &[ImagePair<'_>], exec: Exec) -> Result<f64> {
    let objective = Objective {
        loss: LossKind::Mse,
        smoothness_weight: 0.0,
        dropout: 0.0,
    };
    let losses = exec.map(pairs.len(), |i| pair_loss(&pairs[i], params, &objective));
    let mut total = 0.0;
    for l in losses {
        total += l?.as_f64();
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch (1-based) with the lowest validation MSE, if validation ran.
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams<f32>,
}

/// Trains for the remaining `config.epochs - state.epoch` epochs on the
/// train split, holding out its tail for validation. `on_epoch` sees the
/// state after every epoch (for checkpointing) and may abort the run.
pub fn fit(
    train_split: &LabeledDataset,
    state: &mut TrainState,
    exec: Exec,
    mut on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<FitReport> {
    let cfg = state.config.clone();
    let (train, validation) = train_split.hold_out(cfg.validation_fraction);
    let val_pairs = if validation.len() >= 2 && cfg.validation_pairs > 0 {
        sample_pairs(
            &validation,
            cfg.validation_pairs,
            cfg.pairing_mode,
            cfg.seed ^ VALIDATION_SEED_SALT,
        )
        .ok()
    } else {
        None
    };

    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut epochs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut stats = train_epoch(
            &train,
            &mut state.params,
            &mut state.optimizer,
            &cfg,
            epoch,
            &mut state.rng,
            exec,
        )?;
        state.epoch = epoch;
        if let Some(pairs) = &val_pairs {
            let mse = mean_mse(&state.params, pairs, exec)?;
            stats.validation_mse = Some(mse);
            if best.as_ref().is_none_or(|(_, b, _)| mse < *b) {
                best = Some((epoch, mse, state.params.clone()));
            }
        }
        on_epoch(state, &stats)?;
        epochs.push(stats);
    }
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, state.params.clone()),
    };
    Ok(FitReport {
        epochs,
        best_epoch,
        best_params,
    })
}
