use std::collections::BTreeMap;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use super::data::{
    AugmentConfig, DataError, FeatureScaler, WindowPlan, WindowPolicy, augmented_window,
    plan_windows,
};
use crate::branches::BranchBundle;
use crate::cycle::CycleConfig;
use crate::model::{BranchBatch, BranchMask, ModelConfig, ModelError, build_model};
use crate::scalar::Scalar;
use crate::skeleton::{PoseSequence, SkeletonTopology, normalize_sequence, to_gait_tensor};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, TensorError, decayed_learning_rate};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch exponential decay of the learning rate.
    pub lr_decay: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub window_policy: WindowPolicy,
    /// L2 penalty added to the gradients.
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    /// Standardize every (channel, joint) input slot with training statistics.
    pub standardize: bool,
    pub model: ModelConfig,
    pub cycle: CycleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            lr_decay: 0.01,
            dropout_rate: 0.35,
            epochs: 150,
            seed: 0,
            window_policy: WindowPolicy::AutoStride,
            weight_decay: 0.0,
            augment: AugmentConfig::default(),
            standardize: true,
            model: ModelConfig::default(),
            cycle: CycleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for the 12-subject synthetic dataset on one core:
    /// 30 epochs, learning rate 1e-3, batches of 16 and coordinate jitter
    /// of 0.02 torso units without mirroring.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 30,
            augment: AugmentConfig {
                enabled: true,
                mirror: false,
                coord_sigma: 0.02,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay {} must be non-negative", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if let WindowPolicy::Fixed(0) = self.window_policy {
            return bad("fixed window must be positive".into());
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub checkpoint: Checkpoint,
    /// Parameters after the epoch with the lowest mean training loss.
    pub best: Checkpoint,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
    pub plan: WindowPlan,
}

struct Sample {
    sequence: usize,
    start: usize,
    label: usize,
}

/// [`train_with`] in double precision without progress reporting.
pub fn train(
    dataset: &[PoseSequence],
    config: &TrainConfig,
    mask: BranchMask,
) -> Result<TrainOutcome> {
    train_with::<f64>(dataset, config, mask, |_, _| {})
}

/// Trains a fresh model on every window of `dataset`, labelled by subject.
///
/// Single-threaded and fully determined by `(dataset, config)`: one ChaCha8
/// stream seeded with `config.seed` drives initialization, shuffling, dropout
/// and augmentation. `on_epoch(epoch, mean_loss)` runs after every epoch.
pub fn train_with<T: Scalar>(
    dataset: &[PoseSequence],
    config: &TrainConfig,
    mask: BranchMask,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let topo = SkeletonTopology::mpii();
    let subjects: Vec<String> = dataset
        .iter()
        .map(|s| s.subject_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.len() < 2 {
        return Err(TrainError::InsufficientData(format!(
            "{} subject(s); at least 2 are required",
            subjects.len()
        )));
    }
    let label_of: BTreeMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let plan = plan_windows(dataset, config.window_policy, &topo, &config.cycle)?;

    let normalized = dataset
        .iter()
        .map(|s| normalize_sequence(s, &topo))
        .collect::<Result<Vec<_>, _>>()
        .map_err(DataError::from)?;
    let mut samples = Vec::new();
    for (k, seq) in dataset.iter().enumerate() {
        for start in plan.starts(seq.len()) {
            samples.push(Sample {
                sequence: k,
                start,
                label: label_of[seq.subject_id.as_str()],
            });
        }
    }
    let mut fixed: Vec<BranchBundle<T>> = samples
        .iter()
        .map(|s| {
            let x = to_gait_tensor::<T>(&normalized[s.sequence], s.start, plan.window)
                .map_err(DataError::from)?;
            Ok(crate::branches::build_bundle(&x, &topo).map_err(DataError::from)?)
        })
        .collect::<Result<_>>()?;
    let scaler = config.standardize.then(|| FeatureScaler::fit(&fixed));
    if let Some(sc) = &scaler {
        fixed.iter_mut().for_each(|b| sc.apply(b));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<T>::new();
    let model = build_model(&config.model, mask, subjects.len(), &mut store, &mut rng)?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let meta = |epoch: usize, train_loss: f64| CheckpointMeta {
        epoch,
        train_loss,
        mask,
        subjects: subjects.clone(),
        plan,
        scaler: scaler.clone(),
        config: config.clone(),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = decayed_learning_rate(config.learning_rate, config.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let augmented: Vec<BranchBundle<T>> = if config.augment.enabled {
                chunk
                    .iter()
                    .map(|&i| {
                        let s = &samples[i];
                        let mut b = augmented_window(
                            &normalized[s.sequence],
                            s.start,
                            plan.window,
                            &topo,
                            &config.augment,
                            &mut rng,
                        )?;
                        if let Some(sc) = &scaler {
                            sc.apply(&mut b);
                        }
                        Ok::<_, DataError>(b)
                    })
                    .collect::<Result<_, _>>()?
            } else {
                Vec::new()
            };
            let bundles: Vec<&BranchBundle<T>> = if config.augment.enabled {
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &fixed[i]).collect()
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let batch = BranchBatch::from_bundles(&bundles)?;

            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let out = model.forward(
                &mut tape,
                &binding,
                &batch,
                Some((config.dropout_rate, &mut rng)),
            )?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step,
                });
            }
            let grads = tape.backward(loss)?;
            let grads = binding.gradients(&grads);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step,
                });
            }
            adam.step(&mut store, &grads, lr)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / samples.len() as f64;
        history.push(mean);
        on_epoch(epoch + 1, mean);
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, Checkpoint::new(&store, meta(epoch + 1, mean))?));
        }
    }
    let last = *history.last().expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(&store, meta(config.epochs, last))?,
        best: best.expect("at least one epoch").1,
        loss_history: history,
        plan,
    })
}
