//! Windowing, featurization, augmentation and the gallery/probe split.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branches::{BranchBundle, BranchError, build_bundle};
use crate::cycle::{CycleConfig, CycleError, estimate_cycle, temporal_stride};
use crate::scalar::Scalar;
use crate::skeleton::{
    Condition, GaitTensor, MIN_WINDOW, PoseSequence, SkeletonError, SkeletonTopology,
    normalize_sequence, to_gait_tensor,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no sequences given")]
    Empty,
    #[error("cycle detection failed on every sequence; last error: {0}")]
    NoCycles(CycleError),
    #[error("{sequence_id}: {len} frames cannot hold a {window}-frame window")]
    TooShort {
        sequence_id: String,
        len: usize,
        window: usize,
    },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Branch(#[from] BranchError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Stride = twice the mean detected gait cycle; window = min(stride, shortest sequence).
    #[default]
    AutoStride,
    /// Non-overlapping windows of this many frames.
    Fixed(usize),
}

/// Window length and start-to-start advance, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window: usize,
    pub stride: usize,
}

impl WindowPlan {
    /// Starts `0, stride, 2·stride, …` of every window that fits in `len`
    /// frames. A sequence shorter than the window but at least [`MIN_WINDOW`]
    /// long yields nothing here; see [`featurize_sequence`].
    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len < self.window {
            return Vec::new();
        }
        (0..=len - self.window)
            .step_by(self.stride.max(1))
            .collect()
    }
}

/// Derives the window plan for a training set.
pub fn plan_windows(
    sequences: &[PoseSequence],
    policy: WindowPolicy,
    topo: &SkeletonTopology,
    cycle: &CycleConfig,
) -> Result<WindowPlan, DataError> {
    let shortest = sequences
        .iter()
        .map(PoseSequence::len)
        .min()
        .ok_or(DataError::Empty)?;
    let plan = match policy {
        WindowPolicy::Fixed(window) => WindowPlan {
            window,
            stride: window,
        },
        WindowPolicy::AutoStride => {
            let mut estimates = Vec::with_capacity(sequences.len());
            let mut last_error = None;
            for seq in sequences {
                match estimate_cycle(seq, topo, cycle) {
                    Ok(e) => estimates.push(e),
                    Err(e) => last_error = Some(e),
                }
            }
            let stride = temporal_stride(&estimates)
                .map_err(|e| DataError::NoCycles(last_error.unwrap_or(e)))?;
            WindowPlan {
                window: stride.min(shortest),
                stride,
            }
        }
    };
    if plan.window < MIN_WINDOW || plan.window > shortest {
        let seq = sequences.iter().min_by_key(|s| s.len()).expect("non-empty");
        return Err(DataError::TooShort {
            sequence_id: seq.sequence_id.clone(),
            len: seq.len(),
            window: plan.window,
        });
    }
    Ok(plan)
}

/// Optional training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Horizontal flip with left/right label swap, with probability 1/2.
    pub mirror: bool,
    /// Window starts move by up to this many frames either way.
    pub crop_jitter: usize,
    /// Gaussian jitter on normalized coordinates, torso units.
    pub coord_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mirror: true,
            crop_jitter: 2,
            coord_sigma: 0.01,
        }
    }
}

fn bundle_at<T: Scalar>(
    normalized: &PoseSequence,
    start: usize,
    window: usize,
    topo: &SkeletonTopology,
) -> Result<BranchBundle<T>, DataError> {
    let x = to_gait_tensor::<T>(normalized, start, window)?;
    Ok(build_bundle(&x, topo)?)
}

/// Branch features of every window of one raw sequence. Frames are normalized
/// first. A sequence shorter than the plan's window (but at least
/// [`MIN_WINDOW`] frames) contributes one window covering all of it.
pub fn featurize_sequence<T: Scalar>(
    seq: &PoseSequence,
    plan: &WindowPlan,
    topo: &SkeletonTopology,
) -> Result<Vec<BranchBundle<T>>, DataError> {
    let normalized = normalize_sequence(seq, topo)?;
    let starts = plan.starts(seq.len());
    if starts.is_empty() {
        if seq.len() < MIN_WINDOW {
            return Err(DataError::TooShort {
                sequence_id: seq.sequence_id.clone(),
                len: seq.len(),
                window: MIN_WINDOW,
            });
        }
        return Ok(vec![bundle_at(&normalized, 0, seq.len(), topo)?]);
    }
    starts
        .into_iter()
        .map(|s| bundle_at(&normalized, s, plan.window, topo))
        .collect()
}

/// One augmented training window of an already normalized sequence.
pub fn augmented_window<T: Scalar, R: Rng + ?Sized>(
    normalized: &PoseSequence,
    start: usize,
    window: usize,
    topo: &SkeletonTopology,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<BranchBundle<T>, DataError> {
    let jitter = augment.crop_jitter as i64;
    let last = (normalized.len() - window) as i64;
    let offset = if jitter > 0 {
        rng.random_range(-jitter..=jitter)
    } else {
        0
    };
    let start = (start as i64 + offset).clamp(0, last) as usize;
    let x = to_gait_tensor::<T>(normalized, start, window)?;
    let flip = augment.mirror && rng.random_bool(0.5);
    let noise = Normal::new(0.0, augment.coord_sigma.max(0.0)).expect("finite sigma");
    let (t, j) = (x.frames(), x.joints());
    let data = Tensor::from_fn(x.tensor().shape(), |k| {
        let (c, f, i) = (k / (t * j), (k / j) % t, k % j);
        let (src, sign) = if flip {
            (topo.mirror(i), -1.0)
        } else {
            (i, 1.0)
        };
        let v = x.at(c, f, src).as_f64() * if c == 0 { sign } else { 1.0 };
        let n = if augment.coord_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        T::of(v + n)
    });
    let x = GaitTensor::new(data).expect("same shape as the source window");
    Ok(build_bundle(&x, topo)?)
}

/// Gallery = the first `gallery_nm` NM sequences of every (subject, view), in
/// input order; probe = everything else.
pub fn split_gallery_probe(
    sequences: &[PoseSequence],
    gallery_nm: usize,
) -> (Vec<PoseSequence>, Vec<PoseSequence>) {
    let mut taken: BTreeMap<(&str, u16), usize> = BTreeMap::new();
    let (mut gallery, mut probe) = (Vec::new(), Vec::new());
    for seq in sequences {
        let count = taken
            .entry((seq.subject_id.as_str(), seq.view_deg))
            .or_default();
        if seq.condition == Condition::Normal && *count < gallery_nm {
            *count += 1;
            gallery.push(seq.clone());
        } else {
            probe.push(seq.clone());
        }
    }
    (gallery, probe)
}


/// Per-(channel, joint) means and per-channel standard deviations of one
/// branch, over windows and frames. The deviation of a channel is pooled
/// across its joints, so slots that barely move are not amplified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: usize,
    pub joints: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest standard deviation used as a divisor.
pub const STD_FLOOR: f64 = 1e-3;

impl ChannelStats {
    fn fit<'a, T: Scalar>(tensors: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let (mut sum, mut sq, mut count) = (Vec::new(), Vec::new(), 0usize);
        let (mut channels, mut joints) = (0, 0);
        for t in tensors {
            let [c, f, j] = [t.shape()[0], t.shape()[1], t.shape()[2]];
            if sum.is_empty() {
                (channels, joints) = (c, j);
                sum = vec![0.0; c * j];
                sq = vec![0.0; c * j];
            }
            for (k, &v) in t.data().iter().enumerate() {
                let slot = (k / (f * j)) * j + k % j;
                let v = v.as_f64();
                sum[slot] += v;
                sq[slot] += v * v;
            }
            count += f;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0))
            .collect();
        let std = var
            .chunks(joints.max(1))
            .flat_map(|row| {
                let pooled = (row.iter().sum::<f64>() / row.len() as f64).sqrt();
                std::iter::repeat_n(pooled, row.len())
            })
            .collect();
        Self {
            channels,
            joints,
            mean,
            std,
        }
    }

    fn apply<T: Scalar>(&self, t: &mut Tensor<T>) {
        let [f, j] = [t.shape()[1], t.shape()[2]];
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let slot = (k / (f * j)) * j + k % j;
            *v = T::of((v.as_f64() - self.mean[slot]) / self.std[slot].max(STD_FLOOR));
        }
    }
}

/// Input standardization fitted on training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub proportion: ChannelStats,
    pub velocity: ChannelStats,
    pub skeletal: ChannelStats,
}

impl FeatureScaler {
    pub fn fit<T: Scalar>(bundles: &[BranchBundle<T>]) -> Self {
        Self {
            proportion: ChannelStats::fit(bundles.iter().map(|b| &b.proportion.data)),
            velocity: ChannelStats::fit(bundles.iter().map(|b| &b.velocity.data)),
            skeletal: ChannelStats::fit(bundles.iter().map(|b| &b.skeletal.data)),
        }
    }

    pub fn apply<T: Scalar>(&self, bundle: &mut BranchBundle<T>) {
        self.proportion.apply(&mut bundle.proportion.data);
        self.velocity.apply(&mut bundle.velocity.data);
        self.skeletal.apply(&mut bundle.skeletal.data);
    }
}
