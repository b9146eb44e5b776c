//! Analytic feature branches computed from a [`GaitTensor`] window: body
//! proportion, gait velocity and skeletal motion.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::skeleton::{GaitTensor, SkeletonTopology};
use crate::tensor::Tensor;

/// Frame offset of the short-period velocity.
pub const SHORT_PERIOD: usize = 6;
/// Fewest frames accepted by [`velocity_branch`].
pub const MIN_VELOCITY_FRAMES: usize = SHORT_PERIOD + 2;
/// Default stabilizer inside the bone-length square root.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum BranchError {
    #[error("sequence too short for velocity branch: {frames} frames, need {MIN_VELOCITY_FRAMES}")]
    TooShort { frames: usize },
    #[error("topology has {topology} joints but the tensor has {tensor}")]
    JointMismatch { topology: usize, tensor: usize },
    #[error("skeletal motion needs 2 coordinate channels, got {0}")]
    NotPlanar(usize),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
}

pub type Result<T, E = BranchError> = std::result::Result<T, E>;

/// `2C×T×I`: relative positions `h` in channels `[0, C)`, raw keypoints in `[C, 2C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProportionFeatures<T> {
    pub data: Tensor<T>,
}

/// `2C×(T−6)×I`: short-period velocity `f` in channels `[0, C)`, instantaneous
/// velocity `e` in `[C, 2C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityFeatures<T> {
    pub data: Tensor<T>,
}

/// `(C+1)×T×I`: bone vector `(l_x, l_y)` then the bone angle.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletalMotionFeatures<T> {
    pub data: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchBundle<T> {
    pub proportion: ProportionFeatures<T>,
    pub velocity: VelocityFeatures<T>,
    pub skeletal: SkeletalMotionFeatures<T>,
}

/// Angle convention of the skeletal-motion branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// `arccos(l_y / |l|)` in `[0, π]`; left- and right-leaning bones coincide.
    #[default]
    Unsigned,
    /// `atan2(l_x, l_y)` in `(−π, π]`, which keeps the lean direction.
    Signed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkeletalOptions {
    pub epsilon: f64,
    pub angle: AngleMode,
}

impl Default for SkeletalOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            angle: AngleMode::Unsigned,
        }
    }
}

fn check_joints<T: Scalar>(x: &GaitTensor<T>, topo: &SkeletonTopology) -> Result<()> {
    if topo.num_joints() != x.joints() {
        return Err(BranchError::JointMismatch {
            topology: topo.num_joints(),
            tensor: x.joints(),
        });
    }
    Ok(())
}

/// `C×T` midpoint of thorax and pelvis.
pub fn skeleton_center<T: Scalar>(x: &GaitTensor<T>, topo: &SkeletonTopology) -> Result<Tensor<T>> {
    check_joints(x, topo)?;
    let (c, t) = (x.channels(), x.frames());
    let two = T::of(2.0);
    let mut out = Tensor::zeros(&[c, t]);
    let data = out.data_mut();
    for ch in 0..c {
        for f in 0..t {
            data[ch * t + f] = (x.at(ch, f, topo.thorax()) + x.at(ch, f, topo.pelvis())) / two;
        }
    }
    Ok(out)
}

pub fn proportion_branch<T: Scalar>(
    x: &GaitTensor<T>,
    topo: &SkeletonTopology,
) -> Result<ProportionFeatures<T>> {
    let center = skeleton_center(x, topo)?;
    let (c, t, n) = (x.channels(), x.frames(), x.joints());
    let center = center.data();
    let raw = x.tensor().data();
    let mut data = Vec::with_capacity(2 * raw.len());
    for ch in 0..c {
        for f in 0..t {
            let base = (ch * t + f) * n;
            data.extend(raw[base..base + n].iter().map(|&v| v - center[ch * t + f]));
        }
    }
    data.extend_from_slice(raw);
    Ok(ProportionFeatures {
        data: Tensor::new(&[2 * c, t, n], data).expect("shape matches"),
    })
}

pub fn velocity_branch<T: Scalar>(x: &GaitTensor<T>) -> Result<VelocityFeatures<T>> {
    let (c, t, n) = (x.channels(), x.frames(), x.joints());
    if t < MIN_VELOCITY_FRAMES {
        return Err(BranchError::TooShort { frames: t });
    }
    let valid = t - SHORT_PERIOD;
    let raw = x.tensor().data();
    let at = |ch: usize, f: usize, i: usize| raw[(ch * t + f) * n + i];
    let mut data = Vec::with_capacity(2 * c * valid * n);
    for step in [SHORT_PERIOD, 1] {
        for ch in 0..c {
            for f in 0..valid {
                data.extend((0..n).map(|i| at(ch, f + step, i) - at(ch, f, i)));
            }
        }
    }
    Ok(VelocityFeatures {
        data: Tensor::new(&[2 * c, valid, n], data).expect("shape matches"),
    })
}

pub fn skeletal_motion_branch<T: Scalar>(
    x: &GaitTensor<T>,
    topo: &SkeletonTopology,
    options: &SkeletalOptions,
) -> Result<SkeletalMotionFeatures<T>> {
    check_joints(x, topo)?;
    if x.channels() != 2 {
        return Err(BranchError::NotPlanar(x.channels()));
    }
    if options.epsilon.is_nan() || options.epsilon <= 0.0 {
        return Err(BranchError::InvalidEpsilon(options.epsilon));
    }
    let (t, n) = (x.frames(), x.joints());
    let eps2 = T::of(options.epsilon * options.epsilon);
    let mut out = Tensor::zeros(&[3, t, n]);
    let data = out.data_mut();
    for f in 0..t {
        for i in 0..n {
            if i == topo.root() {
                continue;
            }
            let p = topo.parent(i);
            let lx = x.at(0, f, i) - x.at(0, f, p);
            let ly = x.at(1, f, i) - x.at(1, f, p);
            let angle = match options.angle {
                AngleMode::Unsigned => {
                    let cos = ly / (lx * lx + ly * ly + eps2).sqrt();
                    cos.max(-T::one()).min(T::one()).acos()
                }
                AngleMode::Signed => lx.atan2(ly),
            };
            data[f * n + i] = lx;
            data[(t + f) * n + i] = ly;
            data[(2 * t + f) * n + i] = angle;
        }
    }
    Ok(SkeletalMotionFeatures { data: out })
}

pub fn build_bundle<T: Scalar>(
    x: &GaitTensor<T>,
    topo: &SkeletonTopology,
) -> Result<BranchBundle<T>> {
    build_bundle_with(x, topo, &SkeletalOptions::default())
}

pub fn build_bundle_with<T: Scalar>(
    x: &GaitTensor<T>,
    topo: &SkeletonTopology,
    options: &SkeletalOptions,
) -> Result<BranchBundle<T>> {
    Ok(BranchBundle {
        velocity: velocity_branch(x)?,
        proportion: proportion_branch(x, topo)?,
        skeletal: skeletal_motion_branch(x, topo, options)?,
    })
}
