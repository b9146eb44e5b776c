//! Multi-branch feature fusion.
//!
//! The proportion and skeletal maps are concatenated into a spatial map
//! `f_w`; together with the velocity map `f_v` they are pooled into a joint
//! descriptor, projected to a smaller space, turned into per-channel
//! excitations, used to rescale both maps, and pooled again into the global
//! feature.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, TensorError, Var, uniform_tensor};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: {detail}")]
    Shape { what: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// `C_w`, channels of the concatenated proportion and skeletal maps.
    pub spatial_channels: usize,
    /// `C_v`
    pub velocity_channels: usize,
    pub reduction_ratio: usize,
}

pub const DEFAULT_REDUCTION_RATIO: usize = 4;

impl FusionConfig {
    pub fn new(spatial_channels: usize, velocity_channels: usize) -> Self {
        Self {
            spatial_channels,
            velocity_channels,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
        }
    }

    pub fn joint_channels(&self) -> usize {
        self.spatial_channels + self.velocity_channels
    }

    pub fn reduced_channels(&self) -> usize {
        self.joint_channels() / self.reduction_ratio.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_channels == 0 || self.velocity_channels == 0 || self.reduction_ratio == 0 {
            return Err(FusionError::InvalidConfig(
                "channel counts and ratio must be positive".into(),
            ));
        }
        if self.reduced_channels() == 0 {
            return Err(FusionError::InvalidConfig(format!(
                "({} + {}) / {} leaves no reduced channels",
                self.spatial_channels, self.velocity_channels, self.reduction_ratio
            )));
        }
        Ok(())
    }
}

fn rank4<'a, T: Scalar>(tape: &'a Tape<T>, v: Var, what: &'static str) -> Result<&'a [usize]> {
    let shape = tape.shape(v);
    if shape.len() != 4 {
        return Err(FusionError::Shape {
            what,
            detail: format!("expected [N, C, H, W], got {shape:?}"),
        });
    }
    Ok(shape)
}

/// `f_w = concat(proportion, skeletal)` along channels. Batch and
/// spatial sizes must agree.
pub fn aggregate_spatial<T: Scalar>(
    tape: &mut Tape<T>,
    proportion: Var,
    skeletal: Var,
) -> Result<Var> {
    let p = rank4(tape, proportion, "proportion map")?;
    let s = rank4(tape, skeletal, "skeletal map")?;
    if p[0] != s[0] || p[2..] != s[2..] {
        return Err(FusionError::Shape {
            what: "spatial aggregation",
            detail: format!("proportion {p:?} and skeletal {s:?} differ outside the channel axis"),
        });
    }
    Ok(tape.concat(&[proportion, skeletal], 1)?)
}

/// `f_c = concat(GAP(f_w), GAP(f_v))`, `[N × (C_w + C_v)]`.
pub fn joint_descriptor<T: Scalar>(tape: &mut Tape<T>, f_w: Var, f_v: Var) -> Result<Var> {
    pooled_concat(tape, f_w, f_v)
}

fn pooled_concat<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let na = rank4(tape, a, "spatial map")?[0];
    let nb = rank4(tape, b, "velocity map")?[0];
    if na != nb {
        return Err(FusionError::Shape {
            what: "pooling",
            detail: format!("batch sizes {na} and {nb}"),
        });
    }
    let pa = tape.global_avg_pool(a)?;
    let pb = tape.global_avg_pool(b)?;
    Ok(tape.concat(&[pa, pb], 1)?)
}

/// `f_a = f_c · W + b`.
pub fn reduce<T: Scalar>(tape: &mut Tape<T>, f_c: Var, w: Var, b: Var) -> Result<Var> {
    Ok(tape.affine(f_c, w, b)?)
}

/// Per-channel attention weights for the two maps, each in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Excitation {
    /// `[N × C_w]`
    pub e_w: Var,
    /// `[N × C_v]`
    pub e_v: Var,
}

/// `e_w = σ(f_a · W_w + b_w)`, `e_v = σ(f_a · W_v + b_v)`.
pub fn excite<T: Scalar>(
    tape: &mut Tape<T>,
    f_a: Var,
    w_w: Var,
    b_w: Var,
    w_v: Var,
    b_v: Var,
) -> Result<Excitation> {
    let zw = tape.affine(f_a, w_w, b_w)?;
    let zv = tape.affine(f_a, w_v, b_v)?;
    Ok(Excitation {
        e_w: tape.sigmoid(zw),
        e_v: tape.sigmoid(zv),
    })
}

/// Scales every channel plane of `f_w` and `f_v` by its excitation.
pub fn recalibrate<T: Scalar>(
    tape: &mut Tape<T>,
    f_w: Var,
    f_v: Var,
    e: &Excitation,
) -> Result<(Var, Var)> {
    for (map, weights, what) in [
        (f_w, e.e_w, "spatial recalibration"),
        (f_v, e.e_v, "velocity recalibration"),
    ] {
        let (m, w) = (tape.shape(map), tape.shape(weights));
        if m.len() != 4 || w.len() != 2 || m[..2] != w[..] {
            return Err(FusionError::Shape {
                what,
                detail: format!("map {m:?} vs excitation {w:?}"),
            });
        }
    }
    Ok((tape.hadamard(f_w, e.e_w)?, tape.hadamard(f_v, e.e_v)?))
}

/// `concat(GAP(recal_w), GAP(recal_v))`, `[N × (C_w + C_v)]`.
pub fn global_feature<T: Scalar>(tape: &mut Tape<T>, recal_w: Var, recal_v: Var) -> Result<Var> {
    pooled_concat(tape, recal_w, recal_v)
}

/// Everything [`Mff::forward`] records, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MffOutput {
    pub f_w: Var,
    pub f_c: Var,
    pub f_a: Var,
    pub excitation: Excitation,
    /// `[N × (C_w + C_v)]`
    pub global: Var,
}

/// Parameter handles of the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct Mff {
    config: FusionConfig,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    pub excite_w_w: ParamId,
    pub excite_w_b: ParamId,
    pub excite_v_w: ParamId,
    pub excite_v_b: ParamId,
}

/// Registers `mff.reduce.*`, `mff.excite_w.*` and `mff.excite_v.*`. Weights
/// are uniform in `±sqrt(3 / fan_in)`, biases start at zero.
pub fn build_mff<T: Scalar, R: Rng + ?Sized>(
    config: &FusionConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Mff> {
    config.validate()?;
    let (joint, reduced) = (config.joint_channels(), config.reduced_channels());
    let mut dense = |name: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w = store.insert(
            format!("mff.{name}.weight"),
            uniform_tensor(&[fan_in, fan_out], bound, rng),
        )?;
        let b = store.insert(format!("mff.{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok((w, b))
    };
    let (reduce_w, reduce_b) = dense("reduce", joint, reduced)?;
    let (excite_w_w, excite_w_b) = dense("excite_w", reduced, config.spatial_channels)?;
    let (excite_v_w, excite_v_b) = dense("excite_v", reduced, config.velocity_channels)?;
    Ok(Mff {
        config: *config,
        reduce_w,
        reduce_b,
        excite_w_w,
        excite_w_b,
        excite_v_w,
        excite_v_b,
    })
}

impl Mff {
    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// The whole fusion on one tape.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        proportion: Var,
        skeletal: Var,
        velocity: Var,
    ) -> Result<MffOutput> {
        let f_w = aggregate_spatial(tape, proportion, skeletal)?;
        let (cw, cv) = (
            tape.shape(f_w)[1],
            rank4(tape, velocity, "velocity map")?[1],
        );
        if cw != self.config.spatial_channels || cv != self.config.velocity_channels {
            return Err(FusionError::Shape {
                what: "fusion input",
                detail: format!(
                    "got C_w={cw}, C_v={cv}; configured for C_w={}, C_v={}",
                    self.config.spatial_channels, self.config.velocity_channels
                ),
            });
        }
        let f_c = joint_descriptor(tape, f_w, velocity)?;
        let f_a = reduce(
            tape,
            f_c,
            binding.var(self.reduce_w),
            binding.var(self.reduce_b),
        )?;
        let excitation = excite(
            tape,
            f_a,
            binding.var(self.excite_w_w),
            binding.var(self.excite_w_b),
            binding.var(self.excite_v_w),
            binding.var(self.excite_v_b),
        )?;
        let (recal_w, recal_v) = recalibrate(tape, f_w, velocity, &excitation)?;
        let global = global_feature(tape, recal_w, recal_v)?;
        Ok(MffOutput {
            f_w,
            f_c,
            f_a,
            excitation,
            global,
        })
    }
}
