//! The full network: one residual extractor per feature branch, the fusion
//! module, dropout and a fully connected classifier over subject labels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branches::BranchBundle;
use crate::extractor::{Extractor, ExtractorConfig, ExtractorError, StageSpec, build_extractor};
use crate::mff::{FusionConfig, FusionError, Mff, MffOutput, build_mff};
use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, TensorError, Var, uniform_tensor};

pub const PROPORTION_CHANNELS: usize = 4;
pub const VELOCITY_CHANNELS: usize = 4;
pub const SKELETAL_CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid branch mask `{0}`")]
    InvalidMask(String),
    #[error("batch mismatch: {0}")]
    Batch(String),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which feature branches feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchMask {
    pub proportion: bool,
    pub velocity: bool,
    pub skeletal: bool,
}

impl BranchMask {
    pub const ALL: Self = Self::new(true, true, true);
    pub const VELOCITY: Self = Self::new(false, true, false);

    pub const fn new(proportion: bool, velocity: bool, skeletal: bool) -> Self {
        Self {
            proportion,
            velocity,
            skeletal,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.proportion || self.velocity || self.skeletal)
    }

    /// `P+S+V` style label, in that letter order.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.proportion, "P"),
            (self.skeletal, "S"),
            (self.velocity, "V"),
        ]
        .into_iter()
        .filter_map(|(on, l)| on.then_some(l))
        .collect();
        parts.join("+")
    }
}

impl Default for BranchMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses `P+S+V`, `velocity`, `proportion,skeletal` and similar. Letters and
/// full names are accepted, separated by `+` or `,`.
impl FromStr for BranchMask {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = Self::new(false, false, false);
        for part in s.split(['+', ',']).map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "p" | "proportion" => mask.proportion = true,
                "v" | "velocity" => mask.velocity = true,
                "s" | "skeletal" => mask.skeletal = true,
                "all" => mask = Self::ALL,
                _ => return Err(ModelError::InvalidMask(s.to_string())),
            }
        }
        if mask.is_empty() {
            return Err(ModelError::InvalidMask(s.to_string()));
        }
        Ok(mask)
    }
}

/// Architecture shared by the three extractors plus the head settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub reduction_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let desk = ExtractorConfig::desk(1);
        Self {
            stem_channels: desk.stem_channels,
            stages: desk.stages,
            reduction_ratio: crate::mff::DEFAULT_REDUCTION_RATIO,
        }
    }
}

impl ModelConfig {
    pub fn extractor(&self, input_channels: usize) -> ExtractorConfig {
        ExtractorConfig {
            input_channels,
            stem_channels: self.stem_channels,
            stages: self.stages.clone(),
        }
    }

    pub fn branch_channels(&self) -> usize {
        self.extractor(1).output_channels()
    }

    /// `C_w` is two branch widths (proportion and skeletal), `C_v` one.
    pub fn fusion(&self) -> FusionConfig {
        let c = self.branch_channels();
        FusionConfig {
            spatial_channels: 2 * c,
            velocity_channels: c,
            reduction_ratio: self.reduction_ratio,
        }
    }

    /// Length of the global feature, `C_w + C_v`.
    pub fn embedding_dim(&self) -> usize {
        self.fusion().joint_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor(1).validate()?;
        self.fusion().validate()?;
        Ok(())
    }
}

/// Branch inputs of `N` windows, laid out as images `[N, C, T, joints]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchBatch<T> {
    /// `[N, 4, T, J]`
    pub proportion: Tensor<T>,
    /// `[N, 4, T − 6, J]`
    pub velocity: Tensor<T>,
    /// `[N, 3, T, J]`
    pub skeletal: Tensor<T>,
}

impl<T: Scalar> BranchBatch<T> {
    /// Stacks bundles of equal window length.
    pub fn from_bundles(bundles: &[&BranchBundle<T>]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(ModelError::Batch("no windows".into()));
        }
        let stack = |parts: Vec<&Tensor<T>>| {
            Tensor::stack(&parts).map_err(|e| ModelError::Batch(e.to_string()))
        };
        Ok(Self {
            proportion: stack(bundles.iter().map(|b| &b.proportion.data).collect())?,
            velocity: stack(bundles.iter().map(|b| &b.velocity.data).collect())?,
            skeletal: stack(bundles.iter().map(|b| &b.skeletal.data).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.proportion.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOutput {
    pub fusion: MffOutput,
    /// `[N, C_w + C_v]`
    pub global: Var,
    /// `[N, classes]`
    pub logits: Var,
}

/// Parameter handles plus the forward plan.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitModel {
    config: ModelConfig,
    mask: BranchMask,
    classes: usize,
    proportion: Option<Extractor>,
    skeletal: Option<Extractor>,
    velocity: Option<Extractor>,
    mff: Mff,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

/// Registers the active extractors, the fusion module and `classifier.*` in
/// `store`. Masked branches get no parameters at all.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    mask: BranchMask,
    classes: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<GaitModel> {
    config.validate()?;
    if mask.is_empty() {
        return Err(ModelError::InvalidMask(String::new()));
    }
    if classes < 2 {
        return Err(ModelError::InvalidConfig(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut branch = |on: bool, name: &str, channels: usize| -> Result<Option<Extractor>> {
        on.then(|| build_extractor(&config.extractor(channels), name, store, rng))
            .transpose()
            .map_err(Into::into)
    };
    let proportion = branch(mask.proportion, "proportion", PROPORTION_CHANNELS)?;
    let skeletal = branch(mask.skeletal, "skeletal", SKELETAL_CHANNELS)?;
    let velocity = branch(mask.velocity, "velocity", VELOCITY_CHANNELS)?;
    let mff = build_mff(&config.fusion(), store, rng)?;
    let dim = config.embedding_dim();
    let bound = (3.0 / dim as f64).sqrt();
    let classifier_w = store.insert(
        "classifier.weight",
        uniform_tensor(&[dim, classes], bound, rng),
    )?;
    let classifier_b = store.insert("classifier.bias", Tensor::zeros(&[classes]))?;
    Ok(GaitModel {
        config: config.clone(),
        mask,
        classes,
        proportion,
        skeletal,
        velocity,
        mff,
        classifier_w,
        classifier_b,
    })
}

impl GaitModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mask(&self) -> BranchMask {
        self.mask
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mff(&self) -> &Mff {
        &self.mff
    }

    fn branch_map<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        extractor: Option<&Extractor>,
        input: &Tensor<T>,
        channels: usize,
    ) -> Result<Var> {
        let shape: [usize; 4] = input.shape().try_into().map_err(|_| {
            ModelError::Batch(format!(
                "branch input must be [N, C, T, J], got {:?}",
                input.shape()
            ))
        })?;
        match extractor {
            Some(ex) => {
                let x = tape.constant(input.clone());
                Ok(ex.forward(tape, binding, x)?)
            }
            None => {
                let out = self.config.extractor(channels).output_shape(shape);
                Ok(tape.constant(Tensor::zeros(&out)))
            }
        }
    }

    /// Records the whole network on `tape`. `dropout` is `(rate, rng)` during
    /// training and `None` for inference.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        batch: &BranchBatch<T>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<ModelOutput> {
        let n = batch.len();
        if batch.velocity.shape()[0] != n || batch.skeletal.shape()[0] != n {
            return Err(ModelError::Batch(
                "branch inputs disagree on the batch size".into(),
            ));
        }
        let p = self.branch_map(
            tape,
            binding,
            self.proportion.as_ref(),
            &batch.proportion,
            PROPORTION_CHANNELS,
        )?;
        let s = self.branch_map(
            tape,
            binding,
            self.skeletal.as_ref(),
            &batch.skeletal,
            SKELETAL_CHANNELS,
        )?;
        let v = self.branch_map(
            tape,
            binding,
            self.velocity.as_ref(),
            &batch.velocity,
            VELOCITY_CHANNELS,
        )?;
        let fusion = self.mff.forward(tape, binding, p, s, v)?;
        let dropped = match dropout {
            Some((rate, rng)) => tape.dropout(fusion.global, rate, true, rng)?,
            None => fusion.global,
        };
        let logits = tape.affine(
            dropped,
            binding.var(self.classifier_w),
            binding.var(self.classifier_b),
        )?;
        Ok(ModelOutput {
            fusion,
            global: fusion.global,
            logits,
        })
    }

    /// Global features `[N, C_w + C_v]` without dropout.
    pub fn embed<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        batch: &BranchBatch<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let out = self.forward::<T, rand_chacha::ChaCha8Rng>(&mut tape, &binding, batch, None)?;
        Ok(tape.value(out.global).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_labels_round_trip() {
        for s in ["P+S+V", "V", "P+S", "P+V", "S+V"] {
            let mask: BranchMask = s.parse().unwrap();
            assert_eq!(mask.label(), s);
        }
        assert_eq!(
            "velocity".parse::<BranchMask>().unwrap(),
            BranchMask::VELOCITY
        );
        assert_eq!("all".parse::<BranchMask>().unwrap(), BranchMask::ALL);
        assert!("".parse::<BranchMask>().is_err());
        assert!("P+X".parse::<BranchMask>().is_err());
    }

    #[test]
    fn default_dimensions() {
        let c = ModelConfig::default();
        assert_eq!(c.branch_channels(), 32);
        assert_eq!(c.fusion().spatial_channels, 64);
        assert_eq!(c.embedding_dim(), 96);
    }
}
