//! Per-branch residual feature extractor: a 7×7 stem followed by stages of
//! bottleneck blocks, `y = relu(skip(x) + F(x))`.
//!
//! Branch tensors `C×T×I` are fed as images with `C` channels, height `T`
//! (time) and width `I` (joints). No normalization layers and no convolution
//! biases are used.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, TensorError, Var, uniform_tensor};

pub const STEM_KERNEL: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractorError {
    #[error("invalid extractor configuration: {0}")]
    InvalidConfig(String),
    #[error("input has {found} channels, extractor expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ExtractorError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    /// Stride of the stage's first block.
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(blocks: usize, width: usize, stride: usize) -> Self {
        Self {
            blocks,
            width,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl ExtractorConfig {
    /// Desk-scale default: 16-channel stem, stages `(2, 16, 1)` and `(2, 32, 2)`.
    pub fn desk(input_channels: usize) -> Self {
        Self {
            input_channels,
            stem_channels: 16,
            stages: vec![StageSpec::new(2, 16, 1), StageSpec::new(2, 32, 2)],
        }
    }

    /// The 50-layer plan: 64-channel stem, `(3, 4, 6, 3)` blocks of widths 256–2048.
    pub fn fifty_layer(input_channels: usize) -> Self {
        Self {
            input_channels,
            stem_channels: 64,
            stages: vec![
                StageSpec::new(3, 256, 1),
                StageSpec::new(4, 512, 2),
                StageSpec::new(6, 1024, 2),
                StageSpec::new(3, 2048, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(ExtractorError::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(ExtractorError::InvalidConfig(
                "at least one stage is required".into(),
            ));
        }
        if let Some((i, _)) = self
            .stages
            .iter()
            .enumerate()
            .find(|(_, s)| s.blocks == 0 || s.width == 0 || s.stride == 0)
        {
            return Err(ExtractorError::InvalidConfig(format!(
                "stage {i}: blocks, width and stride must be positive"
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.width)
    }

    /// Output `[N, C_out, H', W']` for an `[N, C_in, H, W]` input.
    pub fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        let [n, _, mut h, mut w] = input;
        for stage in &self.stages {
            h = strided(h, stage.stride);
            w = strided(w, stage.stride);
        }
        [n, self.output_channels(), h, w]
    }

    /// Number of layers with weights (stem, three per block, projections).
    pub fn weighted_layers(&self) -> usize {
        1 + self.stages.iter().map(|s| 3 * s.blocks).sum::<usize>()
    }
}

/// Spatial size after a 3×3 padding-1 (or 1×1 padding-0) convolution with `stride`.
fn strided(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

pub fn bottleneck_width(width: usize) -> usize {
    (width / 4).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock {
    pub reduce: ParamId,
    pub conv: ParamId,
    pub expand: ParamId,
    pub projection: Option<ParamId>,
    pub stride: usize,
}

impl BottleneckBlock {
    /// `relu(skip(x) + expand(relu(conv(relu(reduce(x))))))`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
        let h = tape.conv2d(x, binding.var(self.reduce), 1, 0)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, binding.var(self.conv), self.stride, 1)?;
        let h = tape.relu(h);
        let f = tape.conv2d(h, binding.var(self.expand), 1, 0)?;
        let skip = match self.projection {
            Some(p) => tape.conv2d(x, binding.var(p), self.stride, 0)?,
            None => x,
        };
        let y = tape.add(skip, f)?;
        Ok(tape.relu(y))
    }

    pub fn residual_params(&self) -> [ParamId; 3] {
        [self.reduce, self.conv, self.expand]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    config: ExtractorConfig,
    prefix: String,
    stem: ParamId,
    blocks: Vec<Vec<BottleneckBlock>>,
}

fn add_kernel<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    shape: [usize; 4],
    gain: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (gain / fan_in as f64).sqrt();
    Ok(store.insert(name, uniform_tensor(&shape, bound, rng))?)
}

/// Adds the extractor's kernels to `store` under `extractor.<branch>.…` and
/// returns the forward plan. Layers followed by a ReLU use a He-uniform bound
/// `sqrt(6 / fan_in)`, linear ones `sqrt(3 / fan_in)`.
pub fn build_extractor<T: Scalar, R: Rng + ?Sized>(
    config: &ExtractorConfig,
    branch: &str,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Extractor> {
    config.validate()?;
    let prefix = format!("extractor.{branch}");
    let stem = add_kernel(
        store,
        format!("{prefix}.stem"),
        [
            config.stem_channels,
            config.input_channels,
            STEM_KERNEL,
            STEM_KERNEL,
        ],
        6.0,
        rng,
    )?;
    let mut channels = config.stem_channels;
    let mut blocks = Vec::with_capacity(config.stages.len());
    for (s, stage) in config.stages.iter().enumerate() {
        let inner = bottleneck_width(stage.width);
        let mut stage_blocks = Vec::with_capacity(stage.blocks);
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let name = |layer: &str| format!("{prefix}.stage{s}.block{b}.{layer}");
            let reduce = add_kernel(store, name("reduce"), [inner, channels, 1, 1], 6.0, rng)?;
            let conv = add_kernel(store, name("conv"), [inner, inner, 3, 3], 6.0, rng)?;
            let expand = add_kernel(store, name("expand"), [stage.width, inner, 1, 1], 3.0, rng)?;
            let projection = if channels != stage.width || stride != 1 {
                Some(add_kernel(
                    store,
                    name("project"),
                    [stage.width, channels, 1, 1],
                    3.0,
                    rng,
                )?)
            } else {
                None
            };
            stage_blocks.push(BottleneckBlock {
                reduce,
                conv,
                expand,
                projection,
                stride,
            });
            channels = stage.width;
        }
        blocks.push(stage_blocks);
    }
    Ok(Extractor {
        config: config.clone(),
        prefix,
        stem,
        blocks,
    })
}

impl Extractor {
    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// `extractor.<branch>`
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn stem(&self) -> ParamId {
        self.stem
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BottleneckBlock> {
        self.blocks.iter().flatten()
    }

    pub fn block(&self, stage: usize, block: usize) -> Option<&BottleneckBlock> {
        self.blocks.get(stage)?.get(block)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "extractor",
                detail: format!("expected [N, C, H, W], got {shape:?}"),
            }
            .into());
        }
        if shape[1] != self.config.input_channels {
            return Err(ExtractorError::ChannelMismatch {
                expected: self.config.input_channels,
                found: shape[1],
            });
        }
        let h = tape.conv2d(x, binding.var(self.stem), 1, STEM_KERNEL / 2)?;
        let mut h = tape.relu(h);
        for block in self.blocks() {
            h = block.forward(tape, binding, h)?;
        }
        Ok(h)
    }
}
