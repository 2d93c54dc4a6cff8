//! Network specs, training and inference for ClusterNet and FoveaNet.

mod spec;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use wami_engine::{softmax_channels, Checkpoint, Sequential, Shape, Tensor};

use crate::error::{CoreError, Result};
use crate::frame::FrameStack;
use crate::targets::{gaussian_peak, Heatmap};

pub use spec::{clusternet_spec, foveanet_spec, Head, LayerSpec, NetworkSpec, DEFAULT_WIDTH};
pub use train::{read_log_csv, train, write_log_csv, LogRow, TrainConfig, TrainReport};

/// A training input with its target.
#[derive(Clone, Debug)]
pub struct Example {
    /// `(1, N, h, w)`.
    pub input: Tensor<f32>,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub enum Target {
    /// `(1, 1, h, w)` regression target.
    Heatmap(Tensor<f32>),
    /// Per-pixel class indices.
    Labels(Vec<u8>),
}

/// Indexed source of training examples.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Example `index` under augmentation `variant` (0 = none).
    fn example(&self, index: usize, variant: u8) -> Example;

    /// Number of distinct augmentation variants.
    fn variants(&self) -> u8 {
        1
    }
}

impl Dataset for Vec<Example> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn example(&self, index: usize, _variant: u8) -> Example {
        self[index].clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    spec: NetworkSpec,
    sigma: f64,
}

const MODEL_FORMAT: &str = "wami-model-1";

/// A network together with the target geometry it was trained for.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: NetworkSpec,
    /// Target Gaussian width (grid cells) used for training and score scaling.
    pub sigma: f64,
    pub net: Sequential<f32>,
}

impl Model {
    pub fn new(spec: NetworkSpec, sigma: f64, seed: u64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(CoreError::Config("target sigma must be positive".into()));
        }
        let net = spec.build(seed)?;
        Ok(Model { spec, sigma, net })
    }

    pub fn downsample(&self) -> u32 {
        self.spec.downsample()
    }

    /// Raw network output for a `(B, N, h, w)` batch.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = input.shape();
        if s.c != self.spec.frames {
            return Err(CoreError::Shape(format!(
                "{} expects {} frames, input has {}",
                self.spec.name, self.spec.frames, s.c
            )));
        }
        Ok(self.net.predict(input)?)
    }

    /// Per-sample raw heatmaps (channel 0 for the regression head, class-1
    /// probability for the segmentation head).
    pub fn infer_tensor(&self, input: &Tensor<f32>) -> Result<Vec<Heatmap>> {
        let out = self.forward(input)?;
        let out = match self.spec.head {
            Head::Heatmap => out,
            Head::Segmentation => softmax_channels(&out),
        };
        let s = out.shape();
        let channel = match self.spec.head {
            Head::Heatmap => 0,
            Head::Segmentation => 1,
        };
        Ok((0..s.n)
            .map(|n| {
                let plane = &out.sample(n)[channel * s.plane()..(channel + 1) * s.plane()];
                Heatmap { width: s.w, height: s.h, downsample: self.downsample(), values: plane.to_vec() }
            })
            .collect())
    }

    /// Heatmap for the frame of interest of a full stack.
    pub fn infer(&self, stack: &FrameStack) -> Result<Heatmap> {
        Ok(self.infer_tensor(&stack.to_tensor())?.remove(0))
    }

    /// Output value a lone, perfectly localized object produces.
    pub fn nominal_peak(&self) -> f64 {
        match self.spec.head {
            Head::Heatmap => gaussian_peak(self.sigma),
            Head::Segmentation => 1.0,
        }
    }

    /// Raw output rescaled so a nominal object peaks at 1, clamped to [0, 1].
    pub fn scores(&self, raw: &Heatmap) -> Heatmap {
        raw.normalized(self.nominal_peak())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let meta = ModelMeta { format: MODEL_FORMAT.into(), spec: self.spec.clone(), sigma: self.sigma };
        Ok(Checkpoint::new(serde_json::to_value(meta)?, self.net.state()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| CoreError::CheckpointMismatch(format!("missing model metadata: {e}")))?;
        if meta.format != MODEL_FORMAT {
            return Err(CoreError::CheckpointMismatch(format!("unknown model format {}", meta.format)));
        }
        let mut model = Model::new(meta.spec, meta.sigma, 0)?;
        model.net.load_state(&ckpt.tensors).map_err(|e| CoreError::CheckpointMismatch(e.to_string()))?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails unless the model consumes `frames`-frame stacks.
    pub fn expect_frames(&self, frames: usize) -> Result<()> {
        if self.spec.frames != frames {
            return Err(CoreError::CheckpointMismatch(format!(
                "{} was trained on {}-frame stacks, run uses {frames}",
                self.spec.name, self.spec.frames
            )));
        }
        Ok(())
    }
}

/// Stacks examples into one batch tensor plus the matching target.
pub(crate) fn collate(examples: &[Example]) -> Result<(Tensor<f32>, Target)> {
    let inputs: Vec<Tensor<f32>> = examples.iter().map(|e| e.input.clone()).collect();
    let input = Tensor::stack(&inputs)?;
    let target = match &examples[0].target {
        Target::Heatmap(_) => {
            let maps = examples
                .iter()
                .map(|e| match &e.target {
                    Target::Heatmap(t) => Ok(t.clone()),
                    Target::Labels(_) => Err(CoreError::Shape("mixed target kinds in a batch".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Target::Heatmap(Tensor::stack(&maps)?)
        }
        Target::Labels(_) => {
            let mut all = Vec::new();
            for e in examples {
                match &e.target {
                    Target::Labels(l) => all.extend_from_slice(l),
                    Target::Heatmap(_) => return Err(CoreError::Shape("mixed target kinds in a batch".into())),
                }
            }
            Target::Labels(all)
        }
    };
    Ok((input, target))
}

/// Shape of the network output for one example of `input` shape.
pub(crate) fn output_shape(spec: &NetworkSpec, input: Shape) -> Shape {
    let (h, w) = spec.output_dims(input.h, input.w);
    Shape::new(input.n, spec.head.channels(), h, w)
}
