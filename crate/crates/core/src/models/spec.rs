//! Declarative layer lists for the two detection networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wami_engine::{ActivationKind, ConvLayer, Layer, Padding, Param, Sequential};

use crate::error::{CoreError, Result};

pub const DEFAULT_WIDTH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel: usize, stride: usize, out_maps: usize },
    Pool,
    BatchNorm,
    Dropout { rate: f64 },
    Activation { activation: ActivationKind },
}

/// Output head: a single regression map or two-class logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Heatmap,
    Segmentation,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Heatmap => 1,
            Head::Segmentation => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Input frames, consumed as channels by the first convolution.
    pub frames: usize,
    pub head: Head,
    pub layers: Vec<LayerSpec>,
}

fn check_frames(frames: usize) -> Result<()> {
    if matches!(frames, 1 | 3 | 5) {
        Ok(())
    } else {
        Err(CoreError::Config(format!("stack length must be 1, 3 or 5, got {frames}")))
    }
}

fn conv(kernel: usize, stride: usize, out_maps: usize) -> LayerSpec {
    LayerSpec::Conv { kernel, stride, out_maps }
}

fn act(activation: ActivationKind) -> LayerSpec {
    LayerSpec::Activation { activation }
}

/// Coarse proposal network: two stride-2 convolutions and two pools (total
/// downsample 16), PReLU activations, batch norm before each pool.
pub fn clusternet_spec(frames: usize) -> Result<NetworkSpec> {
    check_frames(frames)?;
    let w = DEFAULT_WIDTH;
    let prelu = ActivationKind::Prelu;
    Ok(NetworkSpec {
        name: "clusternet".into(),
        frames,
        head: Head::Heatmap,
        layers: vec![
            conv(3, 2, w),
            act(prelu),
            conv(3, 2, w),
            act(prelu),
            LayerSpec::BatchNorm,
            LayerSpec::Pool,
            conv(3, 1, w),
            act(prelu),
            LayerSpec::BatchNorm,
            LayerSpec::Pool,
            conv(3, 1, w),
            act(prelu),
            conv(1, 1, 1),
        ],
    })
}

/// Fine localization network: one pool after a large first kernel, then
/// kernels shrinking to a final 1x1; dropout on the 6th and 7th convolutions.
pub fn foveanet_spec(frames: usize) -> Result<NetworkSpec> {
    check_frames(frames)?;
    let w = DEFAULT_WIDTH;
    let relu = ActivationKind::Relu;
    let mut layers = vec![conv(11, 1, w), act(relu), LayerSpec::Pool];
    for k in [9, 7, 5, 3] {
        layers.extend([conv(k, 1, w), act(relu)]);
    }
    for _ in 0..2 {
        layers.extend([conv(3, 1, w), act(relu), LayerSpec::Dropout { rate: 0.5 }]);
    }
    layers.push(conv(1, 1, 1));
    Ok(NetworkSpec { name: "foveanet".into(), frames, head: Head::Heatmap, layers })
}

impl NetworkSpec {
    /// Sets the map count of every hidden convolution.
    pub fn with_width(mut self, width: usize) -> Self {
        let last = self.last_conv();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let LayerSpec::Conv { out_maps, .. } = l {
                if Some(i) != last {
                    *out_maps = width;
                }
            }
        }
        self
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        if let Some(i) = self.last_conv() {
            if let LayerSpec::Conv { out_maps, .. } = &mut self.layers[i] {
                *out_maps = head.channels();
            }
        }
        self
    }

    fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % 2 == 0 {
            return Err(CoreError::Config(format!("{}: frame count must be odd", self.name)));
        }
        let Some(last) = self.last_conv() else {
            return Err(CoreError::Config(format!("{}: no convolution layers", self.name)));
        };
        match &self.layers[last] {
            LayerSpec::Conv { kernel: 1, stride: 1, out_maps } if *out_maps == self.head.channels() => {}
            _ => {
                return Err(CoreError::Config(format!(
                    "{}: final layer must be a 1x1 convolution with {} maps",
                    self.name,
                    self.head.channels()
                )))
            }
        }
        if last != self.layers.len() - 1 {
            return Err(CoreError::Config(format!("{}: nothing may follow the final 1x1 convolution", self.name)));
        }
        let mut total = 1usize;
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { kernel, stride, out_maps } => {
                    if kernel % 2 == 0 || !matches!(stride, 1 | 2) || out_maps == 0 {
                        return Err(CoreError::Config(format!("{}: bad conv {kernel}x{kernel}/{stride}", self.name)));
                    }
                    total *= stride;
                }
                LayerSpec::Pool => total *= 2,
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return Err(CoreError::Config(format!("{}: dropout rate {rate}", self.name)));
                }
                _ => {}
            }
        }
        debug_assert!(total.is_power_of_two());
        Ok(())
    }

    /// Total downsample exponent `d` (output grid is input / 2^d).
    pub fn downsample(&self) -> u32 {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride: 2, .. } | LayerSpec::Pool => 1,
                _ => 0,
            })
            .sum()
    }

    /// Output grid for an `h x w` input from geometry alone.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers.iter().fold((h, w), |(h, w), l| match l {
            LayerSpec::Conv { stride, .. } => (h.div_ceil(*stride), w.div_ceil(*stride)),
            LayerSpec::Pool => (h.div_ceil(2), w.div_ceil(2)),
            _ => (h, w),
        })
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    /// Instantiates the network with He-normal kernels (the output layer is
    /// scaled down by `OUTPUT_INIT_GAIN`), zero biases and identity norms.
    pub fn build(&self, seed: u64) -> Result<Sequential<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new(seed ^ 0x5eed_d20f);
        let mut maps = self.frames;
        let last = self.last_conv();
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv { kernel, stride, out_maps } => {
                    let mut c = ConvLayer::new(maps, out_maps, kernel, stride, Padding::Same)?;
                    let fan_in = (maps * kernel * kernel) as f64;
                    let gain = if Some(i) == last { OUTPUT_INIT_GAIN } else { 2.0f64.sqrt() };
                    let dist = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
                    let values = (0..c.weight.len()).map(|_| dist.sample(&mut rng) as f32).collect();
                    c.weight = Param::new(c.weight.dims.clone(), values);
                    net.push(Layer::Conv(c));
                    maps = out_maps;
                }
                LayerSpec::Pool => net.push(Layer::MaxPool),
                LayerSpec::BatchNorm => net.push(Layer::batchnorm(maps)),
                LayerSpec::Dropout { rate } => net.push(Layer::Dropout { rate }),
                LayerSpec::Activation { activation } => net.push(Layer::activation(activation, maps)),
            }
        }
        Ok(net)
    }
}

/// Init gain of the output layer; keeps initial predictions near the small
/// target amplitudes.
const OUTPUT_INIT_GAIN: f64 = 0.1;
