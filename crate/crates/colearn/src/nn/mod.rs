//! Network primitives: layer specifications, parameters, exact analytic
//! forward/backward passes, Xavier initialization, and checkpointing.

mod checkpoint;
mod init;
mod network;
mod ops;

pub use checkpoint::{load_ensemble, save_ensemble, EnsembleCheckpoint, CHECKPOINT_VERSION};
pub use init::xavier_init;
pub use network::{backward, forward, forward_collect, softmax, softmax_rows, ForwardCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Spatial extent of an activation volume. Vector-valued data uses
/// `(channels = d, height = 1, width = 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volume {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Volume {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Volume {
            channels,
            height,
            width,
        }
    }

    pub fn flat(dim: usize) -> Self {
        Volume::new(dim, 1, 1)
    }

    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for Volume {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Softmax {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output volume given an input volume, or an error if they do not compose.
    pub fn output_volume(&self, input: Volume) -> Result<Volume> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Arch("dense layer dimensions must be > 0".into()));
                }
                if input.elements() != inputs {
                    return Err(Error::Arch(format!(
                        "dense layer expects {inputs} inputs but receives volume {input} ({} elements)",
                        input.elements()
                    )));
                }
                Ok(Volume::flat(outputs))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::Arch("conv2d kernel/stride/channels must be > 0".into()));
                }
                if input.channels != in_channels {
                    return Err(Error::Arch(format!(
                        "conv2d expects {in_channels} input channels but receives volume {input}"
                    )));
                }
                let h = input.height + 2 * padding;
                let w = input.width + 2 * padding;
                if h < kernel || w < kernel {
                    return Err(Error::Arch(format!(
                        "conv2d kernel {kernel} does not fit padded input {h}x{w}"
                    )));
                }
                Ok(Volume::new(
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ))
            }
            LayerSpec::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::Arch("maxpool kernel/stride must be > 0".into()));
                }
                if input.height < kernel || input.width < kernel {
                    return Err(Error::Arch(format!(
                        "maxpool kernel {kernel} does not fit input volume {input}"
                    )));
                }
                Ok(Volume::new(
                    input.channels,
                    (input.height - kernel) / stride + 1,
                    (input.width - kernel) / stride + 1,
                ))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Softmax { classes } => {
                if input.elements() != classes {
                    return Err(Error::Arch(format!(
                        "softmax over {classes} classes receives volume {input} ({} elements)",
                        input.elements()
                    )));
                }
                Ok(Volume::flat(classes))
            }
        }
    }
}

/// A network architecture: the input volume plus an ordered layer list whose
/// final layer is a softmax over the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: Volume,
    pub layers: Vec<LayerSpec>,
}

impl Arch {
    pub fn new(input: Volume, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Arch { input, layers };
        arch.volumes()?;
        Ok(arch)
    }

    /// Per-layer output volumes; errors name the first offending layer pair.
    pub fn volumes(&self) -> Result<Vec<Volume>> {
        if self.layers.is_empty() {
            return Err(Error::Arch("architecture has no layers".into()));
        }
        let mut current = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            current = layer.output_volume(current).map_err(|e| {
                Error::Arch(format!(
                    "layer {idx} ({}) after {}: {e}",
                    layer.name(),
                    if idx == 0 {
                        "input".to_string()
                    } else {
                        format!("layer {} ({})", idx - 1, self.layers[idx - 1].name())
                    }
                ))
            })?;
            out.push(current);
            if matches!(layer, LayerSpec::Softmax { .. }) && idx + 1 != self.layers.len() {
                return Err(Error::Arch(format!(
                    "softmax at layer {idx} must be the final layer"
                )));
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax { .. })) {
            return Err(Error::Arch("final layer must be softmax".into()));
        }
        Ok(out)
    }

    /// Class count of the final softmax.
    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax { classes }) => *classes,
            _ => 0,
        }
    }

    /// The LeNet-5 stack: three 5x5 convolutions interleaved with 2x2 max
    /// pooling, then 120-84-classes fully connected, ReLU activations
    /// throughout. Inputs smaller than 32x32 are compensated with symmetric
    /// zero padding on the first convolution so the rest of the stack keeps
    /// its canonical feature-map sizes.
    pub fn lenet5(in_channels: usize, input_hw: usize, classes: usize) -> Result<Self> {
        if input_hw > 32 || (32 - input_hw) % 2 != 0 {
            return Err(Error::Arch(format!(
                "lenet5 input side must be <= 32 and of the same parity, got {input_hw}"
            )));
        }
        let padding = (32 - input_hw) / 2;
        Arch::new(
            Volume::new(in_channels, input_hw, input_hw),
            vec![
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv2d {
                    in_channels: 6,
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv2d {
                    in_channels: 16,
                    out_channels: 120,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 120,
                    outputs: 84,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 84,
                    outputs: classes,
                },
                LayerSpec::Softmax { classes },
            ],
        )
    }

    /// Plain MLP over flat inputs with ReLU hidden layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        layers.push(LayerSpec::Softmax { classes });
        Arch::new(Volume::flat(input_dim), layers)
    }
}

/// Weights, biases, and the momentum buffers the trainer keeps alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub weight_momentum: Tensor<E>,
    pub bias_momentum: Tensor<E>,
}

/// All parameters of one network, indexed by layer position (parameterless
/// layers hold `None`). The version counter increments on every optimizer
/// step and guards against stale forward caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams<E> {
    layers: Vec<Option<LayerParams<E>>>,
    #[serde(skip)]
    version: u64,
}

impl<E: Element> NetworkParams<E> {
    pub(crate) fn from_layers(layers: Vec<Option<LayerParams<E>>>) -> Self {
        NetworkParams { layers, version: 0 }
    }

    pub fn layers(&self) -> &[Option<LayerParams<E>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Option<LayerParams<E>>] {
        &mut self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of all weights and
    /// biases (momentum excluded). Used by reproducibility tests and the
    /// read-only guarantee of analytics.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut absorb = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for layer in self.layers.iter().flatten() {
            for &w in layer.weight.data() {
                absorb(w.bits());
            }
            for &b in layer.bias.data() {
                absorb(b.bits());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.all_finite() && p.bias.all_finite())
    }
}

/// Weight/bias gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<E> {
    pub layers: Vec<Option<LayerGrads<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn zeros_like(params: &NetworkParams<E>) -> Self {
        Gradients {
            layers: params
                .layers()
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerGrads {
                        weight: Tensor::zeros_like(&p.weight),
                        bias: Tensor::zeros_like(&p.bias),
                    })
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weight.all_finite() && g.bias.all_finite())
    }
}
