use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NetworkError;

/// One layer of a declarative network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// 3x3, stride 1, zero padding.
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    Avgpool2d,
    Flatten,
    /// `x + F(x)` where `F` is the inner layer list and preserves shape.
    ResidualBlock { layers: Vec<LayerSpec> },
    /// Identity in the base network; insertion point for dropout erosion.
    ErosionSlot,
}

/// Serialized kind tags, used to name unknown kinds when loading files.
pub const LAYER_KINDS: [&str; 7] = [
    "dense",
    "conv2d",
    "relu",
    "avgpool2d",
    "flatten",
    "residual_block",
    "erosion_slot",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[2]` or `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Learnable tensor declared by a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

/// Result of walking a spec's shape chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Per-sample activation shape at each erosion slot, in forward order.
    pub slot_shapes: Vec<Vec<usize>>,
    pub residual_blocks: usize,
    pub params: Vec<ParamInfo>,
}

impl NetworkSpec {
    /// Checks that shapes chain from input to `classes` logits.
    pub fn analyze(&self) -> Result<Architecture, NetworkError> {
        let mut arch = Architecture {
            slot_shapes: Vec::new(),
            residual_blocks: 0,
            params: Vec::new(),
        };
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NetworkError::ShapeChain {
                layer: "input".into(),
                reason: format!("invalid input shape {:?}", self.input_shape),
            });
        }
        let out = walk(&self.layers, self.input_shape.clone(), "layers", &mut arch)?;
        if out != [self.classes] {
            return Err(NetworkError::ShapeChain {
                layer: format!("layers.{}", self.layers.len().saturating_sub(1)),
                reason: format!("network output {out:?} is not [{}] logits", self.classes),
            });
        }
        Ok(arch)
    }
}

fn walk(
    layers: &[LayerSpec],
    mut shape: Vec<usize>,
    prefix: &str,
    arch: &mut Architecture,
) -> Result<Vec<usize>, NetworkError> {
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}.{i}");
        let fail = |reason: String| NetworkError::ShapeChain {
            layer: path.clone(),
            reason,
        };
        shape = match layer {
            LayerSpec::Dense { inputs, outputs } => {
                if shape != [*inputs] {
                    return Err(fail(format!("dense expects [{inputs}], got {shape:?}")));
                }
                arch.params.push(ParamInfo {
                    name: format!("{path}.weight"),
                    shape: vec![*inputs, *outputs],
                    fan_in: *inputs,
                    fan_out: *outputs,
                    is_bias: false,
                });
                arch.params.push(ParamInfo {
                    name: format!("{path}.bias"),
                    shape: vec![*outputs],
                    fan_in: *inputs,
                    fan_out: *outputs,
                    is_bias: true,
                });
                vec![*outputs]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                if shape.len() != 3 || shape[0] != *in_channels {
                    return Err(fail(format!(
                        "conv2d expects [{in_channels}, h, w], got {shape:?}"
                    )));
                }
                arch.params.push(ParamInfo {
                    name: format!("{path}.weight"),
                    shape: vec![*out_channels, *in_channels, 3, 3],
                    fan_in: in_channels * 9,
                    fan_out: out_channels * 9,
                    is_bias: false,
                });
                arch.params.push(ParamInfo {
                    name: format!("{path}.bias"),
                    shape: vec![*out_channels],
                    fan_in: in_channels * 9,
                    fan_out: out_channels * 9,
                    is_bias: true,
                });
                vec![*out_channels, shape[1], shape[2]]
            }
            LayerSpec::Relu | LayerSpec::ErosionSlot => {
                if matches!(layer, LayerSpec::ErosionSlot) {
                    arch.slot_shapes.push(shape.clone());
                }
                shape
            }
            LayerSpec::Avgpool2d => {
                if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                    return Err(fail(format!("avgpool2d needs [c, even, even], got {shape:?}")));
                }
                vec![shape[0], shape[1] / 2, shape[2] / 2]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::ResidualBlock { layers } => {
                arch.residual_blocks += 1;
                let inner = walk(layers, shape.clone(), &format!("{path}.block"), arch)?;
                if inner != shape {
                    return Err(fail(format!(
                        "residual branch maps {shape:?} to {inner:?}; identity skip needs equal shapes"
                    )));
                }
                shape
            }
        };
    }
    Ok(shape)
}

/// Named architectures used by the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "plain-mlp")]
    PlainMlp,
    #[serde(rename = "res-mlp")]
    ResMlp,
    #[serde(rename = "small-cnn")]
    SmallCnn,
}

pub const PLAIN_WIDTH: usize = 256;
pub const RES_WIDTH: usize = 64;
pub const RES_BLOCKS: usize = 8;

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::PlainMlp => "plain-mlp",
            Preset::ResMlp => "res-mlp",
            Preset::SmallCnn => "small-cnn",
        }
    }

    /// Builds the preset for inputs of `input_shape` and `classes` outputs.
    ///
    /// MLP presets flatten multi-axis inputs first. Every hidden activation
    /// is followed by an erosion slot.
    pub fn spec(self, name: &str, input_shape: &[usize], classes: usize) -> NetworkSpec {
        let features: usize = input_shape.iter().product();
        let mut layers = Vec::new();
        if input_shape.len() > 1 && self != Preset::SmallCnn {
            layers.push(LayerSpec::Flatten);
        }
        match self {
            Preset::PlainMlp => {
                layers.extend([
                    LayerSpec::Dense {
                        inputs: features,
                        outputs: PLAIN_WIDTH,
                    },
                    LayerSpec::Relu,
                    LayerSpec::ErosionSlot,
                    LayerSpec::Dense {
                        inputs: PLAIN_WIDTH,
                        outputs: PLAIN_WIDTH,
                    },
                    LayerSpec::Relu,
                    LayerSpec::ErosionSlot,
                    LayerSpec::Dense {
                        inputs: PLAIN_WIDTH,
                        outputs: classes,
                    },
                ]);
            }
            Preset::ResMlp => {
                layers.extend([
                    LayerSpec::Dense {
                        inputs: features,
                        outputs: RES_WIDTH,
                    },
                    LayerSpec::Relu,
                    LayerSpec::ErosionSlot,
                ]);
                for _ in 0..RES_BLOCKS {
                    layers.push(LayerSpec::ResidualBlock {
                        layers: vec![
                            LayerSpec::Dense {
                                inputs: RES_WIDTH,
                                outputs: RES_WIDTH,
                            },
                            LayerSpec::Relu,
                            LayerSpec::ErosionSlot,
                            LayerSpec::Dense {
                                inputs: RES_WIDTH,
                                outputs: RES_WIDTH,
                            },
                        ],
                    });
                }
                layers.push(LayerSpec::Dense {
                    inputs: RES_WIDTH,
                    outputs: classes,
                });
            }
            Preset::SmallCnn => {
                let channels = input_shape.first().copied().unwrap_or(1);
                let (h, w) = (
                    input_shape.get(1).copied().unwrap_or(1),
                    input_shape.get(2).copied().unwrap_or(1),
                );
                layers.extend([
                    LayerSpec::Conv2d {
                        in_channels: channels,
                        out_channels: 8,
                    },
                    LayerSpec::Relu,
                    LayerSpec::ErosionSlot,
                    LayerSpec::Avgpool2d,
                    LayerSpec::Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::ErosionSlot,
                    LayerSpec::Avgpool2d,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: 16 * (h / 4) * (w / 4),
                        outputs: classes,
                    },
                ]);
            }
        }
        NetworkSpec {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            classes,
            layers,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain-mlp" => Ok(Preset::PlainMlp),
            "res-mlp" => Ok(Preset::ResMlp),
            "small-cnn" => Ok(Preset::SmallCnn),
            other => Err(NetworkError::UnknownPreset(other.to_string())),
        }
    }
}
