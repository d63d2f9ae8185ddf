//! Declarative layer lists, static shape propagation, and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::window_output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        l2_coefficient: f64,
    },
    Batchnorm,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        #[serde(default)]
        l2_coefficient: f64,
    },
    Dropout {
        rate: f64,
    },
    Activation {
        function: ActivationKind,
    },
    GlobalAvgPool,
    /// Reinterprets the per-sample shape; element count must match.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, padding: usize, l2: f64) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            stride: 1,
            padding,
            l2_coefficient: l2,
        }
    }

    pub fn dense(units: usize, l2: f64) -> Self {
        LayerSpec::Dense {
            units,
            l2_coefficient: l2,
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation {
            function: ActivationKind::Relu,
        }
    }

    pub fn maxpool2() -> Self {
        LayerSpec::Maxpool {
            window: 2,
            stride: 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn l2_coefficient(&self) -> f64 {
        match self {
            LayerSpec::Conv { l2_coefficient, .. } | LayerSpec::Dense { l2_coefficient, .. } => {
                *l2_coefficient
            }
            _ => 0.0,
        }
    }

    /// Per-sample output shape, or a message describing why `input` is invalid.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let rank3 = |what: &str| -> std::result::Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!("{what} needs a [C,H,W] input, got {input:?}")),
            }
        };
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
                l2_coefficient,
            } => {
                let (_, h, w) = rank3("conv")?;
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    return Err("filters, kernel and stride must be positive".into());
                }
                check_l2(*l2_coefficient)?;
                let oh = window_output(h, *kernel, *stride, *padding);
                let ow = window_output(w, *kernel, *stride, *padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![*filters, oh, ow]),
                    _ => Err(format!(
                        "kernel {kernel} with padding {padding} does not fit {h}x{w}"
                    )),
                }
            }
            LayerSpec::Batchnorm => match input.len() {
                1 | 3 => Ok(input.to_vec()),
                _ => Err(format!("batchnorm needs [C] or [C,H,W], got {input:?}")),
            },
            LayerSpec::Maxpool { window, stride } => {
                let (c, h, w) = rank3("maxpool")?;
                match (
                    window_output(h, *window, *stride, 0),
                    window_output(w, *window, *stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(format!("pool window {window} does not fit {h}x{w}")),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense {
                units,
                l2_coefficient,
            } => {
                if input.len() != 1 {
                    return Err(format!("dense needs a flat input, got {input:?}"));
                }
                if *units == 0 {
                    return Err("dense units must be positive".into());
                }
                check_l2(*l2_coefficient)?;
                Ok(vec![*units])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(format!("dropout rate {rate} outside [0,1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = rank3("global_avg_pool")?;
                Ok(vec![c])
            }
            LayerSpec::Reshape { shape } => {
                let from: usize = input.iter().product();
                let to: usize = shape.iter().product();
                if shape.is_empty() || shape.contains(&0) || from != to {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Trainable tensor shapes for this layer given its per-sample input shape.
    pub(crate) fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv {
                filters, kernel, ..
            } => vec![vec![*filters, input[0], *kernel, *kernel], vec![*filters]],
            LayerSpec::Batchnorm => vec![vec![input[0]], vec![input[0]]],
            LayerSpec::Dense { units, .. } => vec![vec![input[0], *units], vec![*units]],
            _ => Vec::new(),
        }
    }
}

fn check_l2(c: f64) -> std::result::Result<(), String> {
    if c >= 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(format!("l2 coefficient {c} must be nonnegative"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Adds the `sigmoid(w·|Δe| + b₀)` probability layer after the embedding.
    #[serde(default)]
    pub similarity_head: bool,
    /// Free-form run information carried through checkpoints.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input_shape,
            layers,
            similarity_head: false,
            metadata: serde_json::Value::Null,
        }
    }

    /// Per-sample shapes: entry 0 is the input, entry `i+1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec {
                layer: 0,
                message: format!("input shape {:?} must be positive", self.input_shape),
            });
        }
        let mut flattened = false;
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Flatten if flattened => {
                    return Err(Error::Spec {
                        layer: i,
                        message: "a second flatten layer".into(),
                    })
                }
                LayerSpec::Flatten => flattened = true,
                LayerSpec::Dense { .. } if !flattened => {
                    return Err(Error::Spec {
                        layer: i,
                        message: "dense layer without a preceding flatten".into(),
                    })
                }
                _ => {}
            }
            let next = layer
                .output_shape(shapes.last().expect("nonempty"))
                .map_err(|message| Error::Spec { layer: i, message })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        if self.similarity_head && shapes.last().map_or(0, Vec::len) != 1 {
            return Err(Error::Spec {
                layer: self.layers.len(),
                message: "similarity layer needs a flat embedding".into(),
            });
        }
        Ok(())
    }

    /// Length of the final (flattened) output.
    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("nonempty").iter().product())
    }

    /// Trainable tensor shapes in storage order: layers first, then the
    /// similarity weights `[D,1]` and bias `[1]`.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        let mut out: Vec<Vec<usize>> = self
            .layers
            .iter()
            .zip(&shapes)
            .flat_map(|(l, s)| l.param_shapes(s))
            .collect();
        if self.similarity_head {
            out.push(vec![self.embedding_dim()?, 1]);
            out.push(vec![1]);
        }
        Ok(out)
    }

    /// Channel counts of the batchnorm layers, in layer order.
    pub fn batchnorm_channels(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::Batchnorm))
            .map(|(_, s)| s[0])
            .collect())
    }

    /// Appends `head` after `self`; the head's input shape must equal this
    /// network's output shape.
    pub fn then(&self, head: &NetworkSpec) -> Result<NetworkSpec> {
        let out = self.shapes()?.pop().expect("nonempty");
        if out != head.input_shape {
            return Err(Error::Spec {
                layer: self.layers.len(),
                message: format!(
                    "head expects input {:?} but the backbone produces {out:?}",
                    head.input_shape
                ),
            });
        }
        let mut layers = self.layers.clone();
        layers.extend(head.layers.iter().cloned());
        let spec = NetworkSpec {
            input_shape: self.input_shape.clone(),
            layers,
            similarity_head: head.similarity_head,
            metadata: serde_json::Value::Null,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub const PRESETS: [&str; 9] = [
    "mini_vgg_backbone",
    "roadscan_head",
    "head_no_regularizer",
    "head_one_block",
    "head_three_blocks",
    "head_dropout_all",
    "head_dense_only",
    "head_2x_filters",
    "head_two_extra_blocks",
];

pub const DEFAULT_L2: f64 = 1e-4;

/// Three `[conv → relu → conv → relu → maxpool]` blocks (16/32/64 filters)
/// and a global average pool.
pub fn backbone_spec(side: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for filters in [16, 32, 64] {
        layers.extend([
            LayerSpec::conv(filters, 3, 1, 0.0),
            LayerSpec::relu(),
            LayerSpec::conv(filters, 3, 1, 0.0),
            LayerSpec::relu(),
            LayerSpec::maxpool2(),
        ]);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    NetworkSpec::new(vec![3, side, side], layers)
}

fn conv_block(filters: usize, l2: f64, pool: bool) -> Vec<LayerSpec> {
    let mut block = vec![
        LayerSpec::conv(filters, 3, 1, l2),
        LayerSpec::Batchnorm,
        LayerSpec::relu(),
    ];
    if pool {
        block.push(LayerSpec::maxpool2());
    }
    block
}

/// Head preset for `feature_dim`-long inputs (a multiple of 64, viewed as
/// `[feature_dim/64, 8, 8]` maps before the conv blocks).
pub fn head_spec(name: &str, feature_dim: usize) -> Result<NetworkSpec> {
    if feature_dim == 0 || feature_dim % 64 != 0 {
        return Err(Error::Parameter(format!(
            "head feature dimension {feature_dim} must be a positive multiple of 64"
        )));
    }
    let reshape = LayerSpec::Reshape {
        shape: vec![feature_dim / 64, 8, 8],
    };
    let (filters, l2, extra, dropout_all): (&[usize], f64, bool, bool) = match name {
        "roadscan_head" => (&[32, 64], DEFAULT_L2, false, false),
        "head_no_regularizer" => (&[32, 64], 0.0, false, false),
        "head_one_block" => (&[32], DEFAULT_L2, false, false),
        "head_three_blocks" => (&[32, 64, 128], DEFAULT_L2, false, false),
        "head_dropout_all" => (&[32, 64], DEFAULT_L2, false, true),
        "head_2x_filters" => (&[64, 128], 0.0, false, false),
        "head_two_extra_blocks" => (&[32, 64], 0.0, true, false),
        "head_dense_only" => {
            let mut spec = NetworkSpec::new(
                vec![feature_dim],
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::dense(256, DEFAULT_L2),
                    LayerSpec::relu(),
                    LayerSpec::Dropout { rate: 0.3 },
                    LayerSpec::dense(64, DEFAULT_L2),
                ],
            );
            spec.similarity_head = true;
            return Ok(spec);
        }
        other => return Err(unknown_preset(other)),
    };
    let mut layers = vec![reshape];
    for &f in filters {
        layers.extend(conv_block(f, l2, true));
        if dropout_all {
            layers.push(LayerSpec::Dropout { rate: 0.3 });
        }
    }
    if extra {
        layers.extend(conv_block(128, l2, false));
        layers.extend(conv_block(128, l2, false));
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(256, l2),
        LayerSpec::relu(),
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::dense(64, l2),
    ]);
    let mut spec = NetworkSpec::new(vec![feature_dim], layers);
    spec.similarity_head = true;
    Ok(spec)
}

fn unknown_preset(name: &str) -> Error {
    Error::UnknownPreset {
        name: name.to_string(),
        valid: PRESETS.join(", "),
    }
}

/// Named configuration; heads take 64-dimensional features and the backbone
/// 32×32 RGB input.
pub fn preset_spec(name: &str) -> Result<NetworkSpec> {
    match name {
        "mini_vgg_backbone" => Ok(backbone_spec(32)),
        _ if PRESETS.contains(&name) => head_spec(name, 64),
        _ => Err(unknown_preset(name)),
    }
}

/// Backbone followed by the named head, for `side × side` RGB input.
pub fn tower_spec(head: &str, side: usize) -> Result<NetworkSpec> {
    if head == "mini_vgg_backbone" {
        return Err(Error::Parameter(
            "tower needs a head preset, not the backbone".into(),
        ));
    }
    backbone_spec(side).then(&head_spec(head, 64)?)
}
