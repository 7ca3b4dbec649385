//! Network representation and the recording forward pass.
//!
//! A network is an ordered list of layer specs plus a named parameter table.
//! Shapes are validated once at construction; `forward` then records the
//! output of every layer so coverage and gradient code can replay the pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a sequential network.
///
/// Convolutions use valid padding. `weight`/`bias` name tensors in the
/// network's parameter table: Dense weights are `[out, in]`, Conv2D weights
/// `[out_ch, in_ch, kh, kw]`, biases `[out]` / `[out_ch]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        in_units: usize,
        out_units: usize,
        weight: String,
        bias: String,
    },
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        weight: String,
        bias: String,
    },
    ReLU,
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::ReLU => "relu",
            LayerSpec::MaxPool2D { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape, or why the pair is incompatible.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::InvalidNetwork(msg));
        match self {
            LayerSpec::Dense { in_units, out_units, .. } => {
                if input != [*in_units] {
                    return err(format!(
                        "dense layer expects input [{in_units}], got {input:?}"
                    ));
                }
                Ok(vec![*out_units])
            }
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => {
                let [c, h, w] = *input else {
                    return err(format!("conv2d expects [C,H,W] input, got {input:?}"));
                };
                if c != *in_channels {
                    return err(format!("conv2d expects {in_channels} channels, got {c}"));
                }
                if *stride == 0 || h < *kernel_h || w < *kernel_w {
                    return err(format!(
                        "conv2d kernel {kernel_h}x{kernel_w} stride {stride} does not fit {h}x{w}"
                    ));
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel_h) / stride + 1,
                    (w - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::MaxPool2D { window, stride } => {
                let [c, h, w] = *input else {
                    return err(format!("maxpool2d expects [C,H,W] input, got {input:?}"));
                };
                if *stride == 0 || *window == 0 || h < *window || w < *window {
                    return err(format!(
                        "maxpool2d window {window} stride {stride} does not fit {h}x{w}"
                    ));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return err(format!("softmax expects a vector input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    fn param_refs(&self) -> Vec<(&str, Vec<usize>)> {
        match self {
            LayerSpec::Dense {
                in_units,
                out_units,
                weight,
                bias,
            } => vec![
                (weight.as_str(), vec![*out_units, *in_units]),
                (bias.as_str(), vec![*out_units]),
            ],
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                weight,
                bias,
                ..
            } => vec![
                (
                    weight.as_str(),
                    vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
                ),
                (bias.as_str(), vec![*out_channels]),
            ],
            _ => vec![],
        }
    }
}

/// Per-layer outputs recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub per_layer: Vec<Tensor>,
    /// Output of the final layer. A probability vector when the network ends
    /// in softmax.
    pub final_probs: Tensor,
}

/// A validated feedforward network: layers, parameters, shapes.
///
/// Immutable after construction; `forward`/`predict` are reentrant.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    model_id: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    layer_shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(
        model_id: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        let mut layer_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::InvalidNetwork(
                    "softmax may appear only as the final layer".into(),
                ));
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::InvalidNetwork(format!("layer {i}: {e}")))?;
            layer_shapes.push(shape.clone());
            for (name, expected) in layer.param_refs() {
                match params.get(name) {
                    None => {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} references missing parameter '{name}'"
                        )))
                    }
                    Some(t) if t.shape() != expected.as_slice() => {
                        return Err(Error::InvalidNetwork(format!(
                            "parameter '{name}' has shape {:?}, expected {expected:?}",
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
        }
        if shape.len() != 1 {
            return Err(Error::InvalidNetwork(format!(
                "network output must be a vector, got {shape:?}"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            input_shape,
            num_classes: shape[0],
            layers,
            params,
            layer_shapes,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor) {
        debug_assert_eq!(self.params[name].shape(), value.shape());
        self.params.insert(name.to_string(), value);
    }

    /// Shape of the given layer's output.
    pub fn layer_output_shape(&self, layer_index: usize) -> &[usize] {
        &self.layer_shapes[layer_index]
    }

    pub fn has_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Index of the layer producing the class scores fed to softmax
    /// (the final layer itself when there is no softmax).
    pub fn logits_layer_index(&self) -> usize {
        if self.has_softmax() {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        }
    }

    /// Two networks are compatible for differential testing when they accept
    /// the same inputs and emit the same classes.
    pub fn compatible_with(&self, other: &Network) -> bool {
        self.input_shape == other.input_shape && self.num_classes == other.num_classes
    }

    /// Runs the network, recording every layer output.
    pub fn forward(&self, input: &Tensor) -> Result<ActivationTrace> {
        input.check_shape(&self.input_shape)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for layer in &self.layers {
            let out = self.forward_layer(layer, current)?;
            per_layer.push(out);
            current = per_layer.last().unwrap();
        }
        let final_probs = per_layer.last().unwrap().clone();
        Ok(ActivationTrace {
            per_layer,
            final_probs,
        })
    }

    /// Argmax class and the final output vector. Ties break to the lowest
    /// class index.
    pub fn predict(&self, input: &Tensor) -> Result<(usize, Tensor)> {
        let trace = self.forward(input)?;
        Ok((trace.final_probs.argmax(), trace.final_probs))
    }

    fn forward_layer(&self, layer: &LayerSpec, input: &Tensor) -> Result<Tensor> {
        match layer {
            LayerSpec::Dense { weight, bias, .. } => {
                Ok(dense_forward(input, self.param(weight), self.param(bias)))
            }
            LayerSpec::Conv2D { weight, bias, stride, .. } => Ok(conv2d_forward(
                input,
                self.param(weight),
                self.param(bias),
                *stride,
            )),
            LayerSpec::ReLU => Ok(input.map(|v| v.max(0.0))),
            LayerSpec::MaxPool2D { window, stride } => Ok(maxpool_forward(input, *window, *stride)),
            LayerSpec::Flatten => input.reshaped(vec![input.len()]),
            LayerSpec::Softmax => Ok(softmax(input)),
        }
    }
}

pub(crate) fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let out_units = weight.shape()[0];
    let in_units = weight.shape()[1];
    let x = input.data();
    let w = weight.data();
    let mut out = bias.data().to_vec();
    for o in 0..out_units {
        let row = &w[o * in_units..(o + 1) * in_units];
        let mut acc = 0.0;
        for i in 0..in_units {
            acc += row[i] * x[i];
        }
        out[o] += acc;
    }
    Tensor::new(vec![out_units], out).expect("dense output finite")
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let [in_ch, h, w] = *input.shape() else {
        unreachable!("validated at construction")
    };
    let [out_ch, _, kh, kw] = *weight.shape() else {
        unreachable!("validated at construction")
    };
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; out_ch * oh * ow];
    for o in 0..out_ch {
        let b = bias.data()[o];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..in_ch {
                    let xbase = c * h * w;
                    let wbase = (o * in_ch + c) * kh * kw;
                    for ky in 0..kh {
                        let xrow = xbase + (oy * stride + ky) * w + ox * stride;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            acc += x[xrow + kx] * wt[wrow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_ch, oh, ow], out).expect("conv output finite")
}

pub(crate) fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Tensor {
    let [c, h, w] = *input.shape() else {
        unreachable!("validated at construction")
    };
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let v = x[ch * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("pool output finite")
}

/// Numerically stable softmax: shift by the max before exponentiating.
pub(crate) fn softmax(input: &Tensor) -> Tensor {
    let max = input.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = input.data().iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(input.shape().to_vec(), exps.iter().map(|e| e / sum).collect())
        .expect("softmax output finite")
}
