//! Desk-scale SGD training with deterministic initialization and shuffling,
//! plus controlled model variants (fewer samples, narrower layers, more
//! epochs) for studying how model similarity affects difference search.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use crate::autodiff::ce_loss_and_grads;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::tensor::Tensor;

/// Architecture template; concrete input sizes are inferred when the
/// network is built.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ReLU,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_units: usize,
    },
    Softmax,
}

impl ArchLayer {
    /// Parses a comma-separated architecture string, e.g.
    /// `conv:4x5,relu,pool:2,conv:8x5,relu,pool:2,flatten,dense:10,softmax`.
    pub fn parse_list(s: &str) -> Result<Vec<ArchLayer>> {
        let bad = |t: &str| Error::InvalidConfig(format!("bad architecture token '{t}'"));
        let mut out = Vec::new();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let layer = match token {
                "relu" => ArchLayer::ReLU,
                "flatten" => ArchLayer::Flatten,
                "softmax" => ArchLayer::Softmax,
                t if t.starts_with("conv:") => {
                    let parts: Vec<usize> = t[5..]
                        .split('x')
                        .map(|p| p.parse().map_err(|_| bad(t)))
                        .collect::<Result<_>>()?;
                    match parts[..] {
                        [out_channels, kernel] => ArchLayer::Conv {
                            out_channels,
                            kernel,
                            stride: 1,
                        },
                        [out_channels, kernel, stride] => ArchLayer::Conv {
                            out_channels,
                            kernel,
                            stride,
                        },
                        _ => return Err(bad(t)),
                    }
                }
                t if t.starts_with("pool:") => {
                    let parts: Vec<usize> = t[5..]
                        .split('x')
                        .map(|p| p.parse().map_err(|_| bad(t)))
                        .collect::<Result<_>>()?;
                    match parts[..] {
                        [window] => ArchLayer::MaxPool {
                            window,
                            stride: window,
                        },
                        [window, stride] => ArchLayer::MaxPool { window, stride },
                        _ => return Err(bad(t)),
                    }
                }
                t if t.starts_with("dense:") => ArchLayer::Dense {
                    out_units: t[6..].parse().map_err(|_| bad(t))?,
                },
                t => return Err(bad(t)),
            };
            out.push(layer);
        }
        if out.is_empty() {
            return Err(Error::InvalidConfig("empty architecture".into()));
        }
        Ok(out)
    }

    pub fn format_list(arch: &[ArchLayer]) -> String {
        arch.iter()
            .map(|l| match l {
                ArchLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if *stride == 1 {
                        format!("conv:{out_channels}x{kernel}")
                    } else {
                        format!("conv:{out_channels}x{kernel}x{stride}")
                    }
                }
                ArchLayer::ReLU => "relu".into(),
                ArchLayer::MaxPool { window, stride } => {
                    if window == stride {
                        format!("pool:{window}")
                    } else {
                        format!("pool:{window}x{stride}")
                    }
                }
                ArchLayer::Flatten => "flatten".into(),
                ArchLayer::Dense { out_units } => format!("dense:{out_units}"),
                ArchLayer::Softmax => "softmax".into(),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model_id: String,
    pub architecture: Vec<ArchLayer>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub sample_limit: Option<usize>,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Materializes an architecture template for a concrete input shape, with
/// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`) and zero biases
/// drawn from the given rng.
pub fn build_network(
    model_id: &str,
    arch: &[ArchLayer],
    input_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let mut params = BTreeMap::new();
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut p = 0usize;
    for layer in arch {
        match layer {
            ArchLayer::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::InvalidConfig(format!(
                        "conv layer needs [C,H,W] input, got {shape:?}"
                    )));
                };
                let wname = format!("w{p}");
                let bname = format!("b{p}");
                p += 1;
                let fan_in = c * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                params.insert(
                    wname.clone(),
                    glorot(rng, vec![*out_channels, c, *kernel, *kernel], fan_in, fan_out),
                );
                params.insert(bname.clone(), Tensor::zeros(vec![*out_channels]));
                layers.push(LayerSpec::Conv2D {
                    in_channels: c,
                    out_channels: *out_channels,
                    kernel_h: *kernel,
                    kernel_w: *kernel,
                    stride: *stride,
                    weight: wname,
                    bias: bname,
                });
                shape = vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ];
            }
            ArchLayer::ReLU => layers.push(LayerSpec::ReLU),
            ArchLayer::MaxPool { window, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::InvalidConfig(format!(
                        "pool layer needs [C,H,W] input, got {shape:?}"
                    )));
                };
                layers.push(LayerSpec::MaxPool2D {
                    window: *window,
                    stride: *stride,
                });
                shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
            }
            ArchLayer::Flatten => {
                layers.push(LayerSpec::Flatten);
                shape = vec![shape.iter().product()];
            }
            ArchLayer::Dense { out_units } => {
                let [in_units] = shape[..] else {
                    return Err(Error::InvalidConfig(format!(
                        "dense layer needs a flat input, got {shape:?} (missing flatten?)"
                    )));
                };
                let wname = format!("w{p}");
                let bname = format!("b{p}");
                p += 1;
                params.insert(
                    wname.clone(),
                    glorot(rng, vec![*out_units, in_units], in_units, *out_units),
                );
                params.insert(bname.clone(), Tensor::zeros(vec![*out_units]));
                layers.push(LayerSpec::Dense {
                    in_units,
                    out_units: *out_units,
                    weight: wname,
                    bias: bname,
                });
                shape = vec![*out_units];
            }
            ArchLayer::Softmax => layers.push(LayerSpec::Softmax),
        }
    }
    Network::new(model_id, input_shape.to_vec(), layers, params)
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Minibatch SGD with cross-entropy. Bit-deterministic for a fixed config:
/// the rng seeds both initialization and the per-epoch shuffles.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<Network> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    let n = cfg.sample_limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::InvalidConfig("sample_limit leaves no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut net = build_network(&cfg.model_id, &cfg.architecture, data.input_shape(), &mut rng)?;
    if let Some(&bad) = data.labels()[..n].iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {} classes",
            net.num_classes()
        )));
    }
    run_epochs(&mut net, data, n, cfg.epochs, cfg.batch_size, cfg.learning_rate, &mut rng)?;
    Ok(net)
}

/// Continues SGD from existing weights (retraining augmentation).
pub fn continue_training(
    net: &Network,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng_seed: u64,
) -> Result<Network> {
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    run_epochs(&mut net, data, data.len(), epochs, batch_size, learning_rate, &mut rng)?;
    Ok(net)
}

fn run_epochs(
    net: &mut Network,
    data: &Dataset,
    n: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(batch_size) {
            let (_, grads) = ce_loss_and_grads(net, data, chunk)?;
            for (name, grad) in grads {
                let updated = net.param(&name).add_scaled(&grad, -learning_rate)?;
                net.set_param(&name, updated);
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy loss and accuracy over a dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation data is empty".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.input(i)?;
        let trace = net.forward(&x)?;
        let label = data.labels()[i];
        loss -= trace.final_probs.data()[label].max(1e-300).ln();
        correct += (trace.final_probs.argmax() == label) as usize;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Which knob a controlled variant turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantAxis {
    /// Train on `delta` fewer samples (dropped from the tail).
    Samples,
    /// Remove `delta` units/channels from every hidden parametric layer.
    Units,
    /// Train for `delta` additional epochs.
    Epochs,
}

/// Trains one network per delta. Delta 0 reproduces the base network
/// bit-exactly (same seed, same id), so a generate run against it is a true
/// no-difference control.
pub fn make_variants(
    base: &TrainConfig,
    data: &Dataset,
    axis: VariantAxis,
    deltas: &[usize],
) -> Result<Vec<Network>> {
    let mut out = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut cfg = base.clone();
        if delta > 0 {
            cfg.model_id = format!(
                "{}-{}{}",
                base.model_id,
                match axis {
                    VariantAxis::Samples => "samples-",
                    VariantAxis::Units => "units-",
                    VariantAxis::Epochs => "epochs+",
                },
                delta
            );
        }
        match axis {
            VariantAxis::Samples => {
                let n = base.sample_limit.map_or(data.len(), |l| l.min(data.len()));
                if delta >= n {
                    return Err(Error::InvalidConfig(format!(
                        "cannot drop {delta} of {n} training samples"
                    )));
                }
                cfg.sample_limit = Some(n - delta);
            }
            VariantAxis::Units => {
                // The classifier head keeps its width; only hidden layers
                // shrink.
                let last_dense = cfg
                    .architecture
                    .iter()
                    .rposition(|l| matches!(l, ArchLayer::Dense { .. }));
                for (i, layer) in cfg.architecture.iter_mut().enumerate() {
                    match layer {
                        ArchLayer::Conv { out_channels, .. } => {
                            if delta >= *out_channels {
                                return Err(Error::InvalidConfig(format!(
                                    "cannot remove {delta} of {out_channels} channels"
                                )));
                            }
                            *out_channels -= delta;
                        }
                        ArchLayer::Dense { out_units } if Some(i) != last_dense => {
                            if delta >= *out_units {
                                return Err(Error::InvalidConfig(format!(
                                    "cannot remove {delta} of {out_units} units"
                                )));
                            }
                            *out_units -= delta;
                        }
                        _ => {}
                    }
                }
            }
            VariantAxis::Epochs => {
                cfg.epochs = base.epochs + delta;
            }
        }
        out.push(train(&cfg, data)?);
    }
    Ok(out)
}
