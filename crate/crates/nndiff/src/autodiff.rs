//! Reverse-mode differentiation over recorded forward traces.
//!
//! Two consumers, two variable sets: test generation differentiates a
//! scalar network output with respect to the *input* (parameters held
//! constant), while the trainer differentiates the cross-entropy loss with
//! respect to the *parameters*. Both walk the same per-layer backward
//! kernels; only what gets accumulated differs.

use std::collections::BTreeMap;

use crate::coverage::{self, NeuronId};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, LayerSpec, Network};
use crate::tensor::Tensor;

/// Picks the scalar to differentiate: a class probability (post-softmax),
/// a class logit (pre-softmax), a single neuron's output, or a finite
/// weighted combination of those.
#[derive(Debug, Clone)]
pub enum ScalarSelector {
    ClassProb(usize),
    ClassLogit(usize),
    NeuronOutput(NeuronId),
    WeightedSum(Vec<(ScalarSelector, f64)>),
}

impl ScalarSelector {
    pub fn validate(&self, net: &Network) -> Result<()> {
        match self {
            ScalarSelector::ClassProb(c) => {
                if !net.has_softmax() {
                    return Err(Error::InvalidSelector(
                        "class probability requires a softmax final layer".into(),
                    ));
                }
                check_class(net, *c)
            }
            ScalarSelector::ClassLogit(c) => check_class(net, *c),
            ScalarSelector::NeuronOutput(id) => coverage::validate_neuron(net, *id),
            ScalarSelector::WeightedSum(terms) => {
                for (sel, coef) in terms {
                    if !coef.is_finite() {
                        return Err(Error::InvalidSelector(format!(
                            "non-finite coefficient {coef}"
                        )));
                    }
                    sel.validate(net)?;
                }
                Ok(())
            }
        }
    }

    /// The selected scalar's value for a recorded trace.
    pub fn value(&self, net: &Network, trace: &ActivationTrace) -> Result<f64> {
        match self {
            ScalarSelector::ClassProb(c) => {
                check_class(net, *c)?;
                Ok(trace.final_probs.data()[*c])
            }
            ScalarSelector::ClassLogit(c) => {
                check_class(net, *c)?;
                Ok(trace.per_layer[net.logits_layer_index()].data()[*c])
            }
            ScalarSelector::NeuronOutput(id) => coverage::neuron_value(net, trace, *id),
            ScalarSelector::WeightedSum(terms) => {
                let mut acc = 0.0;
                for (sel, coef) in terms {
                    acc += coef * sel.value(net, trace)?;
                }
                Ok(acc)
            }
        }
    }

    /// Layer index and cotangent seeding the backward pass. `WeightedSum`
    /// has no single seed; it is differentiated term by term.
    fn seed(&self, net: &Network) -> Result<(usize, Tensor)> {
        match self {
            ScalarSelector::ClassProb(c) => {
                let layer = net.layers().len() - 1;
                Ok((layer, unit_vector(net.num_classes(), *c)))
            }
            ScalarSelector::ClassLogit(c) => {
                let layer = net.logits_layer_index();
                Ok((layer, unit_vector(net.num_classes(), *c)))
            }
            ScalarSelector::NeuronOutput(id) => {
                let layer = coverage::value_layer_index(net, id.layer_index);
                let shape = net.layer_output_shape(layer).to_vec();
                let mut seed = Tensor::zeros(shape.clone());
                match &net.layers()[id.layer_index] {
                    LayerSpec::Dense { .. } => {
                        seed.data_mut()[id.unit_index] = 1.0;
                    }
                    LayerSpec::Conv2D { .. } => {
                        // Channel value is the spatial mean.
                        let [_, h, w] = shape[..] else {
                            unreachable!("conv output is [C,H,W]")
                        };
                        let coef = 1.0 / (h * w) as f64;
                        let plane = &mut seed.data_mut()[id.unit_index * h * w..][..h * w];
                        plane.iter_mut().for_each(|v| *v = coef);
                    }
                    _ => unreachable!("validated neuron"),
                }
                Ok((layer, seed))
            }
            ScalarSelector::WeightedSum(_) => unreachable!("weighted sums have no single seed"),
        }
    }
}

fn check_class(net: &Network, c: usize) -> Result<()> {
    if c >= net.num_classes() {
        return Err(Error::InvalidSelector(format!(
            "class {c} out of range for {} classes",
            net.num_classes()
        )));
    }
    Ok(())
}

fn unit_vector(len: usize, index: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![len]);
    t.data_mut()[index] = 1.0;
    t
}

/// Gradient of the selected scalar with respect to the input, parameters
/// held constant. Output shape equals the input shape.
pub fn input_gradient(net: &Network, sel: &ScalarSelector, input: &Tensor) -> Result<Tensor> {
    sel.validate(net)?;
    let trace = net.forward(input)?;
    input_gradient_traced(net, &trace, input, sel)
}

/// Same, reusing an already recorded trace of `input`.
pub fn input_gradient_traced(
    net: &Network,
    trace: &ActivationTrace,
    input: &Tensor,
    sel: &ScalarSelector,
) -> Result<Tensor> {
    match sel {
        ScalarSelector::WeightedSum(terms) => {
            let mut acc = Tensor::zeros(input.shape().to_vec());
            for (sub, coef) in terms {
                if *coef == 0.0 {
                    continue;
                }
                let g = input_gradient_traced(net, trace, input, sub)?;
                acc = acc.add_scaled(&g, *coef)?;
            }
            Ok(acc)
        }
        _ => {
            let (layer, seed) = sel.seed(net)?;
            Ok(backward_from_seed(net, input, trace, layer, seed, None))
        }
    }
}

/// Mean cross-entropy parameter gradients over a batch; one entry per
/// named parameter, same shape as the parameter.
pub fn param_gradients(net: &Network, batch: &Dataset) -> Result<BTreeMap<String, Tensor>> {
    let idxs: Vec<usize> = (0..batch.len()).collect();
    let (_, grads) = ce_loss_and_grads(net, batch, &idxs)?;
    Ok(grads)
}

/// Mean cross-entropy loss and parameter gradients over selected samples.
pub(crate) fn ce_loss_and_grads(
    net: &Network,
    data: &Dataset,
    idxs: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if idxs.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if !net.has_softmax() {
        return Err(Error::InvalidNetwork(
            "cross-entropy training requires a softmax final layer".into(),
        ));
    }
    let mut sink: BTreeMap<String, Tensor> = BTreeMap::new();
    let inv_n = 1.0 / idxs.len() as f64;
    let logits_layer = net.logits_layer_index();
    let mut loss = 0.0;
    for &i in idxs {
        let x = data.input(i)?;
        let label = data.labels()[i];
        if label >= net.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                net.num_classes()
            )));
        }
        let trace = net.forward(&x)?;
        let probs = trace.final_probs.data();
        loss -= probs[label].max(1e-300).ln() * inv_n;
        // Fused softmax + cross-entropy: d loss / d logit = (p - onehot) / N.
        let mut seed = trace.final_probs.scaled(inv_n);
        seed.data_mut()[label] -= inv_n;
        backward_from_seed(net, &x, &trace, logits_layer, seed, Some(&mut sink));
    }
    Ok((loss, sink))
}

/// Mean cross-entropy loss over a dataset (no gradients).
pub fn ce_loss(net: &Network, data: &Dataset) -> Result<f64> {
    let mut loss = 0.0;
    for i in 0..data.len() {
        let trace = net.forward(&data.input(i)?)?;
        loss -= trace.final_probs.data()[data.labels()[i]].max(1e-300).ln();
    }
    Ok(loss / data.len() as f64)
}

/// Walks the layers from `seed_layer` down to the input, transforming the
/// cotangent. When `param_sink` is given, parameter gradients accumulate
/// into it along the way.
fn backward_from_seed(
    net: &Network,
    input: &Tensor,
    trace: &ActivationTrace,
    seed_layer: usize,
    seed: Tensor,
    mut param_sink: Option<&mut BTreeMap<String, Tensor>>,
) -> Tensor {
    let mut g = seed;
    for k in (0..=seed_layer).rev() {
        let layer_input = if k == 0 { input } else { &trace.per_layer[k - 1] };
        let layer_output = &trace.per_layer[k];
        if let Some(sink) = param_sink.as_deref_mut() {
            accumulate_param_grads(net, k, layer_input, &g, sink);
        }
        g = backward_layer(net, k, layer_input, layer_output, &g);
    }
    g
}

fn backward_layer(
    net: &Network,
    layer_index: usize,
    input: &Tensor,
    output: &Tensor,
    gout: &Tensor,
) -> Tensor {
    match &net.layers()[layer_index] {
        LayerSpec::Dense { weight, .. } => dense_backward_input(gout, net.param(weight)),
        LayerSpec::Conv2D { weight, stride, .. } => {
            conv_backward_input(input, gout, net.param(weight), *stride)
        }
        LayerSpec::ReLU => {
            // Subgradient at exactly zero is zero.
            let mut g = gout.clone();
            for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            }
            g
        }
        LayerSpec::MaxPool2D { window, stride } => {
            maxpool_backward(input, gout, *window, *stride)
        }
        LayerSpec::Flatten => gout
            .reshaped(input.shape().to_vec())
            .expect("flatten preserves volume"),
        LayerSpec::Softmax => {
            let s = output.data();
            let g = gout.data();
            let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
            Tensor::new(
                gout.shape().to_vec(),
                s.iter().zip(g).map(|(si, gi)| si * (gi - dot)).collect(),
            )
            .expect("softmax backward finite")
        }
    }
}

fn dense_backward_input(gout: &Tensor, weight: &Tensor) -> Tensor {
    let out_units = weight.shape()[0];
    let in_units = weight.shape()[1];
    let w = weight.data();
    let g = gout.data();
    let mut gin = vec![0.0; in_units];
    for o in 0..out_units {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        let row = &w[o * in_units..(o + 1) * in_units];
        for i in 0..in_units {
            gin[i] += row[i] * go;
        }
    }
    Tensor::new(vec![in_units], gin).expect("dense backward finite")
}

fn conv_backward_input(input: &Tensor, gout: &Tensor, weight: &Tensor, stride: usize) -> Tensor {
    let [in_ch, h, w] = *input.shape() else {
        unreachable!()
    };
    let [out_ch, _, kh, kw] = *weight.shape() else {
        unreachable!()
    };
    let [_, oh, ow] = *gout.shape() else {
        unreachable!()
    };
    let wt = weight.data();
    let g = gout.data();
    let mut gin = vec![0.0; in_ch * h * w];
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(o * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                for c in 0..in_ch {
                    let gbase = c * h * w;
                    let wbase = (o * in_ch + c) * kh * kw;
                    for ky in 0..kh {
                        let grow = gbase + (oy * stride + ky) * w + ox * stride;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            gin[grow + kx] += wt[wrow + kx] * go;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![in_ch, h, w], gin).expect("conv backward finite")
}

fn maxpool_backward(input: &Tensor, gout: &Tensor, window: usize, stride: usize) -> Tensor {
    let [c, h, w] = *input.shape() else {
        unreachable!()
    };
    let [_, oh, ow] = *gout.shape() else {
        unreachable!()
    };
    let x = input.data();
    let g = gout.data();
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                // Route to the first (row-major) maximal element on ties.
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                gin[best_idx] += g[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], gin).expect("pool backward finite")
}

fn accumulate_param_grads(
    net: &Network,
    layer_index: usize,
    input: &Tensor,
    gout: &Tensor,
    sink: &mut BTreeMap<String, Tensor>,
) {
    match &net.layers()[layer_index] {
        LayerSpec::Dense { weight, bias, .. } => {
            let out_units = net.param(weight).shape()[0];
            let in_units = net.param(weight).shape()[1];
            let dw = sink
                .entry(weight.clone())
                .or_insert_with(|| Tensor::zeros(vec![out_units, in_units]));
            let x = input.data();
            let g = gout.data();
            {
                let dwd = dw.data_mut();
                for o in 0..out_units {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut dwd[o * in_units..(o + 1) * in_units];
                    for i in 0..in_units {
                        row[i] += go * x[i];
                    }
                }
            }
            let db = sink
                .entry(bias.clone())
                .or_insert_with(|| Tensor::zeros(vec![out_units]));
            for (d, gv) in db.data_mut().iter_mut().zip(g) {
                *d += gv;
            }
        }
        LayerSpec::Conv2D {
            weight,
            bias,
            stride,
            ..
        } => {
            let wshape = net.param(weight).shape().to_vec();
            let [out_ch, in_ch, kh, kw] = wshape[..] else {
                unreachable!()
            };
            let [_, h, w] = *input.shape() else {
                unreachable!()
            };
            let [_, oh, ow] = *gout.shape() else {
                unreachable!()
            };
            let x = input.data();
            let g = gout.data();
            let dw = sink
                .entry(weight.clone())
                .or_insert_with(|| Tensor::zeros(wshape.clone()));
            {
                let dwd = dw.data_mut();
                for o in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(o * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..in_ch {
                                let xbase = c * h * w;
                                let wbase = (o * in_ch + c) * kh * kw;
                                for ky in 0..kh {
                                    let xrow = xbase + (oy * stride + ky) * w + ox * stride;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        dwd[wrow + kx] += go * x[xrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let db = sink
                .entry(bias.clone())
                .or_insert_with(|| Tensor::zeros(vec![out_ch]));
            let dbd = db.data_mut();
            for o in 0..out_ch {
                let mut acc = 0.0;
                for oy in 0..oh {
                    for ox in 0..ow {
                        acc += g[(o * oh + oy) * ow + ox];
                    }
                }
                dbd[o] += acc;
            }
        }
        _ => {}
    }
}
