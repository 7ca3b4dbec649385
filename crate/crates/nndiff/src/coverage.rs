//! Neuron coverage: which neurons a test set has activated.
//!
//! A neuron belongs to a Dense or Conv2D layer; ReLU/pool/flatten/softmax
//! transform those values rather than adding neurons of their own. Dense
//! layers contribute one neuron per unit, Conv2D layers one neuron per
//! output channel whose value is the mean over spatial positions. When a
//! ReLU immediately follows the layer, the neuron's value is read after it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{ActivationTrace, LayerSpec, Network};
use crate::tensor::Tensor;

/// Identifies one neuron: the owning Dense/Conv2D layer and the unit
/// (channel) index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronId {
    pub layer_index: usize,
    pub unit_index: usize,
}

/// Layers that own neurons, in network order.
pub fn coverable_layers(net: &Network, include_dense: bool) -> Vec<usize> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| match l {
            LayerSpec::Conv2D { .. } => true,
            LayerSpec::Dense { .. } => include_dense,
            _ => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Number of neurons owned by the given layer.
pub fn layer_neuron_count(net: &Network, layer_index: usize) -> Result<usize> {
    match &net.layers()[layer_index] {
        LayerSpec::Dense { out_units, .. } => Ok(*out_units),
        LayerSpec::Conv2D { out_channels, .. } => Ok(*out_channels),
        other => Err(Error::InvalidSelector(format!(
            "layer {layer_index} ({}) owns no neurons",
            other.kind_name()
        ))),
    }
}

/// All neurons of the network in canonical (layer, unit) order.
pub fn all_neurons(net: &Network, include_dense: bool) -> Vec<NeuronId> {
    let mut out = Vec::new();
    for layer_index in coverable_layers(net, include_dense) {
        let n = layer_neuron_count(net, layer_index).expect("coverable layer");
        out.extend((0..n).map(|unit_index| NeuronId {
            layer_index,
            unit_index,
        }));
    }
    out
}

pub fn validate_neuron(net: &Network, id: NeuronId) -> Result<()> {
    if id.layer_index >= net.layers().len() {
        return Err(Error::InvalidSelector(format!(
            "layer index {} out of range",
            id.layer_index
        )));
    }
    let count = layer_neuron_count(net, id.layer_index)?;
    if id.unit_index >= count {
        return Err(Error::InvalidSelector(format!(
            "unit {} out of range for layer {} ({} neurons)",
            id.unit_index, id.layer_index, count
        )));
    }
    Ok(())
}

/// The layer whose recorded output carries the neuron's value: the layer
/// itself, or the ReLU directly after it when present.
pub(crate) fn value_layer_index(net: &Network, layer_index: usize) -> usize {
    match net.layers().get(layer_index + 1) {
        Some(LayerSpec::ReLU) => layer_index + 1,
        _ => layer_index,
    }
}

/// Raw (unscaled) output value of one neuron for a recorded trace.
pub fn neuron_value(net: &Network, trace: &ActivationTrace, id: NeuronId) -> Result<f64> {
    validate_neuron(net, id)?;
    let out = &trace.per_layer[value_layer_index(net, id.layer_index)];
    match &net.layers()[id.layer_index] {
        LayerSpec::Dense { .. } => Ok(out.data()[id.unit_index]),
        LayerSpec::Conv2D { .. } => {
            let [_, h, w] = *out.shape() else {
                unreachable!("conv output is [C,H,W]")
            };
            let plane = &out.data()[id.unit_index * h * w..(id.unit_index + 1) * h * w];
            Ok(plane.iter().sum::<f64>() / plane.len() as f64)
        }
        _ => unreachable!("validated above"),
    }
}

/// Values of every neuron for one trace, in canonical order.
///
/// With `scale` set, each layer's values are min-max scaled to [0,1] per
/// input; a constant layer scales to all zeros.
pub fn neuron_outputs(
    net: &Network,
    trace: &ActivationTrace,
    scale: bool,
    include_dense: bool,
) -> Result<Vec<(NeuronId, f64)>> {
    if trace.per_layer.len() != net.layers().len() {
        return Err(Error::InvalidNetwork(
            "trace layer count does not match network".into(),
        ));
    }
    let mut out = Vec::new();
    for layer_index in coverable_layers(net, include_dense) {
        let count = layer_neuron_count(net, layer_index)?;
        let mut values = Vec::with_capacity(count);
        for unit_index in 0..count {
            values.push(neuron_value(
                net,
                trace,
                NeuronId {
                    layer_index,
                    unit_index,
                },
            )?);
        }
        if scale {
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                for v in &mut values {
                    *v = (*v - min) / (max - min);
                }
            } else {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out.extend(values.into_iter().enumerate().map(|(unit_index, v)| {
            (
                NeuronId {
                    layer_index,
                    unit_index,
                },
                v,
            )
        }));
    }
    Ok(out)
}

/// Tracks the set of neurons a model has activated across a test set.
///
/// `update` needs exclusive access; everything else is read-only. The
/// activated set only grows.
#[derive(Debug, Clone)]
pub struct CoverageTracker {
    model_id: String,
    threshold: f64,
    scale_per_layer: bool,
    include_dense: bool,
    neurons: Vec<NeuronId>,
    activated: Vec<bool>,
    activated_count: usize,
}

impl CoverageTracker {
    /// `include_dense = false` drops fully-connected layers from the
    /// coverable set (used by the 100%-coverage timing mode).
    pub fn new(
        net: &Network,
        threshold: f64,
        scale_per_layer: bool,
        include_dense: bool,
    ) -> Result<Self> {
        let neurons = all_neurons(net, include_dense);
        if neurons.is_empty() {
            return Err(Error::InvalidNetwork(format!(
                "network '{}' has no coverable neurons",
                net.model_id()
            )));
        }
        let n = neurons.len();
        Ok(Self {
            model_id: net.model_id().to_string(),
            threshold,
            scale_per_layer,
            include_dense,
            neurons,
            activated: vec![false; n],
            activated_count: 0,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn total(&self) -> usize {
        self.neurons.len()
    }

    pub fn activated_count(&self) -> usize {
        self.activated_count
    }

    pub fn is_activated(&self, id: NeuronId) -> bool {
        self.index_of(id).map(|i| self.activated[i]).unwrap_or(false)
    }

    fn index_of(&self, id: NeuronId) -> Option<usize> {
        self.neurons.binary_search(&id).ok()
    }

    /// Records every neuron whose (possibly scaled) output exceeds the
    /// threshold. Returns how many were newly activated. Idempotent.
    pub fn update(&mut self, net: &Network, trace: &ActivationTrace) -> Result<usize> {
        if net.model_id() != self.model_id {
            return Err(Error::InvalidNetwork(format!(
                "tracker for '{}' given trace from '{}'",
                self.model_id,
                net.model_id()
            )));
        }
        let values = neuron_outputs(net, trace, self.scale_per_layer, self.include_dense)?;
        let mut newly = 0;
        for (id, v) in values {
            if v > self.threshold {
                let i = self.index_of(id).expect("canonical neuron");
                if !self.activated[i] {
                    self.activated[i] = true;
                    self.activated_count += 1;
                    newly += 1;
                }
            }
        }
        Ok(newly)
    }

    /// Activated fraction: |activated| / total.
    pub fn ncov(&self) -> f64 {
        self.activated_count as f64 / self.neurons.len() as f64
    }

    /// Uniformly random inactivated neuron, or `None` at full coverage.
    pub fn select_inactive<R: Rng>(&self, rng: &mut R) -> Option<NeuronId> {
        let remaining = self.neurons.len() - self.activated_count;
        if remaining == 0 {
            return None;
        }
        let pick = rng.gen_range(0..remaining);
        self.neurons
            .iter()
            .zip(&self.activated)
            .filter(|(_, act)| !**act)
            .nth(pick)
            .map(|(id, _)| *id)
    }

    /// Uniformly random neuron regardless of activation state. Used when
    /// coverage is already full and the generator still needs a target.
    pub fn any_neuron<R: Rng>(&self, rng: &mut R) -> NeuronId {
        self.neurons[rng.gen_range(0..self.neurons.len())]
    }

    /// One coverage report record: model, threshold, counts, ratio.
    pub fn report_line(&self) -> String {
        format!(
            "{} t={} activated={} total={} ncov={:.4}",
            self.model_id,
            self.threshold,
            self.activated_count,
            self.total(),
            self.ncov()
        )
    }
}

/// Line-oriented coverage report, one record per model.
pub fn coverage_report(trackers: &[CoverageTracker]) -> String {
    let mut s = String::new();
    for t in trackers {
        s.push_str(&t.report_line());
        s.push('\n');
    }
    s
}

/// Activated-neuron counts for two inputs and their intersection, at raw
/// (unscaled) neuron values.
pub fn overlap(
    net: &Network,
    input_a: &Tensor,
    input_b: &Tensor,
    threshold: f64,
) -> Result<(usize, usize, usize)> {
    let trace_a = net.forward(input_a)?;
    let trace_b = net.forward(input_b)?;
    let va = neuron_outputs(net, &trace_a, false, true)?;
    let vb = neuron_outputs(net, &trace_b, false, true)?;
    let mut a = 0;
    let mut b = 0;
    let mut common = 0;
    for ((_, x), (_, y)) in va.iter().zip(&vb) {
        let xa = *x > threshold;
        let yb = *y > threshold;
        a += xa as usize;
        b += yb as usize;
        common += (xa && yb) as usize;
    }
    Ok((a, b, common))
}
