//! Shared helpers for integration tests: random network generation and the
//! finite-difference gradient oracle. The oracle only uses the public
//! forward/evaluate surface, never the gradient code it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nndiff::autodiff::ScalarSelector;
use nndiff::dataset::Dataset;
use nndiff::network::{LayerSpec, Network};
use nndiff::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, -scale, scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// A random small network (2-4 layers, well under 200 parameters), cycling
/// through dense-only, conv, and conv+pool architectures, with and without
/// a softmax head.
pub fn random_net(rng: &mut ChaCha8Rng, id: &str) -> Network {
    let arch = rng.gen_range(0..4u32);
    let mut params = BTreeMap::new();
    let mut param = |params: &mut BTreeMap<String, Tensor>,
                     rng: &mut ChaCha8Rng,
                     name: &str,
                     shape: Vec<usize>,
                     scale: f64| {
        params.insert(name.to_string(), random_tensor(rng, shape, scale));
    };
    match arch {
        0 => {
            // dense -> relu -> dense -> softmax
            let (i, h, o) = (4, 5, 3);
            param(&mut params, rng, "w0", vec![h, i], 1.2);
            param(&mut params, rng, "b0", vec![h], 0.4);
            param(&mut params, rng, "w1", vec![o, h], 1.2);
            param(&mut params, rng, "b1", vec![o], 0.4);
            Network::new(
                id,
                vec![i],
                vec![
                    LayerSpec::Dense {
                        in_units: i,
                        out_units: h,
                        weight: "w0".into(),
                        bias: "b0".into(),
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Dense {
                        in_units: h,
                        out_units: o,
                        weight: "w1".into(),
                        bias: "b1".into(),
                    },
                    LayerSpec::Softmax,
                ],
                params,
            )
            .unwrap()
        }
        1 => {
            // dense -> relu -> dense (no softmax)
            let (i, h, o) = (3, 6, 2);
            param(&mut params, rng, "w0", vec![h, i], 1.0);
            param(&mut params, rng, "b0", vec![h], 0.5);
            param(&mut params, rng, "w1", vec![o, h], 1.0);
            param(&mut params, rng, "b1", vec![o], 0.5);
            Network::new(
                id,
                vec![i],
                vec![
                    LayerSpec::Dense {
                        in_units: i,
                        out_units: h,
                        weight: "w0".into(),
                        bias: "b0".into(),
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Dense {
                        in_units: h,
                        out_units: o,
                        weight: "w1".into(),
                        bias: "b1".into(),
                    },
                ],
                params,
            )
            .unwrap()
        }
        2 => {
            // conv -> relu -> flatten -> dense -> softmax on 1x5x5 input
            param(&mut params, rng, "k0", vec![2, 1, 3, 3], 0.8);
            param(&mut params, rng, "c0", vec![2], 0.3);
            param(&mut params, rng, "w1", vec![3, 18], 0.8);
            param(&mut params, rng, "b1", vec![3], 0.3);
            Network::new(
                id,
                vec![1, 5, 5],
                vec![
                    LayerSpec::Conv2D {
                        in_channels: 1,
                        out_channels: 2,
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        weight: "k0".into(),
                        bias: "c0".into(),
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        in_units: 18,
                        out_units: 3,
                        weight: "w1".into(),
                        bias: "b1".into(),
                    },
                    LayerSpec::Softmax,
                ],
                params,
            )
            .unwrap()
        }
        _ => {
            // conv -> relu -> maxpool -> flatten -> dense -> softmax on 1x6x6
            param(&mut params, rng, "k0", vec![2, 1, 3, 3], 0.8);
            param(&mut params, rng, "c0", vec![2], 0.3);
            param(&mut params, rng, "w1", vec![2, 8], 0.8);
            param(&mut params, rng, "b1", vec![2], 0.3);
            Network::new(
                id,
                vec![1, 6, 6],
                vec![
                    LayerSpec::Conv2D {
                        in_channels: 1,
                        out_channels: 2,
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        weight: "k0".into(),
                        bias: "c0".into(),
                    },
                    LayerSpec::ReLU,
                    LayerSpec::MaxPool2D { window: 2, stride: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        in_units: 8,
                        out_units: 2,
                        weight: "w1".into(),
                        bias: "b1".into(),
                    },
                    LayerSpec::Softmax,
                ],
                params,
            )
            .unwrap()
        }
    }
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(rng, 0.0, 1.0)).collect()).unwrap()
}

/// True when every ReLU input is at least `margin` from zero and every
/// maxpool window has a top-two gap of at least `margin`. Keeps
/// finite-difference probes on one smooth piece of the function.
pub fn away_from_kinks(net: &Network, x: &Tensor, margin: f64) -> bool {
    let trace = match net.forward(x) {
        Ok(t) => t,
        Err(_) => return false,
    };
    for (i, layer) in net.layers().iter().enumerate() {
        let input = if i == 0 { x } else { &trace.per_layer[i - 1] };
        match layer {
            LayerSpec::ReLU => {
                if input.data().iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let [c, h, w] = *input.shape() else { return false };
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut vals: Vec<f64> = Vec::new();
                            for ky in 0..*window {
                                for kx in 0..*window {
                                    vals.push(
                                        input.data()
                                            [ch * h * w + (oy * stride + ky) * w + ox * stride + kx],
                                    );
                                }
                            }
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            // A window pinned at zero by dead ReLUs is locally
                            // constant, not a kink; the ReLU margin check above
                            // already guarantees those zeros are firmly dead.
                            let all_dead = vals[0] == 0.0;
                            if vals.len() > 1 && vals[0] - vals[1] < margin && !all_dead {
                                return false;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Central finite differences of a scalar selector w.r.t. the input.
pub fn fd_input_gradient(net: &Network, sel: &ScalarSelector, x: &Tensor, h: f64) -> Tensor {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let eval = |delta: f64| -> f64 {
            let mut data = x.data().to_vec();
            data[i] += delta;
            let xi = Tensor::new(x.shape().to_vec(), data).unwrap();
            let trace = net.forward(&xi).unwrap();
            sel.value(net, &trace).unwrap()
        };
        grad[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Central finite differences of the mean cross-entropy loss w.r.t. one
/// named parameter, rebuilding the network for each probe.
pub fn fd_param_gradient(net: &Network, data: &Dataset, name: &str, h: f64) -> Tensor {
    let base = &net.params()[name];
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let eval = |delta: f64| -> f64 {
            let mut params = net.params().clone();
            let mut vals = base.data().to_vec();
            vals[i] += delta;
            params.insert(name.to_string(), Tensor::new(base.shape().to_vec(), vals).unwrap());
            let probe = Network::new(
                net.model_id(),
                net.input_shape().to_vec(),
                net.layers().to_vec(),
                params,
            )
            .unwrap();
            nndiff::autodiff::ce_loss(&probe, data).unwrap()
        };
        grad[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    Tensor::new(base.shape().to_vec(), grad).unwrap()
}

/// Relative error with a magnitude floor: entries whose true scale is below
/// the floor are compared at the floor, which keeps finite-difference noise
/// (~1e-12 absolute) from inflating ratios on near-zero gradients.
pub fn max_rel_err(analytic: &Tensor, reference: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// A labeled batch whose samples keep the network away from kinks.
pub fn kink_free_batch(
    net: &Network,
    rng: &mut ChaCha8Rng,
    n: usize,
    margin: f64,
) -> Dataset {
    let shape = net.input_shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < n {
        let x = random_input(rng, &shape);
        if away_from_kinks(net, &x, margin) {
            data.extend_from_slice(x.data());
            labels.push(rng.gen_range(0..net.num_classes()));
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(&shape);
    Dataset::new(Tensor::new(full_shape, data).unwrap(), labels).unwrap()
}

/// Picks a random scalar selector valid for the network.
pub fn random_selector(net: &Network, rng: &mut ChaCha8Rng) -> ScalarSelector {
    let class = rng.gen_range(0..net.num_classes());
    match rng.gen_range(0..4u32) {
        0 if net.has_softmax() => ScalarSelector::ClassProb(class),
        1 => ScalarSelector::ClassLogit(class),
        2 => {
            let neurons = nndiff::coverage::all_neurons(net, true);
            ScalarSelector::NeuronOutput(neurons[rng.gen_range(0..neurons.len())])
        }
        _ => ScalarSelector::WeightedSum(vec![
            (ScalarSelector::ClassLogit(class), uniform(rng, -2.0, 2.0)),
            (
                ScalarSelector::ClassLogit(rng.gen_range(0..net.num_classes())),
                uniform(rng, -2.0, 2.0),
            ),
        ]),
    }
}
