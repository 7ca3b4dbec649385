//! The scalar objectives driving test generation.
//!
//! `obj1` rewards differential behavior: raise every network's confidence
//! in the seed class except one deviation target, whose confidence is
//! pushed down with weight `lambda1`. `obj2` rewards coverage: raise the
//! raw output of one not-yet-activated neuron per network. `joint` blends
//! them with weight `lambda2`. Values use raw (unscaled) neuron outputs;
//! min-max coverage scaling is not differentiable at its extremes and
//! stays on the measurement side.

use crate::autodiff::{input_gradient_traced, ScalarSelector};
use crate::coverage::NeuronId;
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, Network};
use crate::tensor::Tensor;

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct JointConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::InvalidConfig(
                "lambda1/lambda2 must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A scalar objective value and its gradient w.r.t. the input.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: Tensor,
}

fn check_nets(nets: &[&Network]) -> Result<()> {
    if nets.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two networks, got {}",
            nets.len()
        )));
    }
    for net in &nets[1..] {
        if !net.compatible_with(nets[0]) {
            return Err(Error::InvalidNetwork(format!(
                "networks '{}' and '{}' disagree on input shape or class count",
                nets[0].model_id(),
                net.model_id()
            )));
        }
    }
    Ok(())
}

/// Differential objective: sum of class-`c` confidences over all networks
/// except `j`, minus `lambda1` times network `j`'s confidence.
pub fn obj1(nets: &[&Network], j: usize, c: usize, x: &Tensor, lambda1: f64) -> Result<Objective> {
    let traces = forward_all(nets, x)?;
    obj1_traced(nets, &traces, j, c, x, lambda1)
}

pub(crate) fn obj1_traced(
    nets: &[&Network],
    traces: &[ActivationTrace],
    j: usize,
    c: usize,
    x: &Tensor,
    lambda1: f64,
) -> Result<Objective> {
    check_nets(nets)?;
    if j >= nets.len() {
        return Err(Error::InvalidConfig(format!("deviant index {j} out of range")));
    }
    let mut value = 0.0;
    let mut gradient = Tensor::zeros(x.shape().to_vec());
    for (k, net) in nets.iter().enumerate() {
        let sel = ScalarSelector::ClassProb(c);
        sel.validate(net)?;
        let coef = if k == j { -lambda1 } else { 1.0 };
        value += coef * sel.value(net, &traces[k])?;
        let g = input_gradient_traced(net, &traces[k], x, &sel)?;
        gradient = gradient.add_scaled(&g, coef)?;
    }
    Ok(Objective { value, gradient })
}

/// Coverage objective: sum of the raw outputs of one target neuron per
/// network.
pub fn obj2(targets: &[(&Network, NeuronId)], x: &Tensor) -> Result<Objective> {
    let nets: Vec<&Network> = targets.iter().map(|(n, _)| *n).collect();
    let traces = forward_all(&nets, x)?;
    let ids: Vec<NeuronId> = targets.iter().map(|(_, id)| *id).collect();
    obj2_traced(&nets, &traces, &ids, x)
}

pub(crate) fn obj2_traced(
    nets: &[&Network],
    traces: &[ActivationTrace],
    targets: &[NeuronId],
    x: &Tensor,
) -> Result<Objective> {
    if nets.len() != targets.len() {
        return Err(Error::InvalidConfig(
            "one target neuron per network required".into(),
        ));
    }
    let mut value = 0.0;
    let mut gradient = Tensor::zeros(x.shape().to_vec());
    for ((net, id), trace) in nets.iter().zip(targets).zip(traces) {
        let sel = ScalarSelector::NeuronOutput(*id);
        sel.validate(net)?;
        value += sel.value(net, trace)?;
        let g = input_gradient_traced(net, trace, x, &sel)?;
        gradient = gradient.add_scaled(&g, 1.0)?;
    }
    Ok(Objective { value, gradient })
}

/// Joint objective: `obj1 + lambda2 * obj2`, value and gradient alike.
/// Composes the two sub-objectives exactly.
pub fn joint(
    nets: &[&Network],
    j: usize,
    c: usize,
    targets: &[NeuronId],
    x: &Tensor,
    cfg: JointConfig,
) -> Result<Objective> {
    let traces = forward_all(nets, x)?;
    joint_traced(nets, &traces, j, c, targets, x, cfg)
}

pub(crate) fn joint_traced(
    nets: &[&Network],
    traces: &[ActivationTrace],
    j: usize,
    c: usize,
    targets: &[NeuronId],
    x: &Tensor,
    cfg: JointConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let o1 = obj1_traced(nets, traces, j, c, x, cfg.lambda1)?;
    if cfg.lambda2 == 0.0 {
        return Ok(o1);
    }
    let o2 = obj2_traced(nets, traces, targets, x)?;
    Ok(Objective {
        value: o1.value + cfg.lambda2 * o2.value,
        gradient: o1.gradient.add_scaled(&o2.gradient, cfg.lambda2)?,
    })
}

pub(crate) fn forward_all(nets: &[&Network], x: &Tensor) -> Result<Vec<ActivationTrace>> {
    nets.iter().map(|net| net.forward(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Network};
    use std::collections::BTreeMap;

    /// dense(1->2) + softmax with chosen logit weights.
    fn softmax_net(id: &str, w: [f64; 2], b: [f64; 2]) -> Network {
        let mut params = BTreeMap::new();
        params.insert("w".into(), Tensor::new(vec![2, 1], w.to_vec()).unwrap());
        params.insert("b".into(), Tensor::new(vec![2], b.to_vec()).unwrap());
        Network::new(
            id,
            vec![1],
            vec![
                LayerSpec::Dense {
                    in_units: 1,
                    out_units: 2,
                    weight: "w".into(),
                    bias: "b".into(),
                },
                LayerSpec::Softmax,
            ],
            params,
        )
        .unwrap()
    }

    /// Bias-only net hitting the exact class-0 probability `p`.
    fn fixed_prob_net(id: &str, p: f64) -> Network {
        let logit = (p / (1.0 - p)).ln();
        softmax_net(id, [0.0, 0.0], [logit, 0.0])
    }

    #[test]
    fn obj1_direct_arithmetic() {
        // F_0(x)[c] = 0.6, F_1(x)[c] = 0.8, j = 1, lambda1 = 1 -> -0.2.
        let a = fixed_prob_net("a", 0.6);
        let b = fixed_prob_net("b", 0.8);
        let x = Tensor::new(vec![1], vec![0.3]).unwrap();
        let o = obj1(&[&a, &b], 1, 0, &x, 1.0).unwrap();
        assert!((o.value - (0.6 - 0.8)).abs() < 1e-12);
    }

    #[test]
    fn obj1_lambda_zero_sums_others() {
        let a = fixed_prob_net("a", 0.6);
        let b = fixed_prob_net("b", 0.8);
        let c = fixed_prob_net("c", 0.3);
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let o = obj1(&[&a, &b, &c], 1, 0, &x, 0.0).unwrap();
        assert!((o.value - (0.6 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn obj1_needs_two_networks() {
        let a = fixed_prob_net("a", 0.6);
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(obj1(&[&a], 0, 0, &x, 1.0).is_err());
    }

    #[test]
    fn obj1_bounded_for_probabilities() {
        let nets = [
            fixed_prob_net("a", 0.11),
            fixed_prob_net("b", 0.52),
            fixed_prob_net("c", 0.93),
        ];
        let refs: Vec<&Network> = nets.iter().collect();
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        for lambda1 in [0.0, 1.0, 2.5] {
            for j in 0..3 {
                let o = obj1(&refs, j, 0, &x, lambda1).unwrap();
                assert!(o.value >= -lambda1 - 1e-12);
                assert!(o.value <= (refs.len() - 1) as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn obj2_linear_unit_gradient_is_weight() {
        use crate::testutil::dense_net;
        let net = dense_net("lin", &[(vec![1.5, -2.0], vec![0.0])]);
        let x = Tensor::new(vec![2], vec![0.2, 0.4]).unwrap();
        let id = NeuronId {
            layer_index: 0,
            unit_index: 0,
        };
        let o = obj2(&[(&net, id)], &x).unwrap();
        assert_eq!(o.gradient.data(), &[1.5, -2.0]);
        assert!((o.value - (1.5 * 0.2 - 2.0 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn obj2_two_targets_additive() {
        use crate::testutil::dense_net;
        let a = dense_net("a", &[(vec![1.0, 2.0], vec![0.1])]);
        let b = dense_net("b", &[(vec![-0.5, 0.25], vec![0.2])]);
        let x = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap();
        let id = NeuronId {
            layer_index: 0,
            unit_index: 0,
        };
        let oa = obj2(&[(&a, id)], &x).unwrap();
        let ob = obj2(&[(&b, id)], &x).unwrap();
        let both = obj2(&[(&a, id), (&b, id)], &x).unwrap();
        assert!((both.value - (oa.value + ob.value)).abs() < 1e-12);
    }

    #[test]
    fn joint_composes_exactly() {
        let a = fixed_prob_net("a", 0.6);
        let b = fixed_prob_net("b", 0.8);
        let x = Tensor::new(vec![1], vec![0.1]).unwrap();
        let targets = [
            NeuronId {
                layer_index: 0,
                unit_index: 0,
            },
            NeuronId {
                layer_index: 0,
                unit_index: 0,
            },
        ];
        let cfg = JointConfig {
            lambda1: 1.0,
            lambda2: 0.7,
        };
        let o1 = obj1(&[&a, &b], 1, 0, &x, 1.0).unwrap();
        let o2 = obj2(&[(&a, targets[0]), (&b, targets[1])], &x).unwrap();
        let j = joint(&[&a, &b], 1, 0, &targets, &x, cfg).unwrap();
        assert_eq!(j.value, o1.value + 0.7 * o2.value);
        let manual = o1.gradient.add_scaled(&o2.gradient, 0.7).unwrap();
        assert_eq!(j.gradient.data(), manual.data());
    }

    #[test]
    fn joint_lambda2_zero_equals_obj1() {
        let a = fixed_prob_net("a", 0.4);
        let b = fixed_prob_net("b", 0.7);
        let x = Tensor::new(vec![1], vec![0.1]).unwrap();
        let targets = [
            NeuronId {
                layer_index: 0,
                unit_index: 0,
            };
            2
        ];
        let cfg = JointConfig {
            lambda1: 2.0,
            lambda2: 0.0,
        };
        let o1 = obj1(&[&a, &b], 0, 0, &x, 2.0).unwrap();
        let j = joint(&[&a, &b], 0, 0, &targets, &x, cfg).unwrap();
        assert_eq!(j.value, o1.value);
        assert_eq!(j.gradient.data(), o1.gradient.data());
    }

    #[test]
    fn joint_value_arithmetic() {
        // obj1 = -0.2, obj2 = 0.9, lambda2 = 1 -> 0.7.
        let o1 = -0.2f64;
        let o2 = 0.9f64;
        assert!((o1 + 1.0 * o2 - 0.7).abs() < 1e-15);
    }
}
