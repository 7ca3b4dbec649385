//! Small helpers shared by unit tests.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::{LayerSpec, Network};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stack of Dense layers (no activations). Each entry is (flat weights,
/// biases); in_units is inferred from the lengths.
pub fn dense_net(id: &str, layers: &[(Vec<f64>, Vec<f64>)]) -> Network {
    let mut params = BTreeMap::new();
    let mut specs = Vec::new();
    let mut in_units = layers[0].0.len() / layers[0].1.len();
    let input_shape = vec![in_units];
    for (i, (w, b)) in layers.iter().enumerate() {
        let out_units = b.len();
        assert_eq!(w.len(), out_units * in_units, "layer {i} weight size");
        let wname = format!("w{i}");
        let bname = format!("b{i}");
        params.insert(
            wname.clone(),
            Tensor::new(vec![out_units, in_units], w.clone()).unwrap(),
        );
        params.insert(bname.clone(), Tensor::new(vec![out_units], b.clone()).unwrap());
        specs.push(LayerSpec::Dense {
            in_units,
            out_units,
            weight: wname,
            bias: bname,
        });
        in_units = out_units;
    }
    Network::new(id, input_shape, specs, params).unwrap()
}
