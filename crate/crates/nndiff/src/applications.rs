//! Downstream uses of generated tests: majority-vote labeling, retraining
//! augmentation, training-data pollution detection, and input diversity.

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::generator::{self, DifferenceRecord, GenerationConfig};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig};

/// The class most networks predict for `x`. Ties break toward the class
/// with the highest summed confidence, then the lowest class index.
pub fn majority_label(nets: &[&Network], x: &Tensor) -> Result<usize> {
    if nets.len() < 2 {
        return Err(Error::InvalidConfig("need at least two networks".into()));
    }
    let predictions = generator::predictions_of(nets, x)?;
    let classes = nets[0].num_classes();
    let mut votes = vec![0usize; classes];
    let mut confidence = vec![0.0f64; classes];
    for p in &predictions {
        votes[p.class] += 1;
        confidence[p.class] += p.confidence;
    }
    let mut best = 0usize;
    for c in 1..classes {
        let better = votes[c] > votes[best]
            || (votes[c] == votes[best] && confidence[c] > confidence[best]);
        if better {
            best = c;
        }
    }
    Ok(best)
}

/// Accuracy movements from retraining with extra labeled inputs.
#[derive(Debug, Clone, Serialize)]
pub struct RetrainReport {
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub extra_before: f64,
    pub extra_after: f64,
}

/// Continues training `net` on `trainset` plus the `extra` pool for the
/// given number of epochs (0 epochs returns the network unchanged).
/// Accuracy is reported on `heldout` and on the extra pool, before and
/// after.
pub fn augment_retrain(
    net: &Network,
    cfg: &TrainConfig,
    trainset: &Dataset,
    extra: &[(Tensor, usize)],
    epochs: usize,
    heldout: &Dataset,
) -> Result<(Network, RetrainReport)> {
    if extra.is_empty() {
        return Err(Error::InvalidConfig("extra pool is empty".into()));
    }
    let extra_set = dataset_from_pairs(extra)?;
    let (_, heldout_before) = trainer::evaluate(net, heldout)?;
    let (_, extra_before) = trainer::evaluate(net, &extra_set)?;
    let retrained = if epochs == 0 {
        net.clone()
    } else {
        let augmented = trainset.extended(extra)?;
        trainer::continue_training(
            net,
            &augmented,
            epochs,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.rng_seed ^ 0x5EED_5EED,
        )?
    };
    let (_, heldout_after) = trainer::evaluate(&retrained, heldout)?;
    let (_, extra_after) = trainer::evaluate(&retrained, &extra_set)?;
    Ok((
        retrained,
        RetrainReport {
            heldout_before,
            heldout_after,
            extra_before,
            extra_after,
        },
    ))
}

/// Builds a dataset from labeled tensors (all shapes must match).
pub fn dataset_from_pairs(pairs: &[(Tensor, usize)]) -> Result<Dataset> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no samples".into()));
    }
    let sample_shape = pairs[0].0.shape().to_vec();
    let mut data = Vec::with_capacity(pairs.len() * pairs[0].0.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (x, label) in pairs {
        x.check_shape(&sample_shape)?;
        data.extend_from_slice(x.data());
        labels.push(*label);
    }
    let mut shape = vec![pairs.len()];
    shape.extend(sample_shape);
    Dataset::new(Tensor::new(shape, data)?, labels)
}

/// A suspected polluted training sample: its index and the L1 distance from
/// the difference-inducing input that pointed at it.
#[derive(Debug, Clone, Serialize)]
pub struct Suspect {
    pub train_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PollutionReport {
    pub suspects: Vec<Suspect>,
    pub differences_found: usize,
    /// Set when ground-truth pollution flags were supplied.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Finds training samples implicated by the behavioral differences between
/// a clean and a suspect model.
///
/// Difference evidence is gathered with the generator using the training
/// inputs as seeds; seeds the two models already disagree on count as
/// evidence too (a cleanly learned polluted label *is* such a
/// disagreement). Every difference-inducing input maps to its nearest
/// training sample by L1 distance.
pub fn detect_pollution(
    clean_net: &Network,
    polluted_net: &Network,
    trainset: &Dataset,
    gen_cfg: &GenerationConfig,
    ground_truth: Option<&[bool]>,
) -> Result<PollutionReport> {
    let seeds = trainset.input_tensors()?;
    let nets = [clean_net, polluted_net];
    let outcome = generator::generate(&nets, &seeds, gen_cfg)?;

    let mut evidence: Vec<Tensor> = Vec::new();
    for idx in &outcome.stats.pre_existing {
        evidence.push(trainset.input(*idx)?);
    }
    for record in &outcome.records {
        evidence.push(record.input.clone());
    }

    let mut best: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for x in &evidence {
        let (idx, dist) = nearest_training_sample(trainset, x)?;
        let entry = best.entry(idx).or_insert(dist);
        if dist < *entry {
            *entry = dist;
        }
    }
    let suspects: Vec<Suspect> = best
        .into_iter()
        .map(|(train_index, distance)| Suspect {
            train_index,
            distance,
        })
        .collect();

    let (precision, recall) = match ground_truth {
        None => (None, None),
        Some(flags) => {
            if flags.len() != trainset.len() {
                return Err(Error::InvalidConfig(
                    "ground-truth flags length does not match training set".into(),
                ));
            }
            let hit = suspects
                .iter()
                .filter(|s| flags[s.train_index])
                .count() as f64;
            let total_polluted = flags.iter().filter(|&&f| f).count() as f64;
            let precision = if suspects.is_empty() {
                None
            } else {
                Some(hit / suspects.len() as f64)
            };
            let recall = if total_polluted == 0.0 {
                None
            } else {
                Some(hit / total_polluted)
            };
            (precision, recall)
        }
    };

    Ok(PollutionReport {
        suspects,
        differences_found: evidence.len(),
        precision,
        recall,
    })
}

/// Index and L1 distance of the training sample closest to `x`.
pub fn nearest_training_sample(trainset: &Dataset, x: &Tensor) -> Result<(usize, f64)> {
    if trainset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut best = (0usize, f64::INFINITY);
    for i in 0..trainset.len() {
        let d = trainset.input(i)?.l1_distance(x)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Mean L1 distance between each generated input and its seed.
pub fn diversity(records: &[DifferenceRecord], seeds: &[Tensor]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records to measure".into()));
    }
    let mut total = 0.0;
    for record in records {
        let seed = seeds.get(record.seed_index).ok_or_else(|| {
            Error::InvalidConfig(format!("record references missing seed {}", record.seed_index))
        })?;
        total += record.input.l1_distance(seed)?;
    }
    Ok(total / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use std::collections::BTreeMap;

    fn fixed_net(id: &str, logits: Vec<f64>) -> Network {
        let classes = logits.len();
        let mut params = BTreeMap::new();
        params.insert(
            "w".into(),
            Tensor::zeros(vec![classes, 1]),
        );
        params.insert("b".into(), Tensor::new(vec![classes], logits).unwrap());
        Network::new(
            id,
            vec![1],
            vec![
                LayerSpec::Dense {
                    in_units: 1,
                    out_units: classes,
                    weight: "w".into(),
                    bias: "b".into(),
                },
                LayerSpec::Softmax,
            ],
            params,
        )
        .unwrap()
    }

    #[test]
    fn majority_vote_basic() {
        // classes [4,4,9] -> 4 (10-class nets with peaked logits).
        let mut l4 = vec![0.0; 10];
        l4[4] = 5.0;
        let mut l9 = vec![0.0; 10];
        l9[9] = 5.0;
        let a = fixed_net("a", l4.clone());
        let b = fixed_net("b", l4);
        let c = fixed_net("c", l9);
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert_eq!(majority_label(&[&a, &b, &c], &x).unwrap(), 4);
    }

    #[test]
    fn majority_tie_breaks_by_confidence() {
        // classes [2,7], confidences 0.9 vs 0.6 -> 2.
        let logit_for = |p: f64| (p / (1.0 - p)).ln();
        let mut l2 = vec![0.0; 10];
        l2[2] = 10.0 + logit_for(0.9); // makes class 2 prob ~0.9 against 9 others
        let mut l7 = vec![0.0; 10];
        l7[7] = 10.0 + logit_for(0.6);
        let a = fixed_net("a", l2);
        let b = fixed_net("b", l7);
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        let label = majority_label(&[&a, &b], &x).unwrap();
        let pa = a.predict(&x).unwrap();
        let pb = b.predict(&x).unwrap();
        assert!(pa.1.data()[2] > pb.1.data()[7]);
        assert_eq!(label, 2);
    }

    #[test]
    fn majority_invariant_under_permutation() {
        let mut l1 = vec![0.0; 4];
        l1[1] = 3.0;
        let mut l3 = vec![0.0; 4];
        l3[3] = 4.0;
        let a = fixed_net("a", l1.clone());
        let b = fixed_net("b", l1);
        let c = fixed_net("c", l3);
        let x = Tensor::new(vec![1], vec![0.1]).unwrap();
        let orders: [[&Network; 3]; 3] = [[&a, &b, &c], [&c, &a, &b], [&b, &c, &a]];
        let labels: Vec<usize> = orders
            .iter()
            .map(|o| majority_label(o, &x).unwrap())
            .collect();
        assert!(labels.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn nearest_sample_of_training_point_is_itself() {
        let data = Dataset::new(
            Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.5, 0.6, 0.9, 0.1]).unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let x = data.input(1).unwrap();
        let (idx, dist) = nearest_training_sample(&data, &x).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn pollution_on_identical_networks_is_empty() {
        let mut l = vec![0.0; 3];
        l[1] = 3.0;
        let a = fixed_net("same", l.clone());
        let b = fixed_net("same", l);
        let data = Dataset::new(
            Tensor::new(vec![2, 1], vec![0.2, 0.8]).unwrap(),
            vec![1, 1],
        )
        .unwrap();
        let cfg = GenerationConfig {
            max_iters_per_seed: 5,
            max_cycles: 1,
            ..Default::default()
        };
        let report = detect_pollution(&a, &b, &data, &cfg, None).unwrap();
        assert!(report.suspects.is_empty());
        assert_eq!(report.differences_found, 0);
    }

    #[test]
    fn diversity_arithmetic() {
        let seeds = vec![Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()];
        let record = |data: Vec<f64>| DifferenceRecord {
            seed_index: 0,
            input: Tensor::new(vec![2], data).unwrap(),
            predictions: vec![],
            iterations_used: 1,
            deviant_model: "m".into(),
            constraint: "none".into(),
        };
        // Identical to seed: contributes 0.
        let records = vec![record(vec![0.5, 0.5])];
        assert_eq!(diversity(&records, &seeds).unwrap(), 0.0);
        // Single entry changed by 0.5: contributes 0.5.
        let records = vec![record(vec![1.0, 0.5])];
        assert_eq!(diversity(&records, &seeds).unwrap(), 0.5);
        assert!(diversity(&[], &seeds).is_err());
    }
}
