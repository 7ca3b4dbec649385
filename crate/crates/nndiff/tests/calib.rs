use std::time::Instant;

use nndiff::applications::diversity;
use nndiff::coverage::CoverageTracker;
use nndiff::generator::{generate, GenerationConfig};
use nndiff::synth::synth_digits;
use nndiff::trainer::{evaluate, make_variants, train, ArchLayer, TrainConfig, VariantAxis};
use nndiff::{Network, Tensor};

const ARCH: &str = "conv:4x5,relu,pool:2,conv:8x5,relu,pool:2,flatten,dense:10,softmax";

fn lenet_cfg(id: &str, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        model_id: id.into(),
        architecture: ArchLayer::parse_list(ARCH).unwrap(),
        epochs,
        batch_size: 32,
        learning_rate: 0.1,
        rng_seed: seed,
        sample_limit: None,
    }
}

#[test]
fn calibrate_criteria() {
    let train_data = synth_digits(5000, 1000, 0.05).unwrap();
    let test_data = synth_digits(1000, 2000, 0.05).unwrap();
    let nets: Vec<Network> = [42u64, 43, 44]
        .iter()
        .map(|&s| train(&lenet_cfg(&format!("m{s}"), s, 3), &train_data).unwrap())
        .collect();
    let refs: Vec<&Network> = nets.iter().collect();
    let seeds: Vec<Tensor> = (0..60).map(|i| test_data.input(i).unwrap()).collect();

    // --- criterion 6: lambda2 diversity, 3 reps
    for rep in 0..3u64 {
        let mut div = Vec::new();
        for lambda2 in [0.0, 1.0] {
            let cfg = GenerationConfig {
                lambda2,
                step_size: 10.0,
                max_iters_per_seed: 300,
                max_cycles: 1,
                desired_coverage: 1.0,
                rng_seed: 100 + rep,
                ..Default::default()
            };
            let out = generate(&refs, &seeds, &cfg).unwrap();
            let d = diversity(&out.records, &seeds).unwrap();
            div.push((lambda2, d, out.records.len()));
        }
        eprintln!("rep {rep}: l2=0 -> div {:.2} ({} recs); l2=1 -> div {:.2} ({} recs)",
            div[0].1, div[0].2, div[1].1, div[1].2);
    }

    // --- criterion 5: coverage superiority at t=0.25 scaled
    for run in 0..3u64 {
        let cfg = GenerationConfig {
            step_size: 10.0,
            max_iters_per_seed: 300,
            max_cycles: 1,
            rng_seed: 200 + run,
            ..Default::default()
        };
        let out = generate(&refs, &seeds, &cfg).unwrap();
        let n = out.records.len();
        for (k, net) in refs.iter().enumerate() {
            let mut gen_tracker = CoverageTracker::new(net, 0.25, true, true).unwrap();
            for rec in &out.records {
                gen_tracker.update(net, &net.forward(&rec.input).unwrap()).unwrap();
            }
            let mut rand_tracker = CoverageTracker::new(net, 0.25, true, true).unwrap();
            for i in 0..n {
                let x = test_data.input(900 - i).unwrap();
                rand_tracker.update(net, &net.forward(&x).unwrap()).unwrap();
            }
            eprintln!("run {run} model {k}: gen ncov {:.4} vs random {:.4} ({} inputs)",
                gen_tracker.ncov(), rand_tracker.ncov(), n);
        }
    }

    // --- criterion 7: epochs-variant trend
    let small_train = synth_digits(1500, 3000, 0.05).unwrap();
    let base_cfg = lenet_cfg("base", 7, 1);
    let mut cfg2 = base_cfg.clone();
    cfg2.sample_limit = Some(1500);
    let t = Instant::now();
    let variants = make_variants(&cfg2, &small_train, VariantAxis::Epochs, &[0, 5, 10, 20, 40]).unwrap();
    eprintln!("variant training: {:?}", t.elapsed());
    let base = train(&cfg2, &small_train).unwrap();
    let (_, bacc) = evaluate(&base, &test_data).unwrap();
    eprintln!("base acc {bacc:.4}");
    let gseeds: Vec<Tensor> = (100..140).map(|i| test_data.input(i).unwrap()).collect();
    for (delta, variant) in [0usize, 5, 10, 20, 40].iter().zip(&variants) {
        let (_, vacc) = evaluate(variant, &test_data).unwrap();
        let cfg = GenerationConfig {
            step_size: 10.0,
            max_iters_per_seed: 1000,
            max_cycles: 1,
            rng_seed: 500,
            ..Default::default()
        };
        let t = Instant::now();
        let pair: Vec<&Network> = vec![&base, variant];
        let out = generate(&pair, &gseeds, &cfg).unwrap();
        // mean iterations with timeouts counted at 1000
        let mut iters: Vec<f64> = out.records.iter().map(|r| r.iterations_used as f64).collect();
        for _ in 0..out.stats.timeouts { iters.push(1000.0); }
        let mean = iters.iter().sum::<f64>() / iters.len().max(1) as f64;
        eprintln!("delta {delta}: vacc {vacc:.4}, {} recs, {} timeouts, {} pre-exist, mean iters {mean:.1}, took {:?}",
            out.records.len(), out.stats.timeouts, out.stats.pre_existing.len(), t.elapsed());
    }
}
