//! The test-generation loop: cycle seeds, ascend the joint objective under
//! a domain constraint, and harvest inputs the networks disagree on.
//!
//! Per seed: pick one network to push away from the consensus class, then
//! repeatedly compute the joint gradient (differential term plus one
//! uncovered target neuron per network), constrain it, step, clamp, and
//! check for disagreement. Coverage trackers are updated with each newly
//! found difference-inducing input. Seeds the networks already disagree on
//! are logged and skipped, not ascended. The outer loop stops when every
//! model's coverage reaches the target or after `max_cycles` passes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constraints::ConstraintSpec;
use crate::coverage::{self, CoverageTracker, NeuronId};
use crate::dataset;
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, Network};
use crate::objectives::{forward_all, joint_traced, JointConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub step_size: f64,
    /// Neuron activation threshold for coverage tracking.
    pub threshold: f64,
    /// Target minimum coverage across models; the run stops once reached.
    pub desired_coverage: f64,
    pub max_iters_per_seed: usize,
    pub max_cycles: usize,
    pub constraint: ConstraintSpec,
    pub rng_seed: u64,
    /// Min-max scale neuron outputs per layer before thresholding.
    pub scale_outputs: bool,
    /// Count fully-connected layers toward coverage (turn off for the
    /// 100%-coverage timing experiment).
    pub include_dense_coverage: bool,
    /// Worker threads. 1 is the determinism reference; more workers keep
    /// record validity but not cross-run ordering of tracker updates.
    pub threads: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            step_size: 10.0,
            threshold: 0.0,
            desired_coverage: 1.0,
            max_iters_per_seed: 1000,
            max_cycles: 10,
            constraint: ConstraintSpec::Unconstrained,
            rng_seed: 0,
            scale_outputs: false,
            include_dense_coverage: true,
            threads: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("step", self.step_size),
            ("threshold", self.threshold),
            ("coverage_target", self.desired_coverage),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite")));
            }
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidConfig("step must be positive".into()));
        }
        if self.max_iters_per_seed < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.desired_coverage) {
            return Err(Error::InvalidConfig(
                "coverage_target must lie in [0,1]".into(),
            ));
        }
        if self.threads < 1 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One model's verdict on an input.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub model_id: String,
    pub class: usize,
    pub confidence: f64,
}

/// A generated difference-inducing input with its provenance.
#[derive(Debug, Clone)]
pub struct DifferenceRecord {
    pub seed_index: usize,
    pub input: Tensor,
    pub predictions: Vec<Prediction>,
    pub iterations_used: usize,
    pub deviant_model: String,
    pub constraint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationStats {
    /// Seed visits that ran ascent (agreeing seeds).
    pub seeds_processed: usize,
    /// Seed indices skipped because the networks already disagreed.
    pub pre_existing: Vec<usize>,
    pub timeouts: usize,
    /// (seed_index, iterations) per ascent, in completion order.
    pub per_seed_iterations: Vec<(usize, usize)>,
    pub mean_iterations_to_difference: Option<f64>,
    pub first_difference_iterations: Option<usize>,
    pub cycles_completed: usize,
    pub coverage_reached: bool,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct GenerationOutcome {
    pub records: Vec<DifferenceRecord>,
    pub trackers: Vec<CoverageTracker>,
    pub stats: GenerationStats,
}

/// Index of a network whose class differs from at least one other, if any.
/// The deviant is the one disagreeing with the most peers; ties go to the
/// lowest index.
pub fn check_difference(nets: &[&Network], x: &Tensor) -> Result<Option<usize>> {
    if nets.len() < 2 {
        return Err(Error::InvalidConfig("need at least two networks".into()));
    }
    let mut classes = Vec::with_capacity(nets.len());
    for net in nets {
        classes.push(net.predict(x)?.0);
    }
    Ok(deviant_index(&classes))
}

fn deviant_index(classes: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None; // (disagreements, index)
    for (i, c) in classes.iter().enumerate() {
        let disagreements = classes.iter().filter(|&&o| o != *c).count();
        if disagreements > 0 && best.map_or(true, |(d, _)| disagreements > d) {
            best = Some((disagreements, i));
        }
    }
    best.map(|(_, i)| i)
}

/// All models' predictions for one input.
pub fn predictions_of(nets: &[&Network], x: &Tensor) -> Result<Vec<Prediction>> {
    nets.iter()
        .map(|net| {
            let (class, probs) = net.predict(x)?;
            Ok(Prediction {
                model_id: net.model_id().to_string(),
                class,
                confidence: probs.data()[class],
            })
        })
        .collect()
}

fn predictions_from_traces(nets: &[&Network], traces: &[ActivationTrace]) -> Vec<Prediction> {
    nets.iter()
        .zip(traces)
        .map(|(net, trace)| {
            let class = trace.final_probs.argmax();
            Prediction {
                model_id: net.model_id().to_string(),
                class,
                confidence: trace.final_probs.data()[class],
            }
        })
        .collect()
}

fn seed_rng(base: u64, seed_index: usize, cycle: usize) -> ChaCha8Rng {
    let mix = base
        ^ (seed_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (cycle as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mix)
}

enum SeedOutcome {
    PreExisting,
    Found {
        record: DifferenceRecord,
        iterations: usize,
    },
    Timeout,
}

/// Runs ascent on one seed. Tracker access is confined to short lock scopes:
/// target selection reads, a found difference writes.
fn ascend_seed(
    nets: &[&Network],
    trackers: &Mutex<Vec<CoverageTracker>>,
    seed_index: usize,
    cycle: usize,
    seed: &Tensor,
    cfg: &GenerationConfig,
) -> Result<SeedOutcome> {
    let mut rng = seed_rng(cfg.rng_seed, seed_index, cycle);
    let mut x = seed.clone();
    let mut traces = forward_all(nets, &x)?;
    let classes: Vec<usize> = traces.iter().map(|t| t.final_probs.argmax()).collect();
    if deviant_index(&classes).is_some() {
        return Ok(SeedOutcome::PreExisting);
    }
    let consensus_class = classes[0];
    let deviation_target = rng.gen_range(0..nets.len());
    let state = cfg.constraint.init_seed_state(&x, &mut rng)?;
    let joint_cfg = JointConfig {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let mut targets: Vec<Option<NeuronId>> = vec![None; nets.len()];

    for iteration in 1..=cfg.max_iters_per_seed {
        if cfg.lambda2 != 0.0 {
            refresh_targets(nets, trackers, &traces, &mut targets, cfg, &mut rng)?;
        }
        let chosen: Vec<NeuronId> = targets
            .iter()
            .map(|t| t.unwrap_or(NeuronId { layer_index: 0, unit_index: 0 }))
            .collect();
        let objective = joint_traced(
            nets,
            &traces,
            deviation_target,
            consensus_class,
            &chosen,
            &x,
            joint_cfg,
        )?;
        let constrained = cfg
            .constraint
            .apply(&objective.gradient, &x, &mut rng, &state)?;
        let step = cfg.constraint.effective_step(cfg.step_size);
        x = cfg.constraint.clamp(&x.add_scaled(&constrained, step)?, &state)?;
        traces = forward_all(nets, &x)?;
        let classes: Vec<usize> = traces.iter().map(|t| t.final_probs.argmax()).collect();
        if let Some(dev) = deviant_index(&classes) {
            let record = DifferenceRecord {
                seed_index,
                input: x.clone(),
                predictions: predictions_from_traces(nets, &traces),
                iterations_used: iteration,
                deviant_model: nets[dev].model_id().to_string(),
                constraint: cfg.constraint.name(),
            };
            let mut guard = trackers.lock().expect("tracker lock");
            for (k, net) in nets.iter().enumerate() {
                guard[k].update(net, &traces[k])?;
            }
            return Ok(SeedOutcome::Found {
                record,
                iterations: iteration,
            });
        }
    }
    Ok(SeedOutcome::Timeout)
}

/// Keeps each network's target neuron until it activates (in the tracker or
/// on the current trace), then draws a fresh uncovered one. Falls back to a
/// random neuron at full coverage so the search keeps moving.
fn refresh_targets(
    nets: &[&Network],
    trackers: &Mutex<Vec<CoverageTracker>>,
    traces: &[ActivationTrace],
    targets: &mut [Option<NeuronId>],
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let guard = trackers.lock().expect("tracker lock");
    for (k, net) in nets.iter().enumerate() {
        let needs_new = match targets[k] {
            None => true,
            Some(id) => {
                guard[k].is_activated(id) || {
                    let values =
                        coverage::neuron_outputs(net, &traces[k], cfg.scale_outputs, cfg.include_dense_coverage)?;
                    values
                        .iter()
                        .find(|(vid, _)| *vid == id)
                        .map(|(_, v)| *v > cfg.threshold)
                        .unwrap_or(true)
                }
            }
        };
        if needs_new {
            targets[k] = Some(match guard[k].select_inactive(rng) {
                Some(id) => id,
                None => guard[k].any_neuron(rng),
            });
        }
    }
    Ok(())
}

fn coverage_target_met(trackers: &Mutex<Vec<CoverageTracker>>, p: f64) -> bool {
    let guard = trackers.lock().expect("tracker lock");
    guard.iter().map(|t| t.ncov()).fold(f64::INFINITY, f64::min) >= p
}

/// The main loop over seeds and cycles. Deterministic (byte-identical
/// records) for a fixed config with `threads = 1`.
pub fn generate(
    nets: &[&Network],
    seeds: &[Tensor],
    cfg: &GenerationConfig,
) -> Result<GenerationOutcome> {
    cfg.validate()?;
    if nets.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two networks, got {}",
            nets.len()
        )));
    }
    for net in &nets[1..] {
        if !net.compatible_with(nets[0]) {
            return Err(Error::InvalidNetwork(format!(
                "networks '{}' and '{}' are incompatible",
                nets[0].model_id(),
                net.model_id()
            )));
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed set is empty".into()));
    }

    let start = Instant::now();
    let trackers = Mutex::new(
        nets.iter()
            .map(|net| {
                CoverageTracker::new(
                    net,
                    cfg.threshold,
                    cfg.scale_outputs,
                    cfg.include_dense_coverage,
                )
            })
            .collect::<Result<Vec<_>>>()?,
    );

    // (cycle, seed_index) keys keep output order stable in parallel mode.
    let results: Mutex<Vec<(usize, usize, DifferenceRecord)>> = Mutex::new(Vec::new());
    let pre_existing: Mutex<HashSet<usize>> = Mutex::new(HashSet::new());
    let per_seed: Mutex<Vec<(usize, usize, usize, bool)>> = Mutex::new(Vec::new());
    let stop = AtomicBool::new(false);
    let mut cycles_completed = 0usize;

    'cycles: for cycle in 0..cfg.max_cycles {
        if coverage_target_met(&trackers, cfg.desired_coverage) {
            break 'cycles;
        }
        if cfg.threads <= 1 {
            for (seed_index, seed) in seeds.iter().enumerate() {
                if coverage_target_met(&trackers, cfg.desired_coverage) {
                    break 'cycles;
                }
                if pre_existing.lock().unwrap().contains(&seed_index) {
                    continue;
                }
                let outcome = ascend_seed(nets, &trackers, seed_index, cycle, seed, cfg)?;
                note_outcome(outcome, cycle, seed_index, &results, &pre_existing, &per_seed);
            }
        } else {
            let next = AtomicUsize::new(0);
            let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
            std::thread::scope(|scope| {
                for _ in 0..cfg.threads {
                    scope.spawn(|| loop {
                        if stop.load(Ordering::Relaxed) {
                            break;
                        }
                        let seed_index = next.fetch_add(1, Ordering::Relaxed);
                        if seed_index >= seeds.len() {
                            break;
                        }
                        if pre_existing.lock().unwrap().contains(&seed_index) {
                            continue;
                        }
                        match ascend_seed(nets, &trackers, seed_index, cycle, &seeds[seed_index], cfg)
                        {
                            Ok(outcome) => {
                                note_outcome(
                                    outcome,
                                    cycle,
                                    seed_index,
                                    &results,
                                    &pre_existing,
                                    &per_seed,
                                );
                                if coverage_target_met(&trackers, cfg.desired_coverage) {
                                    stop.store(true, Ordering::Relaxed);
                                }
                            }
                            Err(e) => {
                                errors.lock().unwrap().push(e);
                                stop.store(true, Ordering::Relaxed);
                            }
                        }
                    });
                }
            });
            if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
                return Err(e);
            }
            if stop.load(Ordering::Relaxed) && coverage_target_met(&trackers, cfg.desired_coverage)
            {
                break 'cycles;
            }
        }
        cycles_completed = cycle + 1;
    }

    let mut keyed = results.into_inner().unwrap();
    keyed.sort_by_key(|(cycle, seed_index, _)| (*cycle, *seed_index));
    let records: Vec<DifferenceRecord> = keyed.into_iter().map(|(_, _, r)| r).collect();

    let mut visits = per_seed.into_inner().unwrap();
    visits.sort_by_key(|(cycle, seed_index, _, _)| (*cycle, *seed_index));
    let per_seed_iterations: Vec<(usize, usize)> =
        visits.iter().map(|(_, s, iters, _)| (*s, *iters)).collect();
    let timeouts = visits.iter().filter(|(_, _, _, found)| !found).count();

    let mut pre_existing: Vec<usize> = pre_existing.into_inner().unwrap().into_iter().collect();
    pre_existing.sort_unstable();

    let trackers = trackers.into_inner().unwrap();
    let coverage_reached = trackers
        .iter()
        .map(|t| t.ncov())
        .fold(f64::INFINITY, f64::min)
        >= cfg.desired_coverage;

    let mean_iterations_to_difference = if records.is_empty() {
        None
    } else {
        Some(
            records.iter().map(|r| r.iterations_used as f64).sum::<f64>() / records.len() as f64,
        )
    };
    let stats = GenerationStats {
        seeds_processed: visits.len(),
        pre_existing,
        timeouts,
        per_seed_iterations,
        mean_iterations_to_difference,
        first_difference_iterations: records.first().map(|r| r.iterations_used),
        cycles_completed,
        coverage_reached,
        wall_ms: start.elapsed().as_millis(),
    };
    Ok(GenerationOutcome {
        records,
        trackers,
        stats,
    })
}

#[allow(clippy::type_complexity)]
fn note_outcome(
    outcome: SeedOutcome,
    cycle: usize,
    seed_index: usize,
    results: &Mutex<Vec<(usize, usize, DifferenceRecord)>>,
    pre_existing: &Mutex<HashSet<usize>>,
    per_seed: &Mutex<Vec<(usize, usize, usize, bool)>>,
) {
    match outcome {
        SeedOutcome::PreExisting => {
            pre_existing.lock().unwrap().insert(seed_index);
        }
        SeedOutcome::Found { record, iterations } => {
            per_seed
                .lock()
                .unwrap()
                .push((cycle, seed_index, iterations, true));
            results.lock().unwrap().push((cycle, seed_index, record));
        }
        SeedOutcome::Timeout => {
            per_seed
                .lock()
                .unwrap()
                .push((cycle, seed_index, usize::MAX, false));
        }
    }
}

/// Coverage-timing mode: how long and how many seed visits it takes to push
/// every model's coverage to the target.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageRunReport {
    pub target: f64,
    pub reached: bool,
    pub seeds_consumed: usize,
    pub records_found: usize,
    pub wall_ms: u128,
    pub ncov_per_model: Vec<(String, f64)>,
}

pub fn run_coverage_mode(
    nets: &[&Network],
    seeds: &[Tensor],
    cfg: &GenerationConfig,
) -> Result<CoverageRunReport> {
    let outcome = generate(nets, seeds, cfg)?;
    Ok(CoverageRunReport {
        target: cfg.desired_coverage,
        reached: outcome.stats.coverage_reached,
        seeds_consumed: outcome.stats.seeds_processed,
        records_found: outcome.records.len(),
        wall_ms: outcome.stats.wall_ms,
        ncov_per_model: outcome
            .trackers
            .iter()
            .map(|t| (t.model_id().to_string(), t.ncov()))
            .collect(),
    })
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    seed_index: usize,
    deviant_model: &'a str,
    predictions: &'a [Prediction],
    iterations: usize,
    constraint: &'a str,
}

/// Writes `records/NNNN.pgm|.vec`, `manifest.jsonl`, `stats.json`, and
/// `coverage.txt` under `out_dir`.
pub fn write_outputs(outcome: &GenerationOutcome, out_dir: &Path) -> Result<()> {
    let records_dir = out_dir.join("records");
    fs::create_dir_all(&records_dir)?;

    let mut manifest = String::new();
    for (i, record) in outcome.records.iter().enumerate() {
        match record.input.shape() {
            &[h, w] => {
                dataset::write_pgm(
                    &records_dir.join(format!("{i:04}.pgm")),
                    h,
                    w,
                    record.input.data(),
                )?;
            }
            &[1, h, w] => {
                dataset::write_pgm(
                    &records_dir.join(format!("{i:04}.pgm")),
                    h,
                    w,
                    record.input.data(),
                )?;
            }
            _ => {
                let text: String = record
                    .input
                    .data()
                    .iter()
                    .map(|v| format!("{v}\n"))
                    .collect();
                fs::write(records_dir.join(format!("{i:04}.vec")), text)?;
            }
        }
        let entry = ManifestEntry {
            seed_index: record.seed_index,
            deviant_model: &record.deviant_model,
            predictions: &record.predictions,
            iterations: record.iterations_used,
            constraint: &record.constraint,
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest serializes"));
        manifest.push('\n');
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    fs::write(
        out_dir.join("stats.json"),
        serde_json::to_string_pretty(&outcome.stats).expect("stats serialize"),
    )?;
    fs::write(
        out_dir.join("coverage.txt"),
        coverage::coverage_report(&outcome.trackers),
    )?;
    Ok(())
}
