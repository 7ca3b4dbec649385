//! Command-line driver: dataset synthesis, training, difference generation,
//! reports, retraining augmentation, and pollution detection.
//!
//! Exit codes: 0 success with results, 1 ran clean but found nothing,
//! 2 usage/config error, 3 I/O or data-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nndiff::applications;
use nndiff::config;
use nndiff::dataset::{self, Dataset};
use nndiff::generator;
use nndiff::model_io;
use nndiff::synth;
use nndiff::trainer;
use nndiff::{Error, Network, Tensor};

#[derive(Parser)]
#[command(name = "nndiff", version, about = "Whitebox differential testing for small neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic digit corpus as IDX files (MNIST layout).
    Dataset {
        /// Output directory for the IDX files.
        #[arg(long)]
        out: PathBuf,
        /// Training samples to generate.
        #[arg(long, default_value_t = 6000)]
        train: usize,
        /// Held-out samples to generate.
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel noise level.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train a model on an IDX dataset directory.
    Train {
        /// Training config (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train-images-idx3-ubyte / train-labels-idx1-ubyte
        /// (and optionally the t10k pair for held-out accuracy).
        #[arg(long)]
        data: PathBuf,
        /// Where to write the model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate difference-inducing inputs for two or more models.
    Generate {
        /// Model files (at least two).
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        /// Directory holding an IDX images file to use as seeds.
        #[arg(long)]
        seeds: PathBuf,
        /// Generation config (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (records/, manifest.jsonl, stats.json, coverage.txt).
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 1 is fully deterministic.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Cap the number of seeds taken from the seed file.
        #[arg(long)]
        max_seeds: Option<usize>,
    },
    /// Summarize a generate output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a model with majority-vote-labeled generated inputs.
    Retrain {
        /// Model files; all vote on labels.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        /// Which of the models to retrain (index into --models).
        #[arg(long, default_value_t = 0)]
        target_index: usize,
        /// Training config (provides batch size, learning rate, rng seed).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (train pair required, t10k pair for held-out).
        #[arg(long)]
        data: PathBuf,
        /// A generate output directory; its records become the extra pool.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Where to write the retrained model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace differences between a clean and a suspect model back to
    /// training samples.
    Pollution {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        polluted: PathBuf,
        /// Dataset directory (train pair is the searched training set).
        #[arg(long)]
        data: PathBuf,
        /// Generation config.
        #[arg(long)]
        config: PathBuf,
        /// Ground-truth polluted indices, one per line (optional).
        #[arg(long)]
        flags: Option<PathBuf>,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Dataset {
            out,
            train,
            test,
            seed,
            noise,
        } => cmd_dataset(&out, train, test, seed, noise),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Generate {
            models,
            seeds,
            config,
            out,
            threads,
            max_seeds,
        } => cmd_generate(&models, &seeds, &config, &out, threads, max_seeds),
        Command::Report { out } => cmd_report(&out),
        Command::Retrain {
            models,
            target_index,
            config,
            data,
            records,
            epochs,
            out,
        } => cmd_retrain(&models, target_index, &config, &data, &records, epochs, out.as_deref()),
        Command::Pollution {
            clean,
            polluted,
            data,
            config,
            flags,
            out,
        } => cmd_pollution(&clean, &polluted, &data, &config, flags.as_deref(), out.as_deref()),
    }
}

fn cmd_dataset(out: &Path, train: usize, test: usize, seed: u64, noise: f64) -> Result<u8, Error> {
    fs::create_dir_all(out)?;
    let train_set = synth::synth_digits(train, seed, noise)?;
    dataset::save_idx(
        &train_set,
        &out.join("train-images-idx3-ubyte"),
        &out.join("train-labels-idx1-ubyte"),
    )?;
    let test_set = synth::synth_digits(test, seed ^ 0xD1CE, noise)?;
    dataset::save_idx(
        &test_set,
        &out.join("t10k-images-idx3-ubyte"),
        &out.join("t10k-labels-idx1-ubyte"),
    )?;
    println!(
        "wrote {train} training and {test} held-out samples to {}",
        out.display()
    );
    Ok(0)
}

fn load_train_pair(dir: &Path) -> Result<Dataset, Error> {
    dataset::load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
}

fn load_heldout_pair(dir: &Path) -> Option<Dataset> {
    dataset::load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .ok()
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<u8, Error> {
    let default_id = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let cfg = config::load_train_config(config, &default_id)?;
    let train_set = load_train_pair(data)?;
    let net = trainer::train(&cfg, &train_set)?;
    model_io::save_model(&net, out)?;
    let (_, train_acc) = trainer::evaluate(&net, &train_set)?;
    println!("model {} written to {}", net.model_id(), out.display());
    println!("train accuracy {train_acc:.4}");
    if let Some(heldout) = load_heldout_pair(data) {
        let (_, acc) = trainer::evaluate(&net, &heldout)?;
        println!("heldout accuracy {acc:.4}");
    }
    Ok(0)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Network>, Error> {
    paths.iter().map(|p| model_io::load_model(p)).collect()
}

fn load_seed_images(dir: &Path) -> Result<Vec<Tensor>, Error> {
    for name in [
        "t10k-images-idx3-ubyte",
        "train-images-idx3-ubyte",
        "images-idx3-ubyte",
    ] {
        let path = dir.join(name);
        if path.exists() {
            let (data, rows, cols) = dataset::load_idx_images(&path)?;
            let n = data.len() / (rows * cols);
            return (0..n)
                .map(|i| {
                    Tensor::new(
                        vec![1, rows, cols],
                        data[i * rows * cols..(i + 1) * rows * cols].to_vec(),
                    )
                })
                .collect();
        }
    }
    Err(Error::format(
        dir.display().to_string(),
        "no IDX images file found (tried t10k-/train-/images-idx3-ubyte)",
    ))
}

fn cmd_generate(
    models: &[PathBuf],
    seeds_dir: &Path,
    config: &Path,
    out: &Path,
    threads: usize,
    max_seeds: Option<usize>,
) -> Result<u8, Error> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least two models".into(),
        ));
    }
    let nets = load_models(models)?;
    let refs: Vec<&Network> = nets.iter().collect();
    let mut cfg = config::load_generation_config(config, refs[0].input_shape())?;
    cfg.threads = threads;
    let mut seeds = load_seed_images(seeds_dir)?;
    if let Some(cap) = max_seeds {
        seeds.truncate(cap);
    }
    let outcome = generator::generate(&refs, &seeds, &cfg)?;
    fs::create_dir_all(out)?;
    generator::write_outputs(&outcome, out)?;
    println!(
        "{} records from {} seed visits ({} pre-existing differences, {} timeouts)",
        outcome.records.len(),
        outcome.stats.seeds_processed,
        outcome.stats.pre_existing.len(),
        outcome.stats.timeouts
    );
    for tracker in &outcome.trackers {
        println!("{}", tracker.report_line());
    }
    Ok(if outcome.records.is_empty() { 1 } else { 0 })
}

fn cmd_report(out: &Path) -> Result<u8, Error> {
    let coverage = fs::read_to_string(out.join("coverage.txt"))?;
    let stats = fs::read_to_string(out.join("stats.json"))?;
    let manifest = fs::read_to_string(out.join("manifest.jsonl"))?;
    println!("records: {}", manifest.lines().count());
    print!("{coverage}");
    println!("{stats}");
    Ok(0)
}

/// Reads generated record inputs back, reshaped for the given input shape.
fn load_record_inputs(records_dir: &Path, input_shape: &[usize]) -> Result<Vec<Tensor>, Error> {
    let dir = records_dir.join("records");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    let volume: usize = input_shape.iter().product();
    let mut out = Vec::new();
    for path in names {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let values: Vec<f64> = match ext {
            "pgm" => dataset::read_pgm(&path)?.2,
            "vec" => fs::read_to_string(&path)?
                .lines()
                .map(|l| {
                    l.trim().parse::<f64>().map_err(|_| {
                        Error::format(path.display().to_string(), format!("bad float '{l}'"))
                    })
                })
                .collect::<Result<_, _>>()?,
            _ => continue,
        };
        if values.len() != volume {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} values, model expects {volume}", values.len()),
            ));
        }
        out.push(Tensor::new(input_shape.to_vec(), values)?);
    }
    Ok(out)
}

fn cmd_retrain(
    models: &[PathBuf],
    target_index: usize,
    config: &Path,
    data: &Path,
    records: &Path,
    epochs: usize,
    out: Option<&Path>,
) -> Result<u8, Error> {
    let nets = load_models(models)?;
    if target_index >= nets.len() {
        return Err(Error::InvalidConfig(format!(
            "target index {target_index} out of range for {} models",
            nets.len()
        )));
    }
    let refs: Vec<&Network> = nets.iter().collect();
    let cfg = config::load_train_config(config, nets[target_index].model_id())?;
    let train_set = load_train_pair(data)?;
    let heldout = load_heldout_pair(data).ok_or_else(|| {
        Error::format(
            data.display().to_string(),
            "retrain needs the t10k held-out pair",
        )
    })?;
    let inputs = load_record_inputs(records, nets[target_index].input_shape())?;

    if inputs.is_empty() {
        // Nothing to add: accuracies are unchanged by definition.
        let (_, acc) = trainer::evaluate(&nets[target_index], &heldout)?;
        let report = applications::RetrainReport {
            heldout_before: acc,
            heldout_after: acc,
            extra_before: 1.0,
            extra_after: 1.0,
        };
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        if let Some(path) = out {
            model_io::save_model(&nets[target_index], path)?;
        }
        return Ok(0);
    }

    let mut extra = Vec::with_capacity(inputs.len());
    for x in inputs {
        let label = applications::majority_label(&refs, &x)?;
        extra.push((x, label));
    }
    let (retrained, report) = applications::augment_retrain(
        &nets[target_index],
        &cfg,
        &train_set,
        &extra,
        epochs,
        &heldout,
    )?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(path) = out {
        model_io::save_model(&retrained, path)?;
    }
    Ok(0)
}

fn cmd_pollution(
    clean: &Path,
    polluted: &Path,
    data: &Path,
    config: &Path,
    flags: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8, Error> {
    let clean_net = model_io::load_model(clean)?;
    let polluted_net = model_io::load_model(polluted)?;
    let train_set = load_train_pair(data)?;
    let cfg = config::load_generation_config(config, clean_net.input_shape())?;
    let ground_truth = match flags {
        None => None,
        Some(path) => {
            let mut mask = vec![false; train_set.len()];
            for line in fs::read_to_string(path)?.lines() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let idx: usize = line.parse().map_err(|_| {
                    Error::format(path.display().to_string(), format!("bad index '{line}'"))
                })?;
                if idx >= mask.len() {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("index {idx} out of range ({} samples)", mask.len()),
                    ));
                }
                mask[idx] = true;
            }
            Some(mask)
        }
    };
    let report = applications::detect_pollution(
        &clean_net,
        &polluted_net,
        &train_set,
        &cfg,
        ground_truth.as_deref(),
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let (Some(p), Some(r)) = (report.precision, report.recall) {
        println!("precision {p:.4} recall {r:.4}");
    }
    if let Some(path) = out {
        fs::write(path, json)?;
    }
    Ok(if report.suspects.is_empty() { 1 } else { 0 })
}
