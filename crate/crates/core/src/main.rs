use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use partmix::cluster::PartitionFile;
use partmix::data_io::{load_dataset, load_model, read_json, save_synth_splits, write_json, ImageData, Split};
use partmix::detect::{detect, nms, write_jsonl};
use partmix::eval::{evaluate_detections, ApMode, ScoredBox};
use partmix::features::{compute_features, FeaturePyramid, DEFAULT_CELL_SIZE};
use partmix::harness::{
    benchmark_inference, emit_outputs, plan_seed, prepare_data, run_experiment, BenchConfig, ExperimentConfig,
};
use partmix::registry::Registry;
use partmix::synthdata::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "partmix", version, about = "Mixture and part-model detectors with a data-scaling harness")]
struct Cli {
    /// Overrides the seed (or seed list) of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Reuse finished cells found in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also run the inference benchmark into timing.csv.
        #[arg(long)]
        bench: bool,
        /// AP used for the log-linear extrapolation.
        #[arg(long, default_value_t = 0.95)]
        target_ap: f64,
    },
    /// Time DPM, shared-message EDPM and per-mixture EDPM scoring.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset with a manifest.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra test-split images generated with a derived seed.
        #[arg(long, default_value_t = 0)]
        test_images: usize,
        /// Extra object-free training images.
        #[arg(long, default_value_t = 0)]
        neg_images: usize,
    },
    /// Detect with a saved model on a dataset split and report AP.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = f64::NEG_INFINITY, allow_negative_numbers = true)]
        threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        eleven_point: bool,
    },
    /// Cluster the training pool and write the nested training samples.
    SamplePartitions {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn read_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    Ok(match path {
        Some(p) => read_json(p)?,
        None => T::default(),
    })
}

fn experiment_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut config: ExperimentConfig = read_json(path)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Run { config, bench, target_ap } => {
            let config = experiment_config(config, cli.seed)?;
            let registry = Registry::default();
            let result = run_experiment(&config, &registry, Some(out), cli.resume)?;
            let timing = if *bench {
                benchmark_inference(&BenchConfig::default())?
            } else {
                Vec::new()
            };
            if !result.records.is_empty() {
                for p in emit_outputs(out, &result, &timing, *target_ap)? {
                    log::info!("wrote {}", p.display());
                }
            }
            let failed: Vec<_> = result.manifest.cells.iter().filter(|c| c.error.is_some()).collect();
            for c in &failed {
                eprintln!("cell {} failed: {}", c.id, c.error.as_deref().unwrap_or(""));
            }
            println!(
                "{} cells, {} failed, outputs in {}",
                result.manifest.cells.len(),
                failed.len(),
                out.display()
            );
            Ok(result.complete())
        }
        Command::Bench { config } => {
            let mut config: BenchConfig = read_or_default(config.as_deref())?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let rows = benchmark_inference(&config)?;
            println!("{:<12} {:>6} {:>14} {:>10}", "model", "M", "ms/image", "dt/image");
            for r in &rows {
                println!("{:<12} {:>6} {:>14.3} {:>10}", r.model, r.m, r.seconds_per_image * 1e3, r.dt_calls_per_image);
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            partmix::data_io::write_atomic(&out.join("timing.csv"), &w.into_inner()?)?;
            Ok(true)
        }
        Command::GenSynth { config, test_images, neg_images } => {
            let mut config: SynthConfig = read_or_default(config.as_deref())?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            // the test split shares the world, so pin it before changing the seed
            config.world_seed.get_or_insert(config.seed);
            let train = generate(&config)?;
            let test = (*test_images > 0)
                .then(|| {
                    generate(&SynthConfig {
                        seed: config.seed ^ 0x7E57_0000_0000_0001,
                        n_images: *test_images,
                        ..config.clone()
                    })
                })
                .transpose()?;
            let neg = (*neg_images > 0)
                .then(|| {
                    generate(&SynthConfig {
                        seed: config.seed ^ 0x4E45_0000_0000_0002,
                        n_images: *neg_images,
                        objects_per_image: 0,
                        ..config.clone()
                    })
                })
                .transpose()?;
            let mut parts = vec![(&train, Split::Train, "train-")];
            if let Some(n) = &neg {
                parts.push((n, Split::Train, "neg-"));
            }
            if let Some(t) = &test {
                parts.push((t, Split::Test, "test-"));
            }
            let manifest = save_synth_splits(&parts, out)?;
            println!("{}", manifest.display());
            Ok(true)
        }
        Command::Eval { model, manifest, split, threshold, nms: overlap, iou, eleven_point } => {
            let model_name = model.display().to_string();
            let model = load_model(model)?;
            let data = load_dataset(manifest)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let mut lines = Vec::new();
            let mut scored = Vec::new();
            let mut ids = Vec::new();
            for entry in data.split(split) {
                let pyramid = match data.load_image(entry)? {
                    ImageData::Features(g) => FeaturePyramid::single(g),
                    ImageData::Raster(r) => FeaturePyramid::single(compute_features(&r, DEFAULT_CELL_SIZE)?),
                };
                let dets = nms(&detect(model.detector(), &pyramid, *threshold)?, *overlap)?;
                write_jsonl(&mut lines, &entry.id, &model_name, &dets)?;
                scored.extend(dets.iter().map(|d| ScoredBox {
                    image_id: entry.id.clone(),
                    bbox: d.bbox,
                    score: d.score,
                }));
                ids.push(entry.id.clone());
            }
            let gts: Vec<_> = data.ground_truth.iter().filter(|g| ids.contains(&g.image_id)).cloned().collect();
            let mode = if *eleven_point { ApMode::ElevenPoint } else { ApMode::Continuous };
            let result = evaluate_detections(&scored, &gts, *iou, mode)?;
            partmix::data_io::write_atomic(&out.join("detections.jsonl"), &lines)?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({ "ap": result.ap, "n_pos": result.n_pos, "images": ids.len(), "detections": scored.len() }),
            )?;
            println!("AP {:.4} over {} images ({} positives)", result.ap, ids.len(), result.n_pos);
            Ok(true)
        }
        Command::SamplePartitions { config } => {
            let config = experiment_config(config, cli.seed)?;
            for &seed in &config.seeds {
                let data = prepare_data(&config, seed)?;
                let plan = plan_seed(&config, &data, seed)?;
                for (r, parts) in plan.partitions.iter().enumerate() {
                    let path = out.join(format!("partitions_s{seed}_r{r}.json"));
                    write_json(&path, &PartitionFile::new(plan.resample_seeds[r], &plan.sizes, parts))?;
                    let sets: Vec<_> = plan.sets[r]
                        .sets
                        .iter()
                        .map(|((k, n), groups)| serde_json::json!({ "K": k, "N": n, "clusters": groups }))
                        .collect();
                    write_json(&out.join(format!("sets_s{seed}_r{r}.json")), &sets)?;
                    println!("{}", path.display());
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).context("partmix failed") {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
