//! Command-line pipeline: generate a synthetic benchmark, train any model
//! variant, evaluate with breakdowns, and dump per-node attention weights.
//!
//! All randomness flows from one `--seed` through named substreams, and
//! `--threads 1` (the default) makes every command byte-deterministic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use treemn_core::data::{self, LoadedDataset, SyntheticConfig};
use treemn_core::eval::{self, SimilarityTable};
use treemn_core::model::{ModelDims, ModelParams, Variant};
use treemn_core::train::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "treemn",
    version,
    about = "Tree-structured attention models for video question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    Generate(GenerateArgs),
    /// Train a model variant on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Dump per-node attention weights for one sample.
    InspectAttention(InspectArgs),
}

#[derive(Args, serde::Serialize)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Validation samples.
    #[arg(long, default_value_t = 500)]
    val_samples: usize,
    /// Test samples.
    #[arg(long, default_value_t = 500)]
    test_samples: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame feature width.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Word embedding width.
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Background noise level.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Key segment length (frames carrying the scene signal).
    #[arg(long, default_value_t = 4)]
    key_len: usize,
    /// Fraction of questions rendered with nested clauses.
    #[arg(long, default_value_t = 0.0)]
    long_fraction: f64,
    /// Fraction of videos carrying a distractor scene in another slot.
    #[arg(long, default_value_t = 0.0)]
    decoy_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, serde::Serialize)]
struct TrainArgs {
    /// Dataset root (defaults to $TREEMN_DATA_ROOT).
    #[arg(long, env = "TREEMN_DATA_ROOT")]
    data: PathBuf,
    /// Output directory for checkpoint, history, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Model variant: treemn | htreemn-noh | htreemn | simple | esa.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Resume from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    /// Hidden width (must be even).
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    /// Answer vocabulary size; all distinct train answers when omitted.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (results identical for any value).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    stop_at_val_acc: Option<f64>,
    /// Override the always-verbal function-word list.
    #[arg(long)]
    function_words: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct EvalArgs {
    #[arg(long, env = "TREEMN_DATA_ROOT")]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for report files.
    #[arg(long)]
    out: PathBuf,
    /// Which split to evaluate: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Expected variant; errors if the checkpoint disagrees.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    function_words: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct InspectArgs {
    #[arg(long, env = "TREEMN_DATA_ROOT")]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample id (the video id) to inspect.
    #[arg(long)]
    sample: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Split to search for the sample: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    function_words: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        format!(
            "unknown variant {s:?}; expected one of: {}",
            Variant::ALL.map(|v| v.as_str()).join(", ")
        )
    })
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    version: &'static str,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

fn write_manifest(
    dir: &Path,
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    outputs: &[PathBuf],
    started: Instant,
) -> std::io::Result<()> {
    let manifest = RunManifest {
        command,
        config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(dir.join("manifest.json"), text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InspectAttention(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dir_non_empty(p: &Path) -> bool {
    std::fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

fn cmd_generate(args: GenerateArgs) -> Result<(), String> {
    let started = Instant::now();
    if args.samples == 0 {
        return Err("--samples must be positive".into());
    }
    if args.out.exists() && dir_non_empty(&args.out) && !args.force {
        return Err(format!(
            "output directory {} exists and is not empty (use --force)",
            args.out.display()
        ));
    }
    let config = SyntheticConfig {
        train_samples: args.samples,
        val_samples: args.val_samples,
        test_samples: args.test_samples,
        frames: args.frames,
        feature_dim: args.feature_dim,
        embed_dim: args.embed_dim,
        noise_sigma: args.noise,
        key_segment_len: args.key_len,
        long_question_fraction: args.long_fraction,
        decoy_fraction: args.decoy_fraction,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    let summary = data::generate_synthetic(&config, &args.out).map_err(|e| e.to_string())?;
    println!(
        "generated {} samples ({} train / {} val / {} test) into {}",
        summary.scenes.len(),
        args.samples,
        args.val_samples,
        args.test_samples,
        args.out.display()
    );
    let config_json = serde_json::to_value(&config).expect("serializable config");
    write_manifest(
        &args.out,
        "generate",
        config_json,
        args.seed,
        &[args.out.clone()],
        started,
    )
    .map_err(|e| e.to_string())?;
    Ok(())
}

fn load_data(
    root: &Path,
    k: Option<usize>,
    function_words: Option<&Path>,
) -> Result<LoadedDataset, String> {
    data::load_dataset_with(root, k, function_words).map_err(|e| e.to_string())
}

fn cmd_train(args: TrainArgs) -> Result<(), String> {
    let started = Instant::now();
    let ds = load_data(&args.data, args.k, args.function_words.as_deref())?;
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;

    let model = match &args.init_from {
        Some(path) => {
            let model = ModelParams::load(path).map_err(|e| e.to_string())?;
            if let Some(v) = args.variant {
                if v != model.variant {
                    return Err(format!(
                        "checkpoint variant {} does not match --variant {v}",
                        model.variant
                    ));
                }
            }
            println!(
                "resuming {} from {} ({} parameters)",
                model.variant,
                path.display(),
                model.num_parameters()
            );
            model
        }
        None => {
            let variant = args
                .variant
                .ok_or("--variant is required unless --init-from is given")?;
            let sample = &ds.train[0];
            let dims = ModelDims {
                hidden: args.hidden,
                video_dim: sample.video.shape()[1],
                embed_dim: ds.embeddings.dim(),
                num_answers: ds.answer_vocab.len(),
            };
            let mut rng = treemn_core::rng::substream(args.seed, "init");
            let model = ModelParams::new(variant, dims, ds.answer_vocab.clone(), &mut rng)
                .map_err(|e| e.to_string())?;
            println!(
                "initialized {variant} with {} parameters (hidden {}, K {})",
                model.num_parameters(),
                args.hidden,
                ds.answer_vocab.len()
            );
            model
        }
    };

    let config = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        epsilon: args.epsilon,
        clip_norm: args.clip,
        patience: args.patience,
        max_epochs: args.max_epochs,
        seed: args.seed,
        threads: args.threads,
        stop_at_val_accuracy: args.stop_at_val_acc,
    };
    let result = train::train(model, &ds.train, &ds.val, &config).map_err(|e| e.to_string())?;
    for r in &result.history {
        println!(
            "epoch {:>3}  train_loss {:.4}  val_accuracy {:.4}",
            r.epoch, r.train_loss, r.val_accuracy
        );
    }
    println!(
        "best epoch {} with validation accuracy {:.4}",
        result.best_epoch, result.best_val_accuracy
    );

    let ckpt_path = args.out.join("model.ckpt");
    let history_path = args.out.join("history.csv");
    result.best.save(&ckpt_path).map_err(|e| e.to_string())?;
    train::write_history(&history_path, &result.history).map_err(|e| e.to_string())?;

    let config_json = serde_json::json!({
        "args": serde_json::to_value(&args).expect("serializable args"),
        "train": serde_json::to_value(&config).expect("serializable config"),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
    });
    write_manifest(
        &args.out,
        "train",
        config_json,
        args.seed,
        &[ckpt_path, history_path],
        started,
    )
    .map_err(|e| e.to_string())?;
    Ok(())
}

fn pick_split<'a>(
    ds: &'a LoadedDataset,
    split: &str,
) -> Result<&'a [data::PreparedSample], String> {
    match split {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => Err(format!(
            "unknown split {other:?}; expected train, val, or test"
        )),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), String> {
    let started = Instant::now();
    let model = ModelParams::load(&args.checkpoint).map_err(|e| e.to_string())?;
    if let Some(v) = args.variant {
        if v != model.variant {
            return Err(format!(
                "checkpoint variant {} does not match --variant {v}",
                model.variant
            ));
        }
    }
    let ds = load_data(
        &args.data,
        Some(model.dims.num_answers),
        args.function_words.as_deref(),
    )?;
    if ds.answer_vocab != model.answer_vocab {
        return Err(
            "checkpoint answer vocabulary does not match the dataset's top-K answers".into(),
        );
    }
    let samples = pick_split(&ds, &args.split)?;
    if samples.is_empty() {
        return Err(format!("split {:?} is empty", args.split));
    }
    let table =
        SimilarityTable::load(&args.data.join("similarity.tsv")).map_err(|e| e.to_string())?;
    let report = eval::evaluate(&model, samples, &table).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let csv_path = args.out.join("report.csv");
    let txt_path = args.out.join("report.txt");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| e.to_string())?;
    std::fs::write(&txt_path, report.to_table()).map_err(|e| e.to_string())?;
    print!("{}", report.to_table());

    let config_json = serde_json::to_value(&args).expect("serializable args");
    write_manifest(
        &args.out,
        "eval",
        config_json,
        0,
        &[csv_path, txt_path],
        started,
    )
    .map_err(|e| e.to_string())?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), String> {
    let started = Instant::now();
    let model = ModelParams::load(&args.checkpoint).map_err(|e| e.to_string())?;
    let ds = load_data(
        &args.data,
        Some(model.dims.num_answers),
        args.function_words.as_deref(),
    )?;
    let samples = pick_split(&ds, &args.split)?;
    let sample = samples
        .iter()
        .find(|s| s.video_id == args.sample)
        .ok_or_else(|| {
            format!(
                "sample {:?} not found in split {:?}",
                args.sample, args.split
            )
        })?;

    let dist = model
        .forward_with_trace(&sample.input())
        .map_err(|e| e.to_string())?;
    let trace = dist.attention_trace.as_ref().expect("trace requested");

    let mut out = String::from("node_id,node_label,vtype,frame_index,weight\n");
    for row in trace {
        let vtype = match row.vtype {
            treemn_core::tree::VType::Visual => "visual",
            treemn_core::tree::VType::Verbal => "verbal",
        };
        for (frame, w) in row.weights.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                row.node_id, row.label, vtype, frame, w
            ));
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
    }
    std::fs::write(&args.out, out).map_err(|e| e.to_string())?;
    println!(
        "wrote attention for {} nodes x {} frames ({}, predicted {:?})",
        trace.len(),
        sample.video.shape()[0],
        model.variant,
        model.answer_vocab[dist.argmax()]
    );

    let manifest_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let config_json = serde_json::to_value(&args).expect("serializable args");
    write_manifest(
        &manifest_dir,
        "inspect-attention",
        config_json,
        0,
        &[args.out.clone()],
        started,
    )
    .map_err(|e| e.to_string())?;
    Ok(())
}
