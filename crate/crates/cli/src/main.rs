//! Operator surface: generate data, train under any mode/order, evaluate,
//! score external prediction files, and run the ablation grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

mod ablate;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{effective_config, CliError, TrainOverrides};
use mlo_core::metrics::{self, EvalReport};
use mlo_core::mlo::{evaluate_run, run};
use mlo_core::models::ModelFile;
use mlo_core::synth::{
    generate_datasets, generate_world, load_samples, load_vocabulary, save_samples,
    save_vocabulary, GenCounts, Sample, Vocabulary, WorldConfig,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mlo",
    about = "Multilevel-optimization trainer for the synthetic compositional QA task",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a world and its training/IID/triplet-test splits.
    GenData(GenDataArgs),
    /// Train a model; writes model.json and history.json.
    Train(TrainArgs),
    /// Evaluate a trained model on the triplet test set (and IID split).
    Eval(EvalArgs),
    /// Score an external predictions file against a triplet file.
    Score(ScoreArgs),
    /// Run the mode/order grid over several seeds and tabulate.
    Ablate(ablate::AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train.jsonl, iid.jsonl, test.jsonl, vocab.json,
    /// world.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20000)]
    train: usize,
    #[arg(long, default_value_t = 2000)]
    iid: usize,
    #[arg(long, default_value_t = 200)]
    triplets: usize,
    #[arg(long, default_value_t = 3)]
    sizes: usize,
    #[arg(long, default_value_t = 6)]
    colors: usize,
    #[arg(long, default_value_t = 6)]
    shapes: usize,
    /// Number of held-out (shape, color) pairs.
    #[arg(long, default_value_t = 8)]
    blacklist: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.json and history.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory produced by gen-data (test.jsonl; iid.jsonl if present).
    #[arg(long)]
    data: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the report as metric,value CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the raw predictions as JSON lines of {"id","answer"}.
    #[arg(long = "predictions-out")]
    predictions_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSON lines of {"id","answer"}.
    #[arg(long)]
    predictions: PathBuf,
    /// Triplet file: full dataset schema or minimal
    /// {"id","level","triplet_id","answer"}.
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Train(args) => train(args),
        Cmd::Eval(args) => eval(args),
        Cmd::Score(args) => score(args),
        Cmd::Ablate(args) => ablate::run_grid(args),
    }
}

/// Manifest tying a generated data directory to its exact configuration.
#[derive(Serialize)]
struct WorldManifest<'a> {
    config: WorldManifestConfig<'a>,
    vocab: &'a Vocabulary,
    blacklist: &'a [(usize, usize)],
}

#[derive(Serialize)]
struct WorldManifestConfig<'a> {
    world: &'a WorldConfig,
    counts: &'a GenCounts,
    seed: u64,
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let world_cfg = WorldConfig {
        n_sizes: args.sizes,
        n_colors: args.colors,
        n_shapes: args.shapes,
        blacklist_size: args.blacklist,
        ..WorldConfig::default()
    };
    let counts = GenCounts { train: args.train, iid: args.iid, triplets: args.triplets };
    let world = generate_world(world_cfg, args.seed)?;
    let data = generate_datasets(&world, counts, args.seed)?;

    std::fs::create_dir_all(&args.out).map_err(CliError::io)?;
    save_samples(&args.out.join("train.jsonl"), &data.train)?;
    save_samples(&args.out.join("iid.jsonl"), &data.iid)?;
    save_samples(&args.out.join("test.jsonl"), &data.test)?;
    save_vocabulary(&args.out.join("vocab.json"), &world.vocab)?;
    let manifest = WorldManifest {
        config: WorldManifestConfig { world: &world.config, counts: &counts, seed: args.seed },
        vocab: &world.vocab,
        blacklist: &world.blacklist,
    };
    write_json(&args.out.join("world.json"), &manifest)?;
    println!(
        "generated {} train / {} iid / {} test samples ({} triplets) in {}",
        data.train.len(),
        data.iid.len(),
        data.test.len(),
        data.triplets.len(),
        args.out.display()
    );
    Ok(())
}

pub(crate) fn load_world(data_dir: &Path) -> Result<(Vocabulary, Vec<Sample>), CliError> {
    let vocab = load_vocabulary(&data_dir.join("vocab.json"))?;
    let train = load_samples(&data_dir.join("train.jsonl"), &vocab)?;
    Ok((vocab, train))
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let (vocab, train_samples) = load_world(&args.data)?;
    let (cfg, model_cfg) = effective_config(&args.overrides, &vocab)?;

    let out = run(model_cfg, &cfg, &train_samples)?;
    let provenance = serde_json::json!({
        "train": cfg,
        "model": model_cfg,
        "data": args.data.display().to_string(),
        "seed": cfg.seed,
    });

    std::fs::create_dir_all(&args.out).map_err(CliError::io)?;
    ModelFile::new(&out.model, &out.nets, Some(provenance.clone()))
        .save(&args.out.join("model.json"))?;
    let history = serde_json::json!({
        "config": provenance,
        "stopped_early": out.stopped_early,
        "rounds_completed": out.state.rounds_completed,
        "rounds": out.state.history,
    });
    write_json(&args.out.join("history.json"), &history)?;
    println!(
        "trained {} for {} rounds{} -> {}",
        cfg.mode,
        out.state.rounds_completed,
        if out.stopped_early { " (early stop)" } else { "" },
        args.out.join("model.json").display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let model_file = ModelFile::load(&args.model)?;
    let model = model_file.model();
    let vocab = load_vocabulary(&args.data.join("vocab.json"))?;
    let test = load_samples(&args.data.join("test.jsonl"), &vocab)?;
    let iid_path = args.data.join("iid.jsonl");
    let iid = if iid_path.exists() {
        Some(load_samples(&iid_path, &vocab)?)
    } else {
        None
    };

    let mut report = evaluate_run(&model, &test, iid.as_deref())?;
    report.provenance = Some(serde_json::json!({
        "model": args.model.display().to_string(),
        "data": args.data.display().to_string(),
        "config": model_file.config.train,
    }));
    write_report(&report, &args.out, args.csv.as_deref())?;

    if let Some(pred_path) = &args.predictions_out {
        let probs = mlo_core::models::predict_probs(&model, &test)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(pred_path).map_err(CliError::io)?);
        for (s, &p) in test.iter().zip(&probs) {
            let line = serde_json::json!({"id": s.id, "answer": p >= 0.5});
            writeln!(w, "{line}").map_err(CliError::io)?;
        }
    }
    println!(
        "consistency {:.4}, overall {:.4} -> {}",
        report.consistency,
        report.overall_accuracy,
        args.out.display()
    );
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let preds = metrics::load_predictions(&args.predictions)?;
    let samples = metrics::load_eval_samples(&args.triplets)?;
    let mut report = metrics::evaluate(&preds, &samples)?;
    report.provenance = Some(serde_json::json!({
        "predictions": args.predictions.display().to_string(),
        "triplets": args.triplets.display().to_string(),
    }));
    write_report(&report, &args.out, args.csv.as_deref())?;
    println!(
        "consistency {:.4}, overall {:.4} -> {}",
        report.consistency,
        report.overall_accuracy,
        args.out.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    report.write_json(out)?;
    if let Some(csv_path) = csv {
        report.write_csv(csv_path)?;
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(CliError::io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::data(e.to_string()))?;
    w.write_all(b"\n").map_err(CliError::io)?;
    Ok(())
}
