//! The ablation grid: {baseline, mwn-simultaneous, mlo} plus mlo with the
//! reversed bucket order, each over N seeds, through the same train/eval
//! paths as the individual subcommands. Cells are independent and
//! deterministic, so they may run concurrently; the merged table is sorted
//! by (mode, order, seed).

use crate::config::{effective_config, CliError, TrainOverrides};
use clap::Args;
use mlo_core::mlo::{evaluate_run, run, Mode, Order, TrainConfig};
use mlo_core::models::ModelConfig;
use mlo_core::synth::{generate_datasets, generate_world, GenCounts, Sample, WorldConfig};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Args)]
pub struct AblateArgs {
    /// Directory produced by gen-data; when absent, the default world is
    /// generated in memory with --gen-seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for comparison.csv and comparison.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of training seeds (base seed, base seed + 1, ...).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Concurrent cells; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed for in-memory data generation when --data is absent.
    #[arg(long = "gen-seed", default_value_t = 7)]
    gen_seed: u64,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Serialize)]
struct Row {
    mode: String,
    order: String,
    seed: u64,
    overall_accuracy: f64,
    accuracy_pp: f64,
    accuracy_pw: f64,
    accuracy_ww: f64,
    consistency: f64,
    iid_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    mode: String,
    order: String,
    seeds: u64,
    mean_overall_accuracy: f64,
    mean_accuracy_pp: f64,
    mean_accuracy_pw: f64,
    mean_accuracy_ww: f64,
    mean_consistency: f64,
    mean_iid_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Comparison {
    config: serde_json::Value,
    rows: Vec<Row>,
    summary: Vec<Summary>,
}

/// The four grid configurations.
fn grid() -> [(Mode, Order); 4] {
    [
        (Mode::Baseline, Order::S2c),
        (Mode::MwnSimultaneous, Order::S2c),
        (Mode::Mlo, Order::S2c),
        (Mode::Mlo, Order::C2s),
    ]
}

pub fn run_grid(args: AblateArgs) -> Result<(), CliError> {
    let (vocab, train, test, iid, data_note) = match &args.data {
        Some(dir) => {
            let (vocab, train) = crate::load_world(dir)?;
            let test = mlo_core::synth::load_samples(&dir.join("test.jsonl"), &vocab)?;
            let iid_path = dir.join("iid.jsonl");
            let iid = if iid_path.exists() {
                Some(mlo_core::synth::load_samples(&iid_path, &vocab)?)
            } else {
                None
            };
            (vocab, train, test, iid, dir.display().to_string())
        }
        None => {
            let world = generate_world(WorldConfig::default(), args.gen_seed)?;
            let data = generate_datasets(&world, GenCounts::default(), args.gen_seed)?;
            let note = format!("generated in memory (gen-seed {})", args.gen_seed);
            (world.vocab, data.train, data.test, Some(data.iid), note)
        }
    };

    let (base_cfg, model_cfg) = effective_config(&args.overrides, &vocab)?;
    let cells: Vec<(Mode, Order, u64)> = grid()
        .iter()
        .flat_map(|&(mode, order)| {
            (0..args.seeds).map(move |i| (mode, order, base_cfg.seed + i))
        })
        .collect();

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(usize::from).unwrap_or(1))
        .clamp(1, cells.len());

    let results: Vec<Mutex<Option<Result<Row, CliError>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let (mode, order, seed) = cells[i];
                let out = run_cell(&base_cfg, model_cfg, mode, order, seed, &train, &test, iid.as_deref());
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    for cell in results {
        rows.push(cell.into_inner().unwrap().expect("every cell ran")?);
    }
    rows.sort_by(|a, b| {
        (a.mode.as_str(), a.order.as_str(), a.seed).cmp(&(b.mode.as_str(), b.order.as_str(), b.seed))
    });
    let summary = summarize(&rows, args.seeds);

    std::fs::create_dir_all(&args.out).map_err(CliError::io)?;
    let comparison = Comparison {
        config: serde_json::json!({
            "train": base_cfg,
            "model": model_cfg,
            "data": data_note,
            "seeds": args.seeds,
            "base_seed": base_cfg.seed,
        }),
        rows,
        summary,
    };
    crate::write_json(&args.out.join("comparison.json"), &comparison)?;
    write_csv(&args.out.join("comparison.csv"), &comparison.rows)?;

    for s in &comparison.summary {
        println!(
            "{:<18} {:<4} consistency {:.4}  overall {:.4}",
            s.mode, s.order, s.mean_consistency, s.mean_overall_accuracy
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    base: &TrainConfig,
    model_cfg: ModelConfig,
    mode: Mode,
    order: Order,
    seed: u64,
    train_samples: &[Sample],
    test: &[Sample],
    iid: Option<&[Sample]>,
) -> Result<Row, CliError> {
    let cfg = TrainConfig { mode, order, seed, ..base.clone() };
    let out = run(model_cfg, &cfg, train_samples)?;
    let report = evaluate_run(&out.model, test, iid)?;
    Ok(Row {
        mode: mode.to_string(),
        order: order.to_string(),
        seed,
        overall_accuracy: report.overall_accuracy,
        accuracy_pp: report.accuracy_pp,
        accuracy_pw: report.accuracy_pw,
        accuracy_ww: report.accuracy_ww,
        consistency: report.consistency,
        iid_accuracy: report.iid_accuracy,
    })
}

fn summarize(rows: &[Row], seeds: u64) -> Vec<Summary> {
    let mut out = Vec::new();
    for (mode, order) in grid() {
        let cell_rows: Vec<&Row> = rows
            .iter()
            .filter(|r| r.mode == mode.to_string() && r.order == order.to_string())
            .collect();
        if cell_rows.is_empty() {
            continue;
        }
        let mean = |f: &dyn Fn(&Row) -> f64| {
            cell_rows.iter().map(|r| f(r)).sum::<f64>() / cell_rows.len() as f64
        };
        let iid = if cell_rows.iter().all(|r| r.iid_accuracy.is_some()) {
            Some(mean(&|r: &Row| r.iid_accuracy.unwrap()))
        } else {
            None
        };
        out.push(Summary {
            mode: mode.to_string(),
            order: order.to_string(),
            seeds,
            mean_overall_accuracy: mean(&|r: &Row| r.overall_accuracy),
            mean_accuracy_pp: mean(&|r: &Row| r.accuracy_pp),
            mean_accuracy_pw: mean(&|r: &Row| r.accuracy_pw),
            mean_accuracy_ww: mean(&|r: &Row| r.accuracy_ww),
            mean_consistency: mean(&|r: &Row| r.consistency),
            mean_iid_accuracy: iid,
        });
    }
    out
}

fn write_csv(path: &std::path::Path, rows: &[Row]) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(CliError::io)?);
    writeln!(
        w,
        "mode,order,seed,overall_accuracy,accuracy_pp,accuracy_pw,accuracy_ww,consistency,iid_accuracy"
    )
    .map_err(CliError::io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.order,
            r.seed,
            r.overall_accuracy,
            r.accuracy_pp,
            r.accuracy_pw,
            r.accuracy_ww,
            r.consistency,
            r.iid_accuracy.map(|v| v.to_string()).unwrap_or_default()
        )
        .map_err(CliError::io)?;
    }
    Ok(())
}
