//! Command-line entry point: dataset generation, training, evaluation,
//! attention scoring, split inspection, benchmarking, and the self-check
//! suite. All configuration comes from one JSON file; the global
//! `--precision`, `--seed`, and `--workers` flags override it.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{bench_retmil, bench_softmax_baseline, env_info, parse_csv, write_csv, BenchConfig, BenchSummary};
use crate::check::{run_all, Fault};
use crate::config::{Precision, RunConfig};
use crate::data::{evaluate, generate_synthetic, read_features, BagRecord, Manifest, SplitKind};
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, train, write_history_csv, CheckpointMeta, Model, ModelConfig,
};
use crate::sequencer::compute_provenance;
use crate::tensor::Scalar;

#[derive(Parser)]
#[command(name = "retmil", version, about = "Hierarchical retentive multiple-instance learning")]
struct Cli {
    /// Numeric precision (overrides the config file).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Seed override for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation fan-out.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic MIL dataset (bags, manifest, task ground truth).
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the manifest named in the config; writes checkpoint + history.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split; writes a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: SplitKind,
        /// Metrics JSON path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit per-token attention scores for one bag as CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect subsequence splitting; dumps the provenance map as CSV.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        subseq_len: usize,
        #[arg(long)]
        dump_provenance: PathBuf,
    },
    /// Run the scaling benchmark against the softmax-attention baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON summary with environment metadata.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the oracle self-check suites; nonzero exit on any failure.
    Check {
        /// Deliberately break the build to prove the checks detect it.
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                3
            } else {
                2
            }
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        if let Some(s) = cfg.synthetic.as_mut() {
            s.seed = seed;
        }
        if let Some(b) = cfg.bench.as_mut() {
            b.seed = seed;
        }
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenSynthetic { config, out } => {
            let mut cfg = RunConfig::load(config)?;
            apply_overrides(&mut cfg, &cli);
            cfg.validate()?;
            let syn = cfg.synthetic.clone().unwrap_or_default();
            let (manifest, _task) = generate_synthetic(&syn, out)?;
            println!("wrote {} bags, manifest.json, task.json to {}", manifest.entries.len(), out.display());
            Ok(0)
        }
        Command::Train { config } => {
            let mut cfg = RunConfig::load(config)?;
            apply_overrides(&mut cfg, &cli);
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg),
                Precision::F64 => cmd_train::<f64>(&cfg),
            }
        }
        Command::Eval { checkpoint, manifest, split, out } => {
            let precision = cli.precision.map(Ok).unwrap_or_else(|| checkpoint_precision(checkpoint))?;
            let workers = cli.workers.unwrap_or(1);
            if workers == 0 {
                return Err(Error::Config("workers must be >= 1".into()));
            }
            match precision {
                Precision::F32 => cmd_eval::<f32>(checkpoint, manifest, *split, out.as_deref(), workers),
                Precision::F64 => cmd_eval::<f64>(checkpoint, manifest, *split, out.as_deref(), workers),
            }
        }
        Command::Score { checkpoint, input, out } => {
            let precision = cli.precision.map(Ok).unwrap_or_else(|| checkpoint_precision(checkpoint))?;
            match precision {
                Precision::F32 => cmd_score::<f32>(checkpoint, input, out),
                Precision::F64 => cmd_score::<f64>(checkpoint, input, out),
            }
        }
        Command::Split { input, subseq_len, dump_provenance } => cmd_split(input, *subseq_len, dump_provenance),
        Command::Bench { config, out, json } => {
            let mut cfg = RunConfig::load(config)?;
            apply_overrides(&mut cfg, &cli);
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => cmd_bench::<f32>(&cfg, out, json.as_deref()),
                Precision::F64 => cmd_bench::<f64>(&cfg, out, json.as_deref()),
            }
        }
        Command::Check { inject_fault } => {
            let outcomes = run_all(*inject_fault);
            let mut failed = 0usize;
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {:<24} {}", o.name, o.detail);
                if !o.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", outcomes.len());
                Ok(1)
            } else {
                Ok(0)
            }
        }
    }
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let sidecar = {
        let mut s = path.as_os_str().to_os_string();
        s.push(".json");
        PathBuf::from(s)
    };
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| Error::Input(format!("cannot read checkpoint sidecar {}: {e}", sidecar.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.precision.parse()
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<i32> {
    let manifest_path = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train: config must set paths.manifest".into()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let manifest = Manifest::load(manifest_path)?;
    manifest.validate(&base, true)?;
    if manifest.d != cfg.model.dim {
        return Err(Error::Config(format!(
            "manifest d={} does not match model dim {}",
            manifest.d, cfg.model.dim
        )));
    }

    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = manifest.num_classes;
    let train_bags: Vec<BagRecord<T>> = manifest.load_split(&base, SplitKind::Train)?;
    let val_bags: Vec<BagRecord<T>> = manifest.load_split(&base, SplitKind::Val)?;

    let mut model = Model::<T>::init(model_cfg, cfg.seed)?;
    let outcome = train(&mut model, &train_bags, &val_bags, &cfg.train)?;

    let out_dir = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    save_checkpoint(&out_dir.join("model.bin"), &model)?;
    write_history_csv(&out_dir.join("history.csv"), &outcome.history)?;
    println!(
        "trained {} epochs ({}), best epoch {} with validation loss {:.6}; checkpoint at {}",
        outcome.history.len(),
        if outcome.stopped_early { "early stop" } else { "max epochs" },
        outcome.best_epoch,
        outcome.best_val_loss,
        out_dir.join("model.bin").display()
    );
    Ok(0)
}

fn model_from_snapshot<T: Scalar>(cfg: &ModelConfig, snapshot: &BTreeMap<String, Vec<T>>) -> Result<Model<T>> {
    let model = Model::<T>::init(cfg.clone(), 0)?;
    model.param_store()?.restore(snapshot)?;
    Ok(model)
}

/// Class index plus probability vector for each bag.
type Predictions<T> = Vec<(usize, Vec<T>)>;

/// Predict every bag, optionally fanning out across worker threads. Results
/// keep manifest order regardless of worker count; each worker rebuilds the
/// model from a parameter snapshot since graphs are thread-local.
fn predict_all<T: Scalar>(
    cfg: &ModelConfig,
    snapshot: &BTreeMap<String, Vec<T>>,
    bags: &[BagRecord<T>],
    workers: usize,
) -> Result<Predictions<T>> {
    if workers <= 1 || bags.len() <= 1 {
        let model = model_from_snapshot(cfg, snapshot)?;
        return bags.iter().map(|b| model.predict(&b.features)).collect();
    }
    let chunk = bags.len().div_ceil(workers);
    let chunk_results: Vec<Result<Predictions<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = bags
            .chunks(chunk)
            .map(|slice| {
                scope.spawn(move || -> Result<Predictions<T>> {
                    let model = model_from_snapshot(cfg, snapshot)?;
                    slice.iter().map(|b| model.predict(&b.features)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(bags.len());
    for res in chunk_results {
        out.extend(res?);
    }
    Ok(out)
}

fn cmd_eval<T: Scalar>(
    checkpoint: &Path,
    manifest_path: &Path,
    split: SplitKind,
    out: Option<&Path>,
    workers: usize,
) -> Result<i32> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let manifest = Manifest::load(manifest_path)?;
    manifest.validate(&base, false)?;
    if manifest.d != model.config.dim {
        return Err(Error::Config(format!(
            "manifest d={} does not match checkpoint dim {}",
            manifest.d, model.config.dim
        )));
    }
    let bags: Vec<BagRecord<T>> = manifest.load_split(&base, split)?;

    let snapshot = model.param_store()?.snapshot();
    let predictions = predict_all(&model.config, &snapshot, &bags, workers)?;
    let y_true: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let y_pred: Vec<usize> = predictions.iter().map(|(c, _)| *c).collect();
    let scores: Vec<f64> = predictions.iter().map(|(_, p)| p.get(1).map(|v| v.as_f64()).unwrap_or(0.0)).collect();
    let report = evaluate(&y_true, &y_pred, Some(&scores), manifest.num_classes)?;

    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("metrics for split '{split}' written to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(0)
}

fn cmd_score<T: Scalar>(checkpoint: &Path, input: &Path, out: &Path) -> Result<i32> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let seq = read_features::<T>(input)?;
    if seq.d != model.config.dim {
        return Err(Error::Config(format!("bag d={} does not match checkpoint dim {}", seq.d, model.config.dim)));
    }
    let trace = model.forward_streaming(&seq)?;
    let scores = Model::attention_scores(&trace)?;
    let mut csv = String::from("token_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", s.as_f64()));
    }
    std::fs::write(out, csv)?;
    let total: f64 = scores.iter().map(|s| s.as_f64()).sum();
    println!("wrote {} token scores (sum {total:.9}) to {}", scores.len(), out.display());
    Ok(0)
}

fn cmd_split(input: &Path, subseq_len: usize, dump: &Path) -> Result<i32> {
    let seq = read_features::<f32>(input)?;
    let provenance = compute_provenance(seq.n, subseq_len)?;
    let mut csv = String::from("row,slot,token_index\n");
    for (row, slots) in provenance.rows.iter().enumerate() {
        for (slot, tok) in slots.iter().enumerate() {
            csv.push_str(&format!("{row},{slot},{tok}\n"));
        }
    }
    std::fs::write(dump, csv)?;
    println!(
        "split N={} into {} subsequences of length {subseq_len}; provenance at {}",
        seq.n,
        provenance.num_rows(),
        dump.display()
    );
    Ok(0)
}

fn cmd_bench<T: Scalar>(cfg: &RunConfig, out: &Path, json: Option<&Path>) -> Result<i32> {
    let bench_cfg: BenchConfig = cfg.bench.clone().unwrap_or_default();
    let (mut records, mut failed) = bench_retmil::<T>(&bench_cfg)?;
    let (base_records, base_failed) = bench_softmax_baseline::<T>(&bench_cfg)?;
    records.extend(base_records);
    failed.extend(base_failed);

    write_csv(out, &records)?;
    // sanity: the CSV must parse back into the same records
    let reparsed = parse_csv(&std::fs::read_to_string(out)?)?;
    if reparsed != records {
        return Err(Error::Numeric("bench csv failed its round-trip check".into()));
    }
    for f in &failed {
        eprintln!("skipped {} at N={}: {}", f.method, f.n_tokens, f.reason);
    }
    if let Some(path) = json {
        let summary = BenchSummary { records: records.clone(), failed, environment: env_info::<T>() };
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    println!("wrote {} benchmark rows to {}", records.len(), out.display());
    Ok(0)
}
