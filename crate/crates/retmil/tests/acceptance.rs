//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS] criterion N` line with the measured value. Run with
//! `cargo test --test acceptance -- --nocapture` to see the details.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retmil::bench::{bench_retmil, bench_softmax_baseline, BenchConfig, BenchRecord};
use retmil::data::{
    balanced_accuracy, confusion_matrix, generate_synthetic, roc_auc, weighted_f1, witness_oracle_score,
    FeatureSequence, SplitKind, SyntheticTaskConfig,
};
use retmil::model::{train, Model, ModelConfig, TrainConfig};
use retmil::retention::{decay_matrix, MsrLayer, RetentionConfig, RetentionMode};
use retmil::sequencer::compute_provenance;
use retmil::tensor::{finite_diff_check, Scalar, Tensor};

fn random_matrix<T: Scalar>(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data: Vec<T> = (0..n * d).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect();
    Tensor::from_vec(&[n, d], data).unwrap()
}

fn random_seq(n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSequence<f64> {
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    FeatureSequence::new(n, d, data).unwrap()
}

/// Criterion 1: parallel and recurrent retention agree over >= 1000
/// randomized cases per precision, within 1e-10 (f64) and 1e-3 (f32).
fn retention_equivalence_sweep<T: Scalar>(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.gen_range(1..=4usize);
        let dh = 2 * rng.gen_range(1..=16usize); // d_head <= 32
        let n = rng.gen_range(1..=256usize);
        let cfg = RetentionConfig::<T>::new(heads * dh, heads).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let layer = MsrLayer::init(cfg, &mut init_rng).unwrap();
        let x = random_matrix::<T>(n, heads * dh, &mut rng);
        for h in 0..heads {
            let p = layer.retention_parallel(h, &x).unwrap().to_vec();
            let r = layer.retention_recurrent(h, &x).unwrap().to_vec();
            for (a, b) in p.iter().zip(&r) {
                let diff = (a.as_f64() - b.as_f64()).abs();
                if diff > worst {
                    worst = diff;
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_01_retention_oracle_equivalence() {
    let start = Instant::now();
    let worst64 = retention_equivalence_sweep::<f64>(1000, 101);
    assert!(worst64 <= 1e-10, "f64 parallel/recurrent disagreement {worst64:.3e} > 1e-10");
    let worst32 = retention_equivalence_sweep::<f32>(1000, 102);
    assert!(worst32 <= 1e-3, "f32 parallel/recurrent disagreement {worst32:.3e} > 1e-3");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "equivalence sweep took {elapsed:?}");
    println!(
        "[PASS] criterion 1: retention equivalence, 1000 cases/precision, max diff f64 {worst64:.2e} (<=1e-10), f32 {worst32:.2e} (<=1e-3), {elapsed:?}"
    );
}

#[test]
fn criterion_02_decay_matrix_exactness() {
    let d = decay_matrix(0.5f64, 3).unwrap();
    assert_eq!(d.tensor().to_vec(), vec![1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0], "gamma=0.5, n=3 bitwise");
    for n in 1..=512usize {
        let m = decay_matrix(0.96875f64, n).unwrap();
        let v = m.tensor().to_vec();
        for i in 0..n {
            assert_eq!(v[i * n + i], 1.0, "diagonal at n={n}");
            for j in i + 1..n {
                assert_eq!(v[i * n + j], 0.0, "upper triangle at n={n}");
            }
        }
    }
    println!("[PASS] criterion 2: decay matrix bitwise values and exact triangularity for n <= 512");
}

#[test]
fn criterion_03_padding_sweep() {
    let start = Instant::now();
    let mut checked = 0usize;
    for l in [2usize, 4, 8, 512] {
        for n in 1..=2048usize {
            let p = compute_provenance(n, l).unwrap();
            let q = n / l;
            let r = n % l;
            let mut counts = vec![0u32; n];
            for row in &p.rows {
                assert_eq!(row.len(), l, "row length at N={n} l={l}");
                for &t in row {
                    counts[t] += 1;
                }
            }
            for (t, &c) in counts.iter().enumerate() {
                if t < q * l {
                    assert_eq!(c, 1, "block token {t} count at N={n} l={l}");
                } else {
                    assert!(c >= 1, "remainder token {t} missing at N={n} l={l}");
                }
            }
            for row in &p.rows[..p.num_rows().saturating_sub(1)] {
                assert!(row.iter().all(|&t| t < q * l), "remainder outside last row at N={n} l={l}");
            }
            if r > 0 && 2 * r < l {
                let a = (l - r) / r;
                let b = (l - r) % r;
                assert_eq!(r + a * r + b, l, "length identity at N={n} l={l}");
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "padding sweep took {elapsed:?}");
    println!("[PASS] criterion 3: padding sweep over {checked} (N, l) pairs in {elapsed:?}");
}

#[test]
fn criterion_04_end_to_end_gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig { dim: 8, heads: 2, subseq_len: 4, pool_hidden: 6, num_classes: 2, ..Default::default() };
    let model = Model::<f64>::init(cfg, 404).unwrap();
    let store = model.param_store().unwrap();
    let coords = store.num_coords();
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let seq = random_seq(10, 8, &mut rng);
    let report = finite_diff_check(&store, 1e-5, move || {
        model.forward(&seq)?.logits.cross_entropy_logits(0)
    })
    .unwrap();
    let elapsed = start.elapsed();
    assert_eq!(report.coords_checked, coords, "every parameter coordinate probed");
    assert!(report.max_rel_error < 1e-4, "max relative error {:.3e} at {:?}", report.max_rel_error, report.worst);
    assert!(elapsed < Duration::from_secs(120), "gradient check took {elapsed:?}");
    println!(
        "[PASS] criterion 4: end-to-end gradient check, {coords} coordinates, max rel error {:.2e} (<1e-4), {elapsed:?}",
        report.max_rel_error
    );
}

#[test]
fn criterion_05_probability_conservation() {
    let cfg = ModelConfig { dim: 16, heads: 2, subseq_len: 8, pool_hidden: 8, num_classes: 2, ..Default::default() };
    let model = Model::<f64>::init(cfg, 505).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=200usize);
        let seq = random_seq(n, 16, &mut rng);
        let trace = model.forward(&seq).unwrap();
        for row in &trace.alpha {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst = worst.max((trace.beta.iter().sum::<f64>() - 1.0).abs());
        let scores = Model::attention_scores(&trace).unwrap();
        worst = worst.max((scores.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst <= 1e-6, "probability sum deviation {worst:.3e} > 1e-6");
    println!("[PASS] criterion 5: alpha/beta/token-score conservation on 100 bags, worst deviation {worst:.2e} (<=1e-6)");
}

#[test]
fn criterion_06_causality_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut trials = 0usize;
    for _ in 0..50 {
        let heads = rng.gen_range(1..=4usize);
        let dh = 2 * rng.gen_range(1..=8usize);
        let dim = heads * dh;
        let n = rng.gen_range(2..=64usize);
        let m = rng.gen_range(1..n);
        let cfg = RetentionConfig::<f64>::new(dim, heads).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let layer = MsrLayer::init(cfg, &mut init_rng).unwrap();
        let x = random_matrix::<f64>(n, dim, &mut rng);
        let mut altered = x.to_vec();
        for v in &mut altered[m * dim..(m + 1) * dim] {
            *v = -*v + 0.37;
        }
        let x2 = Tensor::from_vec(&[n, dim], altered).unwrap();
        let a = layer.forward_seq(&x, RetentionMode::Parallel).unwrap().to_vec();
        let b = layer.forward_seq(&x2, RetentionMode::Parallel).unwrap().to_vec();
        assert_eq!(&a[..m * dim], &b[..m * dim], "prefix changed: n={n} m={m} heads={heads}");
        trials += 1;
    }
    println!("[PASS] criterion 6: causality bit-exact across {trials} randomized perturbations");
}

#[test]
fn criterion_07_synthetic_classification() {
    // One synthetic task at the pinned scale, trained at seeds 0, 1, 2.
    let task_cfg = SyntheticTaskConfig {
        d: 64,
        n_range: (64, 256),
        witness_range: (5, 10),
        delta: 6.0,
        sigma: 1.0,
        bags_train: 200,
        bags_val: 50,
        bags_test: 100,
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let (manifest, task) = generate_synthetic(&task_cfg, dir.path()).unwrap();
    let train_bags = manifest.load_split::<f32>(dir.path(), SplitKind::Train).unwrap();
    let val_bags = manifest.load_split::<f32>(dir.path(), SplitKind::Val).unwrap();
    let test_bags = manifest.load_split::<f32>(dir.path(), SplitKind::Test).unwrap();
    let y_true: Vec<usize> = test_bags.iter().map(|b| b.label).collect();

    // independent solvability confirmation
    let y_oracle: Vec<usize> = test_bags
        .iter()
        .map(|b| usize::from(witness_oracle_score(&b.features, &task.direction, 5) > task_cfg.delta / 2.0))
        .collect();
    let oracle_bacc = balanced_accuracy(&y_true, &y_oracle).unwrap();
    assert!(oracle_bacc >= 0.99, "top-k oracle bacc {oracle_bacc} < 0.99: task not solvable");

    let mut results = Vec::new();
    for seed in 0..3u64 {
        let start = Instant::now();
        let mut model = Model::<f32>::init(ModelConfig::default(), seed).unwrap();
        let train_cfg = TrainConfig { seed, ..Default::default() };
        let outcome = train(&mut model, &train_bags, &val_bags, &train_cfg).unwrap();
        let elapsed = start.elapsed();
        assert!(elapsed < Duration::from_secs(300), "seed {seed}: training took {elapsed:?} (>= 5 min)");

        let y_pred: Vec<usize> = test_bags.iter().map(|b| model.predict(&b.features).unwrap().0).collect();
        let bacc = balanced_accuracy(&y_true, &y_pred).unwrap();
        assert!(
            bacc >= 0.95,
            "seed {seed}: test balanced accuracy {bacc:.4} < 0.95 (best epoch {}, {} epochs)",
            outcome.best_epoch,
            outcome.history.len()
        );
        results.push((seed, bacc, elapsed));
    }
    let detail: Vec<String> =
        results.iter().map(|(s, b, e)| format!("seed {s}: bacc {b:.3} in {:.0?}", e)).collect();
    println!(
        "[PASS] criterion 7: synthetic task (oracle bacc {oracle_bacc:.3}); {} — all >= 0.95, each < 5 min",
        detail.join("; ")
    );
}

fn find(records: &[BenchRecord], n: usize) -> &BenchRecord {
    records.iter().find(|r| r.n_tokens == n).unwrap_or_else(|| panic!("no record at N={n}"))
}

#[test]
fn criterion_08_memory_and_throughput_trends() {
    let start = Instant::now();
    let cfg = BenchConfig { lengths: vec![2048, 4096, 8192, 16384], repeats: 3, warmups: 1, ..Default::default() };
    let (ret, ret_failed) = bench_retmil::<f32>(&cfg).unwrap();
    let (base, base_failed) = bench_softmax_baseline::<f32>(&cfg).unwrap();
    assert!(ret_failed.is_empty() && base_failed.is_empty(), "benchmark points failed: {ret_failed:?} {base_failed:?}");

    let ret_ratio = find(&ret, 16384).peak_bytes as f64 / find(&ret, 2048).peak_bytes as f64;
    let base_ratio = find(&base, 16384).peak_bytes as f64 / find(&base, 2048).peak_bytes as f64;
    let ret_thr = find(&ret, 16384).throughput_tokens_per_s;
    let base_thr = find(&base, 16384).throughput_tokens_per_s;

    assert!(ret_ratio <= 2.0, "streaming retention peak ratio {ret_ratio:.3} > 2.0");
    assert!(base_ratio >= 3.0, "softmax baseline peak ratio {base_ratio:.3} < 3.0");
    assert!(ret_thr >= base_thr, "retention {ret_thr:.0} tok/s slower than baseline {base_thr:.0} tok/s at N=16384");

    // supporting trends: ~linear retention latency, superlinear baseline peak
    for (lo, hi) in [(4096usize, 8192usize), (8192, 16384)] {
        let lat_ratio = find(&ret, hi).latency_ms_median / find(&ret, lo).latency_ms_median;
        assert!(
            (1.5..=3.0).contains(&lat_ratio),
            "retention latency({hi})/latency({lo}) = {lat_ratio:.2} outside [1.5, 3.0]"
        );
        let peak_ratio = find(&base, hi).peak_bytes as f64 / find(&base, lo).peak_bytes as f64;
        assert!(peak_ratio >= 3.0, "baseline peak({hi})/peak({lo}) = {peak_ratio:.2} < 3.0");
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "benchmark took {elapsed:?}");
    println!(
        "[PASS] criterion 8: peak ratio retention {ret_ratio:.2} (<=2.0) vs baseline {base_ratio:.1} (>=3.0); throughput {ret_thr:.0} vs {base_thr:.0} tok/s at N=16384; per-doubling trends hold; {elapsed:?}"
    );
}

/// From-scratch confusion-matrix implementation, deliberately independent of
/// the library's metric code paths.
fn oracle_metrics(y_true: &[usize], y_pred: &[usize]) -> (f64, f64) {
    let classes = y_true.iter().chain(y_pred).max().unwrap() + 1;
    let mut tp = vec![0f64; classes];
    let mut fp = vec![0f64; classes];
    let mut fn_ = vec![0f64; classes];
    let mut support = vec![0f64; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1.0;
        if t == p {
            tp[t] += 1.0;
        } else {
            fn_[t] += 1.0;
            fp[p] += 1.0;
        }
    }
    let mut recall_sum = 0.0;
    let mut wf1 = 0.0;
    let total: f64 = support.iter().sum();
    for c in 0..classes {
        let recall = tp[c] / support[c];
        recall_sum += recall;
        let f1 = if tp[c] == 0.0 {
            0.0
        } else {
            let precision = tp[c] / (tp[c] + fp[c]);
            2.0 * precision * recall / (precision + recall)
        };
        wf1 += support[c] / total * f1;
    }
    (recall_sum / classes as f64, wf1)
}

#[test]
fn criterion_09_metric_functions() {
    // hand-computed cases reproduce exactly
    let y = [0usize, 0, 1, 1];
    let p = [0usize, 1, 1, 1];
    let bacc = balanced_accuracy(&y, &p).unwrap();
    assert_eq!(bacc, 0.75, "hand bacc case");
    let wf1 = weighted_f1(&y, &p).unwrap();
    assert!((wf1 - (0.5 * (2.0 / 3.0) + 0.5 * 0.8)).abs() < 1e-15, "hand weighted-f1 case: {wf1}");
    let auc = roc_auc(&y, &[0.1, 0.4, 0.35, 0.8]).unwrap();
    assert_eq!(auc, 0.75, "hand auc case");

    // 1000 randomized cross-checks against the in-suite oracle
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let classes = rng.gen_range(2..=5usize);
        let n = rng.gen_range(classes..=60usize);
        // every class gets at least one true sample
        let mut y_true: Vec<usize> = (0..classes).collect();
        for _ in classes..n {
            y_true.push(rng.gen_range(0..classes));
        }
        let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let (ob, of1) = oracle_metrics(&y_true, &y_pred);
        let b = balanced_accuracy(&y_true, &y_pred).unwrap();
        let f = weighted_f1(&y_true, &y_pred).unwrap();
        worst = worst.max((ob - b).abs()).max((of1 - f).abs());
        // confusion matrix totals agree with sample count
        let cm = confusion_matrix(&y_true, &y_pred, classes).unwrap();
        assert_eq!(cm.iter().flatten().sum::<usize>(), n);
    }
    assert!(worst <= 1e-12, "metric cross-check deviation {worst:.3e} > 1e-12");
    println!("[PASS] criterion 9: hand-computed metric cases exact; 1000-case oracle cross-check within {worst:.1e} (<=1e-12)");
}

#[test]
fn criterion_10_training_determinism() {
    let bin = env!("CARGO_BIN_EXE_retmil");
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    let config = serde_json::json!({
        "model": { "dim": 16, "heads": 2, "subseq_len": 8, "pool_hidden": 8 },
        "train": { "max_epochs": 3, "patience": 3, "seed": 11 },
        "synthetic": {
            "d": 16, "n_range": [8, 24], "witness_range": [2, 4],
            "bags_train": 8, "bags_val": 4, "bags_test": 4, "seed": 11
        },
        "precision": "f64",
        "seed": 11,
        "paths": { "manifest": data_dir.join("manifest.json"), "out_dir": dir.path().join("run") }
    });
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).output().expect("spawn retmil");
        assert!(
            out.status.success(),
            "retmil {args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    };

    run(&["gen-synthetic", "--config", cfg_path.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]);

    let mut digests = Vec::new();
    for pass in 0..2 {
        let out_dir = dir.path().join(format!("out{pass}"));
        let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
        cfg["paths"]["out_dir"] = serde_json::json!(out_dir);
        let pass_cfg = dir.path().join(format!("cfg{pass}.json"));
        std::fs::write(&pass_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
        run(&["train", "--config", pass_cfg.to_str().unwrap()]);
        let checkpoint = std::fs::read(out_dir.join("model.bin")).unwrap();
        let history = std::fs::read(out_dir.join("history.csv")).unwrap();
        digests.push((checkpoint, history));
    }
    assert_eq!(digests[0].0, digests[1].0, "checkpoints differ between identical runs");
    assert_eq!(digests[0].1, digests[1].1, "history CSVs differ between identical runs");
    println!(
        "[PASS] criterion 10: two identical f64 training runs produced byte-identical checkpoints ({} bytes) and histories ({} bytes)",
        digests[0].0.len(),
        digests[0].1.len()
    );
}
