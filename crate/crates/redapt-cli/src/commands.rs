//! The five subcommands. Each resolves a configuration, does its work
//! through the library, writes machine-readable artifacts under `--out`,
//! and prints a one-line summary per result to stdout.
//!
//! Everything is deterministic given `--seed` except the wall-clock fields
//! of a bench report; JSON artifacts all carry `schema_version`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use redapt_core::audio::AugmentPolicy;
use redapt_core::cost;
use redapt_core::encoder::EncoderConfig;
use redapt_core::redapt::param_count;
use redapt_core::search::{backward_select, trace_to_jsonl, Bucket, PositionConfig};
use redapt_core::train::{metrics_to_csv, train_toy_with, OptimizerConfig, TrainOptions};
use redapt_core::{Error, SCHEMA_VERSION};

use crate::bench::{run_bench, sweep_to_csv};
use crate::config::config_digest;
use crate::CliError;

/// Largest `layers * d_model` the bench command will run without
/// `--allow-large`: four desk encoders. Past that a forward pass allocates
/// tapes in the hundreds of megabytes and "bench" quietly becomes "swap".
pub const BENCH_SIZE_CAP: usize = 2_048;

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialisation failed: {e}")))
}

/// `flops`: closed-form cost report at batch 1, written as CSV and JSON.
pub fn cmd_flops(cfg: &EncoderConfig, raw_len: usize, out: &Path) -> Result<(), CliError> {
    let digest = config_digest(cfg);
    let report = cost::estimate(cfg, raw_len, 1)?;
    let csv_path = write_artifact(out, "flops.csv", &report.to_csv())?;
    let json_path = write_artifact(out, "flops.json", &to_json_pretty(&report)?)?;
    println!(
        "flops config={digest} positions={:?} n0={} final_len={} total_flops={} ratio={:.6}",
        cfg.positions.positions(),
        report.n0,
        report.final_len,
        report.total_flops,
        report.flops_ratio_vs_unpooled
    );
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// `bench`: measured throughput / latency / peak tracked allocation, either
/// one batch size (JSON report) or a sweep (CSV, one row per batch).
#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    cfg: &EncoderConfig,
    raw_len: usize,
    seed: u64,
    out: &Path,
    batch: usize,
    warmup: usize,
    iters: usize,
    sweep: Option<&str>,
    allow_large: bool,
    parallel: bool,
) -> Result<(), CliError> {
    let size = cfg.layers * cfg.d_model;
    if size > BENCH_SIZE_CAP && !allow_large {
        return Err(CliError::Usage(format!(
            "refusing to bench layers*d_model = {size} (> cap {BENCH_SIZE_CAP}); \
             pass --allow-large if you really want to run this size"
        )));
    }
    let digest = config_digest(cfg);

    let batches: Vec<usize> = match sweep {
        None => vec![batch],
        Some(list) => {
            let mut parsed = Vec::new();
            for part in list.split(',') {
                parsed.push(part.trim().parse().map_err(|_| {
                    CliError::Usage(format!("bad batch size {part:?} in --sweep {list:?}"))
                })?);
            }
            parsed
        }
    };

    let mut reports = Vec::with_capacity(batches.len());
    for &b in &batches {
        let report = run_bench(cfg, &digest, raw_len, b, warmup, iters, seed, parallel)?;
        println!(
            "bench config={digest} batch={b} iters={iters} throughput={:.3} seq/s \
             wall_ms mean={:.2} p50={:.2} p95={:.2} peak_elements={}",
            report.throughput_seq_per_s,
            report.wall_ms_mean,
            report.wall_ms_p50,
            report.wall_ms_p95,
            report.peak_tracked_elements
        );
        reports.push(report);
    }

    if batches.len() == 1 {
        let path = write_artifact(out, "bench.json", &to_json_pretty(&reports[0])?)?;
        println!("wrote {}", path.display());
    } else {
        let path = write_artifact(out, "bench_sweep.csv", &sweep_to_csv(&reports))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Summary written next to the search trace.
#[derive(Serialize)]
struct SearchSummary {
    schema_version: u32,
    config_digest: String,
    start: Vec<usize>,
    bucket: String,
    evaluator: String,
    best: Vec<usize>,
    best_quality: f64,
    best_flops_ratio: f64,
    evaluations: usize,
    rounds: usize,
}

/// `search`: greedy backward selection from the configured positions.
///
/// Evaluators (both deterministic, as the memoised search requires):
/// * `neg-flops` — quality is the negated FLOPs ratio, so the search walks
///   toward the cheapest reachable configuration in the bucket;
/// * `constant` — every configuration scores 0.0; nothing ever improves, so
///   the search scores the start and its neighbours once and stops where it
///   began (useful for exercising the trace format).
pub fn cmd_search(
    cfg: &EncoderConfig,
    raw_len: usize,
    out: &Path,
    evaluator_name: &str,
    bucket_name: &str,
    max_rounds: usize,
) -> Result<(), CliError> {
    let bucket = match bucket_name {
        "low-mid" => Bucket::low_mid(cfg.layers),
        "mid-top" => Bucket::mid_top(cfg.layers),
        other => {
            return Err(CliError::Usage(format!(
                "unknown bucket {other:?} (available: low-mid, mid-top)"
            )));
        }
    };

    // Both scoring closures go through the cost model; estimate() errors
    // (e.g. a sequence pooled below one kernel window) are config problems,
    // surfaced before the search rather than mid-climb.
    let ratio_of = |positions: &PositionConfig| -> Result<f64, Error> {
        let candidate = cfg.with_positions(positions.clone());
        Ok(cost::estimate(&candidate, raw_len, 1)?.flops_ratio_vs_unpooled)
    };
    ratio_of(&cfg.positions)?;
    let flops_ratio = |positions: &PositionConfig| -> f64 {
        ratio_of(positions).map_or(f64::INFINITY, |r| r)
    };

    let outcome = match evaluator_name {
        "constant" => {
            let constant = |_: &PositionConfig| 0.0;
            backward_select(&cfg.positions, &bucket, &constant, &flops_ratio, max_rounds)
        }
        "neg-flops" => {
            let neg_flops = |positions: &PositionConfig| -flops_ratio(positions);
            backward_select(&cfg.positions, &bucket, &neg_flops, &flops_ratio, max_rounds)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown evaluator {other:?} (available: constant, neg-flops)"
            )));
        }
    };

    let summary = SearchSummary {
        schema_version: SCHEMA_VERSION,
        config_digest: config_digest(cfg),
        start: cfg.positions.positions().to_vec(),
        bucket: bucket_name.to_string(),
        evaluator: evaluator_name.to_string(),
        best: outcome.best.positions().to_vec(),
        best_quality: outcome.best_quality,
        best_flops_ratio: outcome.best_flops_ratio,
        evaluations: outcome.evaluations,
        rounds: outcome.rounds,
    };
    let trace_path = write_artifact(out, "search_trace.jsonl", &trace_to_jsonl(&outcome.trace))?;
    let json_path = write_artifact(out, "search.json", &to_json_pretty(&summary)?)?;
    println!(
        "search start={:?} best={:?} quality={:.6} flops_ratio={:.6} evaluations={} rounds={}",
        summary.start,
        summary.best,
        summary.best_quality,
        summary.best_flops_ratio,
        summary.evaluations,
        summary.rounds
    );
    println!("wrote {} and {}", trace_path.display(), json_path.display());
    Ok(())
}

/// One trained ablation variant.
#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    second_cnn: bool,
    layernorm: bool,
    gelu: bool,
    config_digest: String,
    adapter_params_per_block: u64,
    status: &'static str,
    final_loss: Option<f64>,
    final_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct AblationReport {
    schema_version: u32,
    seed: u64,
    steps: usize,
    rows: Vec<AblationRow>,
}

fn ablation_rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,second_cnn,layernorm,gelu,config_digest,adapter_params_per_block,status,final_loss,final_accuracy\n",
    );
    for r in rows {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.second_cnn,
            r.layernorm,
            r.gelu,
            r.config_digest,
            r.adapter_params_per_block,
            r.status,
            fmt(r.final_loss),
            fmt(r.final_accuracy)
        ));
    }
    out
}

/// `ablate`: train the toy task once per adaptor-flag variant and report
/// final validation loss/accuracy per row. The first row re-enables every
/// flag, so on an unablated base configuration its digest equals the base
/// digest. A diverged run is reported in its row, not treated as a command
/// failure — which variants fail to train is part of the result.
pub fn cmd_ablate(
    cfg: &EncoderConfig,
    seed: u64,
    out: &Path,
    steps: usize,
    batch_size: usize,
) -> Result<(), CliError> {
    const VARIANTS: [(&str, bool, bool, bool); 4] = [
        ("full", true, true, true),
        ("no_second_cnn", false, true, true),
        ("no_layernorm", true, false, true),
        ("no_layernorm_no_gelu", true, false, false),
    ];

    let opt = OptimizerConfig::default();
    let options = TrainOptions { steps, batch_size, ..TrainOptions::default() };
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (variant, second_cnn, layernorm, gelu) in VARIANTS {
        let mut candidate = cfg.clone();
        candidate.redapt.enable_second_cnn = second_cnn;
        candidate.redapt.enable_layernorm = layernorm;
        candidate.redapt.enable_gelu = gelu;
        let digest = config_digest(&candidate);
        let params = param_count(&candidate.redapt);

        let (status, final_loss, final_accuracy) =
            match train_toy_with(&candidate, &opt, &options, seed) {
                Ok(outcome) => ("ok", Some(outcome.final_eval.loss), Some(outcome.final_eval.accuracy)),
                Err(Error::Diverged { .. }) => ("diverged", None, None),
                Err(e) => return Err(e.into()),
            };
        println!(
            "ablate variant={variant} flags=({second_cnn},{layernorm},{gelu}) config={digest} \
             params/block={params} status={status} loss={} accuracy={}",
            final_loss.map_or("-".into(), |x| format!("{x:.4}")),
            final_accuracy.map_or("-".into(), |x| format!("{x:.4}")),
        );
        rows.push(AblationRow {
            variant,
            second_cnn,
            layernorm,
            gelu,
            config_digest: digest,
            adapter_params_per_block: params,
            status,
            final_loss,
            final_accuracy,
        });
    }

    let report = AblationReport { schema_version: SCHEMA_VERSION, seed, steps, rows };
    let csv_path = write_artifact(out, "ablate.csv", &ablation_rows_to_csv(&report.rows))?;
    let json_path = write_artifact(out, "ablate.json", &to_json_pretty(&report)?)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Summary written next to the training metrics; no wall-clock fields, so
/// two runs with one seed produce byte-identical artifacts.
#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    config_digest: String,
    seed: u64,
    steps: usize,
    final_loss: f64,
    final_accuracy: f64,
}

/// `train`: one toy-task run; emits `metrics.csv`, `checkpoint.bin`, and a
/// JSON summary.
pub fn cmd_train(
    cfg: &EncoderConfig,
    seed: u64,
    out: &Path,
    steps: usize,
    batch_size: usize,
    augment: bool,
) -> Result<(), CliError> {
    let opt = OptimizerConfig::default();
    let options = TrainOptions {
        steps,
        batch_size,
        augment: augment.then(AugmentPolicy::default),
        ..TrainOptions::default()
    };
    let outcome = train_toy_with(cfg, &opt, &options, seed)?;

    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        config_digest: config_digest(cfg),
        seed,
        steps,
        final_loss: outcome.final_eval.loss,
        final_accuracy: outcome.final_eval.accuracy,
    };
    let csv_path = write_artifact(out, "metrics.csv", &metrics_to_csv(&outcome.history))?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let ckpt_path = out.join("checkpoint.bin");
    outcome.checkpoint.save(&ckpt_path)?;
    let json_path = write_artifact(out, "train.json", &to_json_pretty(&summary)?)?;
    println!(
        "train config={} seed={seed} steps={steps} final_loss={:.4} final_accuracy={:.4}",
        summary.config_digest, summary.final_loss, summary.final_accuracy
    );
    println!(
        "wrote {}, {}, and {}",
        csv_path.display(),
        ckpt_path.display(),
        json_path.display()
    );
    Ok(())
}
