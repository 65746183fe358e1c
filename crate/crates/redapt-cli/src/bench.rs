//! Micro-benchmark harness: timed forward passes over a seeded synthetic
//! batch, reported as throughput plus wall-time percentiles and the peak
//! tracked allocation of the tape.
//!
//! The measured region runs with the library's data-parallel path disabled,
//! so every sample exercises exactly one thread regardless of machine; pass
//! `--parallel` to measure the fan-out path instead. Input synthesis happens
//! before the first timed iteration and is never included in a sample.

use std::time::Instant;

use serde::Serialize;

use redapt_core::autodiff::Tape;
use redapt_core::encoder::{encoder_forward, EncoderConfig, EncoderParams};
use redapt_core::nn::TrainMode;
use redapt_core::seeding;
use redapt_core::tensor::Tensor;
use redapt_core::{par, SCHEMA_VERSION};

use crate::CliError;

/// One benchmark result. Wall-clock fields vary run to run; everything else
/// is a pure function of the inputs.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub positions: Vec<usize>,
    pub raw_samples: usize,
    pub batch: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    /// Whether the measured pass used the data-parallel path.
    pub parallel: bool,
    /// `batch * measured_iters / total_elapsed`.
    pub throughput_seq_per_s: f64,
    pub wall_ms_mean: f64,
    pub wall_ms_p50: f64,
    pub wall_ms_p95: f64,
    /// One entry per measured iteration, in order.
    pub wall_ms_samples: Vec<f64>,
    /// Peak tracked allocation: elements held by non-leaf tape nodes after
    /// one forward pass (identical across iterations).
    pub peak_tracked_elements: u64,
}

/// Benchmark one configuration at one batch size. `iters` must be >= 1;
/// with `iters = 1, warmup = 0` the report holds exactly one sample.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    cfg: &EncoderConfig,
    digest: &str,
    raw_samples: usize,
    batch: usize,
    warmup: usize,
    iters: usize,
    seed: u64,
    parallel: bool,
) -> Result<BenchReport, CliError> {
    if iters == 0 {
        return Err(CliError::Usage("--iters must be >= 1".into()));
    }
    if batch == 0 {
        return Err(CliError::Usage("--batch must be >= 1".into()));
    }

    let params = EncoderParams::init(cfg, seed)?;
    let mut rng = seeding::rng_from(&[seed, u64::from_le_bytes(*b"benchinp")]);
    let wave = Tensor::from_fn(vec![batch, raw_samples], |_| {
        rand::Rng::random_range(&mut rng, -1.0..1.0)
    });

    let one_pass = || -> Result<u64, CliError> {
        let mut tape = Tape::new();
        let input = tape.constant(wave.clone());
        let nodes = params.register(&mut tape, false);
        encoder_forward(&mut tape, input, &nodes, cfg, &TrainMode::inference())?;
        Ok(tape.activation_elements())
    };

    let was_parallel = par::parallel_enabled();
    par::set_parallel_enabled(parallel);
    let result: Result<(Vec<f64>, f64, u64), CliError> = (|| {
        let mut peak = 0u64;
        for _ in 0..warmup {
            peak = peak.max(one_pass()?);
        }
        let mut samples_ms = Vec::with_capacity(iters);
        let started = Instant::now();
        for _ in 0..iters {
            let t0 = Instant::now();
            peak = peak.max(one_pass()?);
            samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let total = started.elapsed().as_secs_f64();
        Ok((samples_ms, total, peak))
    })();
    par::set_parallel_enabled(was_parallel);
    let (samples_ms, total, peak) = result?;

    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        config_digest: digest.to_string(),
        positions: cfg.positions.positions().to_vec(),
        raw_samples,
        batch,
        warmup_iters: warmup,
        measured_iters: iters,
        parallel,
        throughput_seq_per_s: (batch * iters) as f64 / total,
        wall_ms_mean: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        wall_ms_p50: percentile(&samples_ms, 0.50),
        wall_ms_p95: percentile(&samples_ms, 0.95),
        wall_ms_samples: samples_ms,
        peak_tracked_elements: peak,
    })
}

/// Nearest-rank percentile on a copy of `samples`; with one sample every
/// percentile is that sample.
fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// CSV for a batch sweep, one row per report:
/// `batch,throughput_seq_per_s,wall_ms_mean,wall_ms_p50,wall_ms_p95,peak_tracked_elements`.
pub fn sweep_to_csv(reports: &[BenchReport]) -> String {
    let mut out =
        String::from("batch,throughput_seq_per_s,wall_ms_mean,wall_ms_p50,wall_ms_p95,peak_tracked_elements\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.batch, r.throughput_seq_per_s, r.wall_ms_mean, r.wall_ms_p50, r.wall_ms_p95, r.peak_tracked_elements
        ));
    }
    out
}
