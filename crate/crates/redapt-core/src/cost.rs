//! Closed-form compute and memory model of the encoder.
//!
//! The model mirrors the MAC counter exactly, row by row:
//!
//! * feature extractor stage `j`: `batch * t_j * k_j * c_in * c_out` MACs,
//!   where `t_j` is that stage's output length;
//! * projection: `batch * n0 * c * d`;
//! * transformer layer on length `n`: `4*n*d^2` (projections) + `2*n^2*d`
//!   (scores + context) + `2*n*d*d_ffn` (feed-forward), all times `batch`;
//! * adaptor block entered at length `n`: `n' * k * d^2` per enabled
//!   convolution with `n' = reduced_length(n)`.
//!
//! Non-MAC work is carried separately ("aux"): one flop per softmax output
//! element and per layer-normalised element — the same convention the
//! counter uses — so `flops = 2 * macs + aux` agrees between the two.
//!
//! Memory is a coarser analytical estimate of the retained training
//! footprint per item: `12 * n * d + heads * n^2` elements per transformer
//! layer, two `n * d` tensors per enabled block convolution, and the
//! activations of the front end. It is *not* the tape's measured activation
//! count (the bench reports that separately); it exists to rank
//! configurations, and both figures move the same way.
//!
//! The feature-extractor share can be scaled by a single calibration
//! constant (`fe_cost_calibration` on the config). The large preset pins
//! [`FE_CALIBRATION_LARGE`], chosen once via [`calibrate_fe_share`] so that
//! the three-block reference configuration lands exactly on its measured
//! end-to-end ratio; everything else is then a prediction.

use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::redapt::{param_count, reduced_length};
use crate::search::PositionConfig;
use crate::SCHEMA_VERSION;

/// Calibrated feature-extractor share multiplier for the large preset.
/// Derived once from `calibrate_fe_share(cfg, 88_000, [15, 18, 19], 0.81)`
/// and pinned; a test below asserts the solve still reproduces it. With
/// this single scalar fixed, the one-, two-, and four-block presets land
/// at ratios 0.864, 0.842, and 0.754 with no further tuning.
#[allow(clippy::excessive_precision)] // digits pinned exactly as solved
pub const FE_CALIBRATION_LARGE: f64 = 1.135_243_449_736_651_9;

/// Retained elements per layer ~= MEMORY_ALPHA * n * d + heads * n^2.
pub const MEMORY_ALPHA: u64 = 12;

/// One component of the cost breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub component: String,
    /// Sequence length this component runs at (output length for
    /// reductions).
    pub seq_len: usize,
    pub macs: u64,
    pub aux_flops: u64,
    pub flops: u64,
    pub memory_elements: u64,
}

/// Full cost report for one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub schema_version: u32,
    /// Always "2*macs + aux".
    pub flops_convention: &'static str,
    pub batch: usize,
    pub raw_samples: usize,
    pub n0: usize,
    pub final_len: usize,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_aux_flops: u64,
    pub total_flops: u64,
    pub total_memory_elements: u64,
    /// Learnable scalars added by the adaptor blocks.
    pub adapter_params: u64,
    /// Totals relative to the same encoder with no blocks (1.0 when this
    /// configuration already has none).
    pub flops_ratio_vs_unpooled: f64,
    pub memory_ratio_vs_unpooled: f64,
}

impl CostReport {
    /// CSV rendering: `layer,n_i,flops,mem` plus a trailing totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,n_i,flops,mem\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.component, row.seq_len, row.flops, row.memory_elements
            ));
        }
        out.push_str(&format!(
            "total,{},{},{}\n",
            self.final_len, self.total_flops, self.total_memory_elements
        ));
        out
    }
}

fn push_row(
    rows: &mut Vec<CostRow>,
    component: String,
    seq_len: usize,
    macs: u64,
    aux: u64,
    memory: u64,
) {
    rows.push(CostRow {
        component,
        seq_len,
        macs,
        aux_flops: aux,
        flops: 2 * macs + aux,
        memory_elements: memory,
    });
}

/// Closed-form cost of running `cfg` on a batch of raw waveforms.
pub fn estimate(cfg: &EncoderConfig, raw_samples: usize, batch: usize) -> Result<CostReport> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch must be >= 1".into()));
    }
    let trace = cfg.length_trace(raw_samples)?; // validates cfg
    let b = batch as u64;
    let d = cfg.d_model as u64;
    let h = cfg.n_heads as u64;
    let ffn = cfg.d_ffn as u64;
    let c = cfg.fe.channels as u64;

    let mut rows: Vec<CostRow> = Vec::new();

    // Front end. The calibration multiplier applies to the convolution MACs
    // only; it is exactly 1.0 for every preset except the large analytical
    // one, so desk-scale reports stay integer-exact against the counter.
    let mut n = raw_samples;
    for (j, stage) in cfg.fe.stages.iter().enumerate() {
        let c_in = if j == 0 { 1 } else { c };
        let t_out = cfg
            .fe
            .output_length_after_stage(raw_samples, j)
            .expect("validated by length_trace");
        let raw_macs = b * t_out as u64 * stage.kernel as u64 * c_in * c;
        let macs = if cfg.fe_cost_calibration == 1.0 {
            raw_macs
        } else {
            (raw_macs as f64 * cfg.fe_cost_calibration).round() as u64
        };
        // Two retained tensors per stage (conv output + activation).
        push_row(&mut rows, format!("fe.conv{j}"), t_out, macs, 0, 2 * b * t_out as u64 * c);
        n = t_out;
    }
    debug_assert_eq!(n, trace.n0);
    let n0 = trace.n0 as u64;
    push_row(&mut rows, "fe.ln".into(), trace.n0, 0, b * n0 * c, b * n0 * c);
    push_row(&mut rows, "proj".into(), trace.n0, b * n0 * c * d, 0, b * n0 * d);

    // Transformer stack with blocks.
    for (i, &n_in) in trace.layer_inputs.iter().enumerate() {
        let n = n_in as u64;
        let macs = b * (4 * n * d * d + 2 * n * n * d + 2 * n * d * ffn);
        let aux = b * (2 * n * d + h * n * n);
        let mem = b * (MEMORY_ALPHA * n * d + h * n * n);
        push_row(&mut rows, format!("layer{i}"), n_in, macs, aux, mem);

        if cfg.positions.contains(i) {
            let n_out = reduced_length(n_in, &cfg.redapt.pool)?;
            let np = n_out as u64;
            let convs = 1 + u64::from(cfg.redapt.enable_second_cnn);
            let mut macs = b * np * cfg.redapt.pool.kernel as u64 * d * d;
            if cfg.redapt.enable_second_cnn {
                macs += b * np * cfg.redapt.restore.kernel as u64 * d * d;
            }
            let norms = if cfg.redapt.enable_layernorm { convs } else { 0 };
            let aux = b * norms * np * d;
            let mem = b * 2 * convs * np * d;
            push_row(&mut rows, format!("block{i}"), n_out, macs, aux, mem);
        }
    }

    let nl = trace.final_len as u64;
    push_row(&mut rows, "final_norm".into(), trace.final_len, 0, b * nl * d, b * nl * d);

    let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
    let total_aux: u64 = rows.iter().map(|r| r.aux_flops).sum();
    let total_memory: u64 = rows.iter().map(|r| r.memory_elements).sum();

    let (flops_ratio, memory_ratio) = if cfg.positions.is_empty() {
        (1.0, 1.0)
    } else {
        let base = estimate(&cfg.with_positions(PositionConfig::empty()), raw_samples, batch)?;
        (
            (2 * total_macs + total_aux) as f64 / base.total_flops as f64,
            total_memory as f64 / base.total_memory_elements as f64,
        )
    };

    Ok(CostReport {
        schema_version: SCHEMA_VERSION,
        flops_convention: "2*macs + aux",
        batch,
        raw_samples,
        n0: trace.n0,
        final_len: trace.final_len,
        rows,
        total_macs,
        total_aux_flops: total_aux,
        total_flops: 2 * total_macs + total_aux,
        total_memory_elements: total_memory,
        adapter_params: cfg.positions.len() as u64 * param_count(&cfg.redapt),
        flops_ratio_vs_unpooled: flops_ratio,
        memory_ratio_vs_unpooled: memory_ratio,
    })
}

/// One line of a ratio comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct RatioRow {
    pub schema_version: u32,
    pub positions: PositionConfig,
    pub flops_ratio: f64,
    pub memory_ratio: f64,
    pub total_flops: u64,
}

/// Cost ratios for several position sets against the unpooled encoder,
/// sorted by ascending FLOPs ratio (cheapest first).
pub fn ratio_table(
    cfg: &EncoderConfig,
    position_sets: &[PositionConfig],
    raw_samples: usize,
    batch: usize,
) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::with_capacity(position_sets.len());
    for positions in position_sets {
        let report = estimate(&cfg.with_positions(positions.clone()), raw_samples, batch)?;
        rows.push(RatioRow {
            schema_version: SCHEMA_VERSION,
            positions: positions.clone(),
            flops_ratio: report.flops_ratio_vs_unpooled,
            memory_ratio: report.memory_ratio_vs_unpooled,
            total_flops: report.total_flops,
        });
    }
    rows.sort_by(|a, b| {
        a.flops_ratio
            .total_cmp(&b.flops_ratio)
            .then_with(|| a.positions.cmp(&b.positions))
    });
    Ok(rows)
}

/// CSV rendering of a ratio table: `positions,flops_ratio,memory_ratio`.
pub fn ratio_table_to_csv(rows: &[RatioRow]) -> String {
    let mut out = String::from("positions,flops_ratio,memory_ratio\n");
    for row in rows {
        out.push_str(&format!(
            "\"{}\",{:.6},{:.6}\n",
            row.positions, row.flops_ratio, row.memory_ratio
        ));
    }
    out
}

/// Solve for the feature-extractor share multiplier that makes
/// `reference_positions` land exactly on `target_ratio`.
///
/// With `T` the non-front-end FLOPs of the reference configuration, `T0`
/// the same for the unpooled encoder, and `F` the uncalibrated front-end
/// convolution FLOPs (identical in both, since pooling happens after the
/// front end), the ratio `(T + c*F) / (T0 + c*F) = target` gives
/// `c = (target*T0 - T) / (F * (1 - target))`.
pub fn calibrate_fe_share(
    cfg: &EncoderConfig,
    raw_samples: usize,
    reference_positions: &PositionConfig,
    target_ratio: f64,
) -> Result<f64> {
    if !(0.0 < target_ratio && target_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "calibration target {target_ratio} must lie in (0, 1)"
        )));
    }
    let mut uncal = cfg.clone();
    uncal.fe_cost_calibration = 1.0;

    let fe_flops = |report: &CostReport| -> u64 {
        report
            .rows
            .iter()
            .filter(|r| r.component.starts_with("fe.conv"))
            .map(|r| r.flops)
            .sum()
    };

    let with = estimate(&uncal.with_positions(reference_positions.clone()), raw_samples, 1)?;
    let without = estimate(&uncal.with_positions(PositionConfig::empty()), raw_samples, 1)?;
    let f = fe_flops(&with) as f64;
    debug_assert_eq!(fe_flops(&with), fe_flops(&without));
    let t = (with.total_flops as f64) - f;
    let t0 = (without.total_flops as f64) - f;

    let c = (target_ratio * t0 - t) / (f * (1.0 - target_ratio));
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "calibration target {target_ratio} unreachable (solved multiplier {c})"
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positions(v: &[usize]) -> PositionConfig {
        PositionConfig::new(v.to_vec()).unwrap()
    }

    #[test]
    fn unpooled_ratios_are_exactly_one() {
        let cfg = EncoderConfig::desk();
        let report = estimate(&cfg, 3_200, 1).unwrap();
        assert_eq!(report.flops_ratio_vs_unpooled, 1.0);
        assert_eq!(report.memory_ratio_vs_unpooled, 1.0);
        assert_eq!(report.adapter_params, 0);
        assert_eq!(report.total_flops, 2 * report.total_macs + report.total_aux_flops);
    }

    #[test]
    fn totals_are_row_sums() {
        let cfg = EncoderConfig::desk().with_positions(positions(&[2, 4]));
        let report = estimate(&cfg, 3_200, 2).unwrap();
        assert_eq!(report.total_macs, report.rows.iter().map(|r| r.macs).sum::<u64>());
        assert_eq!(
            report.total_memory_elements,
            report.rows.iter().map(|r| r.memory_elements).sum::<u64>()
        );
        // One block row per position.
        assert_eq!(report.rows.iter().filter(|r| r.component.starts_with("block")).count(), 2);
    }

    #[test]
    fn batch_scales_every_total_linearly() {
        let cfg = EncoderConfig::desk().with_positions(positions(&[3]));
        let one = estimate(&cfg, 3_200, 1).unwrap();
        let four = estimate(&cfg, 3_200, 4).unwrap();
        assert_eq!(four.total_macs, 4 * one.total_macs);
        assert_eq!(four.total_memory_elements, 4 * one.total_memory_elements);
        // Ratios are batch-invariant.
        assert_eq!(four.flops_ratio_vs_unpooled, one.flops_ratio_vs_unpooled);
    }

    #[test]
    fn pooling_reduces_flops_and_memory() {
        let cfg = EncoderConfig::desk();
        let with = estimate(&cfg.with_positions(positions(&[2])), 3_200, 1).unwrap();
        assert!(with.flops_ratio_vs_unpooled < 1.0);
        assert!(with.memory_ratio_vs_unpooled < 1.0);
        assert!(with.adapter_params > 0);
    }

    #[test]
    fn ratio_table_sorts_cheapest_first() {
        let cfg = EncoderConfig::desk();
        let sets = [positions(&[5]), positions(&[1]), positions(&[3])];
        let rows = ratio_table(&cfg, &sets, 3_200, 1).unwrap();
        // Earlier pooling removes more work.
        assert_eq!(rows[0].positions, positions(&[1]));
        assert_eq!(rows[2].positions, positions(&[5]));
        assert!(rows.windows(2).all(|w| w[0].flops_ratio <= w[1].flops_ratio));
        let csv = ratio_table_to_csv(&rows);
        assert!(csv.starts_with("positions,flops_ratio,memory_ratio\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn csv_report_has_header_and_total() {
        let cfg = EncoderConfig::desk().with_positions(positions(&[2]));
        let report = estimate(&cfg, 3_200, 1).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,n_i,flops,mem\n"));
        assert!(csv.lines().last().unwrap().starts_with("total,"));
        // block2 runs at the pooled length 5.
        assert!(csv.contains("block2,5,"));
    }

    #[test]
    fn calibration_solves_the_reference_point() {
        let cfg = EncoderConfig::w2v2_large_analytical();
        let reference = positions(&[15, 18, 19]);
        let c = calibrate_fe_share(&cfg, 88_000, &reference, 0.81).unwrap();
        assert!(c > 0.5 && c < 2.0, "multiplier {c} outside plausible range");
        // The pinned constant is exactly this solve.
        assert!(
            (c - FE_CALIBRATION_LARGE).abs() < 1e-12,
            "pinned {FE_CALIBRATION_LARGE} vs solved {c}"
        );
        let mut calibrated = cfg.clone();
        calibrated.fe_cost_calibration = c;
        let report = estimate(&calibrated.with_positions(reference), 88_000, 1).unwrap();
        assert!((report.flops_ratio_vs_unpooled - 0.81).abs() < 1e-6);
        // Degenerate targets are rejected.
        assert!(calibrate_fe_share(&cfg, 88_000, &positions(&[15]), 1.2).is_err());
    }
}

