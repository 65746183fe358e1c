//! Config-file handling: a flat JSON object of overrides on top of a named
//! preset, plus the digest that identifies a resolved configuration in every
//! artifact this binary writes.
//!
//! The file is one JSON object; nesting is spelled with dots in the key, so
//! the whole schema stays grep-able. Recognised keys:
//!
//! | key                  | type        | meaning                                      |
//! |----------------------|-------------|----------------------------------------------|
//! | `preset`             | string      | base preset (`desk`, `w2v2-large-analytical`) |
//! | `layers`             | int         | transformer layer count                       |
//! | `d_model`            | int         | model width (adaptor channels track this)     |
//! | `n_heads`            | int         | attention heads                               |
//! | `d_ffn`              | int         | feed-forward hidden width                     |
//! | `fe_channels`        | int         | front-end channel width                       |
//! | `fe_kernels`         | [int]       | front-end kernel widths, one per stage        |
//! | `fe_strides`         | [int]       | front-end strides, same length as kernels     |
//! | `positions`          | [int]       | adaptor injection positions (layer indices)   |
//! | `redapt.k1/s1/p1`    | int         | pooling conv kernel / stride / padding        |
//! | `redapt.k2/s2/p2`    | int         | restoring conv kernel / stride / padding      |
//! | `flags.second_cnn`   | bool        | keep the restoring stage + residual           |
//! | `flags.layernorm`    | bool        | keep layer norm after each adaptor conv       |
//! | `flags.gelu`         | bool        | keep the GELU after each adaptor conv         |
//! | `reinit_top_k`       | int         | topmost layers re-drawn before fine-tuning    |
//! | `ln_eps`             | float       | layer-norm epsilon                            |
//! | `fe_cost_calibration`| float       | front-end share multiplier in the cost model  |
//!
//! Unknown keys are errors (naming the key), not warnings: a silently
//! ignored typo in `d_mode1` would invalidate every number downstream.

use std::fs;
use std::path::Path;

use redapt_core::encoder::{ConvStage, EncoderConfig};
use redapt_core::search::PositionConfig;

use crate::CliError;

/// Look up a preset by name. `desk` is the runnable small encoder;
/// `w2v2-large-analytical` is the full-size geometry for cost reports.
pub fn preset(name: &str) -> Option<EncoderConfig> {
    match name {
        "desk" => Some(EncoderConfig::desk()),
        "w2v2-large-analytical" => Some(EncoderConfig::w2v2_large_analytical()),
        _ => None,
    }
}

/// Parse a `--positions` value: comma-separated layer indices, or an empty
/// string for "no adaptor blocks".
pub fn parse_positions(arg: &str) -> Result<PositionConfig, CliError> {
    let trimmed = arg.trim();
    if trimmed.is_empty() {
        return Ok(PositionConfig::empty());
    }
    let mut positions = Vec::new();
    for part in trimmed.split(',') {
        let p: usize = part.trim().parse().map_err(|_| {
            CliError::Usage(format!("bad position {part:?} in {arg:?} (expected integers like \"2,4\")"))
        })?;
        positions.push(p);
    }
    PositionConfig::new(positions).map_err(|e| CliError::Usage(e.to_string()))
}

/// Resolve the effective encoder configuration: start from `preset_name`,
/// apply the config file's overrides (if any), then apply the command-line
/// `--positions` override (if any), and validate the result.
pub fn resolve(
    preset_name: &str,
    file: Option<&Path>,
    positions_arg: Option<&str>,
) -> Result<EncoderConfig, CliError> {
    let mut cfg = preset(preset_name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown preset {preset_name:?} (available: desk, w2v2-large-analytical)"
        ))
    })?;
    if let Some(path) = file {
        apply_file(&mut cfg, path)?;
    }
    if let Some(arg) = positions_arg {
        cfg.positions = parse_positions(arg)?;
    }
    cfg.validate().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(cfg)
}

fn apply_file(cfg: &mut EncoderConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    // serde_json reports line/column on syntax errors; keep that in the message.
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("bad config {}: {e}", path.display())))?;

    // `preset` replaces the starting point, so it must win over flag order.
    if let Some(value) = map.get("preset") {
        let name = value.as_str().ok_or_else(|| bad_key("preset", "a string", value))?;
        *cfg = preset(name)
            .ok_or_else(|| CliError::Runtime(format!("config key \"preset\": unknown preset {name:?}")))?;
    }

    // The two front-end arrays must agree in length, so they are collected
    // first and stitched into stages after the loop.
    let mut fe_kernels: Option<Vec<usize>> = None;
    let mut fe_strides: Option<Vec<usize>> = None;

    for (key, value) in &map {
        match key.as_str() {
            "preset" => {}
            "layers" => cfg.layers = int_key(key, value)?,
            "d_model" => {
                cfg.d_model = int_key(key, value)?;
                // The adaptor runs on the encoder's channels; keeping the two
                // in lockstep here means a one-key width change stays valid.
                cfg.redapt.channels = cfg.d_model;
            }
            "n_heads" => cfg.n_heads = int_key(key, value)?,
            "d_ffn" => cfg.d_ffn = int_key(key, value)?,
            "fe_channels" => cfg.fe.channels = int_key(key, value)?,
            "fe_kernels" => fe_kernels = Some(int_array_key(key, value)?),
            "fe_strides" => fe_strides = Some(int_array_key(key, value)?),
            "positions" => {
                let raw = int_array_key(key, value)?;
                cfg.positions = PositionConfig::new(raw)
                    .map_err(|e| CliError::Runtime(format!("config key \"positions\": {e}")))?;
            }
            "redapt.k1" => cfg.redapt.pool.kernel = int_key(key, value)?,
            "redapt.s1" => cfg.redapt.pool.stride = int_key(key, value)?,
            "redapt.p1" => cfg.redapt.pool.padding = int_key(key, value)?,
            "redapt.k2" => cfg.redapt.restore.kernel = int_key(key, value)?,
            "redapt.s2" => cfg.redapt.restore.stride = int_key(key, value)?,
            "redapt.p2" => cfg.redapt.restore.padding = int_key(key, value)?,
            "flags.second_cnn" => cfg.redapt.enable_second_cnn = bool_key(key, value)?,
            "flags.layernorm" => cfg.redapt.enable_layernorm = bool_key(key, value)?,
            "flags.gelu" => cfg.redapt.enable_gelu = bool_key(key, value)?,
            "reinit_top_k" => cfg.reinit_top_k = int_key(key, value)?,
            "ln_eps" => cfg.ln_eps = float_key(key, value)?,
            "fe_cost_calibration" => cfg.fe_cost_calibration = float_key(key, value)?,
            _ => {
                return Err(CliError::Runtime(format!(
                    "config {}: unknown key {key:?}",
                    path.display()
                )));
            }
        }
    }

    match (fe_kernels, fe_strides) {
        (None, None) => {}
        (Some(kernels), Some(strides)) => {
            if kernels.len() != strides.len() || kernels.is_empty() {
                return Err(CliError::Runtime(format!(
                    "config keys \"fe_kernels\"/\"fe_strides\": need equal, nonzero lengths (got {} and {})",
                    kernels.len(),
                    strides.len()
                )));
            }
            cfg.fe.stages = kernels
                .iter()
                .zip(&strides)
                .map(|(&kernel, &stride)| ConvStage { kernel, stride })
                .collect();
            // The declared factor exists to catch hand-edited stage lists
            // that silently change the frame rate; a deliberate override
            // redefines it as the product of the new strides.
            cfg.fe.declared_downsample = strides.iter().product();
        }
        _ => {
            return Err(CliError::Runtime(
                "config keys \"fe_kernels\"/\"fe_strides\" must be overridden together".into(),
            ));
        }
    }
    Ok(())
}

fn bad_key(key: &str, wanted: &str, got: &serde_json::Value) -> CliError {
    CliError::Runtime(format!("config key {key:?}: expected {wanted}, got {got}"))
}

fn int_key(key: &str, value: &serde_json::Value) -> Result<usize, CliError> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| bad_key(key, "a non-negative integer", value))
}

fn float_key(key: &str, value: &serde_json::Value) -> Result<f64, CliError> {
    value.as_f64().ok_or_else(|| bad_key(key, "a number", value))
}

fn bool_key(key: &str, value: &serde_json::Value) -> Result<bool, CliError> {
    value.as_bool().ok_or_else(|| bad_key(key, "a boolean", value))
}

fn int_array_key(key: &str, value: &serde_json::Value) -> Result<Vec<usize>, CliError> {
    let items = value
        .as_array()
        .ok_or_else(|| bad_key(key, "an array of integers", value))?;
    items
        .iter()
        .map(|item| {
            item.as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| bad_key(key, "an array of integers", item))
        })
        .collect()
}

/// 64-bit FNV-1a over the canonical JSON form of the resolved configuration,
/// rendered as 16 lowercase hex digits. Two invocations that resolve to the
/// same effective encoder get the same digest, whatever mix of preset, file,
/// and flags produced it.
pub fn config_digest(cfg: &EncoderConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("encoder config serialises");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in &canonical {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}
