//! The full speech encoder: convolutional feature extractor, linear
//! projection, transformer stack with adaptor blocks at configurable
//! positions, and a final layer norm.
//!
//! Positions are 0-based layer indices; a block listed at position `p` is
//! applied to the *output* of layer `p`, so layers `p+1..` run on the
//! shortened sequence. [`EncoderConfig::length_trace`] computes the
//! resulting per-layer sequence lengths without touching any tensors — the
//! cost model and the forward pass both rely on it, and the forward pass
//! asserts against it as it goes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, LAYERNORM_DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::nn::{
    normal_tensor, transformer_layer_forward, TrainMode, TransformerLayerNodes,
    TransformerLayerParams,
};
use crate::redapt::{
    block_seed_parts, redapt_forward, reduced_length, RedAptNodes, RedAptParams, RedAptSpec,
    ReductionSpec,
};
use crate::search::PositionConfig;
use crate::tensor::Tensor;

/// One stage of the feature extractor: an unpadded strided convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
}

/// Geometry of the waveform front end.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    /// Channel width of every stage (the raw waveform enters with 1).
    pub channels: usize,
    pub stages: Vec<ConvStage>,
    /// The downsampling factor the stack is supposed to realise; validated
    /// against the product of strides.
    pub declared_downsample: usize,
}

const FE_STAGES: [ConvStage; 7] = [
    ConvStage { kernel: 10, stride: 5 },
    ConvStage { kernel: 3, stride: 2 },
    ConvStage { kernel: 3, stride: 2 },
    ConvStage { kernel: 3, stride: 2 },
    ConvStage { kernel: 3, stride: 2 },
    ConvStage { kernel: 2, stride: 2 },
    ConvStage { kernel: 2, stride: 2 },
];

impl FeatureExtractorConfig {
    /// The standard seven-stage front end at full width (512 channels):
    /// kernels (10,3,3,3,3,2,2), strides (5,2,2,2,2,2,2), 320x downsampling,
    /// 400-sample receptive field.
    pub fn wav2vec2() -> Self {
        FeatureExtractorConfig {
            channels: 512,
            stages: FE_STAGES.to_vec(),
            declared_downsample: 320,
        }
    }

    /// Same geometry at desk width (32 channels).
    pub fn desk() -> Self {
        FeatureExtractorConfig {
            channels: 32,
            ..Self::wav2vec2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stages.is_empty() {
            return Err(Error::InvalidConfig(
                "feature extractor needs >= 1 channel and >= 1 stage".into(),
            ));
        }
        for stage in &self.stages {
            if stage.kernel == 0 || stage.stride == 0 {
                return Err(Error::InvalidConfig(format!(
                    "degenerate feature extractor stage {stage:?}"
                )));
            }
        }
        let product: usize = self.stages.iter().map(|s| s.stride).product();
        if product != self.declared_downsample {
            return Err(Error::InvalidConfig(format!(
                "declared downsample {} but strides multiply to {product}",
                self.declared_downsample
            )));
        }
        Ok(())
    }

    /// Samples of input influencing one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for stage in &self.stages {
            rf += (stage.kernel - 1) * jump;
            jump *= stage.stride;
        }
        rf
    }

    /// Frames produced from `samples` waveform samples; errors when any
    /// stage would see fewer samples than its kernel.
    pub fn output_length(&self, samples: usize) -> Result<usize> {
        let mut n = samples;
        for stage in &self.stages {
            n = reduced_length(
                n,
                &ReductionSpec { kernel: stage.kernel, stride: stage.stride, padding: 0 },
            )?;
        }
        Ok(n)
    }

    /// Length after stages `0..=stage` only (used by the cost model to
    /// price each stage at its own output length).
    pub fn output_length_after_stage(&self, samples: usize, stage: usize) -> Result<usize> {
        let mut n = samples;
        for s in &self.stages[..=stage] {
            n = reduced_length(
                n,
                &ReductionSpec { kernel: s.kernel, stride: s.stride, padding: 0 },
            )?;
        }
        Ok(n)
    }
}

/// Complete encoder configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub fe: FeatureExtractorConfig,
    pub redapt: RedAptSpec,
    pub positions: PositionConfig,
    /// How many topmost layers to re-draw when preparing for fine-tuning.
    pub reinit_top_k: usize,
    pub ln_eps: f64,
    /// Multiplier the cost model applies to the feature-extractor share.
    /// 1.0 means the raw closed form; the large preset carries a calibrated
    /// value (see the cost module).
    pub fe_cost_calibration: f64,
}

impl EncoderConfig {
    /// Small configuration that trains in seconds on one core:
    /// 8 layers, d=64, 4 heads, FFN 256, 32-channel front end.
    pub fn desk() -> Self {
        EncoderConfig {
            layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            fe: FeatureExtractorConfig::desk(),
            redapt: RedAptSpec::with_channels(64),
            positions: PositionConfig::empty(),
            reinit_top_k: 0,
            ln_eps: LAYERNORM_DEFAULT_EPS,
            fe_cost_calibration: 1.0,
        }
    }

    /// Full-size geometry (24 layers, d=1024, 16 heads, FFN 4096) for
    /// analytical work — cost reports and length traces, not for running
    /// tensors through on a laptop.
    pub fn w2v2_large_analytical() -> Self {
        EncoderConfig {
            layers: 24,
            d_model: 1024,
            n_heads: 16,
            d_ffn: 4096,
            fe: FeatureExtractorConfig::wav2vec2(),
            redapt: RedAptSpec::with_channels(1024),
            positions: PositionConfig::empty(),
            reinit_top_k: 3,
            ln_eps: LAYERNORM_DEFAULT_EPS,
            fe_cost_calibration: crate::cost::FE_CALIBRATION_LARGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs >= 1 layer".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.fe.validate()?;
        self.redapt.validate()?;
        if self.redapt.channels != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "adaptor channels {} must equal d_model {}",
                self.redapt.channels, self.d_model
            )));
        }
        self.positions.validate_for(self.layers)?;
        if self.reinit_top_k > self.layers {
            return Err(Error::InvalidConfig(format!(
                "reinit_top_k {} exceeds {} layers",
                self.reinit_top_k, self.layers
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.fe_cost_calibration > 0.0) {
            return Err(Error::InvalidConfig(
                "ln_eps and fe_cost_calibration must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Same encoder with a different set of injection positions.
    pub fn with_positions(&self, positions: PositionConfig) -> Self {
        EncoderConfig { positions, ..self.clone() }
    }

    /// Sequence lengths implied by this configuration for a raw input:
    /// frames out of the front end, the input length of every layer, and
    /// the final output length. Purely arithmetic.
    pub fn length_trace(&self, raw_samples: usize) -> Result<LengthTrace> {
        self.validate()?;
        let n0 = self.fe.output_length(raw_samples)?;
        let mut layer_inputs = Vec::with_capacity(self.layers);
        let mut n = n0;
        for i in 0..self.layers {
            layer_inputs.push(n);
            if self.positions.contains(i) {
                n = reduced_length(n, &self.redapt.pool)?;
            }
        }
        Ok(LengthTrace { n0, layer_inputs, final_len: n })
    }
}

/// Per-layer sequence lengths for one (config, input length) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthTrace {
    /// Frames produced by the feature extractor.
    pub n0: usize,
    /// Input length of each transformer layer, in order.
    pub layer_inputs: Vec<usize>,
    /// Length after the last layer and any block attached to it.
    pub final_len: usize,
}

/// All learnable state of the encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub fe_convs: Vec<(Tensor, Tensor)>,
    pub fe_ln_gain: Tensor,
    pub fe_ln_bias: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub layers: Vec<TransformerLayerParams>,
    /// One block per injection position, in position order.
    pub blocks: Vec<RedAptParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
}

// Seed-stream tags keeping each parameter family independent.
const SEED_FE: u64 = 0xFE;
const SEED_PROJ: u64 = 0x9807;
const SEED_LAYER: u64 = 0x7247;
const SEED_REINIT: u64 = 0x7E11;

impl EncoderParams {
    /// Fresh parameters, deterministic in `seed`. Each layer and block draws
    /// from its own derived stream, so e.g. layer 5 gets identical weights
    /// whether or not other parts of the config change.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.fe.channels;
        let mut fe_convs = Vec::with_capacity(cfg.fe.stages.len());
        for (j, stage) in cfg.fe.stages.iter().enumerate() {
            let c_in = if j == 0 { 1 } else { c };
            let std = (2.0 / (stage.kernel * c_in) as f64).sqrt();
            let w = normal_tensor(
                vec![stage.kernel, c_in, c],
                std,
                &[seed, SEED_FE, j as u64],
            );
            fe_convs.push((w, Tensor::zeros(vec![c])));
        }
        let proj_std = (2.0 / (c + cfg.d_model) as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|i| {
                TransformerLayerParams::init(
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ffn,
                    &[seed, SEED_LAYER, i as u64],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = cfg
            .positions
            .positions()
            .iter()
            .map(|&p| RedAptParams::init(&cfg.redapt, &block_seed_parts(seed, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams {
            fe_convs,
            fe_ln_gain: Tensor::filled(vec![c], 1.0),
            fe_ln_bias: Tensor::zeros(vec![c]),
            proj_w: normal_tensor(vec![c, cfg.d_model], proj_std, &[seed, SEED_PROJ]),
            proj_b: Tensor::zeros(vec![cfg.d_model]),
            layers,
            blocks,
            final_ln_gain: Tensor::filled(vec![cfg.d_model], 1.0),
            final_ln_bias: Tensor::zeros(vec![cfg.d_model]),
        })
    }

    /// Named views of every tensor. Block names carry the injection
    /// position (`block.15.pool.w`), so they stay stable when other
    /// positions change.
    pub fn entries(&self, cfg: &EncoderConfig) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (j, (w, b)) in self.fe_convs.iter().enumerate() {
            out.push((format!("fe.conv{j}.w"), w));
            out.push((format!("fe.conv{j}.b"), b));
        }
        out.push(("fe.ln.gain".into(), &self.fe_ln_gain));
        out.push(("fe.ln.bias".into(), &self.fe_ln_bias));
        out.push(("proj.w".into(), &self.proj_w));
        out.push(("proj.b".into(), &self.proj_b));
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.entries(&format!("layer.{i}.")));
        }
        for (p, block) in cfg.positions.positions().iter().zip(&self.blocks) {
            out.extend(block.entries(&format!("block.{p}.")));
        }
        out.push(("final_ln.gain".into(), &self.final_ln_gain));
        out.push(("final_ln.bias".into(), &self.final_ln_bias));
        out
    }

    /// Mutable counterpart of [`entries`]; identical names and order.
    pub fn entries_mut(&mut self, cfg: &EncoderConfig) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (j, (w, b)) in self.fe_convs.iter_mut().enumerate() {
            out.push((format!("fe.conv{j}.w"), w));
            out.push((format!("fe.conv{j}.b"), b));
        }
        out.push(("fe.ln.gain".into(), &mut self.fe_ln_gain));
        out.push(("fe.ln.bias".into(), &mut self.fe_ln_bias));
        out.push(("proj.w".into(), &mut self.proj_w));
        out.push(("proj.b".into(), &mut self.proj_b));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.entries_mut(&format!("layer.{i}.")));
        }
        for (p, block) in cfg.positions.positions().iter().zip(self.blocks.iter_mut()) {
            out.extend(block.entries_mut(&format!("block.{p}.")));
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln_bias));
        out
    }

    pub fn n_params(&self, cfg: &EncoderConfig) -> u64 {
        self.entries(cfg).iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Put every tensor on the tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderNodes {
        EncoderNodes {
            fe_convs: self
                .fe_convs
                .iter()
                .map(|(w, b)| (tape.leaf(w.clone(), trainable), tape.leaf(b.clone(), trainable)))
                .collect(),
            fe_ln: (
                tape.leaf(self.fe_ln_gain.clone(), trainable),
                tape.leaf(self.fe_ln_bias.clone(), trainable),
            ),
            proj: (
                tape.leaf(self.proj_w.clone(), trainable),
                tape.leaf(self.proj_b.clone(), trainable),
            ),
            layers: self.layers.iter().map(|l| l.register(tape, trainable)).collect(),
            blocks: self.blocks.iter().map(|b| b.register(tape, trainable)).collect(),
            final_ln: (
                tape.leaf(self.final_ln_gain.clone(), trainable),
                tape.leaf(self.final_ln_bias.clone(), trainable),
            ),
        }
    }
}

/// Tape handles for the whole encoder.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub fe_convs: Vec<(NodeId, NodeId)>,
    pub fe_ln: (NodeId, NodeId),
    pub proj: (NodeId, NodeId),
    pub layers: Vec<TransformerLayerNodes>,
    pub blocks: Vec<RedAptNodes>,
    pub final_ln: (NodeId, NodeId),
}

impl EncoderNodes {
    /// Same names and order as [`EncoderParams::entries`], so gradients can
    /// be looked up by parameter name after a backward pass.
    pub fn entries(&self, cfg: &EncoderConfig) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = Vec::new();
        for (j, (w, b)) in self.fe_convs.iter().enumerate() {
            out.push((format!("fe.conv{j}.w"), *w));
            out.push((format!("fe.conv{j}.b"), *b));
        }
        out.push(("fe.ln.gain".into(), self.fe_ln.0));
        out.push(("fe.ln.bias".into(), self.fe_ln.1));
        out.push(("proj.w".into(), self.proj.0));
        out.push(("proj.b".into(), self.proj.1));
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.entries(&format!("layer.{i}.")));
        }
        for (p, block) in cfg.positions.positions().iter().zip(&self.blocks) {
            out.extend(block.entries(&format!("block.{p}.")));
        }
        out.push(("final_ln.gain".into(), self.final_ln.0));
        out.push(("final_ln.bias".into(), self.final_ln.1));
        out
    }
}

/// Re-draw the top `k` transformer layers from fresh streams keyed by
/// `(seed, layer index)`. Everything else is untouched.
pub fn reinit_top_layers(
    params: &mut EncoderParams,
    cfg: &EncoderConfig,
    k: usize,
    seed: u64,
) -> Result<()> {
    if k > cfg.layers {
        return Err(Error::InvalidConfig(format!(
            "cannot reinit {k} of {} layers",
            cfg.layers
        )));
    }
    for i in cfg.layers - k..cfg.layers {
        params.layers[i] = TransformerLayerParams::init(
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ffn,
            &[seed, SEED_REINIT, i as u64],
        )?;
    }
    Ok(())
}

/// Full forward pass on a waveform batch `[batch, samples]`.
///
/// Returns the encoded sequence `[batch, final_len, d_model]` and the
/// length trace it realised (identical to `cfg.length_trace(samples)`).
pub fn encoder_forward(
    tape: &mut Tape,
    wave: NodeId,
    nodes: &EncoderNodes,
    cfg: &EncoderConfig,
    mode: &TrainMode,
) -> Result<(NodeId, LengthTrace)> {
    let shape = tape.value(wave).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "encoder_forward",
            lhs: shape,
            rhs: vec![0, 0],
        });
    }
    let (batch, samples) = (shape[0], shape[1]);
    let trace = cfg.length_trace(samples)?;

    // Front end: unpadded strided convolutions with GELU, then a channel
    // norm and the linear projection up to model width.
    let mut x = tape.reshape(wave, vec![batch, samples, 1])?;
    x = tape.scoped("fe", |t| -> Result<NodeId> {
        let mut x = x;
        for (j, stage) in cfg.fe.stages.iter().enumerate() {
            let (w, b) = nodes.fe_convs[j];
            x = t.scoped(format!("conv{j}"), |t| -> Result<NodeId> {
                let spec =
                    ReductionSpec { kernel: stage.kernel, stride: stage.stride, padding: 0 };
                let c = t.conv1d(x, w, b, &spec)?;
                Ok(t.gelu(c))
            })?;
        }
        t.layernorm(x, nodes.fe_ln.0, nodes.fe_ln.1, cfg.ln_eps)
    })?;
    debug_assert_eq!(tape.value(x).shape()[1], trace.n0);
    x = tape.scoped("proj", |t| -> Result<NodeId> {
        let p = t.matmul(x, nodes.proj.0)?;
        t.bias_add(p, nodes.proj.1)
    })?;

    // Transformer stack with blocks at the configured positions.
    for i in 0..cfg.layers {
        debug_assert_eq!(tape.value(x).shape()[1], trace.layer_inputs[i]);
        let layer_nodes = nodes.layers[i];
        x = tape.scoped(format!("layer{i}"), |t| {
            transformer_layer_forward(
                t,
                x,
                &layer_nodes,
                (cfg.d_model, cfg.n_heads, cfg.d_ffn),
                mode,
                i,
                cfg.ln_eps,
            )
        })?;
        if let Some(idx) = cfg.positions.positions().iter().position(|&p| p == i) {
            let block_nodes = nodes.blocks[idx];
            x = tape.scoped(format!("block{i}"), |t| {
                redapt_forward(t, x, &block_nodes, &cfg.redapt, cfg.ln_eps)
            })?;
        }
    }

    debug_assert_eq!(tape.value(x).shape()[1], trace.final_len);
    let out = tape.scoped("final_norm", |t| {
        t.layernorm(x, nodes.final_ln.0, nodes.final_ln.1, cfg.ln_eps)
    })?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn front_end_receptive_field_and_downsample() {
        let fe = FeatureExtractorConfig::wav2vec2();
        fe.validate().unwrap();
        assert_eq!(fe.receptive_field(), 400);
        assert_eq!(fe.stages.iter().map(|s| s.stride).product::<usize>(), 320);
        // The receptive field is exactly the shortest input yielding a frame.
        assert_eq!(fe.output_length(400).unwrap(), 1);
        assert!(fe.output_length(399).is_err());
    }

    #[test]
    fn front_end_frame_counts() {
        let fe = FeatureExtractorConfig::desk();
        assert_eq!(fe.output_length(88_000).unwrap(), 274);
        assert_eq!(fe.output_length(3_200).unwrap(), 9);
    }

    #[test]
    fn validate_catches_wrong_downsample() {
        let mut fe = FeatureExtractorConfig::desk();
        fe.declared_downsample = 321;
        assert!(fe.validate().is_err());
    }

    #[test]
    fn length_trace_reference_positions() {
        let cfg = EncoderConfig::w2v2_large_analytical()
            .with_positions(PositionConfig::new(vec![13, 15, 20]).unwrap());
        let trace = cfg.length_trace(88_000).unwrap();
        assert_eq!(trace.n0, 274);
        // Layers 0..=13 see full length; the block after 13 halves it, etc.
        assert_eq!(trace.layer_inputs[0], 274);
        assert_eq!(trace.layer_inputs[13], 274);
        assert_eq!(trace.layer_inputs[14], 137);
        assert_eq!(trace.layer_inputs[15], 137);
        assert_eq!(trace.layer_inputs[16], 69);
        assert_eq!(trace.layer_inputs[20], 69);
        assert_eq!(trace.layer_inputs[21], 35);
        assert_eq!(trace.layer_inputs[23], 35);
        assert_eq!(trace.final_len, 35);
        // Lengths never grow along the stack.
        assert!(trace.layer_inputs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn length_trace_block_on_last_layer_shortens_output_only() {
        let cfg = EncoderConfig::desk().with_positions(PositionConfig::new(vec![7]).unwrap());
        let trace = cfg.length_trace(3_200).unwrap();
        assert_eq!(trace.layer_inputs, vec![9; 8]);
        assert_eq!(trace.final_len, 5);
    }

    #[test]
    fn forward_shapes_follow_the_trace() {
        let cfg = EncoderConfig::desk().with_positions(PositionConfig::new(vec![2, 4]).unwrap());
        let params = EncoderParams::init(&cfg, 11).unwrap();
        let mut tape = Tape::new();
        let wave = tape.constant(Tensor::from_fn(vec![2, 3_200], |i| (i as f64 * 0.01).sin()));
        let nodes = params.register(&mut tape, false);
        let (out, trace) =
            encoder_forward(&mut tape, wave, &nodes, &cfg, &TrainMode::inference()).unwrap();
        assert_eq!(trace, cfg.length_trace(3_200).unwrap());
        assert_eq!(trace.layer_inputs, vec![9, 9, 9, 5, 5, 3, 3, 3]);
        assert_eq!(tape.value(out).shape(), &[2, 3, 64]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn forward_is_deterministic_and_parallel_invariant() {
        let run = |parallel: bool| -> Vec<f64> {
            crate::par::set_parallel_enabled(parallel);
            let cfg =
                EncoderConfig::desk().with_positions(PositionConfig::new(vec![3]).unwrap());
            let params = EncoderParams::init(&cfg, 5).unwrap();
            let mut tape = Tape::new();
            let wave =
                tape.constant(Tensor::from_fn(vec![1, 3_200], |i| (i as f64 * 0.013).cos()));
            let nodes = params.register(&mut tape, false);
            let (out, _) =
                encoder_forward(&mut tape, wave, &nodes, &cfg, &TrainMode::inference()).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(true);
        let b = run(false);
        crate::par::set_parallel_enabled(true);
        assert_eq!(a, b, "parallel and sequential paths must agree bitwise");
    }

    #[test]
    fn entry_names_are_unique_and_complete() {
        let cfg = EncoderConfig::desk().with_positions(PositionConfig::new(vec![1, 6]).unwrap());
        let params = EncoderParams::init(&cfg, 3).unwrap();
        let entries = params.entries(&cfg);
        let names: std::collections::BTreeSet<&str> =
            entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), entries.len(), "duplicate entry name");
        assert!(names.contains("block.1.pool.w"));
        assert!(names.contains("block.6.restore.ln_bias"));
        assert!(names.contains("layer.7.ffn.w2"));
        // entries_mut must expose the same set.
        let mut params2 = params.clone();
        let mut_names: Vec<String> = params2
            .entries_mut(&cfg)
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let imm_names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(mut_names, imm_names);
    }

    #[test]
    fn reinit_touches_exactly_the_top_layers() {
        let cfg = EncoderConfig::desk();
        let mut params = EncoderParams::init(&cfg, 9).unwrap();
        let before = params.clone();
        reinit_top_layers(&mut params, &cfg, 3, 77).unwrap();
        for i in 0..5 {
            assert_eq!(params.layers[i].wq.data(), before.layers[i].wq.data());
        }
        for i in 5..8 {
            assert_ne!(params.layers[i].wq.data(), before.layers[i].wq.data());
        }
        assert_eq!(params.proj_w.data(), before.proj_w.data());
        // Deterministic: same seed reproduces the same redraw.
        let mut params2 = before.clone();
        reinit_top_layers(&mut params2, &cfg, 3, 77).unwrap();
        assert_eq!(params.layers[7].wq.data(), params2.layers[7].wq.data());
        assert!(reinit_top_layers(&mut params, &cfg, 9, 0).is_err());
    }

    #[test]
    fn presets_validate() {
        EncoderConfig::desk().validate().unwrap();
        EncoderConfig::w2v2_large_analytical().validate().unwrap();
    }
}
