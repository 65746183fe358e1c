//! The sequence-reducing adaptor block.
//!
//! A block is two small convolutions injected between transformer layers:
//!
//! 1. a *pooling* convolution (default kernel 3, stride 2, padding 1) that
//!    shortens the sequence, followed by layer norm and GELU — no residual,
//!    since input and output lengths differ;
//! 2. a *restoring* convolution (default kernel 3, stride 1, padding 1) that
//!    keeps the length, wrapped in a residual:
//!    `out = a' + GELU(Norm(Conv(a')))`.
//!
//! Each stage can be ablated independently: the second convolution, the
//! normalisation, and the GELU all have enable flags so their contribution
//! can be measured in isolation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::seeding;
use crate::tensor::Tensor;

/// Geometry of one strided convolution: kernel width, stride, zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ReductionSpec {
    /// Default pooling stage: kernel 3, stride 2, padding 1 (halves the
    /// length, rounding up).
    pub fn pooling_default() -> Self {
        ReductionSpec { kernel: 3, stride: 2, padding: 1 }
    }

    /// Default restoring stage: kernel 3, stride 1, padding 1
    /// (length-preserving).
    pub fn restoring_default() -> Self {
        ReductionSpec { kernel: 3, stride: 1, padding: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "reduction spec needs kernel >= 1 and stride >= 1, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// True when the output length always equals the input length
    /// (unit stride and symmetric padding covering the kernel).
    pub fn is_length_preserving(&self) -> bool {
        self.stride == 1 && 2 * self.padding + 1 == self.kernel
    }
}

/// Output length of a strided convolution:
/// `floor((n + 2*padding - kernel) / stride) + 1`.
///
/// Errors when the padded sequence is shorter than one kernel window.
pub fn reduced_length(n: usize, spec: &ReductionSpec) -> Result<usize> {
    spec.validate()?;
    if n + 2 * spec.padding < spec.kernel {
        return Err(Error::SequenceTooShort {
            len: n,
            kernel: spec.kernel,
            padding: spec.padding,
        });
    }
    Ok((n + 2 * spec.padding - spec.kernel) / spec.stride + 1)
}

/// Full configuration of one adaptor block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedAptSpec {
    /// Channel width, equal to the encoder model dimension.
    pub channels: usize,
    /// First (pooling) convolution.
    pub pool: ReductionSpec,
    /// Second (restoring) convolution.
    pub restore: ReductionSpec,
    /// Ablation: include the second convolution and its residual.
    pub enable_second_cnn: bool,
    /// Ablation: include layer normalisation after each convolution.
    pub enable_layernorm: bool,
    /// Ablation: include the GELU after each (normalised) convolution.
    pub enable_gelu: bool,
}

impl RedAptSpec {
    /// Default block at a given channel width: both stages present, with
    /// norm and GELU enabled.
    pub fn with_channels(channels: usize) -> Self {
        RedAptSpec {
            channels,
            pool: ReductionSpec::pooling_default(),
            restore: ReductionSpec::restoring_default(),
            enable_second_cnn: true,
            enable_layernorm: true,
            enable_gelu: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("adaptor channels must be >= 1".into()));
        }
        self.pool.validate()?;
        self.restore.validate()?;
        if self.enable_second_cnn && !self.restore.is_length_preserving() {
            // The residual around the second stage requires equal lengths.
            return Err(Error::InvalidConfig(format!(
                "restoring stage {:?} must preserve length (stride 1, 2*padding + 1 == kernel)",
                self.restore
            )));
        }
        Ok(())
    }
}

/// Number of learnable scalars in one block:
/// `kernel * channels^2 + channels` per enabled convolution, plus
/// `2 * channels` per enabled layer norm.
///
/// Defaults at 1024 channels come to 6,297,600.
pub fn param_count(spec: &RedAptSpec) -> u64 {
    let d = spec.channels as u64;
    let conv = |kernel: usize| kernel as u64 * d * d + d;
    let norm = if spec.enable_layernorm { 2 * d } else { 0 };
    let mut total = conv(spec.pool.kernel) + norm;
    if spec.enable_second_cnn {
        total += conv(spec.restore.kernel) + norm;
    }
    total
}

/// Learnable state of one block. Ablated stages own no tensors, so the
/// element count of the stored tensors always equals [`param_count`].
#[derive(Clone, Debug)]
pub struct RedAptParams {
    pub w_pool: Tensor,
    pub b_pool: Tensor,
    pub ln_pool_gain: Option<Tensor>,
    pub ln_pool_bias: Option<Tensor>,
    pub w_restore: Option<Tensor>,
    pub b_restore: Option<Tensor>,
    pub ln_restore_gain: Option<Tensor>,
    pub ln_restore_bias: Option<Tensor>,
}

impl RedAptParams {
    /// Fresh parameters: conv weights from a fan-in-scaled normal
    /// distribution (deterministic in `seed_parts`), zero biases, identity
    /// norms.
    pub fn init(spec: &RedAptSpec, seed_parts: &[u64]) -> Result<Self> {
        spec.validate()?;
        let d = spec.channels;
        let conv_init = |kernel: usize, tag: u64| {
            let std = (2.0 / (kernel * d) as f64).sqrt();
            let mut parts = seed_parts.to_vec();
            parts.push(tag);
            normal_tensor(vec![kernel, d, d], std, &parts)
        };
        let ln = |on: bool| {
            (
                on.then(|| Tensor::filled(vec![d], 1.0)),
                on.then(|| Tensor::zeros(vec![d])),
            )
        };
        let (ln_pool_gain, ln_pool_bias) = ln(spec.enable_layernorm);
        let (ln_restore_gain, ln_restore_bias) = ln(spec.enable_layernorm && spec.enable_second_cnn);
        Ok(RedAptParams {
            w_pool: conv_init(spec.pool.kernel, 0),
            b_pool: Tensor::zeros(vec![d]),
            ln_pool_gain,
            ln_pool_bias,
            w_restore: spec
                .enable_second_cnn
                .then(|| conv_init(spec.restore.kernel, 1)),
            b_restore: spec.enable_second_cnn.then(|| Tensor::zeros(vec![d])),
            ln_restore_gain,
            ln_restore_bias,
        })
    }

    /// Total stored elements; must agree with [`param_count`] of the spec
    /// the block was built from.
    pub fn n_params(&self) -> u64 {
        self.entries("")
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Named views of every tensor, for optimisers and checkpoints.
    pub fn entries(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let named: [(&str, Option<&Tensor>); 8] = [
            ("pool.w", Some(&self.w_pool)),
            ("pool.b", Some(&self.b_pool)),
            ("pool.ln_gain", self.ln_pool_gain.as_ref()),
            ("pool.ln_bias", self.ln_pool_bias.as_ref()),
            ("restore.w", self.w_restore.as_ref()),
            ("restore.b", self.b_restore.as_ref()),
            ("restore.ln_gain", self.ln_restore_gain.as_ref()),
            ("restore.ln_bias", self.ln_restore_bias.as_ref()),
        ];
        named
            .into_iter()
            .filter_map(|(name, t)| t.map(|t| (format!("{prefix}{name}"), t)))
            .collect()
    }

    /// Mutable counterpart of [`entries`], same names and order.
    pub fn entries_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let named: [(&str, Option<&mut Tensor>); 8] = [
            ("pool.w", Some(&mut self.w_pool)),
            ("pool.b", Some(&mut self.b_pool)),
            ("pool.ln_gain", self.ln_pool_gain.as_mut()),
            ("pool.ln_bias", self.ln_pool_bias.as_mut()),
            ("restore.w", self.w_restore.as_mut()),
            ("restore.b", self.b_restore.as_mut()),
            ("restore.ln_gain", self.ln_restore_gain.as_mut()),
            ("restore.ln_bias", self.ln_restore_bias.as_mut()),
        ];
        named
            .into_iter()
            .filter_map(|(name, t)| t.map(|t| (format!("{prefix}{name}"), t)))
            .collect()
    }

    /// Put the parameters on a tape, returning handles for the forward pass.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> RedAptNodes {
        let mut add = |t: &Tensor| tape.leaf(t.clone(), trainable);
        RedAptNodes {
            w_pool: add(&self.w_pool),
            b_pool: add(&self.b_pool),
            ln_pool_gain: self.ln_pool_gain.as_ref().map(&mut add),
            ln_pool_bias: self.ln_pool_bias.as_ref().map(&mut add),
            w_restore: self.w_restore.as_ref().map(&mut add),
            b_restore: self.b_restore.as_ref().map(&mut add),
            ln_restore_gain: self.ln_restore_gain.as_ref().map(&mut add),
            ln_restore_bias: self.ln_restore_bias.as_ref().map(&mut add),
        }
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct RedAptNodes {
    pub w_pool: NodeId,
    pub b_pool: NodeId,
    pub ln_pool_gain: Option<NodeId>,
    pub ln_pool_bias: Option<NodeId>,
    pub w_restore: Option<NodeId>,
    pub b_restore: Option<NodeId>,
    pub ln_restore_gain: Option<NodeId>,
    pub ln_restore_bias: Option<NodeId>,
}

impl RedAptNodes {
    /// Same names and order as [`RedAptParams::entries`].
    pub fn entries(&self, prefix: &str) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = Vec::new();
        let mut push = |name: &str, id: Option<NodeId>| {
            if let Some(id) = id {
                out.push((format!("{prefix}{name}"), id));
            }
        };
        push("pool.w", Some(self.w_pool));
        push("pool.b", Some(self.b_pool));
        push("pool.ln_gain", self.ln_pool_gain);
        push("pool.ln_bias", self.ln_pool_bias);
        push("restore.w", self.w_restore);
        push("restore.b", self.b_restore);
        push("restore.ln_gain", self.ln_restore_gain);
        push("restore.ln_bias", self.ln_restore_bias);
        out
    }
}

/// Run one block on `x [batch, n, channels]`, producing
/// `[batch, n', channels]` with `n' = reduced_length(n, spec.pool)`.
///
/// Stage order is fixed: convolution, then norm (if enabled), then GELU
/// (if enabled); the second stage adds its input back afterwards.
pub fn redapt_forward(
    tape: &mut Tape,
    x: NodeId,
    nodes: &RedAptNodes,
    spec: &RedAptSpec,
    ln_eps: f64,
) -> Result<NodeId> {
    spec.validate()?;
    let pooled = tape.scoped("pool", |t| -> Result<NodeId> {
        let mut h = t.conv1d(x, nodes.w_pool, nodes.b_pool, &spec.pool)?;
        if spec.enable_layernorm {
            h = t.layernorm(h, nodes.ln_pool_gain.unwrap(), nodes.ln_pool_bias.unwrap(), ln_eps)?;
        }
        if spec.enable_gelu {
            h = t.gelu(h);
        }
        Ok(h)
    })?;
    if !spec.enable_second_cnn {
        return Ok(pooled);
    }
    tape.scoped("restore", |t| -> Result<NodeId> {
        let mut h = t.conv1d(pooled, nodes.w_restore.unwrap(), nodes.b_restore.unwrap(), &spec.restore)?;
        if spec.enable_layernorm {
            h = t.layernorm(
                h,
                nodes.ln_restore_gain.unwrap(),
                nodes.ln_restore_bias.unwrap(),
                ln_eps,
            )?;
        }
        if spec.enable_gelu {
            h = t.gelu(h);
        }
        t.add(pooled, h)
    })
}

/// Deterministic per-block seed derivation used by the encoder: one block
/// per injection position, keyed by the position index.
pub(crate) fn block_seed_parts(root: u64, position: usize) -> Vec<u64> {
    vec![root, seeding::mix(&[0x52454441, position as u64])]
}
