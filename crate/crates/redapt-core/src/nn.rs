//! Transformer building blocks: parameter containers, initialisation, and
//! the pre-norm encoder layer forward pass.
//!
//! A layer is standard multi-head self-attention plus a GELU feed-forward
//! network, both pre-normalised and residual. Matrix products are recorded
//! under stable scope labels (`attn_proj`, `attn_scores`, `attn_context`,
//! `ffn`) so the MAC counter can be decomposed per component:
//!
//! * projections: `4 * t * d^2` MACs per item,
//! * scores + context: `2 * t^2 * d`,
//! * feed-forward: `2 * t * d * d_ffn`.

use rand::Rng;

use crate::autodiff::{DropoutKey, NodeId, Tape};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

/// Forward-pass mode: inference, or training with dropout keyed by
/// `(seed, layer, step, slot)` so masks are reproducible and independent of
/// call order.
#[derive(Clone, Copy, Debug)]
pub struct TrainMode {
    pub train: bool,
    pub dropout_p: f64,
    pub seed: u64,
    pub step: u64,
}

impl TrainMode {
    pub fn inference() -> Self {
        TrainMode { train: false, dropout_p: 0.0, seed: 0, step: 0 }
    }

    pub fn training(dropout_p: f64, seed: u64, step: u64) -> Self {
        TrainMode { train: true, dropout_p, seed, step }
    }
}

/// Gaussian-initialised tensor via Box-Muller over a keyed ChaCha8 stream.
pub(crate) fn normal_tensor(shape: Vec<usize>, std: f64, seed_parts: &[u64]) -> Tensor {
    let mut rng = seeding::rng_from(seed_parts);
    Tensor::from_fn(shape, |_| {
        let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Learnable state of one transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TransformerLayerParams {
    /// Xavier-normal matrices, zero biases, identity norms. Deterministic in
    /// `seed_parts`; every matrix draws from its own derived stream.
    pub fn init(d_model: usize, n_heads: usize, d_ffn: usize, seed_parts: &[u64]) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || d_ffn == 0 {
            return Err(Error::InvalidConfig(
                "layer dims must all be >= 1".into(),
            ));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let mat = |rows: usize, cols: usize, tag: u64| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let mut parts = seed_parts.to_vec();
            parts.push(tag);
            normal_tensor(vec![rows, cols], std, &parts)
        };
        Ok(TransformerLayerParams {
            d_model,
            n_heads,
            d_ffn,
            ln1_gain: Tensor::filled(vec![d_model], 1.0),
            ln1_bias: Tensor::zeros(vec![d_model]),
            wq: mat(d_model, d_model, 1),
            bq: Tensor::zeros(vec![d_model]),
            wk: mat(d_model, d_model, 2),
            bk: Tensor::zeros(vec![d_model]),
            wv: mat(d_model, d_model, 3),
            bv: Tensor::zeros(vec![d_model]),
            wo: mat(d_model, d_model, 4),
            bo: Tensor::zeros(vec![d_model]),
            ln2_gain: Tensor::filled(vec![d_model], 1.0),
            ln2_bias: Tensor::zeros(vec![d_model]),
            w1: mat(d_model, d_ffn, 5),
            b1: Tensor::zeros(vec![d_ffn]),
            w2: mat(d_ffn, d_model, 6),
            b2: Tensor::zeros(vec![d_model]),
        })
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}ln1.gain"), &self.ln1_gain),
            (format!("{prefix}ln1.bias"), &self.ln1_bias),
            (format!("{prefix}attn.wq"), &self.wq),
            (format!("{prefix}attn.bq"), &self.bq),
            (format!("{prefix}attn.wk"), &self.wk),
            (format!("{prefix}attn.bk"), &self.bk),
            (format!("{prefix}attn.wv"), &self.wv),
            (format!("{prefix}attn.bv"), &self.bv),
            (format!("{prefix}attn.wo"), &self.wo),
            (format!("{prefix}attn.bo"), &self.bo),
            (format!("{prefix}ln2.gain"), &self.ln2_gain),
            (format!("{prefix}ln2.bias"), &self.ln2_bias),
            (format!("{prefix}ffn.w1"), &self.w1),
            (format!("{prefix}ffn.b1"), &self.b1),
            (format!("{prefix}ffn.w2"), &self.w2),
            (format!("{prefix}ffn.b2"), &self.b2),
        ]
    }

    pub fn entries_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}ln1.gain"), &mut self.ln1_gain),
            (format!("{prefix}ln1.bias"), &mut self.ln1_bias),
            (format!("{prefix}attn.wq"), &mut self.wq),
            (format!("{prefix}attn.bq"), &mut self.bq),
            (format!("{prefix}attn.wk"), &mut self.wk),
            (format!("{prefix}attn.bk"), &mut self.bk),
            (format!("{prefix}attn.wv"), &mut self.wv),
            (format!("{prefix}attn.bv"), &mut self.bv),
            (format!("{prefix}attn.wo"), &mut self.wo),
            (format!("{prefix}attn.bo"), &mut self.bo),
            (format!("{prefix}ln2.gain"), &mut self.ln2_gain),
            (format!("{prefix}ln2.bias"), &mut self.ln2_bias),
            (format!("{prefix}ffn.w1"), &mut self.w1),
            (format!("{prefix}ffn.b1"), &mut self.b1),
            (format!("{prefix}ffn.w2"), &mut self.w2),
            (format!("{prefix}ffn.b2"), &mut self.b2),
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TransformerLayerNodes {
        let mut add = |t: &Tensor| tape.leaf(t.clone(), trainable);
        TransformerLayerNodes {
            ln1_gain: add(&self.ln1_gain),
            ln1_bias: add(&self.ln1_bias),
            wq: add(&self.wq),
            bq: add(&self.bq),
            wk: add(&self.wk),
            bk: add(&self.bk),
            wv: add(&self.wv),
            bv: add(&self.bv),
            wo: add(&self.wo),
            bo: add(&self.bo),
            ln2_gain: add(&self.ln2_gain),
            ln2_bias: add(&self.ln2_bias),
            w1: add(&self.w1),
            b1: add(&self.b1),
            w2: add(&self.w2),
            b2: add(&self.b2),
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayerNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl TransformerLayerNodes {
    /// Same names and order as [`TransformerLayerParams::entries`].
    pub fn entries(&self, prefix: &str) -> Vec<(String, NodeId)> {
        vec![
            (format!("{prefix}ln1.gain"), self.ln1_gain),
            (format!("{prefix}ln1.bias"), self.ln1_bias),
            (format!("{prefix}attn.wq"), self.wq),
            (format!("{prefix}attn.bq"), self.bq),
            (format!("{prefix}attn.wk"), self.wk),
            (format!("{prefix}attn.bk"), self.bk),
            (format!("{prefix}attn.wv"), self.wv),
            (format!("{prefix}attn.bv"), self.bv),
            (format!("{prefix}attn.wo"), self.wo),
            (format!("{prefix}attn.bo"), self.bo),
            (format!("{prefix}ln2.gain"), self.ln2_gain),
            (format!("{prefix}ln2.bias"), self.ln2_bias),
            (format!("{prefix}ffn.w1"), self.w1),
            (format!("{prefix}ffn.b1"), self.b1),
            (format!("{prefix}ffn.w2"), self.w2),
            (format!("{prefix}ffn.b2"), self.b2),
        ]
    }
}

/// One pre-norm transformer layer on `x [batch, t, d]`, length-preserving.
///
/// `layer_idx` only feeds dropout keying (and should match the scope label
/// the caller wrapped this in, for legible MAC breakdowns).
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer_forward(
    tape: &mut Tape,
    x: NodeId,
    nodes: &TransformerLayerNodes,
    params_meta: (usize, usize, usize),
    mode: &TrainMode,
    layer_idx: usize,
    ln_eps: f64,
) -> Result<NodeId> {
    let (d, heads, _d_ffn) = params_meta;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != d {
        return Err(Error::ShapeMismatch {
            op: "transformer_layer",
            lhs: shape,
            rhs: vec![d],
        });
    }
    let (b, t) = (shape[0], shape[1]);
    let dh = d / heads;

    // Attention half.
    let h = tape.layernorm(x, nodes.ln1_gain, nodes.ln1_bias, ln_eps)?;
    let flat = tape.reshape(h, vec![b * t, d])?;
    let (q, k, v) = tape.scoped("attn_proj", |tp| -> Result<_> {
        let q = tp.matmul(flat, nodes.wq)?;
        let q = tp.bias_add(q, nodes.bq)?;
        let k = tp.matmul(flat, nodes.wk)?;
        let k = tp.bias_add(k, nodes.bk)?;
        let v = tp.matmul(flat, nodes.wv)?;
        let v = tp.bias_add(v, nodes.bv)?;
        Ok((q, k, v))
    })?;
    let split = |tp: &mut Tape, m: NodeId| -> Result<NodeId> {
        let r = tp.reshape(m, vec![b, t, heads, dh])?;
        tp.transpose(r, 1, 2) // [b, heads, t, dh]
    };
    let q4 = split(tape, q)?;
    let k4 = split(tape, k)?;
    let v4 = split(tape, v)?;
    let kt = tape.transpose(k4, 2, 3)?; // [b, heads, dh, t]
    let scores = tape.scoped("attn_scores", |tp| tp.matmul(q4, kt))?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_lastaxis(scaled)?;
    let ctx = tape.scoped("attn_context", |tp| tp.matmul(attn, v4))?;
    let ctx_bt = tape.transpose(ctx, 1, 2)?; // [b, t, heads, dh]
    let merged = tape.reshape(ctx_bt, vec![b * t, d])?;
    let out = tape.scoped("attn_proj", |tp| -> Result<NodeId> {
        let o = tp.matmul(merged, nodes.wo)?;
        tp.bias_add(o, nodes.bo)
    })?;
    let out = tape.dropout(
        out,
        mode.dropout_p,
        mode.train,
        DropoutKey::new(mode.seed, layer_idx as u64, mode.step, 0),
    )?;
    let out3 = tape.reshape(out, vec![b, t, d])?;
    let y = tape.add(x, out3)?;

    // Feed-forward half.
    let h2 = tape.layernorm(y, nodes.ln2_gain, nodes.ln2_bias, ln_eps)?;
    let h2_flat = tape.reshape(h2, vec![b * t, d])?;
    let f = tape.scoped("ffn", |tp| -> Result<NodeId> {
        let f1 = tp.matmul(h2_flat, nodes.w1)?;
        let f1 = tp.bias_add(f1, nodes.b1)?;
        let g = tp.gelu(f1);
        let f2 = tp.matmul(g, nodes.w2)?;
        tp.bias_add(f2, nodes.b2)
    })?;
    let f = tape.dropout(
        f,
        mode.dropout_p,
        mode.train,
        DropoutKey::new(mode.seed, layer_idx as u64, mode.step, 1),
    )?;
    let f3 = tape.reshape(f, vec![b, t, d])?;
    tape.add(y, f3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LAYERNORM_DEFAULT_EPS;

    fn forward_small(mode: &TrainMode) -> (Tape, NodeId) {
        let params = TransformerLayerParams::init(8, 2, 16, &[5]).unwrap();
        let mut tape = Tape::new();
        tape.enable_mac_counter();
        let x = tape.constant(Tensor::from_fn(vec![2, 5, 8], |i| ((i * 7 % 13) as f64 - 6.0) * 0.1));
        let nodes = params.register(&mut tape, true);
        let y = tape
            .scoped("layer0", |t| {
                transformer_layer_forward(t, x, &nodes, (8, 2, 16), mode, 0, LAYERNORM_DEFAULT_EPS)
            })
            .unwrap();
        (tape, y)
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        assert!(TransformerLayerParams::init(10, 3, 20, &[0]).is_err());
        assert!(TransformerLayerParams::init(0, 1, 4, &[0]).is_err());
    }

    #[test]
    fn forward_preserves_shape_and_stays_finite() {
        let (tape, y) = forward_small(&TrainMode::inference());
        assert_eq!(tape.value(y).shape(), &[2, 5, 8]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn mac_decomposition_is_exact() {
        // b=2, t=5, d=8, heads=2, ffn=16.
        let (tape, _) = forward_small(&TrainMode::inference());
        let c = tape.mac_counter().unwrap();
        let (b, t, d, ffn) = (2u64, 5u64, 8u64, 16u64);
        assert_eq!(c.macs_matching("layer0/attn_proj"), 4 * b * t * d * d);
        assert_eq!(c.macs_matching("layer0/attn_scores"), b * t * t * d);
        assert_eq!(c.macs_matching("layer0/attn_context"), b * t * t * d);
        assert_eq!(c.macs_matching("layer0/ffn"), 2 * b * t * d * ffn);
        assert_eq!(
            c.macs_total(),
            4 * b * t * d * d + 2 * b * t * t * d + 2 * b * t * d * ffn
        );
    }

    #[test]
    fn training_forward_is_deterministic() {
        let mode = TrainMode::training(0.1, 99, 3);
        let (tape_a, ya) = forward_small(&mode);
        let (tape_b, yb) = forward_small(&mode);
        assert_eq!(tape_a.value(ya).data(), tape_b.value(yb).data());
        // A different step draws different dropout masks.
        let (tape_c, yc) = forward_small(&TrainMode::training(0.1, 99, 4));
        assert_ne!(tape_a.value(ya).data(), tape_c.value(yc).data());
    }

    #[test]
    fn entries_cover_all_tensors() {
        let params = TransformerLayerParams::init(8, 2, 16, &[5]).unwrap();
        let entries = params.entries("layer.0.");
        assert_eq!(entries.len(), 16);
        assert!(entries.iter().all(|(name, _)| name.starts_with("layer.0.")));
        let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
        // 4 d*d mats + d*ffn + ffn*d + biases (4d + ffn + d) + 2 norms (4d).
        assert_eq!(total, 4 * 64 + 2 * 8 * 16 + 5 * 8 + 16 + 4 * 8);
    }
}
