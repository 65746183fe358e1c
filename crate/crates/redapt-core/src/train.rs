//! Desk-scale trainer: Adam with global-norm clipping, label-smoothed
//! cross-entropy, and a four-class tone-classification task that exercises
//! gradient flow through pooled encoders.
//!
//! The task: classify synthetic clips (see [`crate::audio`]) by carrier
//! frequency, via mean-pooled encoder output and a linear head. It is the
//! smallest problem that still requires the encoder to integrate evidence
//! across front-end frames, which is exactly what sequence pooling puts at
//! risk — so "does it still train with m blocks?" is a meaningful check.
//!
//! Everything is deterministic per seed: dataset synthesis, batch order,
//! dropout masks, and initialisation all run on keyed streams, so the same
//! call yields bitwise-identical metrics twice.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::audio::{self, AudioClip, AugmentPolicy, N_CLASSES};
use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::encoder::{encoder_forward, reinit_top_layers, EncoderConfig, EncoderNodes, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, TrainMode};
use crate::seeding;
use crate::tensor::Tensor;

const SEED_HEAD: u64 = 0x4EAD;
const SEED_TRAIN_DATA: u64 = 0xDA7A_0001;
const SEED_VAL_DATA: u64 = 0xDA7A_0002;
const SEED_BATCH: u64 = 0xBA7C;
const SEED_AUGMENT: u64 = 0xA063;

/// Optimizer hyper-parameters. Defaults follow the training recipe this
/// models (including the unusual beta1 = 0.99 — kept as printed, override
/// if you want the conventional 0.9).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before the update.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-4,
            beta1: 0.99,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 20.0,
            label_smoothing: 0.2,
            dropout: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("eps and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// What one optimizer step saw: the pre-clip global gradient norm and the
/// scale that clipping applied (1.0 when under the ceiling).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamStepInfo {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One Adam update over named parameters, after clipping the *global*
/// gradient norm at `cfg.clip_norm`. Standard bias correction:
/// `p -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)`.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<AdamStepInfo> {
    cfg.validate()?;
    let mut sq_sum = 0.0f64;
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no gradient for parameter '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        sq_sum += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq_sum.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged { step: state.step });
    }
    let clip_scale = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };

    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
        if m.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
        for i in 0..gd.len() {
            let gi = gd[i] * clip_scale;
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    state.step = t;
    Ok(AdamStepInfo { grad_norm, clip_scale })
}

/// Encoder plus a linear classification head over the mean-pooled output.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: EncoderConfig,
    pub encoder: EncoderParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles for a registered [`ToyModel`].
pub struct ToyNodes {
    pub encoder: EncoderNodes,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ToyModel {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut encoder = EncoderParams::init(cfg, seed)?;
        if cfg.reinit_top_k > 0 {
            reinit_top_layers(&mut encoder, cfg, cfg.reinit_top_k, seed)?;
        }
        let d = cfg.d_model;
        let std = (2.0 / (d + N_CLASSES) as f64).sqrt();
        Ok(ToyModel {
            cfg: cfg.clone(),
            encoder,
            head_w: normal_tensor(vec![d, N_CLASSES], std, &[seed, SEED_HEAD]),
            head_b: Tensor::zeros(vec![N_CLASSES]),
        })
    }

    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.entries(&self.cfg);
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.entries_mut(&self.cfg);
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn n_params(&self) -> u64 {
        self.entries().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Put all parameters on the tape. With `freeze_head` the head leaves
    /// are registered without gradients, mirroring a frozen downstream
    /// consumer while the encoder adapts.
    pub fn register(&self, tape: &mut Tape, trainable: bool, freeze_head: bool) -> ToyNodes {
        ToyNodes {
            encoder: self.encoder.register(tape, trainable),
            head_w: tape.leaf(self.head_w.clone(), trainable && !freeze_head),
            head_b: tape.leaf(self.head_b.clone(), trainable && !freeze_head),
        }
    }
}

impl ToyNodes {
    /// Parameter names paired with tape handles, heads included.
    pub fn entries(&self, cfg: &EncoderConfig) -> Vec<(String, NodeId)> {
        let mut out = self.encoder.entries(cfg);
        out.push(("head.w".into(), self.head_w));
        out.push(("head.b".into(), self.head_b));
        out
    }
}

/// Waveforms `[batch, samples]` -> logits `[batch, N_CLASSES]`.
pub fn toy_forward(
    tape: &mut Tape,
    wave: NodeId,
    nodes: &ToyNodes,
    cfg: &EncoderConfig,
    mode: &TrainMode,
) -> Result<NodeId> {
    let (encoded, _) = encoder_forward(tape, wave, &nodes.encoder, cfg, mode)?;
    let pooled = tape.mean_axis(encoded, 1)?;
    tape.scoped("head", |t| {
        let scores = t.matmul(pooled, nodes.head_w)?;
        t.bias_add(scores, nodes.head_b)
    })
}

/// A balanced labelled clip set (classes interleave, so every prefix and
/// every contiguous batch is near-balanced).
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub clips: Vec<AudioClip>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Synthesise `clips_per_class` clips for each class, deterministically.
pub fn toy_dataset(clips_per_class: usize, duration_s: f64, seed: u64) -> Result<ToyDataset> {
    if clips_per_class == 0 {
        return Err(Error::InvalidConfig("need at least one clip per class".into()));
    }
    let mut clips = Vec::with_capacity(clips_per_class * N_CLASSES);
    for idx in 0..clips_per_class {
        for class in 0..N_CLASSES {
            clips.push(audio::synth_clip(class, duration_s, seeding::mix(&[seed, idx as u64]))?);
        }
    }
    Ok(ToyDataset { clips })
}

/// Stack equal-length clips into a `[batch, samples]` tensor.
fn wave_tensor(clips: &[&AudioClip]) -> Result<Tensor> {
    let n = clips.first().map(|c| c.len()).unwrap_or(0);
    if n == 0 || clips.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidConfig("batch clips must share one length".into()));
    }
    let mut data = Vec::with_capacity(clips.len() * n);
    for clip in clips {
        data.extend_from_slice(clip.samples());
    }
    Tensor::from_vec(vec![clips.len(), n], data)
}

/// Force a clip to exactly `len` samples: truncate, or zero-pad at the end.
/// Augmentation changes lengths (tempo); batching needs a rectangle.
fn fit_length(clip: &AudioClip, len: usize) -> Result<AudioClip> {
    let mut samples = clip.samples().to_vec();
    samples.resize(len, 0.0);
    AudioClip::new(samples, clip.sample_rate(), clip.label)
}

/// Mean loss and accuracy over a labelled set, in inference mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluate the model on pre-normalised clips, batched.
pub fn evaluate(
    model: &ToyModel,
    clips: &[AudioClip],
    batch_size: usize,
    label_smoothing: f64,
) -> Result<EvalResult> {
    if clips.is_empty() || batch_size == 0 {
        return Err(Error::InvalidConfig("evaluate needs clips and batch_size >= 1".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in clips.chunks(batch_size) {
        let refs: Vec<&AudioClip> = chunk.iter().collect();
        let targets: Vec<usize> = chunk.iter().map(|c| c.label).collect();
        let mut tape = Tape::new();
        let wave = tape.constant(wave_tensor(&refs)?);
        let nodes = model.register(&mut tape, false, false);
        let logits = toy_forward(&mut tape, wave, &nodes, &model.cfg, &TrainMode::inference())?;
        let loss = tape.cross_entropy_label_smoothed(logits, &targets, label_smoothing)?;
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        let lv = tape.value(logits);
        for (b, &target) in targets.iter().enumerate() {
            let row = &lv.data()[b * N_CLASSES..(b + 1) * N_CLASSES];
            if argmax(row) == target {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        loss: loss_sum / clips.len() as f64,
        accuracy: correct as f64 / clips.len() as f64,
    })
}

/// Everything about a run that isn't the optimizer: budget, data sizes,
/// and the evaluation/plateau schedule.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps (plus always at step 0 and the end).
    pub eval_interval: usize,
    pub train_clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub clip_duration_s: f64,
    /// `Some(policy)`: apply train-time augmentation. Off by default.
    pub augment: Option<AugmentPolicy>,
    /// Keep the classification head fixed; only the encoder adapts.
    pub freeze_head: bool,
    /// Halve the learning rate after this many evals without a new best
    /// validation loss.
    pub plateau_patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch_size: 8,
            eval_interval: 25,
            train_clips_per_class: 16,
            val_clips_per_class: 16,
            clip_duration_s: 0.1,
            augment: None,
            freeze_head: false,
            plateau_patience: 3,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.eval_interval == 0
            || self.train_clips_per_class == 0
            || self.val_clips_per_class == 0
            || self.plateau_patience == 0
        {
            return Err(Error::InvalidConfig(
                "batch_size, eval_interval, clip counts, and plateau_patience must be >= 1".into(),
            ));
        }
        if let Some(policy) = &self.augment {
            policy.validate()?;
        }
        Ok(())
    }
}

/// One metrics row per evaluation; `loss`/`accuracy` are validation-set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// CSV with header `step,loss,accuracy,lr`; full float precision so equal
/// CSVs mean bitwise-equal runs.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,accuracy,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.accuracy, r.lr));
    }
    out
}

/// A finished (or zero-step) run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub final_eval: EvalResult,
}

/// Train with default options (see [`TrainOptions`]) for `steps` steps.
pub fn train_toy(
    cfg: &EncoderConfig,
    opt: &OptimizerConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    train_toy_with(cfg, opt, &TrainOptions { steps, ..TrainOptions::default() }, seed)
}

/// Full training loop. Deterministic per seed; aborts with
/// [`Error::Diverged`] the first time the training loss is not finite.
pub fn train_toy_with(
    cfg: &EncoderConfig,
    opt: &OptimizerConfig,
    options: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    opt.validate()?;
    options.validate()?;

    let nominal_len = (options.clip_duration_s * audio::SAMPLE_RATE as f64).round() as usize;
    let train_set =
        toy_dataset(options.train_clips_per_class, options.clip_duration_s, seeding::mix(&[seed, SEED_TRAIN_DATA]))?;
    let val_set =
        toy_dataset(options.val_clips_per_class, options.clip_duration_s, seeding::mix(&[seed, SEED_VAL_DATA]))?;
    // Validation clips see the same normalisation as un-augmented training
    // clips, never the random effects.
    let val_clips: Vec<AudioClip> =
        val_set.clips.iter().map(audio::normalize).collect::<Result<_>>()?;
    let train_normed: Vec<AudioClip> =
        train_set.clips.iter().map(audio::normalize).collect::<Result<_>>()?;

    let mut model = ToyModel::init(cfg, seed)?;
    let mut state = AdamState::new();
    let mut lr = opt.lr;
    let mut history: Vec<MetricsRow> = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut evals_since_best = 0usize;

    let run_eval = |model: &ToyModel,
                        step: usize,
                        lr: &mut f64,
                        best_loss: &mut f64,
                        evals_since_best: &mut usize,
                        history: &mut Vec<MetricsRow>|
     -> Result<EvalResult> {
        let eval = evaluate(model, &val_clips, options.batch_size, opt.label_smoothing)?;
        history.push(MetricsRow { step, loss: eval.loss, accuracy: eval.accuracy, lr: *lr });
        if eval.loss < *best_loss {
            *best_loss = eval.loss;
            *evals_since_best = 0;
        } else {
            *evals_since_best += 1;
            if *evals_since_best >= options.plateau_patience {
                *lr *= 0.5;
                *evals_since_best = 0;
            }
        }
        Ok(eval)
    };

    let mut final_eval =
        run_eval(&model, 0, &mut lr, &mut best_loss, &mut evals_since_best, &mut history)?;

    for step in 0..options.steps {
        // Batch assembly on a stream keyed by (seed, step): order-free.
        let mut rng = seeding::rng_from(&[seed, SEED_BATCH, step as u64]);
        let mut batch: Vec<AudioClip> = Vec::with_capacity(options.batch_size);
        for slot in 0..options.batch_size {
            let idx = rand::Rng::random_range(&mut rng, 0..train_set.clips.len());
            let clip = match &options.augment {
                Some(policy) => {
                    let aug_seed = seeding::mix(&[seed, SEED_AUGMENT, step as u64, slot as u64]);
                    fit_length(&audio::augment(&train_set.clips[idx], policy, aug_seed)?, nominal_len)?
                }
                None => train_normed[idx].clone(),
            };
            batch.push(clip);
        }
        let refs: Vec<&AudioClip> = batch.iter().collect();
        let targets: Vec<usize> = batch.iter().map(|c| c.label).collect();

        let mut tape = Tape::new();
        let wave = tape.constant(wave_tensor(&refs)?);
        let nodes = model.register(&mut tape, true, options.freeze_head);
        let mode = TrainMode::training(opt.dropout, seed, step as u64);
        let logits = toy_forward(&mut tape, wave, &nodes, cfg, &mode)?;
        let loss = tape.cross_entropy_label_smoothed(logits, &targets, opt.label_smoothing)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Diverged { step: step as u64 });
        }
        tape.backward(loss)?;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, node) in nodes.entries(cfg) {
            if tape.requires_grad(node) {
                let g = tape
                    .grad(node)
                    .ok_or_else(|| Error::InvalidConfig(format!("missing grad for '{name}'")))?
                    .clone();
                grads.insert(name, g);
            }
        }
        let step_opt = OptimizerConfig { lr, ..opt.clone() };
        let mut trainable: Vec<(String, &mut Tensor)> = model
            .entries_mut()
            .into_iter()
            .filter(|(name, _)| grads.contains_key(name))
            .collect();
        adam_step(&mut trainable, &grads, &mut state, &step_opt)?;

        let done = step + 1 == options.steps;
        if (step + 1) % options.eval_interval == 0 || done {
            final_eval = run_eval(
                &model,
                step + 1,
                &mut lr,
                &mut best_loss,
                &mut evals_since_best,
                &mut history,
            )?;
        }
    }

    let checkpoint = build_checkpoint(&model, &state)?;
    Ok(TrainOutcome { history, checkpoint, final_eval })
}

/// Model parameters plus optimizer state as one named-tensor bundle:
/// moments under `adam.m.` / `adam.v.`, the step counter as scalar `step`.
pub fn build_checkpoint(model: &ToyModel, state: &AdamState) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for (name, t) in model.entries() {
        ckpt.insert(name, t.clone())?;
    }
    for (name, (m, v)) in &state.moments {
        ckpt.insert(format!("adam.m.{name}"), m.clone())?;
        ckpt.insert(format!("adam.v.{name}"), v.clone())?;
    }
    ckpt.insert("step", Tensor::scalar(state.step as f64))?;
    Ok(ckpt)
}

/// Inverse of [`build_checkpoint`]: overwrite the model in place and
/// reconstruct the optimizer state (entries without stored moments start
/// fresh, e.g. a previously frozen head).
pub fn restore_model(ckpt: &Checkpoint, model: &mut ToyModel) -> Result<AdamState> {
    let mut targets = model.entries_mut();
    ckpt.apply_to(&mut targets)?;
    let names: Vec<String> = model.entries().iter().map(|(n, _)| n.clone()).collect();
    let mut state = AdamState::new();
    for name in names {
        if let (Some(m), Some(v)) =
            (ckpt.get(&format!("adam.m.{name}")), ckpt.get(&format!("adam.v.{name}")))
        {
            state.moments.insert(name, (m.clone(), v.clone()));
        }
    }
    state.step = ckpt.require("step")?.item() as u64;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> (Vec<(String, Tensor)>, BTreeMap<String, Tensor>) {
        let params = vec![("w".to_string(), Tensor::scalar(value))];
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(0.5))]);
        (params, grads)
    }

    fn as_mut(params: &mut [(String, Tensor)]) -> Vec<(String, &mut Tensor)> {
        params.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }

    #[test]
    fn adam_single_step_matches_hand_arithmetic() {
        // p=1, g=0.5, lr=5e-4, b1=0.99, b2=0.98, eps=1e-8:
        //   m=0.005, v=0.005, mhat=0.5, vhat=0.25,
        //   update = 5e-4 * 0.5 / (0.5 + 1e-8).
        let (mut params, grads) = scalar_params(1.0);
        let mut state = AdamState::new();
        let cfg = OptimizerConfig::default();
        let info = adam_step(&mut as_mut(&mut params), &grads, &mut state, &cfg).unwrap();
        assert_eq!(info.clip_scale, 1.0);
        assert!((info.grad_norm - 0.5).abs() < 1e-15);
        assert!((params[0].1.item() - 0.99950000001).abs() < 1e-12);
        assert_eq!(state.step, 1);

        adam_step(&mut as_mut(&mut params), &grads, &mut state, &cfg).unwrap();
        assert!((params[0].1.item() - 0.9990000000199999).abs() < 1e-12);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn zero_grads_leave_params_unchanged_but_advance_step() {
        let mut params = vec![("w".to_string(), Tensor::from_vec(vec![2], vec![1.25, -3.5]).unwrap())];
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
        let mut state = AdamState::new();
        adam_step(&mut as_mut(&mut params), &grads, &mut state, &OptimizerConfig::default())
            .unwrap();
        assert_eq!(params[0].1.data(), &[1.25, -3.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn clipping_halves_a_norm_40_gradient() {
        // |(24, 32)| = 40, so clipping at 20 scales by exactly 0.5 and the
        // result must match feeding the pre-halved gradient directly.
        let mut clipped = vec![("w".to_string(), Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())];
        let big = BTreeMap::from([(
            "w".to_string(),
            Tensor::from_vec(vec![2], vec![24.0, 32.0]).unwrap(),
        )]);
        let mut state_a = AdamState::new();
        let info =
            adam_step(&mut as_mut(&mut clipped), &big, &mut state_a, &OptimizerConfig::default())
                .unwrap();
        assert_eq!(info.grad_norm, 40.0);
        assert_eq!(info.clip_scale, 0.5);
        assert!(info.grad_norm * info.clip_scale <= 20.0 + 1e-9);

        let mut manual = vec![("w".to_string(), Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())];
        let halved = BTreeMap::from([(
            "w".to_string(),
            Tensor::from_vec(vec![2], vec![12.0, 16.0]).unwrap(),
        )]);
        let mut state_b = AdamState::new();
        let info_b =
            adam_step(&mut as_mut(&mut manual), &halved, &mut state_b, &OptimizerConfig::default())
                .unwrap();
        assert_eq!(info_b.clip_scale, 1.0, "norm exactly 20 is not clipped");
        assert_eq!(clipped[0].1.data(), manual[0].1.data());
        assert_eq!(state_a.moments["w"], state_b.moments["w"]);
    }

    #[test]
    fn post_clip_norm_never_exceeds_the_ceiling() {
        let cfg = OptimizerConfig::default();
        for seed in 0..30u64 {
            let mut rng = seeding::rng_from(&[seed, 0xC11F]);
            let g = Tensor::from_fn(vec![17], |_| (rand::Rng::random::<f64>(&mut rng) - 0.3) * 40.0);
            let mut params = vec![("w".to_string(), Tensor::zeros(vec![17]))];
            let grads = BTreeMap::from([("w".to_string(), g)]);
            let mut state = AdamState::new();
            let info = adam_step(&mut as_mut(&mut params), &grads, &mut state, &cfg).unwrap();
            assert!(info.grad_norm * info.clip_scale <= cfg.clip_norm + 1e-9);
        }
    }

    #[test]
    fn adam_rejects_missing_or_misshapen_grads() {
        let mut params = vec![("w".to_string(), Tensor::zeros(vec![2]))];
        let mut state = AdamState::new();
        let cfg = OptimizerConfig::default();
        let empty = BTreeMap::new();
        assert!(adam_step(&mut as_mut(&mut params), &empty, &mut state, &cfg).is_err());
        let wrong = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![3]))]);
        assert!(matches!(
            adam_step(&mut as_mut(&mut params), &wrong, &mut state, &cfg),
            Err(Error::ShapeMismatch { op: "adam_step", .. })
        ));
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = toy_dataset(3, 0.05, 7).unwrap();
        let b = toy_dataset(3, 0.05, 7).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.len(), 12);
        for class in 0..N_CLASSES {
            assert_eq!(a.clips.iter().filter(|c| c.label == class).count(), 3);
        }
        // Interleaved: any aligned window of N_CLASSES covers all classes.
        assert_eq!(a.clips[0].label, 0);
        assert_eq!(a.clips[3].label, 3);
        assert_eq!(a.clips[4].label, 0);
    }

    #[test]
    fn toy_forward_produces_logits_per_class() {
        let cfg = EncoderConfig::desk();
        let model = ToyModel::init(&cfg, 3).unwrap();
        let clips = toy_dataset(1, 0.05, 1).unwrap();
        let refs: Vec<&AudioClip> = clips.clips.iter().take(2).collect();
        let mut tape = Tape::new();
        let wave = tape.constant(wave_tensor(&refs).unwrap());
        let nodes = model.register(&mut tape, false, false);
        let logits = toy_forward(&mut tape, wave, &nodes, &cfg, &TrainMode::inference()).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, N_CLASSES]);
        assert!(tape.value(logits).all_finite());
    }

    fn smoke_options(steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            batch_size: 2,
            eval_interval: 2,
            train_clips_per_class: 2,
            val_clips_per_class: 2,
            clip_duration_s: 0.05,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_step_run_reports_near_chance_accuracy() {
        let cfg = EncoderConfig::desk();
        let mut options = smoke_options(0);
        options.val_clips_per_class = 8;
        let out = train_toy_with(&cfg, &OptimizerConfig::default(), &options, 5).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].step, 0);
        // Untrained 4-class model on a balanced set: anywhere near 1/4.
        assert!(
            (0.05..=0.55).contains(&out.final_eval.accuracy),
            "untrained accuracy {}",
            out.final_eval.accuracy
        );
        assert_eq!(out.checkpoint.require("step").unwrap().item(), 0.0);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_runs() {
        let cfg = EncoderConfig::desk()
            .with_positions(crate::search::PositionConfig::new(vec![2]).unwrap());
        let opt = OptimizerConfig::default();
        let a = train_toy_with(&cfg, &opt, &smoke_options(3), 11).unwrap();
        let b = train_toy_with(&cfg, &opt, &smoke_options(3), 11).unwrap();
        assert_eq!(metrics_to_csv(&a.history), metrics_to_csv(&b.history));
        assert_eq!(a.checkpoint, b.checkpoint);
        let c = train_toy_with(&cfg, &opt, &smoke_options(3), 12).unwrap();
        assert_ne!(
            metrics_to_csv(&a.history),
            metrics_to_csv(&c.history),
            "different seeds should differ"
        );
    }

    #[test]
    fn freezing_the_head_keeps_it_bit_identical() {
        let cfg = EncoderConfig::desk();
        let opt = OptimizerConfig::default();
        let mut options = smoke_options(3);
        options.freeze_head = true;
        let seed = 21;
        let reference = ToyModel::init(&cfg, seed).unwrap();
        let out = train_toy_with(&cfg, &opt, &options, seed).unwrap();
        let trained_w = out.checkpoint.require("head.w").unwrap();
        let trained_b = out.checkpoint.require("head.b").unwrap();
        assert_eq!(trained_w, &reference.head_w);
        assert_eq!(trained_b, &reference.head_b);
        // The encoder, meanwhile, moved.
        assert_ne!(out.checkpoint.require("proj.w").unwrap(), &reference.encoder.proj_w);
        // And no moments were accumulated for the frozen head.
        assert!(out.checkpoint.get("adam.m.head.w").is_none());
    }

    #[test]
    fn training_with_augmentation_stays_finite_and_deterministic() {
        let cfg = EncoderConfig::desk();
        let opt = OptimizerConfig::default();
        let mut options = smoke_options(2);
        options.augment = Some(AugmentPolicy::default());
        let a = train_toy_with(&cfg, &opt, &options, 31).unwrap();
        let b = train_toy_with(&cfg, &opt, &options, 31).unwrap();
        assert_eq!(metrics_to_csv(&a.history), metrics_to_csv(&b.history));
        assert!(a.final_eval.loss.is_finite());
    }

    #[test]
    fn absurd_learning_rate_diverges_with_a_step_number() {
        let cfg = EncoderConfig::desk();
        let opt = OptimizerConfig { lr: 1e12, dropout: 0.0, ..OptimizerConfig::default() };
        match train_toy_with(&cfg, &opt, &smoke_options(20), 2) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_restores_model_and_optimizer_state() {
        let cfg = EncoderConfig::desk()
            .with_positions(crate::search::PositionConfig::new(vec![4]).unwrap());
        let opt = OptimizerConfig::default();
        let out = train_toy_with(&cfg, &opt, &smoke_options(2), 8).unwrap();

        let mut restored = ToyModel::init(&cfg, 999).unwrap();
        let state = restore_model(&out.checkpoint, &mut restored).unwrap();
        assert_eq!(state.step, 2);
        let rebuilt = build_checkpoint(&restored, &state).unwrap();
        assert_eq!(rebuilt, out.checkpoint);
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = vec![MetricsRow { step: 0, loss: 1.5, accuracy: 0.25, lr: 5e-4 }];
        let csv = metrics_to_csv(&rows);
        assert_eq!(csv, "step,loss,accuracy,lr\n0,1.5,0.25,0.0005\n");
    }
}
