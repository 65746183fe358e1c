//! Synthetic waveform dataset and the training-time augmentation pipeline.
//!
//! Clips are sums of class-specific sinusoids plus seeded noise — a
//! desk-scale stand-in for real speech that still demands cross-frame
//! frequency resolution: classes come in close pairs, so telling 400 Hz
//! from 430 Hz needs integration over many front-end frames, while 400 vs
//! 800 is locally obvious.
//!
//! Augmentation applies tempo, pitch, and echo jointly, gated by a single
//! Bernoulli draw per clip, and always ends with zero-mean/unit-variance
//! normalisation. Pitch is implemented as resample-then-length-restore:
//! the signal is resampled by `2^(cents/1200)` (which shifts frequency)
//! and then tiled or truncated back to the original length (which restores
//! duration without undoing the shift). That is a crude stand-in for a
//! proper pitch shifter; exercising the pipeline is the point, fidelity is
//! not.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeding;

/// Default sample rate for synthesised clips.
pub const SAMPLE_RATE: u32 = 16_000;

/// Number of classes in the toy task.
pub const N_CLASSES: usize = 4;

/// Carrier frequency of each class, arranged in close pairs so that
/// class discrimination requires fine frequency resolution.
pub const CLASS_CARRIERS_HZ: [f64; N_CLASSES] = [400.0, 430.0, 800.0, 860.0];

/// Relative amplitude of the second harmonic mixed into every clip.
const HARMONIC_AMP: f64 = 0.3;
/// Peak amplitude of the seeded white noise.
const NOISE_AMP: f64 = 0.05;

/// Clips shorter than this cannot produce a single front-end frame.
pub const MIN_CLIP_SAMPLES: usize = 400;

const SEED_SYNTH: u64 = 0xA0D1_0001;
const SEED_AUGMENT: u64 = 0xA0D1_0002;

/// A mono waveform with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    /// Class id carried through every transformation.
    pub label: usize,
}

impl AudioClip {
    /// Validates finiteness, amplitude bound (|x| <= 10), and minimum
    /// length (one front-end receptive field).
    pub fn new(samples: Vec<f64>, sample_rate: u32, label: usize) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        if samples.len() < MIN_CLIP_SAMPLES {
            return Err(Error::InvalidConfig(format!(
                "clip of {} samples is shorter than the {MIN_CLIP_SAMPLES}-sample minimum",
                samples.len()
            )));
        }
        if !samples.iter().all(|x| x.is_finite() && x.abs() <= 10.0) {
            return Err(Error::InvalidConfig(
                "clip samples must be finite and within [-10, 10]".into(),
            ));
        }
        Ok(AudioClip { samples, sample_rate, label })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        AudioClip::new(samples, self.sample_rate, self.label)
    }
}

/// Deterministic synthetic clip for one class.
///
/// The waveform is `sin(2*pi*f*t + phase) + 0.3*sin(4*pi*f*t + 2*phase)`
/// plus uniform noise of peak amplitude 0.05, with the phase and noise
/// drawn from a stream keyed by `(seed, class_id)`.
pub fn synth_clip(class_id: usize, duration_s: f64, seed: u64) -> Result<AudioClip> {
    if class_id >= N_CLASSES {
        return Err(Error::TargetOutOfRange { index: class_id, classes: N_CLASSES });
    }
    if !(duration_s > 0.0) {
        return Err(Error::InvalidConfig(format!("duration {duration_s}s must be positive")));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = seeding::rng_from(&[seed, SEED_SYNTH, class_id as u64]);
    let phase = rand::Rng::random::<f64>(&mut rng) * std::f64::consts::TAU;
    let f = CLASS_CARRIERS_HZ[class_id];
    let w = std::f64::consts::TAU * f / SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|t| {
            let t = t as f64;
            let noise = (rand::Rng::random::<f64>(&mut rng) - 0.5) * 2.0 * NOISE_AMP;
            (w * t + phase).sin() + HARMONIC_AMP * (2.0 * w * t + 2.0 * phase).sin() + noise
        })
        .collect();
    AudioClip::new(samples, SAMPLE_RATE, class_id)
}

/// Linear-interpolation resampling at `positions[i] = i * rate`; the output
/// has `round(n / rate)` samples, so `rate > 1` shortens the clip and
/// shifts its spectrum up by the same factor.
pub fn tempo(clip: &AudioClip, rate: f64) -> Result<AudioClip> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidConfig(format!("tempo rate {rate} must be positive")));
    }
    let resampled = resample(clip.samples(), rate);
    clip.with_samples(resampled)
}

fn resample(x: &[f64], rate: f64) -> Vec<f64> {
    let n = x.len();
    let m = (n as f64 / rate).round().max(1.0) as usize;
    (0..m)
        .map(|j| {
            let pos = j as f64 * rate;
            let i0 = pos.floor() as usize;
            if i0 >= n - 1 {
                x[n - 1]
            } else {
                let frac = pos - i0 as f64;
                x[i0] * (1.0 - frac) + x[i0 + 1] * frac
            }
        })
        .collect()
}

/// Pitch shift by `cents` (|cents| <= 1200): resample by `2^(cents/1200)`,
/// then tile or truncate back to the original length. The spectrum moves;
/// the duration stays (exactly, which is within the documented +-1).
pub fn pitch(clip: &AudioClip, cents: f64) -> Result<AudioClip> {
    if !cents.is_finite() || cents.abs() > 1200.0 {
        return Err(Error::InvalidConfig(format!(
            "pitch shift {cents} cents outside [-1200, 1200]"
        )));
    }
    let factor = (cents / 1200.0).exp2();
    let resampled = resample(clip.samples(), factor);
    let n = clip.len();
    let restored: Vec<f64> = (0..n).map(|j| resampled[j % resampled.len()]).collect();
    clip.with_samples(restored)
}

/// Single-tap echo: `y[t] = x[t] + decay * x[t - d]` with
/// `d = round(delay_ms * rate / 1000)`, and `y[t] = x[t]` for `t < d`.
/// Length is preserved exactly.
pub fn echo(clip: &AudioClip, delay_ms: f64, decay: f64) -> Result<AudioClip> {
    if !(delay_ms > 0.0) || !delay_ms.is_finite() {
        return Err(Error::InvalidConfig(format!("echo delay {delay_ms}ms must be positive")));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidConfig(format!("echo decay {decay} outside [0, 1)")));
    }
    let d = (delay_ms * clip.sample_rate() as f64 / 1000.0).round() as usize;
    let x = clip.samples();
    let samples =
        (0..x.len()).map(|t| if t >= d { x[t] + decay * x[t - d] } else { x[t] }).collect();
    clip.with_samples(samples)
}

/// Zero-mean, unit-variance rescaling. A (numerically) constant clip has
/// no scale to normalise to and is rejected.
pub fn normalize(clip: &AudioClip) -> Result<AudioClip> {
    let x = clip.samples();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-24 {
        return Err(Error::DegenerateSignal(format!(
            "cannot normalize a constant clip (variance {var:.3e})"
        )));
    }
    let inv_std = 1.0 / var.sqrt();
    clip.with_samples(x.iter().map(|v| (v - mean) * inv_std).collect())
}

/// Augmentation parameters; defaults follow the training recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Probability that a clip receives the effects at all.
    pub probability: f64,
    pub tempo_range: (f64, f64),
    /// Pitch-shift range in cents.
    pub pitch_range: (f64, f64),
    pub echo_delay_ms_range: (f64, f64),
    pub echo_decay_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            probability: 0.8,
            tempo_range: (0.85, 1.3),
            pitch_range: (-300.0, 300.0),
            echo_delay_ms_range: (20.0, 200.0),
            echo_decay_range: (0.05, 0.2),
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("tempo", self.tempo_range),
            ("pitch", self.pitch_range),
            ("echo_delay_ms", self.echo_delay_ms_range),
            ("echo_decay", self.echo_decay_range),
        ];
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::InvalidConfig(format!(
                "augment probability {} outside [0, 1]",
                self.probability
            )));
        }
        for (name, (lo, hi)) in ranges {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// The sampled decision for one clip: whether the effects fire and with
/// which parameters. Split out from [`augment`] so callers (and tests) can
/// inspect the draw without running any DSP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub apply: bool,
    pub tempo_rate: f64,
    pub pitch_cents: f64,
    pub echo_delay_ms: f64,
    pub echo_decay: f64,
}

/// One Bernoulli draw gates all three effects jointly; parameters are
/// uniform in the policy ranges. Streams are keyed by the seed alone, so
/// the same seed always yields the same decision.
pub fn draw_augment(policy: &AugmentPolicy, seed: u64) -> Result<AugmentDraw> {
    policy.validate()?;
    let mut rng = seeding::rng_from(&[seed, SEED_AUGMENT]);
    let mut uniform = |(lo, hi): (f64, f64)| lo + rand::Rng::random::<f64>(&mut rng) * (hi - lo);
    let gate = uniform((0.0, 1.0)) < policy.probability;
    Ok(AugmentDraw {
        apply: gate,
        tempo_rate: uniform(policy.tempo_range),
        pitch_cents: uniform(policy.pitch_range),
        echo_delay_ms: uniform(policy.echo_delay_ms_range),
        echo_decay: uniform(policy.echo_decay_range),
    })
}

/// Augment one clip: with probability `policy.probability` apply tempo,
/// pitch, and echo (all three), then always normalise to zero mean and
/// unit variance.
pub fn augment(clip: &AudioClip, policy: &AugmentPolicy, seed: u64) -> Result<AudioClip> {
    let draw = draw_augment(policy, seed)?;
    let effected = if draw.apply {
        let a = tempo(clip, draw.tempo_rate)?;
        let b = pitch(&a, draw.pitch_cents)?;
        echo(&b, draw.echo_delay_ms, draw.echo_decay)?
    } else {
        clip.clone()
    };
    normalize(&effected)
}

/// Export as mono 16-bit PCM WAV, peak-normalised to 97% full scale so
/// normalised clips (unit variance, peaks of several sigma) don't clip.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let peak = clip.samples().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let scale = 0.97 * i16::MAX as f64 / peak;
    let n = clip.len() as u32;
    let byte_rate = clip.sample_rate() * 2;
    let data_bytes = n * 2;

    let mut buf: Vec<u8> = Vec::with_capacity(44 + data_bytes as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes()); // PCM chunk size
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM format
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&clip.sample_rate().to_le_bytes());
    buf.extend_from_slice(&byte_rate.to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for &x in clip.samples() {
        buf.extend_from_slice(&(((x * scale).round()) as i16).to_le_bytes());
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
