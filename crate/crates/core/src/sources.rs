//! Dry source signals: local WAV files or deterministic synthetic stand-ins.
//!
//! The synthetic talker is a source-filter model: a glottal pulse train with
//! per-syllable pitch contours through three formant resonators, with
//! fricative onsets, syllable envelopes and pauses. It has the
//! 2–8 Hz envelope modulation and spectral shape that intelligibility
//! metrics respond to, which white noise does not.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// One synthetic talker.
    Speech,
    /// Six overlapping synthetic talkers.
    Babble,
    White,
}

/// Where a dry source signal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SignalSpec {
    Synthetic { kind: SourceKind, seed: u64, duration_s: f64 },
    /// First channel of a WAV file at the scenario's sample rate.
    Wav { path: PathBuf },
}

impl SignalSpec {
    pub fn render(&self, sample_rate_hz: u32) -> Result<Vec<f64>> {
        match self {
            SignalSpec::Synthetic { kind, seed, duration_s } => {
                if !(duration_s.is_finite() && *duration_s > 0.0) {
                    return Err(Error::InvalidInput(format!("duration {duration_s} s must be positive")));
                }
                let len = (duration_s * sample_rate_hz as f64).round() as usize;
                Ok(match kind {
                    SourceKind::Speech => speech_like(*seed, len, sample_rate_hz),
                    SourceKind::Babble => babble(*seed, len, sample_rate_hz),
                    SourceKind::White => white_noise(*seed, len),
                })
            }
            SignalSpec::Wav { path } => {
                let audio = read_wav(path)?;
                if audio.sample_rate != sample_rate_hz {
                    return Err(Error::InvalidInput(format!(
                        "{}: sample rate {} Hz, expected {sample_rate_hz} Hz",
                        path.display(),
                        audio.sample_rate
                    )));
                }
                Ok(audio.channels.into_iter().next().unwrap_or_default())
            }
        }
    }
}

const TARGET_RMS: f64 = 0.1;

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = TARGET_RMS / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn white_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize_rms(&mut x);
    x
}

/// Two-pole resonator with unity-ish peak gain.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let freq = freq.min(0.45 * fs);
        let r = (-PI * bandwidth / fs).exp();
        self.a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        self.a2 = -r * r;
        self.b0 = 1.0 - r;
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];

/// Synthetic single-talker signal of `len` samples, RMS 0.1.
pub fn speech_like(seed: u64, len: usize, sample_rate_hz: u32) -> Vec<f64> {
    let fs = sample_rate_hz as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_f0 = rng.random_range(95.0..210.0);
    let mut out = vec![0.0; len];
    let mut formants = [Resonator::default(); 3];
    let mut fricative = Resonator::default();
    let mut glottal_lp = 0.0;
    let mut phase = 0.0;

    let mut n = (rng.random_range(0.0..0.15) * fs) as usize;
    while n < len {
        // optional unvoiced onset
        if rng.random_bool(0.35) {
            let dur = (rng.random_range(0.04..0.09) * fs) as usize;
            fricative.tune(rng.random_range(3000.0..5500.0), 1500.0, fs);
            let amp = rng.random_range(0.15..0.35);
            for i in 0..dur.min(len - n) {
                let env = (PI * i as f64 / dur as f64).sin();
                out[n + i] += amp * env * fricative.process(rng.random_range(-1.0..1.0)) * 4.0;
            }
            n += dur;
        }
        if n >= len {
            break;
        }

        // voiced nucleus
        let dur = (rng.random_range(0.10..0.28) * fs) as usize;
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        for (res, (&f, bw)) in formants.iter_mut().zip(vowel.iter().zip([70.0, 100.0, 140.0])) {
            res.tune(f * rng.random_range(0.9..1.1), bw, fs);
        }
        let f0_start = base_f0 * rng.random_range(0.95..1.2);
        let f0_end = base_f0 * rng.random_range(0.8..1.05);
        let amp = rng.random_range(0.5..1.0);
        for i in 0..dur.min(len - n) {
            let frac = i as f64 / dur as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            // spectral tilt of the glottal source
            glottal_lp = 0.9 * glottal_lp + pulse;
            let excitation = glottal_lp + 0.02 * rng.random_range(-1.0..1.0);
            let voiced: f64 = formants.iter_mut().map(|r| r.process(excitation)).sum();
            let env = (PI * frac).sin().powf(0.7);
            out[n + i] += amp * env * voiced;
        }
        n += dur;

        // inter-syllable gap, occasionally a phrase pause
        let gap = if rng.random_bool(0.15) {
            rng.random_range(0.3..0.6)
        } else {
            rng.random_range(0.03..0.15)
        };
        n += (gap * fs) as usize;
    }
    normalize_rms(&mut out);
    out
}

/// Six synthetic talkers summed, RMS 0.1.
pub fn babble(seed: u64, len: usize, sample_rate_hz: u32) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for k in 0..6u64 {
        let talker = speech_like(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k + 1), len, sample_rate_hz);
        for (o, v) in out.iter_mut().zip(talker) {
            *o += v;
        }
    }
    normalize_rms(&mut out);
    out
}
