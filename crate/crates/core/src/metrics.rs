//! Objective metrics: SI-SDR and ESTOI, plus per-condition report tables.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SI-SDR results are clamped to `±SI_SDR_CAP_DB`.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// Both signals are made zero-mean; the reference is scaled by
/// `α = ⟨ŝ, s⟩ / ‖s‖²` and the ratio `‖αs‖² / ‖αs − ŝ‖²` is clamped to
/// ±100 dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let n = reference.len() as f64;
    let mean_s = reference.iter().sum::<f64>() / n;
    let mean_e = estimate.iter().sum::<f64>() / n;
    let s: Vec<f64> = reference.iter().map(|v| v - mean_s).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - mean_e).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 || !ss.is_finite() {
        return Err(Error::InvalidInput("reference is silent".into()));
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let noise: f64 = s.iter().zip(&e).map(|(sv, ev)| (alpha * sv - ev).powi(2)).sum();
    let db = 10.0 * (target / noise).log10();
    Ok(if db.is_nan() {
        -SI_SDR_CAP_DB
    } else {
        db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
    })
}

const ESTOI_FS: u32 = 10_000;
const ESTOI_FRAME: usize = 256;
const ESTOI_HOP: usize = 128;
const ESTOI_NFFT: usize = 512;
const ESTOI_BANDS: usize = 15;
const ESTOI_MIN_FREQ: f64 = 150.0;
const ESTOI_SEGMENT: usize = 30;
const ESTOI_DYN_RANGE: f64 = 40.0;

/// Extended short-time objective intelligibility of `estimate` against the
/// clean `reference`, both at `sample_rate_hz`.
///
/// Signals are resampled to 10 kHz, frames more than 40 dB below the loudest
/// reference frame are dropped, 1/3-octave band envelopes are cut into
/// 384 ms segments, and each segment's spectral correlation after row and
/// column normalisation is averaged.
pub fn estoi(estimate: &[f64], reference: &[f64], sample_rate_hz: u32) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if sample_rate_hz == 0 {
        return Err(Error::InvalidInput("sample rate must be positive".into()));
    }
    let (x, y) = if sample_rate_hz == ESTOI_FS {
        (reference.to_vec(), estimate.to_vec())
    } else {
        (
            resample(reference, ESTOI_FS, sample_rate_hz),
            resample(estimate, ESTOI_FS, sample_rate_hz),
        )
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let xs = band_envelopes(&x);
    let ys = band_envelopes(&y);
    let frames = xs.first().map_or(0, Vec::len);
    if frames < ESTOI_SEGMENT {
        return Err(Error::InvalidInput(format!(
            "clip too short for ESTOI: {frames} active frames, need {ESTOI_SEGMENT}"
        )));
    }

    let mut total = 0.0;
    let segments = frames - ESTOI_SEGMENT + 1;
    for m in ESTOI_SEGMENT..=frames {
        let xn = row_col_normalize(&xs, m - ESTOI_SEGMENT, m);
        let yn = row_col_normalize(&ys, m - ESTOI_SEGMENT, m);
        let dot: f64 = xn.iter().zip(&yn).map(|(a, b)| a * b).sum();
        total += dot / ESTOI_SEGMENT as f64;
    }
    Ok(total / segments as f64)
}

/// Symmetric Hann without zero endpoints (MATLAB `hanning`).
fn hanning(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * (n + 1) as f64 / (len + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(ESTOI_FRAME)).step_by(ESTOI_HOP)
}

fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hanning(ESTOI_FRAME);
    let window = |s: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&s[i..i + ESTOI_FRAME]).map(|(a, b)| a * b).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let xf: Vec<Vec<f64>> = starts.iter().map(|&i| window(x, i)).collect();
    let yf: Vec<Vec<f64>> = starts.iter().map(|&i| window(y, i)).collect();
    let energies: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - ESTOI_DYN_RANGE - energies[i] < 0.0).collect();
    let ola = |frames: &[Vec<f64>]| -> Vec<f64> {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * ESTOI_HOP + ESTOI_FRAME];
        for (k, &i) in keep.iter().enumerate() {
            for (o, v) in out[k * ESTOI_HOP..].iter_mut().zip(&frames[i]) {
                *o += v;
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// Band edges `[lo, hi)` in FFT bins for each 1/3-octave band.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = ESTOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * ESTOI_FS as f64 / ESTOI_NFFT as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (k, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..ESTOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = ESTOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = ESTOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// `[band][frame]` 1/3-octave magnitude envelopes.
fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hanning(ESTOI_FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(ESTOI_NFFT);
    let bands = third_octave_bands();
    let mut out = vec![Vec::new(); ESTOI_BANDS];
    let mut buf = vec![Complex64::new(0.0, 0.0); ESTOI_NFFT];
    for i in frame_starts(x.len()) {
        buf.fill(Complex64::new(0.0, 0.0));
        for (k, (a, b)) in w.iter().zip(&x[i..i + ESTOI_FRAME]).enumerate() {
            buf[k].re = a * b;
        }
        fft.process(&mut buf);
        for (band, &(lo, hi)) in out.iter_mut().zip(&bands) {
            band.push(buf[lo..hi].iter().map(Complex64::norm_sqr).sum::<f64>().sqrt());
        }
    }
    out
}

/// Flattened `[band][frame]` segment with rows, then columns, made
/// zero-mean and unit-norm.
fn row_col_normalize(env: &[Vec<f64>], start: usize, end: usize) -> Vec<f64> {
    let n = end - start;
    let bands = env.len();
    let mut seg: Vec<f64> = env.iter().flat_map(|row| row[start..end].iter().copied()).collect();
    for b in 0..bands {
        let row = &mut seg[b * n..(b + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    for t in 0..n {
        let mean = (0..bands).map(|b| seg[b * n + t]).sum::<f64>() / bands as f64;
        (0..bands).for_each(|b| seg[b * n + t] -= mean);
        let norm = (0..bands).map(|b| seg[b * n + t].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            (0..bands).for_each(|b| seg[b * n + t] /= norm);
        }
    }
    seg
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational resampling from `from` Hz to `to` Hz with a Kaiser-windowed sinc
/// anti-aliasing filter (60 dB rejection), zero-phase aligned. Same design
/// as Octave's `resample`.
pub fn resample(x: &[f64], to: u32, from: u32) -> Vec<f64> {
    let g = gcd(to as u64, from as u64);
    let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    if up == down {
        return x.to_vec();
    }
    let cutoff = 1.0 / (2.0 * up.max(down) as f64);
    let rejection_db = 60.0;
    let roll_off = cutoff / 10.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as usize;
    let beta = 0.1102 * (rejection_db - 8.7);
    let taps = 2 * half + 1;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - half as f64;
            let arg = 2.0 * cutoff * t;
            let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let r = 2.0 * i as f64 / (taps - 1) as f64 - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            2.0 * up as f64 * cutoff * sinc * kaiser
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / sum);

    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|k| {
            let u = k * down + half;
            let lo = u.saturating_sub(taps - 1).div_ceil(up);
            let hi = (u / up).min(x.len().saturating_sub(1));
            (lo..=hi).map(|i| x[i] * h[u - i * up]).sum()
        })
        .collect()
}

/// Scores for one enhanced utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance: String,
    pub condition: String,
    pub si_sdr_db: f64,
    pub estoi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub count: usize,
    pub mean_si_sdr_db: f64,
    pub mean_estoi: f64,
}

/// Per-utterance scores with per-condition means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceScore>,
}

impl MetricReport {
    pub fn push(&mut self, score: UtteranceScore) {
        self.utterances.push(score);
    }

    /// Means per condition plus an `"all"` entry.
    pub fn aggregate(&self) -> BTreeMap<String, ConditionSummary> {
        let mut groups: BTreeMap<String, Vec<&UtteranceScore>> = BTreeMap::new();
        for u in &self.utterances {
            groups.entry(u.condition.clone()).or_default().push(u);
            groups.entry("all".into()).or_default().push(u);
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let summary = ConditionSummary {
                    count: v.len(),
                    mean_si_sdr_db: v.iter().map(|u| u.si_sdr_db).sum::<f64>() / n,
                    mean_estoi: v.iter().map(|u| u.estoi).sum::<f64>() / n,
                };
                (k, summary)
            })
            .collect()
    }

    /// `utterance,condition,si_sdr_db,estoi` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance,condition,si_sdr_db,estoi\n");
        for u in &self.utterances {
            out.push_str(&format!("{},{},{},{}\n", u.utterance, u.condition, u.si_sdr_db, u.estoi));
        }
        out
    }
}
