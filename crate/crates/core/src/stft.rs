//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are taken every `hop` samples with a periodic Hann window,
//! zero-padded to `fft_size`, and only the `fft_size / 2 + 1`
//! non-negative-frequency bins are kept. The signal is preceded by
//! `frame_len - hop` zeros so that every input sample is covered by the same
//! number of frames; synthesis applies the Hann window again and divides by
//! the summed squared windows, which reconstructs every sample.
//!
//! Frame `t` only reads input samples `< (t + 1) * hop`, so analysis is
//! causal at hop granularity.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    /// 16 kHz, 32 ms Hann frames, 50 % overlap, 512-point FFT (257 bins).
    fn default() -> Self {
        StftConfig {
            sample_rate_hz: 16_000,
            frame_len: 512,
            hop: 256,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Physical frequency of `bin` in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        self.sample_rate_hz as f64 * bin as f64 / self.fft_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stft: {msg}")));
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            return bad(format!("fft size {} must be even and >= 2", self.fft_size));
        }
        if self.frame_len == 0 || self.frame_len > self.fft_size {
            return bad(format!(
                "frame length {} must be in 1..={}",
                self.frame_len, self.fft_size
            ));
        }
        if self.hop == 0 || !self.frame_len.is_multiple_of(self.hop) {
            return bad(format!("hop {} must divide frame length {}", self.hop, self.frame_len));
        }
        if self.frame_len / self.hop < 2 {
            return bad(format!(
                "hop {} leaves Hann zeros uncovered; need at least 50% overlap",
                self.hop
            ));
        }
        Ok(())
    }

    /// Leading zeros inserted before the first sample.
    pub fn pad(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Number of frames produced for `num_samples` input samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        (num_samples + self.pad()).div_ceil(self.hop)
    }
}

/// Periodic Hann window of length `len`.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// One channel of a spectrogram, stored `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Spectrogram {
            frames,
            bins,
            data: vec![ZERO; frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::dims("spectrogram data", frames * bins, data.len()));
        }
        Ok(Spectrogram { frames, bins, data })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn set(&mut self, t: usize, f: usize, v: Complex64) {
        self.data[t * self.bins + f] = v;
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum()
    }

    pub fn expect_shape(&self, what: &'static str, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::dims(what, shape, self.shape()));
        }
        Ok(())
    }

    pub fn map_with(&self, other: &Spectrogram, op: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Spectrogram> {
        other.expect_shape("spectrogram operand", self.shape())?;
        Ok(Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| op(a, b)).collect(),
        })
    }
}

/// Complex STFT of `M` equal-length channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    config: StftConfig,
    num_samples: usize,
    channels: Vec<Spectrogram>,
}

impl MultichannelSpectrogram {
    pub fn new(config: StftConfig, num_samples: usize, channels: Vec<Spectrogram>) -> Result<Self> {
        config.validate()?;
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidInput("spectrogram has no channels".into()))?;
        let shape = (config.num_frames(num_samples), config.num_bins());
        first.expect_shape("spectrogram channel", shape)?;
        for ch in &channels {
            ch.expect_shape("spectrogram channel", shape)?;
        }
        Ok(MultichannelSpectrogram {
            config,
            num_samples,
            channels,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Length of the time-domain signal the spectrogram was computed from.
    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_frames(&self) -> usize {
        self.channels[0].num_frames()
    }

    pub fn num_bins(&self) -> usize {
        self.channels[0].num_bins()
    }

    pub fn channel(&self, m: usize) -> &Spectrogram {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Spectrogram] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Spectrogram> {
        self.channels
    }

    /// The `M` microphone values at one T-F bin.
    pub fn mic_vector(&self, t: usize, f: usize) -> Vec<Complex64> {
        self.channels.iter().map(|c| c.get(t, f)).collect()
    }
}

/// Analysis/synthesis engine. Immutable after construction and `Sync`.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Stft {
            window: hann(config.frame_len),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Windowed, zero-padded DFT of one frame (`frame.len() == frame_len`).
    pub fn frame_spectrum(&self, frame: &[f64], out: &mut [Complex64]) {
        let n = self.config.fft_size;
        let mut buf = vec![ZERO; n];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex64::new(x * w, 0.0);
        }
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.config.num_bins()]);
    }

    /// Inverse DFT of a one-sided spectrum, windowed by the synthesis window.
    pub fn frame_signal(&self, spectrum: &[Complex64], out: &mut [f64]) {
        let n = self.config.fft_size;
        let bins = self.config.num_bins();
        let mut buf = vec![ZERO; n];
        buf[..bins].copy_from_slice(spectrum);
        // imaginary parts of DC and Nyquist have no real-signal counterpart
        buf[0].im = 0.0;
        buf[bins - 1].im = 0.0;
        for k in 1..bins - 1 {
            buf[n - k] = spectrum[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (i, (o, &w)) in out.iter_mut().zip(&self.window).enumerate() {
            *o = buf[i].re * scale * w;
        }
    }

    pub fn analyze_channel(&self, samples: &[f64]) -> Spectrogram {
        let cfg = &self.config;
        let frames = cfg.num_frames(samples.len());
        let bins = cfg.num_bins();
        let pad = cfg.pad();
        let mut padded = vec![0.0; (frames - 1) * cfg.hop + cfg.frame_len];
        padded[pad..pad + samples.len()].copy_from_slice(samples);
        let mut spec = Spectrogram::zeros(frames, bins);
        for t in 0..frames {
            let start = t * cfg.hop;
            self.frame_spectrum(&padded[start..start + cfg.frame_len], spec.frame_mut(t));
        }
        spec
    }

    pub fn analyze(&self, wave: &[Vec<f64>]) -> Result<MultichannelSpectrogram> {
        let first = wave
            .first()
            .ok_or_else(|| Error::InvalidInput("no channels to analyze".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::InvalidInput("zero-length input".into()));
        }
        if let Some((m, ch)) = wave.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(Error::InvalidInput(format!(
                "channel {m} has {} samples, channel 0 has {len}",
                ch.len()
            )));
        }
        let channels = wave.iter().map(|c| self.analyze_channel(c)).collect();
        MultichannelSpectrogram::new(self.config, len, channels)
    }

    /// Reconstructs `num_samples` samples from one channel.
    pub fn synthesize_channel(&self, spec: &Spectrogram, num_samples: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        spec.expect_shape("spectrogram for synthesis", (cfg.num_frames(num_samples), cfg.num_bins()))?;
        let frames = spec.num_frames();
        let total = (frames - 1) * cfg.hop + cfg.frame_len;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![0.0; cfg.frame_len];
        for t in 0..frames {
            self.frame_signal(spec.frame(t), &mut buf);
            let start = t * cfg.hop;
            for i in 0..cfg.frame_len {
                acc[start + i] += buf[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        let pad = cfg.pad();
        Ok((pad..pad + num_samples).map(|i| acc[i] / norm[i]).collect())
    }

    pub fn synthesize(&self, spec: &MultichannelSpectrogram) -> Result<Vec<Vec<f64>>> {
        if spec.config() != &self.config {
            return Err(Error::dims("stft config", self.config, spec.config()));
        }
        spec.channels()
            .iter()
            .map(|c| self.synthesize_channel(c, spec.num_samples()))
            .collect()
    }
}

/// Batch analysis with a freshly planned engine.
pub fn analyze(wave: &[Vec<f64>], cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    Stft::new(*cfg)?.analyze(wave)
}

/// Batch synthesis with a freshly planned engine.
pub fn synthesize(spec: &MultichannelSpectrogram) -> Result<Vec<Vec<f64>>> {
    Stft::new(*spec.config())?.synthesize(spec)
}

/// Frame-by-frame analysis: push `hop` samples, get one spectrum frame.
#[derive(Debug)]
pub struct StreamingAnalyzer {
    stft: Stft,
    history: Vec<f64>,
}

impl StreamingAnalyzer {
    pub fn new(stft: Stft) -> Self {
        let history = vec![0.0; stft.config.frame_len];
        StreamingAnalyzer { stft, history }
    }

    /// Consumes the next `hop` input samples and returns the frame ending with them.
    pub fn push(&mut self, block: &[f64]) -> Result<Vec<Complex64>> {
        let hop = self.stft.config.hop;
        if block.len() != hop {
            return Err(Error::dims("streaming block", hop, block.len()));
        }
        self.history.drain(..hop);
        self.history.extend_from_slice(block);
        let mut out = vec![ZERO; self.stft.config.num_bins()];
        self.stft.frame_spectrum(&self.history, &mut out);
        Ok(out)
    }
}

/// Frame-by-frame weighted overlap-add: push one spectrum frame, get `hop`
/// finished output samples. Output lags input by `frame_len - hop` samples.
#[derive(Debug)]
pub struct StreamingSynthesizer {
    stft: Stft,
    acc: Vec<f64>,
    norm: Vec<f64>,
}

impl StreamingSynthesizer {
    pub fn new(stft: Stft) -> Self {
        let len = stft.config.frame_len;
        StreamingSynthesizer {
            stft,
            acc: vec![0.0; len],
            norm: vec![0.0; len],
        }
    }

    pub fn push(&mut self, spectrum: &[Complex64]) -> Result<Vec<f64>> {
        let cfg = self.stft.config;
        if spectrum.len() != cfg.num_bins() {
            return Err(Error::dims("streaming spectrum", cfg.num_bins(), spectrum.len()));
        }
        let mut buf = vec![0.0; cfg.frame_len];
        self.stft.frame_signal(spectrum, &mut buf);
        for i in 0..cfg.frame_len {
            self.acc[i] += buf[i];
            self.norm[i] += self.stft.window[i] * self.stft.window[i];
        }
        let out = (0..cfg.hop)
            .map(|i| if self.norm[i] > 0.0 { self.acc[i] / self.norm[i] } else { 0.0 })
            .collect();
        self.acc.drain(..cfg.hop);
        self.norm.drain(..cfg.hop);
        self.acc.resize(cfg.frame_len, 0.0);
        self.norm.resize(cfg.frame_len, 0.0);
        Ok(out)
    }
}
