//! Shoebox room simulation with the image-source method.
//!
//! Walls share one pressure reflection coefficient derived from the target
//! RT60, either through Eyring's formula or fitted so the image-method decay
//! itself hits the target. Image contributions have amplitude
//! `β^n / (4π r)` and are placed either at the nearest sample or with a
//! Hann-windowed sinc fractional delay. Reverberant responses go through a
//! one-pole DC blocker at [`RIR_HIGHPASS_HZ`]: with all-positive images the
//! late arrivals otherwise pile up into a low-frequency offset that
//! lengthens the measured decay.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::array::{dist, ArrayGeometry, Doa, Point3};
use crate::error::{Error, Result};
use crate::sources::SignalSpec;

/// Largest reflection coefficient the RT60 mapping will return.
pub const MAX_REFLECTION: f64 = 0.9999;
/// Hard cap on RIR length in seconds.
pub const MAX_RIR_SECONDS: f64 = 1.0;
/// Cut-off of the DC blocker applied to reverberant impulse responses.
pub const RIR_HIGHPASS_HZ: f64 = 50.0;
/// SIRs at or above this are treated as "no interference".
pub const SIR_CAP_DB: f64 = 60.0;

fn volume(dims: Point3) -> f64 {
    dims[0] * dims[1] * dims[2]
}

fn surface(dims: Point3) -> f64 {
    2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
}

/// Uniform wall pressure-reflection coefficient giving `rt60` by Eyring's
/// formula, `RT60 = 24 ln(10) V / (c S (−ln(1 − α)))` with `β² = 1 − α`.
/// `rt60 == 0` means anechoic.
pub fn rt60_to_reflection(room_dims: Point3, rt60: f64, speed_of_sound: f64) -> Result<f64> {
    if room_dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InvalidInput(format!("room dimensions {room_dims:?} must be positive")));
    }
    if !(rt60.is_finite() && rt60 >= 0.0) {
        return Err(Error::InvalidInput(format!("rt60 {rt60} must be >= 0")));
    }
    if rt60 == 0.0 {
        return Ok(0.0);
    }
    let log_beta = -12.0 * 10f64.ln() * volume(room_dims) / (speed_of_sound * surface(room_dims) * rt60);
    let beta = log_beta.exp();
    if beta > MAX_REFLECTION {
        return Err(Error::InvalidInput(format!(
            "rt60 {rt60} s is unreachable in a {room_dims:?} room (reflection {beta:.6} > {MAX_REFLECTION})"
        )));
    }
    Ok(beta)
}

/// Parameters for one image-method impulse response.
#[derive(Debug, Clone, Copy)]
pub struct RirParams {
    pub room_dims: Point3,
    pub reflection: f64,
    pub sample_rate_hz: u32,
    pub speed_of_sound: f64,
    pub len_samples: usize,
    pub delay: DelayMode,
}

/// How a scenario turns its RT60 into a wall reflection coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rt60Mapping {
    /// Closed-form Eyring, see [`rt60_to_reflection`]. In rooms that are far
    /// from cubic the image-method tail decays slower than this predicts.
    Eyring,
    /// See [`fitted_reflection`].
    #[default]
    Fitted,
}

impl Rt60Mapping {
    pub fn reflection(self, room_dims: Point3, rt60: f64, speed_of_sound: f64) -> Result<f64> {
        match self {
            Rt60Mapping::Eyring => rt60_to_reflection(room_dims, rt60, speed_of_sound),
            Rt60Mapping::Fitted => fitted_reflection(room_dims, rt60, speed_of_sound),
        }
    }
}

const FIT_BIN_S: f64 = 1e-3;
const FIT_HORIZON: f64 = 1.5;

/// Reflection coefficient whose image-method impulse response has a
/// Schroeder RT60 (−5 to −35 dB fit) equal to `rt60`.
///
/// Image energies `1/r²` between a fixed source and microphone pair are
/// binned by arrival time and reflection count once, then `β` is found by
/// bisection on the decay of `Σ β^{2n} E[n][t]`. Targets shorter than the
/// room can produce even with `β → 0` give the closest reachable decay.
pub fn fitted_reflection(room_dims: Point3, rt60: f64, speed_of_sound: f64) -> Result<f64> {
    let eyring = rt60_to_reflection(room_dims, rt60, speed_of_sound)?;
    if rt60 == 0.0 {
        return Ok(0.0);
    }
    let source = [0.3 * room_dims[0], 0.35 * room_dims[1], 0.4 * room_dims[2]];
    let mic = [0.65 * room_dims[0], 0.6 * room_dims[1], 0.55 * room_dims[2]];
    let bins = (FIT_HORIZON * rt60 / FIT_BIN_S).ceil() as usize + 1;
    let max_dist = bins as f64 * FIT_BIN_S * speed_of_sound;
    // hist[n][bin]
    let mut hist: Vec<Vec<f64>> = Vec::new();
    for_each_image(room_dims, source, mic, max_dist, |d, n| {
        let bin = (d / speed_of_sound / FIT_BIN_S) as usize;
        if bin >= bins {
            return;
        }
        if hist.len() <= n {
            hist.resize_with(n + 1, || vec![0.0; bins]);
        }
        hist[n][bin] += 1.0 / (d * d).max(1e-6);
    });
    let rt_of = |beta: f64| {
        let mut energy = vec![0.0; bins];
        let mut g = 1.0;
        for row in &hist {
            for (e, v) in energy.iter_mut().zip(row) {
                *e += g * v;
            }
            g *= beta * beta;
        }
        schroeder_from_energy(&energy, FIT_BIN_S)
    };
    // the decay time grows with β; a curve that never reaches −35 dB is too long
    let (mut lo, mut hi) = (0.0, MAX_REFLECTION);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match rt_of(mid) {
            Some(t) if t < rt60 => lo = mid,
            Some(_) => hi = mid,
            None if mid < eyring => lo = mid,
            None => hi = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How image arrivals that fall between samples are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    #[default]
    Nearest,
    /// Band-limited impulse, Hann-windowed sinc over ±`FRACTIONAL_HALF_WIDTH`,
    /// for arrivals up to [`FRACTIONAL_EARLY_S`] after the direct path. The
    /// dense tail beyond that is rounded to the nearest sample.
    Fractional,
}

/// Half width in samples of the fractional-delay interpolator.
pub const FRACTIONAL_HALF_WIDTH: usize = 32;
/// Span after the direct path rendered with fractional delays.
pub const FRACTIONAL_EARLY_S: f64 = 0.05;

fn inside(room: Point3, p: Point3) -> bool {
    (0..3).all(|k| p[k] > 0.0 && p[k] < room[k])
}

/// Calls `f(distance, reflections)` for every image of `source` within
/// `max_dist` of `mic`.
fn for_each_image(room: Point3, source: Point3, mic: Point3, max_dist: f64, mut f: impl FnMut(f64, usize)) {
    let reach = |k: usize| (max_dist / (2.0 * room[k])).ceil() as i64 + 1;
    let (nx, ny, nz) = (reach(0), reach(1), reach(2));
    for qx in 0..2i64 {
        for qy in 0..2i64 {
            for qz in 0..2i64 {
                for mx in -nx..=nx {
                    let dx = (1 - 2 * qx) as f64 * source[0] + 2.0 * mx as f64 * room[0] - mic[0];
                    let rx = (mx - qx).abs() + mx.abs();
                    if dx.abs() > max_dist {
                        continue;
                    }
                    for my in -ny..=ny {
                        let dy = (1 - 2 * qy) as f64 * source[1] + 2.0 * my as f64 * room[1] - mic[1];
                        let ry = (my - qy).abs() + my.abs();
                        let dxy2 = dx * dx + dy * dy;
                        if dxy2 > max_dist * max_dist {
                            continue;
                        }
                        for mz in -nz..=nz {
                            let dz = (1 - 2 * qz) as f64 * source[2] + 2.0 * mz as f64 * room[2] - mic[2];
                            let d = (dxy2 + dz * dz).sqrt();
                            if d > max_dist {
                                continue;
                            }
                            let rz = (mz - qz).abs() + mz.abs();
                            f(d, (rx + ry + rz) as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Delay in whole samples for a path of `distance` metres.
pub fn delay_samples(distance: f64, sample_rate_hz: u32, speed_of_sound: f64) -> usize {
    (distance / speed_of_sound * sample_rate_hz as f64).round() as usize
}

/// Impulse response from `source` to `mic`.
pub fn image_method_rir(params: &RirParams, source: Point3, mic: Point3) -> Result<Vec<f64>> {
    image_rir(params, source, mic, false)
}

/// Only the direct-path term of [`image_method_rir`].
pub fn direct_path_rir(params: &RirParams, source: Point3, mic: Point3) -> Result<Vec<f64>> {
    image_rir(params, source, mic, true)
}

fn image_rir(params: &RirParams, source: Point3, mic: Point3, direct_only: bool) -> Result<Vec<f64>> {
    let room = params.room_dims;
    if !inside(room, source) {
        return Err(Error::InvalidInput(format!("source {source:?} is outside the room {room:?}")));
    }
    if !inside(room, mic) {
        return Err(Error::InvalidInput(format!("microphone {mic:?} is outside the room {room:?}")));
    }
    if !(0.0..1.0).contains(&params.reflection) {
        return Err(Error::InvalidInput(format!("reflection {} outside [0, 1)", params.reflection)));
    }
    let fs = params.sample_rate_hz as f64;
    let c = params.speed_of_sound;
    let len = params.len_samples;
    let mut h = vec![0.0; len];

    let early_limit = dist(source, mic) + FRACTIONAL_EARLY_S * c;
    let mut add = |d: f64, gain: f64| {
        let amp = gain / (4.0 * PI * d.max(1e-3));
        let fractional = params.delay == DelayMode::Fractional && d <= early_limit;
        match if fractional { DelayMode::Fractional } else { DelayMode::Nearest } {
            DelayMode::Nearest => {
                let k = delay_samples(d, params.sample_rate_hz, c);
                if k < len {
                    h[k] += amp;
                }
            }
            DelayMode::Fractional => {
                let tau = d / c * fs;
                let hw = FRACTIONAL_HALF_WIDTH as f64;
                let first = (tau - hw).ceil().max(0.0) as usize;
                let last = ((tau + hw).floor() as usize).min(len.saturating_sub(1));
                if first > last {
                    return;
                }
                // sin(π(k − τ)) only alternates in sign from tap to tap
                let mut s = (PI * (first as f64 - tau)).sin();
                for k in first..=last {
                    let x = k as f64 - tau;
                    let window = 0.5 * (1.0 + (PI * x / hw).cos());
                    let sinc = if x == 0.0 { 1.0 } else { s / (PI * x) };
                    h[k] += amp * window * sinc;
                    s = -s;
                }
            }
        }
    };

    if direct_only || params.reflection == 0.0 {
        add(dist(source, mic), 1.0);
        return Ok(h);
    }

    let max_dist = len as f64 / fs * c;
    let ln_beta = params.reflection.ln();
    for_each_image(room, source, mic, max_dist, |d, n| {
        let gain = if n == 0 { 1.0 } else { (n as f64 * ln_beta).exp() };
        add(d, gain);
    });
    let r = (-2.0 * PI * RIR_HIGHPASS_HZ / fs).exp();
    let (mut x1, mut y1) = (0.0, 0.0);
    for v in h.iter_mut() {
        let y = *v - x1 + r * y1;
        x1 = *v;
        y1 = y;
        *v = y;
    }
    Ok(h)
}

/// Schroeder backward-integration RT60 estimate from the decay between
/// −5 dB and −35 dB, extrapolated to 60 dB. `None` if the curve never
/// reaches −35 dB.
pub fn schroeder_rt60(h: &[f64], sample_rate_hz: u32) -> Option<f64> {
    let energy: Vec<f64> = h.iter().map(|v| v * v).collect();
    schroeder_from_energy(&energy, 1.0 / sample_rate_hz as f64)
}

fn schroeder_from_energy(energy: &[f64], dt: f64) -> Option<f64> {
    let mut edc = vec![0.0; energy.len()];
    let mut acc = 0.0;
    for i in (0..energy.len()).rev() {
        acc += energy[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&v| v <= -5.0)?;
    let end = db.iter().position(|&v| v <= -35.0)?;
    if end <= start + 1 {
        return None;
    }
    // least-squares line through the decay segment
    let n = (end - start + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in db.iter().enumerate().take(end + 1).skip(start) {
        let x = i as f64 * dt;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Linear convolution truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    Convolver::new(x, h.len()).apply(h)
}

/// Convolves one signal with many impulse responses of bounded length,
/// reusing the signal's spectrum. Outputs are truncated to the signal length.
pub struct Convolver {
    len: usize,
    spectrum: Vec<Complex64>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Convolver {
    pub fn new(x: &[f64], max_h_len: usize) -> Self {
        let n = (x.len() + max_h_len.max(1) - 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut spectrum: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        spectrum.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut spectrum);
        Convolver {
            len: x.len(),
            spectrum,
            fwd,
            inv,
        }
    }

    fn run(&self, mut b: Vec<Complex64>) -> Vec<Complex64> {
        let n = self.spectrum.len();
        b.resize(n, Complex64::new(0.0, 0.0));
        self.fwd.process(&mut b);
        for (p, q) in b.iter_mut().zip(&self.spectrum) {
            *p *= q;
        }
        self.inv.process(&mut b);
        b.truncate(self.len);
        let scale = 1.0 / n as f64;
        b.iter_mut().for_each(|z| *z *= scale);
        b
    }

    fn check(&self, h: &[f64]) {
        assert!(
            h.len() + self.len - 1 <= self.spectrum.len(),
            "impulse response longer than the convolver was planned for"
        );
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.check(h);
        let b = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(b).iter().map(|z| z.re).collect()
    }

    /// Two real convolutions through one complex transform.
    pub fn apply_pair(&self, h1: &[f64], h2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.check(h1);
        self.check(h2);
        let m = h1.len().max(h2.len());
        let b = (0..m)
            .map(|k| Complex64::new(h1.get(k).copied().unwrap_or(0.0), h2.get(k).copied().unwrap_or(0.0)))
            .collect();
        let y = self.run(b);
        (y.iter().map(|z| z.re).collect(), y.iter().map(|z| z.im).collect())
    }
}

/// A point source in the room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub position: Point3,
    pub signal: SignalSpec,
}

/// One simulated recording situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScenario {
    pub room_dims: Point3,
    /// Seconds; `0` requests an anechoic room.
    pub rt60: f64,
    pub array_center: Point3,
    /// Mic positions relative to `array_center`.
    pub geometry: ArrayGeometry,
    pub target: Source,
    pub interference: Source,
    pub sir_db: f64,
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub delay: DelayMode,
    #[serde(default)]
    pub rt60_mapping: Rt60Mapping,
}

impl RoomScenario {
    pub fn mic_positions(&self) -> Vec<Point3> {
        self.geometry
            .positions()
            .iter()
            .map(|p| [p[0] + self.array_center[0], p[1] + self.array_center[1], p[2] + self.array_center[2]])
            .collect()
    }

    /// Azimuth of `p` around the array centre in the array plane.
    pub fn azimuth_of(&self, p: Point3) -> f64 {
        let dy = p[1] - self.array_center[1];
        let dx = p[0] - self.array_center[0];
        dy.atan2(dx).to_degrees()
    }

    pub fn target_doa(&self) -> Result<Doa> {
        let azimuth = self.azimuth_of(self.target.position);
        Doa::new(azimuth).map_err(|_| Error::InvalidInput(format!("target azimuth {azimuth:.3}° outside [0, 180]")))
    }

    pub fn interference_doa(&self) -> f64 {
        self.azimuth_of(self.interference.position)
    }

    pub fn reflection(&self) -> Result<f64> {
        self.rt60_mapping.reflection(self.room_dims, self.rt60, self.geometry.speed_of_sound())
    }

    /// Physical consistency: positions inside the room, sane parameters.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("scenario: {m}")));
        if self.room_dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad(format!("room dimensions {:?} must be positive", self.room_dims));
        }
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if !self.sir_db.is_finite() {
            return bad(format!("sir {} must be finite", self.sir_db));
        }
        self.reflection()?;
        for (i, p) in self.mic_positions().into_iter().enumerate() {
            if !inside(self.room_dims, p) {
                return bad(format!("microphone {i} at {p:?} outside the room"));
            }
        }
        for (name, src) in [("target", &self.target), ("interference", &self.interference)] {
            if !inside(self.room_dims, src.position) {
                return bad(format!("{name} at {:?} outside the room", src.position));
            }
        }
        self.target_doa()?;
        Ok(())
    }

    fn rir_params(&self, sources: &[Point3]) -> Result<RirParams> {
        let c = self.geometry.speed_of_sound();
        let fs = self.sample_rate_hz;
        let farthest = self
            .mic_positions()
            .iter()
            .flat_map(|m| sources.iter().map(move |s| dist(*s, *m)))
            .fold(0.0, f64::max);
        let direct = delay_samples(farthest, fs, c);
        let tail = (self.rt60 * fs as f64).ceil() as usize;
        let cap = (MAX_RIR_SECONDS * fs as f64) as usize;
        Ok(RirParams {
            room_dims: self.room_dims,
            reflection: self.reflection()?,
            sample_rate_hz: fs,
            speed_of_sound: c,
            len_samples: (direct + tail + 64 + FRACTIONAL_HALF_WIDTH).min(cap).max(direct + 1),
            delay: self.delay,
        })
    }
}

/// Simulated microphone signals and their components, all `[mic][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Vec<Vec<f64>>,
    /// Target convolved with the direct path only.
    pub target_direct: Vec<Vec<f64>>,
    /// Target convolved with the full RIR.
    pub target_reverb: Vec<Vec<f64>>,
    /// Interference convolved with its RIR, after SIR scaling.
    pub interference: Vec<Vec<f64>>,
    /// Gain applied to the reverberant interference to reach the SIR.
    pub interference_gain: f64,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Resolves both dry signals and simulates the mixture.
pub fn simulate_mixture(scenario: &RoomScenario) -> Result<Mixture> {
    let fs = scenario.sample_rate_hz;
    let target = scenario.target.signal.render(fs)?;
    let interference = scenario.interference.signal.render(fs)?;
    simulate_mixture_with(scenario, &target, &interference)
}

/// Simulates the mixture for explicit dry signals. The output length is the
/// target length; the interferer is looped or cut to match.
///
/// Every component is scaled by one common factor so the mixture peaks at
/// 0.9, which keeps `mixture == target_reverb + interference` exact.
pub fn simulate_mixture_with(scenario: &RoomScenario, target_dry: &[f64], interference_dry: &[f64]) -> Result<Mixture> {
    scenario.validate()?;
    if power(target_dry) == 0.0 {
        return Err(Error::InvalidInput("target signal is silent".into()));
    }
    if power(interference_dry) == 0.0 {
        return Err(Error::InvalidInput("interference signal is silent".into()));
    }
    let len = target_dry.len();
    let interference_dry: Vec<f64> = interference_dry.iter().copied().cycle().take(len).collect();

    let mics = scenario.mic_positions();
    let params = scenario.rir_params(&[scenario.target.position, scenario.interference.position])?;
    let target_conv = Convolver::new(target_dry, params.len_samples);
    let interference_conv = Convolver::new(&interference_dry, params.len_samples);
    let per_mic: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = mics
        .par_iter()
        .map(|&mic| {
            let rt = image_method_rir(&params, scenario.target.position, mic)?;
            let rd = direct_path_rir(&params, scenario.target.position, mic)?;
            let ri = image_method_rir(&params, scenario.interference.position, mic)?;
            let (reverb, direct) = target_conv.apply_pair(&rt, &rd);
            Ok((reverb, direct, interference_conv.apply(&ri)))
        })
        .collect::<Result<_>>()?;

    let mut target_reverb = Vec::with_capacity(mics.len());
    let mut target_direct = Vec::with_capacity(mics.len());
    let mut interference = Vec::with_capacity(mics.len());
    for (r, d, i) in per_mic {
        target_reverb.push(r);
        target_direct.push(d);
        interference.push(i);
    }

    let pt = power(&target_reverb[0]);
    let pi = power(&interference[0]);
    if pt == 0.0 || pi == 0.0 {
        return Err(Error::Numerical("a source is silent at the reference microphone".into()));
    }
    let gain = if scenario.sir_db >= SIR_CAP_DB {
        0.0
    } else {
        (pt / (pi * 10f64.powf(scenario.sir_db / 10.0))).sqrt()
    };
    for ch in &mut interference {
        ch.iter_mut().for_each(|v| *v *= gain);
    }
    let mut mixture: Vec<Vec<f64>> = target_reverb
        .iter()
        .zip(&interference)
        .map(|(t, i)| t.iter().zip(i).map(|(a, b)| a + b).collect())
        .collect();

    let peak = mixture.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    for set in [&mut mixture, &mut target_direct, &mut target_reverb, &mut interference] {
        set.iter_mut().flatten().for_each(|v| *v *= norm);
    }
    Ok(Mixture {
        mixture,
        target_direct,
        target_reverb,
        interference,
        interference_gain: gain * norm,
    })
}

/// Measured SIR at `mic` in dB.
pub fn measured_sir_db(m: &Mixture, mic: usize) -> f64 {
    10.0 * (power(&m.target_reverb[mic]) / power(&m.interference[mic])).log10()
}
