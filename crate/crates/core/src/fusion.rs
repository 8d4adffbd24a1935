//! Beam filtering, fusion and residual refinement.
//!
//! A [`WeightProvider`] maps the beam set and the reference-mic spectrogram
//! to per-bin complex beam weights `G_d(t, f)` and a complex residual
//! `R(t, f)`. The enhanced spectrum is
//!
//! ```text
//! X̂(t, f) = Σ_d G_d(t, f) · B_d(t, f) + R(t, f)
//! ```
//!
//! The analytic providers here stand in for a learned estimator: they read
//! ground-truth scene information from an [`OracleContext`].

use num_complex::Complex64;

use crate::array::Doa;
use crate::beamformer::{apply_bank, BeamSet, FixedBeamformerBank};
use crate::error::{Error, Result};
use crate::stft::{MultichannelSpectrogram, Spectrogram, Stft};
use crate::tensor::Tensor;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Default minimum-norm regulariser, relative to the frame's mean beam power.
pub const DEFAULT_DELTA: f64 = 1e-8;

/// Complex filter coefficients `[beam][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    beams: Vec<Spectrogram>,
}

impl BeamWeights {
    pub fn new(beams: Vec<Spectrogram>) -> Result<Self> {
        let first = beams
            .first()
            .ok_or_else(|| Error::InvalidInput("beam weights need at least one beam".into()))?;
        let shape = first.shape();
        for b in &beams {
            b.expect_shape("beam weights", shape)?;
        }
        if beams.iter().flat_map(|b| b.data()).any(|z| !z.is_finite()) {
            return Err(Error::Numerical("beam weights are not finite".into()));
        }
        Ok(BeamWeights { beams })
    }

    pub fn zeros(num_beams: usize, frames: usize, bins: usize) -> Self {
        BeamWeights {
            beams: vec![Spectrogram::zeros(frames, bins); num_beams],
        }
    }

    pub fn num_beams(&self) -> usize {
        self.beams.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.beams[0].shape()
    }

    pub fn beam(&self, d: usize) -> &Spectrogram {
        &self.beams[d]
    }

    pub fn beam_mut(&mut self, d: usize) -> &mut Spectrogram {
        &mut self.beams[d]
    }

    pub fn to_tensor(&self) -> Tensor {
        let (t, f) = self.shape();
        let data = self.beams.iter().flat_map(|b| b.data().iter().copied()).collect();
        Tensor::from_vec(&[self.num_beams(), t, f], data).expect("consistent weight shapes")
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims[0] == 0 {
            return Err(Error::dims("weight tensor [D][T][F]", "rank 3, D >= 1", dims));
        }
        let plane = dims[1] * dims[2];
        let beams = (0..dims[0])
            .map(|d| Spectrogram::from_vec(dims[1], dims[2], tensor.data()[d * plane..(d + 1) * plane].to_vec()))
            .collect::<Result<_>>()?;
        BeamWeights::new(beams)
    }
}

/// Complex residual `[frame][bin]` added after fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual(pub Spectrogram);

impl Residual {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Residual(Spectrogram::zeros(frames, bins))
    }

    pub fn spectrogram(&self) -> &Spectrogram {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        spectrogram_to_tensor(&self.0)
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        spectrogram_from_tensor(tensor).map(Residual)
    }
}

/// `[T][F]` tensor view of a single-channel spectrogram.
pub fn spectrogram_to_tensor(spec: &Spectrogram) -> Tensor {
    let (t, f) = spec.shape();
    Tensor::from_vec(&[t, f], spec.data().to_vec()).expect("shape matches data")
}

pub fn spectrogram_from_tensor(tensor: &Tensor) -> Result<Spectrogram> {
    let dims = tensor.dims();
    if dims.len() != 2 {
        return Err(Error::dims("spectrogram tensor [T][F]", "rank 2", dims));
    }
    Spectrogram::from_vec(dims[0], dims[1], tensor.data().to_vec())
}

/// Produces beam weights and a residual from the beams and the reference
/// microphone spectrogram.
///
/// A provider that reports [`is_causal`](WeightProvider::is_causal) promises
/// that outputs at frame `t` depend only on inputs at frames `<= t`;
/// [`audit_causality`] checks the promise empirically.
pub trait WeightProvider: Send + Sync {
    fn name(&self) -> &str;

    fn is_causal(&self) -> bool;

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)>;
}

impl<P: WeightProvider + ?Sized> WeightProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn is_causal(&self) -> bool {
        (**self).is_causal()
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        (**self).produce(beams, reference)
    }
}

fn check_inputs(beams: &BeamSet, reference: &Spectrogram) -> Result<()> {
    reference.expect_shape("reference spectrogram", beams.shape())
}

/// `Σ_d G_d(t, f) · B_d(t, f)`.
pub fn fuse(beams: &BeamSet, g: &BeamWeights) -> Result<Spectrogram> {
    if g.num_beams() != beams.num_beams() {
        return Err(Error::dims("beam count", beams.num_beams(), g.num_beams()));
    }
    if g.shape() != beams.shape() {
        return Err(Error::dims("beam weight shape", beams.shape(), g.shape()));
    }
    let (frames, bins) = beams.shape();
    let mut out = Spectrogram::zeros(frames, bins);
    for d in 0..beams.num_beams() {
        for ((o, &b), &w) in out.data_mut().iter_mut().zip(beams.beam(d).data()).zip(g.beam(d).data()) {
            *o += w * b;
        }
    }
    Ok(out)
}

/// `fused + R`.
pub fn refine(fused: &Spectrogram, r: &Residual) -> Result<Spectrogram> {
    fused.map_with(&r.0, |a, b| a + b)
}

/// Desk-scale stand-in for learned estimators: the clean target and its
/// direction are known.
#[derive(Debug, Clone)]
pub struct OracleContext {
    clean: Spectrogram,
    target_doa: Doa,
    delta: f64,
}

impl OracleContext {
    pub fn new(clean: Spectrogram, target_doa: Doa, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidInput(format!("regulariser {delta} must be > 0")));
        }
        Ok(OracleContext {
            clean,
            target_doa,
            delta,
        })
    }

    pub fn clean(&self) -> &Spectrogram {
        &self.clean
    }

    pub fn target_doa(&self) -> Doa {
        self.target_doa
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// All-zero weights and residual.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroProvider;

impl WeightProvider for ZeroProvider {
    fn name(&self) -> &str {
        "zero"
    }

    fn is_causal(&self) -> bool {
        true
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        check_inputs(beams, reference)?;
        let (t, f) = beams.shape();
        Ok((BeamWeights::zeros(beams.num_beams(), t, f), Residual::zeros(t, f)))
    }
}

/// Zero weights and `R = Y_0`: the output is the unprocessed reference mic.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassthroughProvider;

impl WeightProvider for PassthroughProvider {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn is_causal(&self) -> bool {
        true
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        check_inputs(beams, reference)?;
        let (t, f) = beams.shape();
        Ok((BeamWeights::zeros(beams.num_beams(), t, f), Residual(reference.clone())))
    }
}

/// Index of the look angle nearest `doa`; ties go to the lower index.
pub fn nearest_beam(look_angles: &[Doa], doa: Doa) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (d, a) in look_angles.iter().enumerate() {
        let dist = (a.degrees() - doa.degrees()).abs();
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((d, dist));
        }
    }
    best.map(|(d, _)| d)
}

/// Passes the beam steered closest to the true target direction.
#[derive(Debug, Clone)]
pub struct NearestBeamOracle {
    look_angles: Vec<Doa>,
    selected: usize,
}

impl NearestBeamOracle {
    pub fn new(ctx: &OracleContext, bank: &FixedBeamformerBank) -> Self {
        let look_angles = bank.look_angles().to_vec();
        let selected = nearest_beam(&look_angles, ctx.target_doa()).expect("bank has beams");
        NearestBeamOracle { look_angles, selected }
    }

    pub fn selected_beam(&self) -> usize {
        self.selected
    }
}

impl WeightProvider for NearestBeamOracle {
    fn name(&self) -> &str {
        "nearest_beam"
    }

    fn is_causal(&self) -> bool {
        true
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        check_inputs(beams, reference)?;
        if beams.look_angles() != self.look_angles.as_slice() {
            return Err(Error::dims("beam look angles", self.look_angles.len(), beams.num_beams()));
        }
        let (t, f) = beams.shape();
        let mut g = BeamWeights::zeros(beams.num_beams(), t, f);
        g.beam_mut(self.selected).data_mut().fill(ONE);
        Ok((g, Residual::zeros(t, f)))
    }
}

/// Minimum-norm solution of `Σ_d G_d B_d = X` at one bin with Tikhonov
/// regulariser `delta`: `G = conj(B) X / (‖B‖² + delta)`.
pub fn minnorm_weights(b: &[Complex64], x: Complex64, delta: f64) -> Vec<Complex64> {
    let power: f64 = b.iter().map(Complex64::norm_sqr).sum();
    let denom = power + delta;
    if denom == 0.0 {
        return vec![ZERO; b.len()];
    }
    b.iter().map(|bd| bd.conj() * x / denom).collect()
}

/// Per-bin least-squares fit of the beams to the clean target.
///
/// The regulariser at frame `t` is `delta` times the mean beam power of that
/// frame, so the provider is scale free and frame-local.
#[derive(Debug, Clone)]
pub struct MinNormOracle {
    clean: Spectrogram,
    delta: f64,
}

impl MinNormOracle {
    pub fn new(ctx: &OracleContext) -> Self {
        MinNormOracle {
            clean: ctx.clean().clone(),
            delta: ctx.delta(),
        }
    }
}

impl WeightProvider for MinNormOracle {
    fn name(&self) -> &str {
        "minnorm"
    }

    fn is_causal(&self) -> bool {
        true
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        check_inputs(beams, reference)?;
        self.clean.expect_shape("clean reference", beams.shape())?;
        let (frames, bins) = beams.shape();
        let num_beams = beams.num_beams();
        let mut g = BeamWeights::zeros(num_beams, frames, bins);
        for t in 0..frames {
            let mean_power = (0..num_beams)
                .map(|d| beams.beam(d).frame(t).iter().map(Complex64::norm_sqr).sum::<f64>())
                .sum::<f64>()
                / (num_beams * bins) as f64;
            let delta = (self.delta * mean_power).max(f64::MIN_POSITIVE);
            for f in 0..bins {
                let w = minnorm_weights(&beams.bin_vector(t, f), self.clean.get(t, f), delta);
                for (d, wd) in w.into_iter().enumerate() {
                    g.beam_mut(d).set(t, f, wd);
                }
            }
        }
        Ok((g, Residual::zeros(frames, bins)))
    }
}

/// Wraps a provider and replaces its residual with `X − fuse(B, G)`, so the
/// refined output equals the clean target.
#[derive(Debug, Clone)]
pub struct PerfectResidual<P> {
    inner: P,
    clean: Spectrogram,
    name: String,
}

impl<P: WeightProvider> PerfectResidual<P> {
    pub fn new(inner: P, ctx: &OracleContext) -> Self {
        let name = format!("perfect_residual({})", inner.name());
        PerfectResidual {
            inner,
            clean: ctx.clean().clone(),
            name,
        }
    }
}

impl<P: WeightProvider> WeightProvider for PerfectResidual<P> {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_causal(&self) -> bool {
        self.inner.is_causal()
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        let (g, _) = self.inner.produce(beams, reference)?;
        let fused = fuse(beams, &g)?;
        let residual = self.clean.map_with(&fused, |x, y| x - y)?;
        Ok((g, Residual(residual)))
    }
}

/// Serves weights and residual computed elsewhere (e.g. by a trained network).
#[derive(Debug, Clone)]
pub struct TensorProvider {
    weights: BeamWeights,
    residual: Residual,
    causal: bool,
}

impl TensorProvider {
    pub fn new(weights: BeamWeights, residual: Residual, causal: bool) -> Result<Self> {
        residual.0.expect_shape("residual", weights.shape())?;
        Ok(TensorProvider {
            weights,
            residual,
            causal,
        })
    }

    /// Loads `[D][T][F]` weights and `[T][F]` residual `NBF1` files.
    pub fn load(weights: &std::path::Path, residual: &std::path::Path, causal: bool) -> Result<Self> {
        TensorProvider::new(
            BeamWeights::from_tensor(&Tensor::load(weights)?)?,
            Residual::from_tensor(&Tensor::load(residual)?)?,
            causal,
        )
    }
}

impl WeightProvider for TensorProvider {
    fn name(&self) -> &str {
        "external_tensor"
    }

    fn is_causal(&self) -> bool {
        self.causal
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        check_inputs(beams, reference)?;
        if self.weights.num_beams() != beams.num_beams() || self.weights.shape() != beams.shape() {
            return Err(Error::dims(
                "external weights [D][T][F]",
                (beams.num_beams(), beams.shape()),
                (self.weights.num_beams(), self.weights.shape()),
            ));
        }
        Ok((self.weights.clone(), self.residual.clone()))
    }
}

fn zero_after(spec: &Spectrogram, t0: usize) -> Spectrogram {
    let mut out = spec.clone();
    for t in t0 + 1..out.num_frames() {
        out.frame_mut(t).fill(ZERO);
    }
    out
}

/// Zeroes every input frame after `t0` and returns the largest change of
/// any output at frames `<= t0`, relative to the largest output magnitude.
/// Zero for a causal provider.
pub fn audit_causality(provider: &dyn WeightProvider, beams: &BeamSet, reference: &Spectrogram, t0: usize) -> Result<f64> {
    let (g_full, r_full) = provider.produce(beams, reference)?;
    let truncated = BeamSet::new(
        beams.look_angles().to_vec(),
        beams.beams().iter().map(|b| zero_after(b, t0)).collect(),
    )?;
    let (g_cut, r_cut) = provider.produce(&truncated, &zero_after(reference, t0))?;

    let bins = beams.shape().1;
    let upto = (t0 + 1).min(beams.shape().0) * bins;
    let mut scale = 0.0f64;
    let mut diff = 0.0f64;
    let pairs = (0..g_full.num_beams())
        .map(|d| (g_full.beam(d), g_cut.beam(d)))
        .chain(std::iter::once((&r_full.0, &r_cut.0)));
    for (a, b) in pairs {
        for (x, y) in a.data()[..upto].iter().zip(&b.data()[..upto]) {
            scale = scale.max(x.norm());
            diff = diff.max((x - y).norm());
        }
    }
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub beams: BeamSet,
    pub weights: BeamWeights,
    pub residual: Residual,
    pub fused: Spectrogram,
    pub enhanced: Spectrogram,
    pub waveform: Vec<f64>,
}

/// Fixed beams → provider → fusion → refinement → synthesis.
pub fn run_pipeline(
    spec: &MultichannelSpectrogram,
    bank: &FixedBeamformerBank,
    provider: &dyn WeightProvider,
    reference_channel: usize,
) -> Result<PipelineOutput> {
    if reference_channel >= spec.num_channels() {
        return Err(Error::InvalidInput(format!(
            "reference channel {reference_channel} out of range for {} channels",
            spec.num_channels()
        )));
    }
    if spec.config() != bank.config() {
        return Err(Error::dims("stft config", bank.config(), spec.config()));
    }
    let beams = apply_bank(bank, spec)?;
    let reference = spec.channel(reference_channel);
    let (weights, residual) = provider.produce(&beams, reference)?;
    let fused = fuse(&beams, &weights)?;
    let enhanced = refine(&fused, &residual)?;
    let waveform = Stft::new(*spec.config())?.synthesize_channel(&enhanced, spec.num_samples())?;
    Ok(PipelineOutput {
        beams,
        weights,
        residual,
        fused,
        enhanced,
        waveform,
    })
}
