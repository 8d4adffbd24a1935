//! Fixed super-directive beamformer bank.
//!
//! Each beam is the super-directive design against an isotropic diffuse
//! noise field, with diagonal loading `ε` added to the coherence matrix:
//!
//! ```text
//! w(f) = (Γ(f) + εI)⁻¹ v(θ, f) / (v(θ, f)ᴴ (Γ(f) + εI)⁻¹ v(θ, f))
//! Γ_ij(f) = sinc(2π f_s f l_ij / (N c))
//! B_d(t, f) = w_d(f)ᴴ Y(t, f)
//! ```
//!
//! Look angles are spread uniformly over [0°, 180°] inclusive of both ends.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::array::{steering_vector, ArrayGeometry, Doa};
use crate::error::{Error, Result};
use crate::stft::{MultichannelSpectrogram, Spectrogram, StftConfig};
use crate::tensor::Tensor;

/// Diagonal loading level used unless configured otherwise.
pub const DEFAULT_DIAG_LOADING: f64 = 1e-5;

pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Diffuse-field coherence matrix at one bin: real, symmetric, unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffuseCoherence {
    size: usize,
    entries: Vec<f64>,
}

impl DiffuseCoherence {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    fn to_matrix(&self, loading: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| {
            self.get(i, j) + if i == j { loading } else { 0.0 }
        })
    }

    /// `xᴴ Γ x`.
    pub fn quadratic_form(&self, x: &[Complex64]) -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..self.size {
            for j in 0..self.size {
                acc += x[i].conj() * self.get(i, j) * x[j];
            }
        }
        acc.re
    }
}

pub fn diffuse_coherence(geom: &ArrayGeometry, bin: usize, cfg: &StftConfig) -> Result<DiffuseCoherence> {
    check_bin(bin, cfg)?;
    let m = geom.num_mics();
    let k = 2.0 * std::f64::consts::PI * cfg.sample_rate_hz as f64 * bin as f64
        / (cfg.fft_size as f64 * geom.speed_of_sound());
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        entries[i * m + i] = 1.0;
        for j in i + 1..m {
            let c = sinc(k * geom.distance(i, j));
            entries[i * m + j] = c;
            entries[j * m + i] = c;
        }
    }
    Ok(DiffuseCoherence { size: m, entries })
}

fn check_bin(bin: usize, cfg: &StftConfig) -> Result<()> {
    if bin >= cfg.num_bins() {
        return Err(Error::InvalidInput(format!(
            "bin {bin} out of range (F = {})",
            cfg.num_bins()
        )));
    }
    Ok(())
}

/// Solves `A x = b` for real symmetric `A` and complex `b`.
///
/// Cholesky first; matrices that are positive definite in exact arithmetic
/// but lose definiteness in floating point fall back to full-pivot LU.
fn solve_symmetric(a: DMatrix<f64>, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = b.len();
    let rhs = DMatrix::from_fn(n, 2, |i, c| if c == 0 { b[i].re } else { b[i].im });
    let x = match a.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => a
            .full_piv_lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("coherence matrix is singular".into()))?,
    };
    let out: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[(i, 0)], x[(i, 1)])).collect();
    if out.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite solution of coherence system".into()));
    }
    Ok(out)
}

/// `wᴴ v`, accumulated with error-free transformations so the result is
/// accurate even when large weights cancel (low-frequency super-directive
/// designs reach `‖w‖₁ ~ 1e7`).
pub fn inner(w: &[Complex64], v: &[Complex64]) -> Complex64 {
    let mut re = CompensatedSum::default();
    let mut im = CompensatedSum::default();
    for (a, b) in w.iter().zip(v) {
        re.add_product(a.re, b.re);
        re.add_product(a.im, b.im);
        im.add_product(a.re, b.im);
        im.add_product(-a.im, b.re);
    }
    Complex64::new(re.value(), im.value())
}

/// Ogita–Rump–Oishi style dot-product accumulator.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    err: f64,
}

impl CompensatedSum {
    fn add_product(&mut self, x: f64, y: f64) {
        let p = x * y;
        let p_err = x.mul_add(y, -p);
        let s = self.sum + p;
        let z = s - self.sum;
        let s_err = (self.sum - (s - z)) + (p - z);
        self.sum = s;
        self.err += s_err + p_err;
    }

    fn value(&self) -> f64 {
        self.sum + self.err
    }
}

/// Super-directive weights for one look direction and bin.
pub fn sd_weights(geom: &ArrayGeometry, look: Doa, bin: usize, loading: f64, cfg: &StftConfig) -> Result<Vec<Complex64>> {
    if !(loading.is_finite() && loading >= 0.0) {
        return Err(Error::InvalidInput(format!("diagonal loading {loading} must be >= 0")));
    }
    let gamma = diffuse_coherence(geom, bin, cfg)?;
    if loading == 0.0 && bin == 0 && geom.num_mics() > 1 {
        return Err(Error::Numerical(
            "unloaded coherence matrix is singular at DC; use a positive diagonal loading".into(),
        ));
    }
    let v = steering_vector(geom, look, bin, cfg)?;
    let u = solve_symmetric(gamma.to_matrix(loading), &v)?;
    let denom = inner(&v, &u);
    if denom.norm() == 0.0 || !denom.is_finite() {
        return Err(Error::Numerical(format!("degenerate normalisation at bin {bin}")));
    }
    let mut w: Vec<Complex64> = u.into_iter().map(|x| x / denom).collect();
    enforce_unit_response(&mut w, &v);
    Ok(w)
}

/// Absorbs the rounding residual of `wᴴv = 1` into the smallest weight,
/// whose own rounding error is the least.
fn enforce_unit_response(w: &mut [Complex64], v: &[Complex64]) {
    let Some(k) = (0..w.len())
        .filter(|&m| v[m].norm() > 0.0)
        .min_by(|&a, &b| w[a].norm().total_cmp(&w[b].norm()))
    else {
        return;
    };
    for _ in 0..2 {
        let residual = Complex64::new(1.0, 0.0) - inner(w, v);
        w[k] += (residual / v[k]).conj();
    }
}

/// `D` look angles spaced uniformly over [0°, 180°], both ends included.
pub fn look_angles(num_beams: usize) -> Result<Vec<Doa>> {
    if num_beams < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 beams, got {num_beams}")));
    }
    (0..num_beams)
        .map(|d| Doa::new(d as f64 * 180.0 / (num_beams - 1) as f64))
        .collect()
}

/// Weights `[beam][bin][mic]` of a fixed beamformer bank with its design context.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedBeamformerBank {
    geometry: ArrayGeometry,
    config: StftConfig,
    look_angles: Vec<Doa>,
    diag_loading: f64,
    weights: Tensor,
}

impl FixedBeamformerBank {
    /// Reattaches design metadata to a weight tensor loaded from disk.
    pub fn from_tensor(
        geometry: ArrayGeometry,
        config: StftConfig,
        look_angles: Vec<Doa>,
        diag_loading: f64,
        weights: Tensor,
    ) -> Result<Self> {
        if look_angles.is_empty() {
            return Err(Error::InvalidInput("bank needs at least one beam".into()));
        }
        weights.expect_dims(
            "bank weights [D][F][M]",
            &[look_angles.len(), config.num_bins(), geometry.num_mics()],
        )?;
        if weights.data().iter().any(|z| !z.is_finite()) {
            return Err(Error::Numerical("bank weights are not finite".into()));
        }
        Ok(FixedBeamformerBank {
            geometry,
            config,
            look_angles,
            diag_loading,
            weights,
        })
    }

    pub fn num_beams(&self) -> usize {
        self.look_angles.len()
    }

    pub fn num_bins(&self) -> usize {
        self.config.num_bins()
    }

    pub fn num_mics(&self) -> usize {
        self.geometry.num_mics()
    }

    pub fn look_angles(&self) -> &[Doa] {
        &self.look_angles
    }

    pub fn diag_loading(&self) -> f64 {
        self.diag_loading
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    /// Weight vector `w_d(f)`.
    pub fn weights(&self, beam: usize, bin: usize) -> &[Complex64] {
        let m = self.num_mics();
        let start = (beam * self.num_bins() + bin) * m;
        &self.weights.data()[start..start + m]
    }

    fn check(&self, beam: usize, bin: usize) -> Result<()> {
        if beam >= self.num_beams() {
            return Err(Error::InvalidInput(format!("beam {beam} out of range (D = {})", self.num_beams())));
        }
        check_bin(bin, &self.config)
    }

    /// `|w_d(f)ᴴ v(θ, f)|²` for each angle.
    pub fn beam_pattern(&self, beam: usize, bin: usize, angles: &[Doa]) -> Result<Vec<f64>> {
        self.check(beam, bin)?;
        let w = self.weights(beam, bin);
        angles
            .iter()
            .map(|&a| Ok(inner(w, &steering_vector(&self.geometry, a, bin, &self.config)?).norm_sqr()))
            .collect()
    }

    /// `|wᴴv|² / (wᴴw)` toward the beam's own look direction.
    pub fn white_noise_gain(&self, beam: usize, bin: usize) -> Result<f64> {
        self.check(beam, bin)?;
        let w = self.weights(beam, bin);
        let v = steering_vector(&self.geometry, self.look_angles[beam], bin, &self.config)?;
        let wtw: f64 = w.iter().map(Complex64::norm_sqr).sum();
        Ok(inner(w, &v).norm_sqr() / wtw)
    }

    /// `10 log10(|wᴴv|² / (wᴴ Γ w))` in dB, against the unloaded diffuse field.
    pub fn directivity_index(&self, beam: usize, bin: usize) -> Result<f64> {
        self.check(beam, bin)?;
        let w = self.weights(beam, bin);
        let v = steering_vector(&self.geometry, self.look_angles[beam], bin, &self.config)?;
        let gamma = diffuse_coherence(&self.geometry, bin, &self.config)?;
        Ok(10.0 * (inner(w, &v).norm_sqr() / gamma.quadratic_form(w)).log10())
    }
}

/// Designs `D` super-directive beams on a uniform grid of look angles.
pub fn design_bank(geom: &ArrayGeometry, num_beams: usize, loading: f64, cfg: &StftConfig) -> Result<FixedBeamformerBank> {
    cfg.validate()?;
    design_bank_with_angles(geom, look_angles(num_beams)?, loading, cfg)
}

pub fn design_bank_with_angles(
    geom: &ArrayGeometry,
    angles: Vec<Doa>,
    loading: f64,
    cfg: &StftConfig,
) -> Result<FixedBeamformerBank> {
    let bins = cfg.num_bins();
    let rows: Vec<Vec<Complex64>> = (0..angles.len() * bins)
        .into_par_iter()
        .map(|i| sd_weights(geom, angles[i / bins], i % bins, loading, cfg))
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    let weights = Tensor::from_vec(&[angles.len(), bins, geom.num_mics()], data)?;
    FixedBeamformerBank::from_tensor(geom.clone(), *cfg, angles, loading, weights)
}

/// `D` beam spectrograms `[beam][frame][bin]` and their look angles.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamSet {
    look_angles: Vec<Doa>,
    beams: Vec<Spectrogram>,
}

impl BeamSet {
    pub fn new(look_angles: Vec<Doa>, beams: Vec<Spectrogram>) -> Result<Self> {
        if beams.is_empty() || beams.len() != look_angles.len() {
            return Err(Error::dims("beam count", look_angles.len(), beams.len()));
        }
        let shape = beams[0].shape();
        for b in &beams {
            b.expect_shape("beam", shape)?;
        }
        Ok(BeamSet { look_angles, beams })
    }

    pub fn num_beams(&self) -> usize {
        self.beams.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.beams[0].shape()
    }

    pub fn look_angles(&self) -> &[Doa] {
        &self.look_angles
    }

    pub fn beam(&self, d: usize) -> &Spectrogram {
        &self.beams[d]
    }

    pub fn beams(&self) -> &[Spectrogram] {
        &self.beams
    }

    /// The `D` beam values at one T-F bin.
    pub fn bin_vector(&self, t: usize, f: usize) -> Vec<Complex64> {
        self.beams.iter().map(|b| b.get(t, f)).collect()
    }

    /// `[D][T][F]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (t, f) = self.shape();
        let data = self.beams.iter().flat_map(|b| b.data().iter().copied()).collect();
        Tensor::from_vec(&[self.num_beams(), t, f], data).expect("consistent beam shapes")
    }

    pub fn from_tensor(look_angles: Vec<Doa>, tensor: &Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims[0] != look_angles.len() {
            return Err(Error::dims("beam tensor [D][T][F]", ("D", look_angles.len()), dims));
        }
        let plane = dims[1] * dims[2];
        let beams = tensor
            .data()
            .chunks_exact(plane.max(1))
            .take(dims[0])
            .map(|c| Spectrogram::from_vec(dims[1], dims[2], c.to_vec()))
            .collect::<Result<_>>()?;
        BeamSet::new(look_angles, beams)
    }

    /// Keeps only frames `0..frames`.
    pub fn truncated(&self, frames: usize) -> BeamSet {
        let bins = self.shape().1;
        BeamSet {
            look_angles: self.look_angles.clone(),
            beams: self
                .beams
                .iter()
                .map(|b| Spectrogram::from_vec(frames, bins, b.data()[..frames * bins].to_vec()).unwrap())
                .collect(),
        }
    }
}

/// Filters a multichannel spectrogram through every beam of the bank.
///
/// Frame-local: output frame `t` reads only input frame `t`.
pub fn apply_bank(bank: &FixedBeamformerBank, spec: &MultichannelSpectrogram) -> Result<BeamSet> {
    if spec.num_channels() != bank.num_mics() {
        return Err(Error::dims("microphone count", bank.num_mics(), spec.num_channels()));
    }
    if spec.num_bins() != bank.num_bins() {
        return Err(Error::dims("bin count", bank.num_bins(), spec.num_bins()));
    }
    let (frames, bins) = (spec.num_frames(), spec.num_bins());
    let beams = (0..bank.num_beams())
        .into_par_iter()
        .map(|d| {
            let mut out = Spectrogram::zeros(frames, bins);
            for f in 0..bins {
                let w = bank.weights(d, f);
                for t in 0..frames {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (m, wm) in w.iter().enumerate() {
                        acc += wm.conj() * spec.channel(m).get(t, f);
                    }
                    out.set(t, f, acc);
                }
            }
            out
        })
        .collect();
    BeamSet::new(bank.look_angles().to_vec(), beams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::analyze;

    fn ula9() -> ArrayGeometry {
        ArrayGeometry::ula(9, 0.04).unwrap()
    }

    #[test]
    fn coherence_golden_value_at_8khz() {
        let g = ArrayGeometry::ula(2, 0.04).unwrap();
        let cfg = StftConfig::default();
        let gamma = diffuse_coherence(&g, 256, &cfg).unwrap();
        let arg = 2.0 * std::f64::consts::PI * 8000.0 * 0.04 / 343.0;
        assert!((arg - 5.8619).abs() < 1e-4);
        assert!((gamma.get(0, 1) - (-0.0697)).abs() < 1e-4, "{}", gamma.get(0, 1));
        assert_eq!(gamma.get(0, 0), 1.0);
        assert_eq!(gamma.get(1, 1), 1.0);
        assert_eq!(gamma.get(0, 1), gamma.get(1, 0));
    }

    #[test]
    fn coherence_at_dc_is_all_ones() {
        let gamma = diffuse_coherence(&ula9(), 0, &StftConfig::default()).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(gamma.get(i, j), 1.0);
            }
        }
        assert!(diffuse_coherence(&ula9(), 257, &StftConfig::default()).is_err());
    }

    #[test]
    fn single_mic_weight_is_one() {
        let g = ArrayGeometry::ula(1, 0.04).unwrap();
        for bin in [0, 17, 256] {
            let w = sd_weights(&g, Doa::new(40.0).unwrap(), bin, 1e-5, &StftConfig::default()).unwrap();
            assert_eq!(w.len(), 1);
            assert!((w[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn dc_weights_are_delay_and_sum() {
        let cfg = StftConfig::default();
        for eps in [1e-5, 0.3] {
            let w = sd_weights(&ula9(), Doa::new(70.0).unwrap(), 0, eps, &cfg).unwrap();
            for x in w {
                assert!((x - Complex64::new(1.0 / 9.0, 0.0)).norm() < 1e-9);
            }
        }
        assert!(matches!(
            sd_weights(&ula9(), Doa::new(70.0).unwrap(), 0, 0.0, &cfg),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn heavy_loading_tends_to_delay_and_sum() {
        let cfg = StftConfig::default();
        let look = Doa::new(30.0).unwrap();
        for bin in [5, 64, 200] {
            let w = sd_weights(&ula9(), look, bin, 1e6, &cfg).unwrap();
            let v = steering_vector(&ula9(), look, bin, &cfg).unwrap();
            for (a, b) in w.iter().zip(&v) {
                assert!((a - b / 9.0).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn negative_loading_rejected() {
        assert!(sd_weights(&ula9(), Doa::new(0.0).unwrap(), 3, -1.0, &StftConfig::default()).is_err());
    }

    #[test]
    fn look_angle_grids() {
        let spacing = |d: usize| {
            let a = look_angles(d).unwrap();
            a[1].degrees() - a[0].degrees()
        };
        assert_eq!(spacing(19), 10.0);
        assert_eq!(spacing(10), 20.0);
        assert_eq!(spacing(37), 5.0);
        let a = look_angles(19).unwrap();
        assert_eq!(a[0].degrees(), 0.0);
        assert_eq!(a[18].degrees(), 180.0);
        assert!(look_angles(1).is_err());
    }

    #[test]
    fn delay_and_sum_wng_and_single_mic_metrics() {
        let cfg = StftConfig::default();
        let g = ula9();
        let look = Doa::new(60.0).unwrap();
        let data = (0..cfg.num_bins())
            .flat_map(|f| {
                steering_vector(&g, look, f, &cfg)
                    .unwrap()
                    .into_iter()
                    .map(|v| v / 9.0)
            })
            .collect();
        let das = FixedBeamformerBank::from_tensor(
            g,
            cfg,
            vec![look],
            0.0,
            Tensor::from_vec(&[1, cfg.num_bins(), 9], data).unwrap(),
        )
        .unwrap();
        for f in [1, 50, 256] {
            assert!((das.white_noise_gain(0, f).unwrap() - 9.0).abs() < 1e-9);
        }

        let one = design_bank(&ArrayGeometry::ula(1, 0.04).unwrap(), 5, 1e-5, &cfg).unwrap();
        for f in [0, 100, 256] {
            assert!((one.white_noise_gain(2, f).unwrap() - 1.0).abs() < 1e-12);
            assert!(one.directivity_index(2, f).unwrap().abs() < 1e-9);
            let pattern = one.beam_pattern(2, f, &look_angles(13).unwrap()).unwrap();
            assert!(pattern.iter().all(|g| (g - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn single_mic_bank_passes_input_through() {
        let cfg = StftConfig::default();
        let bank = design_bank(&ArrayGeometry::ula(1, 0.04).unwrap(), 4, 1e-5, &cfg).unwrap();
        let x: Vec<f64> = (0..2000).map(|n| (n as f64 * 0.01).sin()).collect();
        let spec = analyze(&[x], &cfg).unwrap();
        let beams = apply_bank(&bank, &spec).unwrap();
        for d in 0..4 {
            for (a, b) in beams.beam(d).data().iter().zip(spec.channel(0).data()) {
                assert!((a - b).norm() < 1e-12 * (1.0 + b.norm()));
            }
        }
    }

    #[test]
    fn apply_bank_dimension_checks() {
        let cfg = StftConfig::default();
        let bank = design_bank(&ArrayGeometry::ula(3, 0.04).unwrap(), 2, 1e-5, &cfg).unwrap();
        let spec = analyze(&[vec![0.1; 600], vec![0.1; 600]], &cfg).unwrap();
        assert!(apply_bank(&bank, &spec).is_err());
    }

    #[test]
    fn broadside_beam_peaks_at_look_angle_4khz() {
        let cfg = StftConfig::default();
        let bank = design_bank(&ula9(), 19, DEFAULT_DIAG_LOADING, &cfg).unwrap();
        let grid: Vec<Doa> = (0..=180).map(|a| Doa::new(a as f64).unwrap()).collect();
        let bin = 128;
        assert_eq!(cfg.bin_hz(bin), 4000.0);
        let pattern = bank.beam_pattern(9, bin, &grid).unwrap();
        assert!((pattern[90] - 1.0).abs() < 1e-9);
        for (a, g) in pattern.iter().enumerate() {
            assert!(*g <= pattern[90] + 1e-12, "angle {a}: {g}");
        }
    }

    #[test]
    fn beam_tensor_round_trip() {
        let cfg = StftConfig::default();
        let bank = design_bank(&ArrayGeometry::ula(3, 0.04).unwrap(), 3, 1e-5, &cfg).unwrap();
        let x: Vec<Vec<f64>> = (0..3).map(|m| (0..900).map(|n| ((n * (m + 1)) as f64).cos()).collect()).collect();
        let beams = apply_bank(&bank, &analyze(&x, &cfg).unwrap()).unwrap();
        let back = BeamSet::from_tensor(beams.look_angles().to_vec(), &beams.to_tensor()).unwrap();
        assert_eq!(back, beams);
        assert!(BeamSet::from_tensor(look_angles(4).unwrap(), &beams.to_tensor()).is_err());
    }
}
