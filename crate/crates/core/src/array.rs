//! Microphone-array geometry and far-field steering vectors.
//!
//! Angles live in the horizontal (x, y) plane: azimuth 0° points along +x,
//! which for [`ArrayGeometry::ula`] is endfire toward increasing mic index,
//! and 90° is broadside (+y).
//!
//! A plane wave arriving from unit direction `u` reaches mic `m` with delay
//! `tau_m = -(p_m - p_ref) · u / c`, positive for mics farther from the
//! source. The steering vector element is `exp(-j 2π f tau_m)`, matching the
//! `exp(-j ...)` forward DFT convention of [`crate::stft`].

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::StftConfig;

pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Point3 = [f64; 3];

/// Direction of arrival, azimuth in degrees within [0, 180].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Doa(f64);

impl Doa {
    pub fn new(azimuth_deg: f64) -> Result<Self> {
        if !(0.0..=180.0).contains(&azimuth_deg) {
            return Err(Error::InvalidInput(format!(
                "azimuth {azimuth_deg}° outside [0, 180]"
            )));
        }
        Ok(Doa(azimuth_deg))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    /// Unit propagation-source direction in the array plane.
    pub fn unit_vector(self) -> Point3 {
        let r = self.0.to_radians();
        [r.cos(), r.sin(), 0.0]
    }
}

/// Point that steering-vector phases are referenced to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseReference {
    /// Array centroid; broadside steering vectors of a ULA are all ones.
    #[default]
    Centroid,
    /// A particular microphone, whose steering entry is then always 1.
    Mic(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<Point3>,
    speed_of_sound: f64,
    #[serde(default)]
    reference: PhaseReference,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<Point3>, speed_of_sound: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("array needs at least one microphone".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("microphone positions must be finite".into()));
        }
        if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
            return Err(Error::InvalidInput(format!("speed of sound {speed_of_sound} must be positive")));
        }
        Ok(ArrayGeometry {
            positions,
            speed_of_sound,
            reference: PhaseReference::Centroid,
        })
    }

    /// Uniform linear array along x, centred on the origin.
    pub fn ula(num_mics: usize, spacing_m: f64) -> Result<Self> {
        if num_mics == 0 {
            return Err(Error::InvalidInput("array needs at least one microphone".into()));
        }
        if !(spacing_m.is_finite() && spacing_m > 0.0) {
            return Err(Error::InvalidInput(format!("mic spacing {spacing_m} must be positive")));
        }
        let mid = (num_mics as f64 - 1.0) / 2.0;
        let positions = (0..num_mics)
            .map(|m| [(m as f64 - mid) * spacing_m, 0.0, 0.0])
            .collect();
        ArrayGeometry::new(positions, SPEED_OF_SOUND)
    }

    pub fn with_phase_reference(mut self, reference: PhaseReference) -> Result<Self> {
        if let PhaseReference::Mic(m) = reference {
            if m >= self.num_mics() {
                return Err(Error::InvalidInput(format!(
                    "phase reference mic {m} out of range for {} mics",
                    self.num_mics()
                )));
            }
        }
        self.reference = reference;
        Ok(self)
    }

    pub fn phase_reference(&self) -> PhaseReference {
        self.reference
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    fn reference_point(&self) -> Point3 {
        match self.reference {
            PhaseReference::Centroid => self.centroid(),
            PhaseReference::Mic(m) => self.positions[m],
        }
    }

    /// Euclidean distance between mics `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        dist(self.positions[i], self.positions[j])
    }

    /// Largest pairwise distance.
    pub fn aperture(&self) -> f64 {
        let m = self.num_mics();
        (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .map(|(i, j)| self.distance(i, j))
            .fold(0.0, f64::max)
    }

    /// Plane-wave delays in seconds relative to the phase reference point.
    pub fn delays(&self, doa: Doa) -> Vec<f64> {
        let u = doa.unit_vector();
        let r = self.reference_point();
        self.positions
            .iter()
            .map(|p| -((p[0] - r[0]) * u[0] + (p[1] - r[1]) * u[1] + (p[2] - r[2]) * u[2]) / self.speed_of_sound)
            .collect()
    }

    /// Steering vector at physical frequency `freq_hz`.
    pub fn steering_vector_hz(&self, doa: Doa, freq_hz: f64) -> Vec<Complex64> {
        self.delays(doa)
            .into_iter()
            .map(|tau| Complex64::from_polar(1.0, -2.0 * PI * freq_hz * tau))
            .collect()
    }

    /// Rigidly maps every position through `f` (rotation/translation tests).
    pub fn map_positions(&self, f: impl Fn(Point3) -> Point3) -> Result<Self> {
        let moved = ArrayGeometry::new(self.positions.iter().map(|&p| f(p)).collect(), self.speed_of_sound)?;
        moved.with_phase_reference(self.reference)
    }

    /// Reorders microphones so that new mic `k` is old mic `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_mics();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidInput("not a permutation of the microphones".into()));
        }
        let reference = match self.reference {
            PhaseReference::Centroid => PhaseReference::Centroid,
            PhaseReference::Mic(r) => PhaseReference::Mic(perm.iter().position(|&p| p == r).unwrap()),
        };
        ArrayGeometry::new(perm.iter().map(|&p| self.positions[p]).collect(), self.speed_of_sound)?
            .with_phase_reference(reference)
    }
}

pub(crate) fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Steering vector `v(θ, f)` for STFT bin `bin`.
pub fn steering_vector(geom: &ArrayGeometry, doa: Doa, bin: usize, cfg: &StftConfig) -> Result<Vec<Complex64>> {
    if bin >= cfg.num_bins() {
        return Err(Error::InvalidInput(format!(
            "bin {bin} out of range (F = {})",
            cfg.num_bins()
        )));
    }
    Ok(geom.steering_vector_hz(doa, cfg.bin_hz(bin)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ula_nine_by_four_cm() {
        let g = ArrayGeometry::ula(9, 0.04).unwrap();
        assert!((g.aperture() - 0.32).abs() < 1e-12);
        assert!(g.centroid().iter().all(|c| c.abs() < 1e-15));
        assert!((g.distance(0, 1) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn ula_edge_cases() {
        let one = ArrayGeometry::ula(1, 0.123).unwrap();
        assert_eq!(one.positions(), &[[0.0, 0.0, 0.0]]);
        let two = ArrayGeometry::ula(2, 0.04).unwrap();
        assert!((two.distance(0, 1) - 0.04).abs() < 1e-15);
        assert_eq!(two.distance(1, 1), 0.0);
        assert!(ArrayGeometry::ula(3, 0.0).is_err());
        assert!(ArrayGeometry::ula(3, -0.1).is_err());
        assert!(ArrayGeometry::ula(0, 0.1).is_err());
    }

    #[test]
    fn doa_range() {
        assert!(Doa::new(-0.1).is_err());
        assert!(Doa::new(180.1).is_err());
        assert!(Doa::new(f64::NAN).is_err());
        assert!(Doa::new(0.0).is_ok() && Doa::new(180.0).is_ok());
    }

    #[test]
    fn broadside_and_dc_are_all_ones() {
        let g = ArrayGeometry::ula(9, 0.04).unwrap();
        let cfg = StftConfig::default();
        for v in steering_vector(&g, Doa::new(90.0).unwrap(), 100, &cfg).unwrap() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        for theta in [0.0, 33.0, 180.0] {
            for v in steering_vector(&g, Doa::new(theta).unwrap(), 0, &cfg).unwrap() {
                assert_eq!(v, Complex64::new(1.0, 0.0));
            }
        }
    }

    #[test]
    fn endfire_adjacent_phase_step() {
        let g = ArrayGeometry::ula(9, 0.04).unwrap();
        let cfg = StftConfig::default();
        assert_eq!(cfg.bin_hz(32), 1000.0);
        let v = steering_vector(&g, Doa::new(0.0).unwrap(), 32, &cfg).unwrap();
        let expected = 2.0 * PI * 1000.0 * 0.04 / 343.0;
        assert!((expected - 0.7327).abs() < 1e-4);
        for m in 0..8 {
            // mic m+1 is closer to a source at 0°, so it leads mic m
            let step = (v[m + 1] / v[m]).arg();
            assert!((step - expected).abs() < 1e-12, "{step}");
        }
    }

    #[test]
    fn bin_out_of_range() {
        let g = ArrayGeometry::ula(2, 0.04).unwrap();
        assert!(steering_vector(&g, Doa::new(0.0).unwrap(), 257, &StftConfig::default()).is_err());
    }

    #[test]
    fn mic_reference_has_unit_entry() {
        let g = ArrayGeometry::ula(5, 0.04)
            .unwrap()
            .with_phase_reference(PhaseReference::Mic(0))
            .unwrap();
        let v = g.steering_vector_hz(Doa::new(20.0).unwrap(), 3000.0);
        assert!((v[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(ArrayGeometry::ula(5, 0.04).unwrap().with_phase_reference(PhaseReference::Mic(5)).is_err());
    }

    #[test]
    fn permutation_validation() {
        let g = ArrayGeometry::ula(3, 0.04).unwrap();
        assert!(g.permuted(&[0, 0, 1]).is_err());
        assert!(g.permuted(&[0, 1]).is_err());
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.positions()[0], g.positions()[2]);
    }
}
