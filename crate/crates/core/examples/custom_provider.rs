// Implementing `WeightProvider`: a causal provider that blends beams by
// their running power, and a non-causal variant that the causality audit
// catches.

use nbf::beamformer::BeamSet;
use nbf::fusion::{audit_causality, run_pipeline, BeamWeights, Residual, WeightProvider};
use nbf::pipeline::{sample_scenarios, ExperimentConfig};
use nbf::room::simulate_mixture;
use nbf::stft::{analyze, Spectrogram};
use nbf::Result;
use num_complex::Complex64;

/// Per bin, weights each beam by its share of exponentially smoothed power.
/// With `lookahead` the smoothing also runs backwards in time, so it peeks.
struct PowerBlend {
    forget: f64,
    lookahead: bool,
}

impl WeightProvider for PowerBlend {
    fn name(&self) -> &str {
        if self.lookahead {
            "power_blend_lookahead"
        } else {
            "power_blend"
        }
    }

    fn is_causal(&self) -> bool {
        !self.lookahead
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        let (frames, bins) = beams.shape();
        let d = beams.num_beams();
        let mut power = vec![vec![0.0; bins]; d];
        let mut smoothed = vec![vec![vec![0.0; bins]; frames]; d];
        for t in 0..frames {
            for k in 0..d {
                for f in 0..bins {
                    power[k][f] = self.forget * power[k][f] + beams.beam(k).get(t, f).norm_sqr();
                    smoothed[k][t][f] = power[k][f];
                }
            }
        }
        if self.lookahead {
            for k in 0..d {
                for t in (0..frames.saturating_sub(1)).rev() {
                    for f in 0..bins {
                        smoothed[k][t][f] += 0.5 * smoothed[k][t + 1][f];
                    }
                }
            }
        }
        let mut g = BeamWeights::zeros(d, frames, bins);
        for t in 0..frames {
            for f in 0..bins {
                let total: f64 = (0..d).map(|k| smoothed[k][t][f]).sum();
                for k in 0..d {
                    let w = if total > 0.0 { smoothed[k][t][f] / total } else { 1.0 / d as f64 };
                    g.beam_mut(k).set(t, f, Complex64::new(w, 0.0));
                }
            }
        }
        Ok((g, Residual::zeros(reference.num_frames(), reference.num_bins())))
    }
}

pub fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.test_sirs_db = vec![5.0];
    cfg.duration_s = 2.0;
    let plan = sample_scenarios(&cfg, 1, 11).unwrap();
    let m = simulate_mixture(&plan[0].scenario).unwrap();
    let bank = cfg.design_bank().unwrap();
    let spec = analyze(&m.mixture, &cfg.stft).unwrap();

    for provider in [PowerBlend { forget: 0.9, lookahead: false }, PowerBlend { forget: 0.9, lookahead: true }] {
        let out = run_pipeline(&spec, &bank, &provider, 0).unwrap();
        let beams = out.beams;
        let drift = audit_causality(&provider, &beams, spec.channel(0), beams.shape().0 / 2).unwrap();
        println!(
            "{:<22} declared causal: {:<5} audit drift: {drift:.3e}",
            provider.name(),
            provider.is_causal()
        );
    }
}
