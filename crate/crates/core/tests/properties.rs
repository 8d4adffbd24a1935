use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;

use nbf::array::{steering_vector, ArrayGeometry, Doa, Point3};
use nbf::beamformer::{apply_bank, design_bank, diffuse_coherence, BeamSet};
use nbf::fusion::{fuse, refine, BeamWeights, Residual};
use nbf::metrics::{estoi, si_sdr};
use nbf::room::{simulate_mixture_with, DelayMode, RoomScenario, Rt60Mapping, Source};
use nbf::sources::{SignalSpec, SourceKind};
use nbf::stft::{analyze, MultichannelSpectrogram, Spectrogram, Stft, StftConfig};
use nbf::tensor::{Dtype, Tensor};

fn small_cfg() -> StftConfig {
    StftConfig {
        sample_rate_hz: 16_000,
        frame_len: 64,
        hop: 32,
        fft_size: 64,
    }
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn cplx() -> impl Strategy<Value = Complex64> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(re, im)| Complex64::new(re, im))
}

fn spectrogram(frames: usize, bins: usize) -> impl Strategy<Value = Spectrogram> {
    prop::collection::vec(cplx(), frames * bins).prop_map(move |d| Spectrogram::from_vec(frames, bins, d).unwrap())
}

fn geometry() -> impl Strategy<Value = ArrayGeometry> {
    prop::collection::vec(prop::array::uniform3(-0.15f64..0.15), 3..7)
        .prop_filter("distinct mics", |ps| {
            ps.iter().enumerate().all(|(i, a)| {
                ps[i + 1..].iter().all(|b| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>() > 1e-4)
            })
        })
        .prop_map(|ps| ArrayGeometry::new(ps, 343.0).unwrap())
}

fn close(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
    let scale = a.iter().map(|z| z.norm()).fold(1.0, f64::max);
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() <= tol * scale)
}

fn rotate(p: Point3, yaw: f64, pitch: f64) -> Point3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let q = [cy * p[0] - sy * p[1], sy * p[0] + cy * p[1], p[2]];
    [q[0], cp * q[1] - sp * q[2], sp * q[1] + cp * q[2]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stft_round_trip_any_signal(x in signal(3_000)) {
        let cfg = small_cfg();
        let stft = Stft::new(cfg).unwrap();
        let y = stft.synthesize_channel(&stft.analyze_channel(&x), x.len()).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = (cfg.frame_len..x.len() - cfg.frame_len).map(|n| (y[n] - x[n]).abs()).fold(0.0, f64::max);
        prop_assert!(err / peak < 1e-6, "{err}");
    }

    #[test]
    fn stft_is_linear(x in signal(1_000), y in signal(1_000), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let stft = Stft::new(small_cfg()).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let lhs = stft.analyze_channel(&mix);
        let (sx, sy) = (stft.analyze_channel(&x), stft.analyze_channel(&y));
        let rhs: Vec<Complex64> = sx.data().iter().zip(sy.data()).map(|(u, v)| a * u + b * v).collect();
        prop_assert!(close(lhs.data(), &rhs, 1e-12));
    }

    #[test]
    fn steering_entries_have_unit_modulus(g in geometry(), az in 0.0f64..=180.0, bin in 0usize..257) {
        let v = steering_vector(&g, Doa::new(az).unwrap(), bin, &StftConfig::default()).unwrap();
        prop_assert!(v.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn steering_follows_mic_permutation(
        g in geometry(),
        az in 0.0f64..=180.0,
        bin in 0usize..257,
        perm in any::<u64>(),
    ) {
        let m = g.num_mics();
        let mut order: Vec<usize> = (0..m).collect();
        // Fisher-Yates driven by the drawn seed
        let mut s = perm;
        for i in (1..m).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let cfg = StftConfig::default();
        let doa = Doa::new(az).unwrap();
        let v = steering_vector(&g, doa, bin, &cfg).unwrap();
        let vp = steering_vector(&g.permuted(&order).unwrap(), doa, bin, &cfg).unwrap();
        let expected: Vec<Complex64> = order.iter().map(|&k| v[k]).collect();
        prop_assert!(close(&vp, &expected, 1e-12));
    }

    #[test]
    fn steering_conjugate_is_opposite_delay_sign(g in geometry(), az in 0.0f64..=180.0, f in 0.0f64..8_000.0) {
        let doa = Doa::new(az).unwrap();
        let v = g.steering_vector_hz(doa, f);
        let flipped: Vec<Complex64> = g.delays(doa).iter().map(|tau| Complex64::from_polar(1.0, 2.0 * PI * f * tau)).collect();
        let conj: Vec<Complex64> = v.iter().map(|z| z.conj()).collect();
        prop_assert!(close(&conj, &flipped, 1e-12));
    }

    #[test]
    fn coherence_is_invariant_to_rotation(g in geometry(), yaw in 0.0f64..(2.0 * PI), pitch in 0.0f64..PI, bin in 0usize..257) {
        let cfg = StftConfig::default();
        let rotated = g.map_positions(|p| rotate(p, yaw, pitch)).unwrap();
        let a = diffuse_coherence(&g, bin, &cfg).unwrap();
        let b = diffuse_coherence(&rotated, bin, &cfg).unwrap();
        for i in 0..g.num_mics() {
            prop_assert_eq!(a.get(i, i), 1.0);
            for j in 0..g.num_mics() {
                prop_assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn nbf1_round_trip_is_bit_identical(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
        wide in any::<bool>(),
    ) {
        let n: usize = dims.iter().product();
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from_bits(0x3FF0_0000_0000_0000 | (s >> 12)) - 1.5
        };
        let data: Vec<Complex64> = (0..n)
            .map(|_| {
                let (re, im) = (next(), next());
                if wide { Complex64::new(re, im) } else { Complex64::new(re as f32 as f64, im as f32 as f64) }
            })
            .collect();
        let t = Tensor::from_vec(&dims, data).unwrap();
        let dtype = if wide { Dtype::Complex128 } else { Dtype::Complex64 };
        let bytes = t.to_bytes(dtype).unwrap();
        let (back, got) = Tensor::read_from(&bytes[..]).unwrap();
        prop_assert_eq!(got, dtype);
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
        prop_assert_eq!(back.to_bytes(dtype).unwrap(), bytes);
    }

    #[test]
    fn si_sdr_ignores_positive_scaling(s in signal(800), n in signal(800), a in 1e-3f64..1e3) {
        let est: Vec<f64> = s.iter().zip(&n).map(|(x, y)| x + 0.3 * y).collect();
        let scaled: Vec<f64> = est.iter().map(|v| a * v).collect();
        prop_assert!((si_sdr(&scaled, &s).unwrap() - si_sdr(&est, &s).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn si_sdr_never_rises_with_more_noise(s in signal(800), n in signal(800)) {
        let mut last = f64::INFINITY;
        for k in [0.01, 0.1, 0.3, 1.0, 3.0] {
            let est: Vec<f64> = s.iter().zip(&n).map(|(x, y)| x + k * y).collect();
            let v = si_sdr(&est, &s).unwrap();
            prop_assert!(v <= last + 1e-9);
            last = v;
        }
    }

    #[test]
    fn fuse_is_bilinear(
        b1 in prop::collection::vec(spectrogram(4, 5), 3),
        b2 in prop::collection::vec(spectrogram(4, 5), 3),
        g1 in prop::collection::vec(spectrogram(4, 5), 3),
        g2 in prop::collection::vec(spectrogram(4, 5), 3),
        a in cplx(),
        b in cplx(),
    ) {
        let angles: Vec<Doa> = [0.0, 90.0, 180.0].iter().map(|&x| Doa::new(x).unwrap()).collect();
        let comb = |x: &[Spectrogram], y: &[Spectrogram]| -> Vec<Spectrogram> {
            x.iter().zip(y).map(|(p, q)| p.map_with(q, |u, v| a * u + b * v).unwrap()).collect()
        };
        let beams = |x: Vec<Spectrogram>| BeamSet::new(angles.clone(), x).unwrap();
        let weights = |x: Vec<Spectrogram>| BeamWeights::new(x).unwrap();
        let lin = |p: &Spectrogram, q: &Spectrogram| -> Vec<Complex64> {
            p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect()
        };

        let g = weights(g1.clone());
        let lhs = fuse(&beams(comb(&b1, &b2)), &g).unwrap();
        let rhs = lin(&fuse(&beams(b1.clone()), &g).unwrap(), &fuse(&beams(b2.clone()), &g).unwrap());
        prop_assert!(close(lhs.data(), &rhs, 1e-12));

        let bs = beams(b1);
        let lhs = fuse(&bs, &weights(comb(&g1, &g2))).unwrap();
        let rhs = lin(&fuse(&bs, &weights(g1)).unwrap(), &fuse(&bs, &weights(g2)).unwrap());
        prop_assert!(close(lhs.data(), &rhs, 1e-12));
    }

    #[test]
    fn refine_is_linear(y1 in spectrogram(4, 5), y2 in spectrogram(4, 5), r1 in spectrogram(4, 5), r2 in spectrogram(4, 5), a in cplx(), b in cplx()) {
        let lin = |p: &Spectrogram, q: &Spectrogram| p.map_with(q, |u, v| a * u + b * v).unwrap();
        let lhs = refine(&lin(&y1, &y2), &Residual(lin(&r1, &r2))).unwrap();
        let rhs = lin(&refine(&y1, &Residual(r1.clone())).unwrap(), &refine(&y2, &Residual(r2.clone())).unwrap());
        prop_assert!(close(lhs.data(), rhs.data(), 1e-12));
        let plain = refine(&y1, &Residual(r1.clone())).unwrap();
        let sum = y1.map_with(&r1, |u, v| u + v).unwrap();
        prop_assert_eq!(plain.data(), sum.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn beam_outputs_survive_mic_permutation(x in prop::collection::vec(signal(600), 5), rot in 1usize..5) {
        let cfg = small_cfg();
        let geom = ArrayGeometry::ula(5, 0.04).unwrap();
        let order: Vec<usize> = (0..5).map(|k| (k + rot) % 5).collect();
        let bank = design_bank(&geom, 7, 1e-5, &cfg).unwrap();
        let bank_p = design_bank(&geom.permuted(&order).unwrap(), 7, 1e-5, &cfg).unwrap();
        let xp: Vec<Vec<f64>> = order.iter().map(|&k| x[k].clone()).collect();
        let out = apply_bank(&bank, &analyze(&x, &cfg).unwrap()).unwrap();
        let out_p = apply_bank(&bank_p, &analyze(&xp, &cfg).unwrap()).unwrap();
        for d in 0..7 {
            prop_assert!(close(out.beam(d).data(), out_p.beam(d).data(), 1e-9));
        }
    }

    #[test]
    fn apply_bank_is_linear(x in prop::collection::vec(signal(600), 4), y in prop::collection::vec(signal(600), 4), a in -2.0f64..2.0) {
        let cfg = small_cfg();
        let bank = design_bank(&ArrayGeometry::ula(4, 0.05).unwrap(), 5, 1e-3, &cfg).unwrap();
        let spec = |w: &[Vec<f64>]| -> MultichannelSpectrogram { analyze(w, &cfg).unwrap() };
        let mix: Vec<Vec<f64>> = x.iter().zip(&y).map(|(p, q)| p.iter().zip(q).map(|(u, v)| a * u + v).collect()).collect();
        let lhs = apply_bank(&bank, &spec(&mix)).unwrap();
        let (bx, by) = (apply_bank(&bank, &spec(&x)).unwrap(), apply_bank(&bank, &spec(&y)).unwrap());
        for d in 0..5 {
            let rhs: Vec<Complex64> = bx.beam(d).data().iter().zip(by.beam(d).data()).map(|(u, v)| a * u + v).collect();
            prop_assert!(close(lhs.beam(d).data(), &rhs, 1e-9));
        }
    }

    #[test]
    fn mixture_is_the_sum_of_its_parts(
        t in signal(1_600),
        i in signal(1_200),
        sir in -10.0f64..10.0,
        rt60 in 0.0f64..0.25,
        ty in 2.6f64..3.6,
        ix in 0.8f64..1.8,
    ) {
        let scenario = RoomScenario {
            room_dims: [5.0, 4.0, 3.0],
            rt60,
            array_center: [2.5, 2.0, 1.5],
            geometry: ArrayGeometry::ula(3, 0.05).unwrap(),
            target: Source {
                position: [2.7, ty, 1.5],
                signal: SignalSpec::Synthetic { kind: SourceKind::Speech, seed: 0, duration_s: 0.1 },
            },
            interference: Source {
                position: [ix, 3.0, 1.5],
                signal: SignalSpec::Synthetic { kind: SourceKind::Babble, seed: 0, duration_s: 0.1 },
            },
            sir_db: sir,
            sample_rate_hz: 16_000,
            delay: DelayMode::Nearest,
            rt60_mapping: Rt60Mapping::Fitted,
        };
        let m = simulate_mixture_with(&scenario, &t, &i).unwrap();
        for ch in 0..3 {
            for n in 0..t.len() {
                let parts = m.target_reverb[ch][n] + m.interference[ch][n];
                prop_assert!((m.mixture[ch][n] - parts).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn estoi_ignores_gain_on_either_input(seed in 0u64..1_000, g1 in 0.01f64..100.0, g2 in 0.01f64..100.0) {
        let fs = 10_000;
        let clean = nbf::sources::speech_like(seed, 20_000, fs);
        let noise = nbf::sources::white_noise(seed + 1, 20_000);
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + 0.2 * n).collect();
        let base = estoi(&noisy, &clean, fs).unwrap();
        let a: Vec<f64> = noisy.iter().map(|v| g1 * v).collect();
        let b: Vec<f64> = clean.iter().map(|v| g2 * v).collect();
        prop_assert!((estoi(&a, &b, fs).unwrap() - base).abs() < 1e-9);
    }
}
