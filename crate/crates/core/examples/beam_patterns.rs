// Design the 19-beam super-directive bank for a 9-mic, 4 cm ULA and look
// at the loading trade-off and a beam pattern.

use nbf::array::{ArrayGeometry, Doa};
use nbf::beamformer::{design_bank, diffuse_coherence};
use nbf::stft::StftConfig;

pub fn main() {
    let cfg = StftConfig::default();
    let geom = ArrayGeometry::ula(9, 0.04).expect("valid array");
    let bin = 32; // 1 kHz
    let broadside = 9; // 90°

    let gamma = diffuse_coherence(&geom, 256, &cfg).expect("bin in range");
    println!("diffuse coherence, 4 cm apart at 8 kHz: {:.4}", gamma.get(0, 1));

    println!("\nloading   WNG(dB)  DI(dB)   at {:.0} Hz, broadside beam", cfg.bin_hz(bin));
    for eps in [1e-6, 1e-5, 1e-3, 1e-1] {
        let bank = design_bank(&geom, 19, eps, &cfg).expect("design");
        let wng = bank.white_noise_gain(broadside, bin).unwrap();
        let di = bank.directivity_index(broadside, bin).unwrap();
        println!("{eps:7.0e}  {:7.2}  {di:6.2}", 10.0 * wng.log10());
    }

    let bank = design_bank(&geom, 19, 1e-5, &cfg).expect("design");
    let angles: Vec<Doa> = (0..=36).map(|k| Doa::new(k as f64 * 5.0).unwrap()).collect();
    let bin_4k = 128;
    let pattern = bank.beam_pattern(broadside, bin_4k, &angles).unwrap();
    println!("\nbroadside beam at 4 kHz:");
    for (a, g) in angles.iter().zip(&pattern) {
        let db = 10.0 * g.max(1e-6).log10();
        let bar = "#".repeat(((db + 40.0).max(0.0) / 1.5) as usize);
        println!("{:5.0}°  {db:7.2} dB  {bar}", a.degrees());
    }
}
