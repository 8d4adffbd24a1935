// SI-SDR and ESTOI of a synthetic talker under additive white noise.

use nbf::metrics::{estoi, si_sdr};
use nbf::sources::{speech_like, white_noise};

pub fn main() {
    let fs = 16_000;
    let clean = speech_like(4, 3 * fs as usize, fs);
    let noise = white_noise(5, clean.len());
    println!("{:>8} {:>9} {:>7}", "SNR(dB)", "SI-SDR", "ESTOI");
    for snr in [20.0, 10.0, 5.0, 0.0, -5.0, -10.0] {
        let g = 10f64.powf(-snr / 20.0);
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(s, n)| s + g * n).collect();
        println!(
            "{snr:8.1} {:9.2} {:7.3}",
            si_sdr(&noisy, &clean).unwrap(),
            estoi(&noisy, &clean, fs).unwrap()
        );
    }
    println!("noise alone: ESTOI {:.3}", estoi(&noise, &clean, fs).unwrap());
}
