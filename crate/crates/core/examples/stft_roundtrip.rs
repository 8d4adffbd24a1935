// Analyse one second of noise with the 32 ms Hann STFT, resynthesise it,
// and check that the streaming engine matches the batch one.

use nbf::stft::{Stft, StftConfig, StreamingAnalyzer, StreamingSynthesizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn main() {
    let cfg = StftConfig::default();
    let stft = Stft::new(cfg).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..cfg.sample_rate_hz).map(|_| rng.random_range(-0.5..0.5)).collect();

    let start = std::time::Instant::now();
    let spec = stft.analyze_channel(&x);
    let y = stft.synthesize_channel(&spec, x.len()).expect("shapes match");
    let elapsed = start.elapsed();

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!(
        "{} samples -> {} frames x {} bins, max error {:.2e} of peak, {:?}",
        x.len(),
        spec.num_frames(),
        spec.num_bins(),
        err / peak,
        elapsed
    );

    // frame-by-frame: the output lags by frame_len - hop samples
    let mut analyzer = StreamingAnalyzer::new(stft.clone());
    let mut synth = StreamingSynthesizer::new(stft);
    let mut streamed = Vec::new();
    for block in x.chunks(cfg.hop) {
        if block.len() < cfg.hop {
            break;
        }
        let frame = analyzer.push(block).expect("hop-sized block");
        streamed.extend(synth.push(&frame).expect("one frame"));
    }
    let lag = cfg.pad();
    let stream_err = streamed[lag..]
        .iter()
        .zip(&x)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("streaming: {} samples out, max error {:.2e} after a {lag}-sample lag", streamed.len(), stream_err);
}
