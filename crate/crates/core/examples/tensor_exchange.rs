// The NBF1 boundary used by external weight estimators: simulate a tiny
// dataset, export beams, compute weights "elsewhere", and enhance with the
// `external_tensor` provider.

use nbf::fusion::{minnorm_weights, BeamWeights, Residual};
use nbf::pipeline::{
    cmd_enhance, cmd_eval, cmd_export_beams, cmd_simulate, load_beams, tensor_dir, ExperimentConfig, ProviderKind,
};
use nbf::stft::Spectrogram;
use nbf::tensor::{Dtype, Tensor};

pub fn main() {
    let out = std::env::temp_dir().join(format!("nbf-tensor-example-{}", std::process::id()));
    let mut cfg = ExperimentConfig::default();
    cfg.test_sirs_db = vec![0.0];
    cfg.items_per_sir = 2;
    cfg.duration_s = 2.0;
    cfg.scenarios.rt60_s = [0.1, 0.3];

    cmd_simulate(&cfg, &out).expect("simulate");
    let export = cmd_export_beams(&cfg, &out).expect("export");
    println!("exported {} items, {} beams, {} bins", export.items.len(), export.look_angles_deg.len(), export.num_bins);

    // stand-in for the external estimator: reads beams and target, writes G and R
    let tensors = tensor_dir(&cfg, &out);
    for item in &export.items {
        let beams = load_beams(&out.join("beams").join(&item.beams), &export.look_angles_deg).unwrap();
        let target = Tensor::load(out.join("beams").join(&item.target)).unwrap();
        let (frames, bins) = beams.shape();
        let target = Spectrogram::from_vec(frames, bins, target.into_data()).unwrap();
        let mut g = BeamWeights::zeros(beams.num_beams(), frames, bins);
        for t in 0..frames {
            for f in 0..bins {
                for (d, w) in minnorm_weights(&beams.bin_vector(t, f), target.get(t, f), 1e-9).into_iter().enumerate() {
                    g.beam_mut(d).set(t, f, w);
                }
            }
        }
        g.to_tensor().save(tensors.join(format!("{}.weights.nbf", item.id)), Dtype::Complex64).unwrap();
        Residual::zeros(frames, bins)
            .to_tensor()
            .save(tensors.join(format!("{}.residual.nbf", item.id)), Dtype::Complex64)
            .unwrap();
    }

    // NBF1 round trip is bit-exact
    let path = tensors.join(format!("{}.weights.nbf", export.items[0].id));
    let bytes = std::fs::read(&path).unwrap();
    let again = Tensor::load(&path).unwrap().to_bytes(Dtype::Complex64).unwrap();
    println!("{}: {} bytes, re-encoded identically: {}", path.display(), bytes.len(), bytes == again);

    cfg.provider = ProviderKind::ExternalTensor;
    cmd_enhance(&cfg, &out).expect("enhance");
    let report = cmd_eval(&cfg, &out).expect("eval");
    print!("{}", report.to_csv());
    std::fs::remove_dir_all(&out).ok();
}
