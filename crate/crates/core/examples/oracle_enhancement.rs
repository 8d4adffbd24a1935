// Run the beam-filtering pipeline on one simulated scene with each oracle
// weight provider and score the results.

use nbf::fusion::{
    run_pipeline, MinNormOracle, NearestBeamOracle, OracleContext, PassthroughProvider, PerfectResidual,
    WeightProvider, DEFAULT_DELTA,
};
use nbf::metrics::{estoi, si_sdr};
use nbf::pipeline::{sample_scenarios, ExperimentConfig};
use nbf::room::simulate_mixture;
use nbf::stft::{analyze, Stft};

pub fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.test_sirs_db = vec![0.0];
    cfg.duration_s = 3.0;
    cfg.scenarios.min_separation_deg = 30.0;
    cfg.scenarios.rt60_s = [0.2, 0.2];
    let plan = sample_scenarios(&cfg, 1, 3).expect("sampling");
    let scenario = &plan[0].scenario;
    let m = simulate_mixture(scenario).expect("simulation");

    let bank = cfg.design_bank().expect("design");
    let spec = analyze(&m.mixture, &cfg.stft).unwrap();
    let clean_wave = &m.target_direct[0];
    let clean = Stft::new(cfg.stft).unwrap().analyze_channel(clean_wave);
    let ctx = OracleContext::new(clean, scenario.target_doa().unwrap(), DEFAULT_DELTA).unwrap();
    println!(
        "target {:.1}°, interferer {:.1}°, rt60 {:.2} s",
        ctx.target_doa().degrees(),
        scenario.interference_doa(),
        scenario.rt60
    );

    let providers: Vec<Box<dyn WeightProvider>> = vec![
        Box::new(PassthroughProvider),
        Box::new(NearestBeamOracle::new(&ctx, &bank)),
        Box::new(MinNormOracle::new(&ctx)),
        Box::new(PerfectResidual::new(NearestBeamOracle::new(&ctx, &bank), &ctx)),
    ];
    println!("{:<32} {:>9} {:>7}", "provider", "SI-SDR", "ESTOI");
    for p in &providers {
        let out = run_pipeline(&spec, &bank, p.as_ref(), 0).expect("pipeline");
        println!(
            "{:<32} {:>9.2} {:>7.3}",
            p.name(),
            si_sdr(&out.waveform, clean_wave).unwrap(),
            estoi(&out.waveform, clean_wave, cfg.stft.sample_rate_hz).unwrap()
        );
    }
}
