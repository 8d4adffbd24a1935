// Simulate a reverberant two-talker scene in a 6 x 5 x 3 m room and write
// the mixture and supervision targets as WAV files.

use nbf::array::ArrayGeometry;
use nbf::io::{write_wav, Audio, SampleFormat};
use nbf::room::{
    image_method_rir, measured_sir_db, schroeder_rt60, simulate_mixture, DelayMode, RoomScenario, Rt60Mapping, Source,
};
use nbf::sources::{SignalSpec, SourceKind};

pub fn main() {
    let scenario = RoomScenario {
        room_dims: [6.0, 5.0, 3.0],
        rt60: 0.5,
        array_center: [3.0, 2.0, 1.4],
        geometry: ArrayGeometry::ula(9, 0.04).unwrap(),
        target: Source {
            position: [3.5, 3.5, 1.4],
            signal: SignalSpec::Synthetic { kind: SourceKind::Speech, seed: 1, duration_s: 3.0 },
        },
        interference: Source {
            position: [1.5, 3.0, 1.4],
            signal: SignalSpec::Synthetic { kind: SourceKind::Babble, seed: 2, duration_s: 3.0 },
        },
        sir_db: 0.0,
        sample_rate_hz: 16_000,
        delay: DelayMode::Fractional,
        rt60_mapping: Rt60Mapping::Fitted,
    };
    scenario.validate().expect("consistent scenario");
    println!(
        "target at {:.1}°, interferer at {:.1}°",
        scenario.target_doa().unwrap().degrees(),
        scenario.interference_doa()
    );

    let params = nbf::room::RirParams {
        room_dims: scenario.room_dims,
        reflection: scenario.reflection().unwrap(),
        sample_rate_hz: 16_000,
        speed_of_sound: 343.0,
        len_samples: 16_000,
        delay: DelayMode::Nearest,
    };
    let mic0 = scenario.mic_positions()[0];
    let rir = image_method_rir(&params, scenario.target.position, mic0).unwrap();
    println!(
        "reflection coefficient {:.4}, Schroeder RT60 {:.3} s (target {:.3} s)",
        params.reflection,
        schroeder_rt60(&rir, 16_000).unwrap(),
        scenario.rt60
    );

    let m = simulate_mixture(&scenario).expect("simulation");
    println!("measured SIR at mic 0: {:.3} dB", measured_sir_db(&m, 0));

    let dir = std::env::temp_dir().join("nbf-room-example");
    for (name, chans) in [("mix", &m.mixture), ("direct", &m.target_direct), ("reverb", &m.target_reverb)] {
        let path = dir.join(format!("{name}.wav"));
        write_wav(&path, &Audio::new(16_000, chans.clone()).unwrap(), SampleFormat::Float32).unwrap();
        println!("wrote {}", path.display());
    }
}
