//! Experiment configuration, scenario sampling, and the dataset commands
//! behind the `nbf` binary.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.json                 items, relative paths, SHA-256 of every file
//! scenarios/<id>.json           RoomScenario
//! audio/<id>.mix.wav            M-channel mixture
//! audio/<id>.direct.wav         M-channel direct-path target
//! audio/<id>.reverb.wav         M-channel reverberant target
//! bank.nbf, bank.json           fixed beamformer bank (design)
//! enhanced/<provider>/<id>.wav  enhanced reference-channel estimate
//! eval/<provider>/metrics.csv   per-utterance scores
//! eval/<provider>/summary.json  per-condition means
//! beams/<id>.{beams,reference,target}.nbf, beams/index.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, Doa, PhaseReference, Point3, SPEED_OF_SOUND};
use crate::beamformer::{design_bank, BeamSet, FixedBeamformerBank, DEFAULT_DIAG_LOADING};
use crate::error::{Error, Result};
use crate::fusion::{
    run_pipeline, spectrogram_to_tensor, NearestBeamOracle, MinNormOracle, OracleContext, PassthroughProvider,
    PerfectResidual, Residual, BeamWeights, TensorProvider, WeightProvider, DEFAULT_DELTA,
};
use crate::io::{read_json, read_wav, sha256_file, write_atomic, write_json, write_wav, Audio, SampleFormat};
use crate::metrics::{estoi, si_sdr, MetricReport, UtteranceScore};
use crate::room::{simulate_mixture, DelayMode, RoomScenario, Rt60Mapping, Source};
use crate::sources::{SignalSpec, SourceKind};
use crate::stft::{analyze, Spectrogram, Stft, StftConfig};
use crate::tensor::{Dtype, Tensor};

/// Environment variable naming the default output root.
pub const DATA_DIR_ENV: &str = "NBF_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArraySpec {
    Ula { num_mics: usize, spacing_m: f64 },
    /// Explicit coordinates in metres, relative to the array centre.
    Positions { positions: Vec<Point3> },
}

impl Default for ArraySpec {
    fn default() -> Self {
        ArraySpec::Ula { num_mics: 9, spacing_m: 0.04 }
    }
}

/// Where steering phases are referenced for the beam bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringReference {
    Centroid,
    /// The pipeline's reference microphone, so beams are time-aligned with it.
    #[default]
    ReferenceMic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Unprocessed reference microphone.
    Passthrough,
    NearestBeam,
    Minnorm,
    /// Wraps `provider_options.wrapped` with the exact residual.
    PerfectResidual,
    /// Precomputed `<id>.weights.nbf` / `<id>.residual.nbf` files.
    ExternalTensor,
    /// An external program invoked once per utterance.
    NeuralRemote,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Passthrough => "passthrough",
            ProviderKind::NearestBeam => "nearest_beam",
            ProviderKind::Minnorm => "minnorm",
            ProviderKind::PerfectResidual => "perfect_residual",
            ProviderKind::ExternalTensor => "external_tensor",
            ProviderKind::NeuralRemote => "neural_remote",
        }
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown provider {s:?}")))
    }
}

impl std::fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderOptions {
    /// Inner provider for `perfect_residual`.
    pub wrapped: ProviderKind,
    /// Directory of external tensors; defaults to `<out>/tensors`.
    pub tensor_dir: Option<PathBuf>,
    /// Program and leading arguments for `neural_remote`. It is called as
    /// `cmd... <beams.nbf> <reference.nbf> <weights.nbf> <residual.nbf>`.
    pub command: Vec<String>,
    /// Whether external weights are declared causal.
    pub causal: bool,
}

impl Default for ProviderOptions {
    fn default() -> Self {
        ProviderOptions {
            wrapped: ProviderKind::NearestBeam,
            tensor_dir: None,
            command: Vec::new(),
            causal: true,
        }
    }
}

/// Which clean signal the oracles fit and the metrics score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Direct,
    Reverberant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourcePool {
    Synthetic { kind: SourceKind },
    /// Mono WAV files in a directory, picked uniformly.
    WavDir { dir: PathBuf },
}

/// Uniform sampling ranges, `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioRanges {
    pub room_min_m: Point3,
    pub room_max_m: Point3,
    pub rt60_s: [f64; 2],
    pub source_distance_m: [f64; 2],
    pub target_azimuth_deg: [f64; 2],
    pub interference_azimuth_deg: [f64; 2],
    /// Minimum azimuth difference between target and interferer.
    pub min_separation_deg: f64,
    /// Height of the array and both sources.
    pub height_m: [f64; 2],
    /// Minimum clearance of sources and microphones from every wall.
    pub wall_margin_m: f64,
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        ScenarioRanges {
            room_min_m: [3.0, 3.0, 2.5],
            room_max_m: [10.0, 10.0, 3.0],
            rt60_s: [0.05, 0.7],
            source_distance_m: [0.5, 3.0],
            target_azimuth_deg: [0.0, 180.0],
            interference_azimuth_deg: [0.0, 180.0],
            min_separation_deg: 0.0,
            height_m: [1.0, 1.5],
            wall_margin_m: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stft: StftConfig,
    pub array: ArraySpec,
    pub speed_of_sound: f64,
    pub steering_reference: SteeringReference,
    pub beams: usize,
    pub diag_loading: f64,
    pub provider: ProviderKind,
    pub provider_options: ProviderOptions,
    /// Minimum-norm regulariser relative to mean beam power.
    pub delta: f64,
    pub reference_channel: usize,
    pub target: TargetKind,
    pub scenarios: ScenarioRanges,
    /// Image placement; nearest-sample rounding acts like centimetre-scale
    /// mic position errors, which super-directive beams amplify.
    pub rir_delay: DelayMode,
    pub rt60_mapping: Rt60Mapping,
    pub test_sirs_db: Vec<f64>,
    pub items_per_sir: usize,
    pub duration_s: f64,
    pub target_source: SourcePool,
    pub interference_source: SourcePool,
    pub sample_format: SampleFormat,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stft: StftConfig::default(),
            array: ArraySpec::default(),
            speed_of_sound: SPEED_OF_SOUND,
            steering_reference: SteeringReference::default(),
            beams: 19,
            diag_loading: DEFAULT_DIAG_LOADING,
            provider: ProviderKind::Minnorm,
            provider_options: ProviderOptions::default(),
            delta: DEFAULT_DELTA,
            reference_channel: 0,
            target: TargetKind::default(),
            scenarios: ScenarioRanges::default(),
            rir_delay: DelayMode::Fractional,
            rt60_mapping: Rt60Mapping::Fitted,
            test_sirs_db: vec![-5.0, -2.0, 0.0, 2.0, 5.0],
            items_per_sir: 150,
            duration_s: 4.0,
            target_source: SourcePool::Synthetic { kind: SourceKind::Speech },
            interference_source: SourcePool::Synthetic { kind: SourceKind::Babble },
            sample_format: SampleFormat::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} must satisfy {lo} <= min <= max")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads and validates a JSON config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.stft.validate().map_err(config)?;
        let geom = self.geometry().map_err(config)?;
        if self.beams < 2 {
            return Err(Error::Config(format!("beams = {} must be at least 2", self.beams)));
        }
        if !(self.diag_loading.is_finite() && self.diag_loading >= 0.0) {
            return Err(Error::Config(format!("diag_loading {} must be >= 0", self.diag_loading)));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Config(format!("delta {} must be > 0", self.delta)));
        }
        if self.reference_channel >= geom.num_mics() {
            return Err(Error::Config(format!(
                "reference_channel {} out of range for {} mics",
                self.reference_channel,
                geom.num_mics()
            )));
        }
        if self.provider_options.wrapped == ProviderKind::PerfectResidual {
            return Err(Error::Config("perfect_residual cannot wrap itself".into()));
        }
        if self.test_sirs_db.is_empty() || self.test_sirs_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("test_sirs_db must be a non-empty list of finite values".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Config(format!("duration_s {} must be positive", self.duration_s)));
        }
        let r = &self.scenarios;
        for k in 0..3 {
            check_range("room dimension", [r.room_min_m[k], r.room_max_m[k]], f64::MIN_POSITIVE)?;
        }
        check_range("rt60_s", r.rt60_s, 0.0)?;
        check_range("source_distance_m", r.source_distance_m, f64::MIN_POSITIVE)?;
        check_range("height_m", r.height_m, 0.0)?;
        for (name, az) in [("target_azimuth_deg", r.target_azimuth_deg), ("interference_azimuth_deg", r.interference_azimuth_deg)] {
            check_range(name, az, 0.0)?;
            if az[1] > 180.0 {
                return Err(Error::Config(format!("{name} {az:?} must lie within [0, 180]")));
            }
        }
        if !(r.min_separation_deg.is_finite() && (0.0..=180.0).contains(&r.min_separation_deg)) {
            return Err(Error::Config(format!("min_separation_deg {} must lie within [0, 180]", r.min_separation_deg)));
        }
        if !(r.wall_margin_m.is_finite() && r.wall_margin_m >= 0.0) {
            return Err(Error::Config(format!("wall_margin_m {} must be >= 0", r.wall_margin_m)));
        }
        if r.height_m[1] >= r.room_min_m[2] - r.wall_margin_m {
            return Err(Error::Config("height_m must stay below the lowest ceiling minus the wall margin".into()));
        }
        Ok(())
    }

    /// Microphone geometry relative to the array centre, centroid phase
    /// reference.
    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let positions = match &self.array {
            ArraySpec::Ula { num_mics, spacing_m } => ArrayGeometry::ula(*num_mics, *spacing_m)?.positions().to_vec(),
            ArraySpec::Positions { positions } => positions.clone(),
        };
        ArrayGeometry::new(positions, self.speed_of_sound)
    }

    /// Geometry with the configured steering phase reference.
    pub fn steering_geometry(&self) -> Result<ArrayGeometry> {
        let reference = match self.steering_reference {
            SteeringReference::Centroid => PhaseReference::Centroid,
            SteeringReference::ReferenceMic => PhaseReference::Mic(self.reference_channel),
        };
        self.geometry()?.with_phase_reference(reference)
    }

    pub fn design_bank(&self) -> Result<FixedBeamformerBank> {
        design_bank(&self.steering_geometry()?, self.beams, self.diag_loading, &self.stft)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn draw_signal(pool: &SourcePool, rng: &mut ChaCha8Rng, duration_s: f64) -> Result<SignalSpec> {
    match pool {
        SourcePool::Synthetic { kind } => Ok(SignalSpec::Synthetic {
            kind: *kind,
            seed: rng.random(),
            duration_s,
        }),
        SourcePool::WavDir { dir } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::file(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("{}: no .wav files", dir.display())));
            }
            let path = files[rng.random_range(0..files.len())].clone();
            Ok(SignalSpec::Wav { path })
        }
    }
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Draws one scenario at `sir_db` from the configured ranges.
pub fn sample_scenario(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, sir_db: f64) -> Result<RoomScenario> {
    let r = &cfg.scenarios;
    let geometry = cfg.geometry()?;
    let room: Point3 = std::array::from_fn(|k| uniform(rng, [r.room_min_m[k], r.room_max_m[k]]));
    let rt60 = uniform(rng, r.rt60_s);
    let reach = geometry
        .positions()
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(0.0, f64::max);
    let inside = |p: Point3| (0..3).all(|k| p[k] >= r.wall_margin_m && p[k] <= room[k] - r.wall_margin_m);
    let place = |center: Point3, dist: f64, az: f64| {
        let a = az.to_radians();
        [center[0] + dist * a.cos(), center[1] + dist * a.sin(), center[2]]
    };

    for _ in 0..MAX_PLACEMENT_TRIES {
        let margin = r.wall_margin_m + reach;
        if room[0] <= 2.0 * margin || room[1] <= 2.0 * margin {
            break;
        }
        let center = [
            uniform(rng, [margin, room[0] - margin]),
            uniform(rng, [margin, room[1] - margin]),
            uniform(rng, r.height_m),
        ];
        let target_az = uniform(rng, r.target_azimuth_deg);
        let target = place(center, uniform(rng, r.source_distance_m), target_az);
        let interf_az = uniform(rng, r.interference_azimuth_deg);
        let interf = place(center, uniform(rng, r.source_distance_m), interf_az);
        if !inside(target) || !inside(interf) || (target_az - interf_az).abs() < r.min_separation_deg {
            continue;
        }
        let scenario = RoomScenario {
            room_dims: room,
            rt60,
            array_center: center,
            geometry: geometry.clone(),
            target: Source {
                position: target,
                signal: draw_signal(&cfg.target_source, rng, cfg.duration_s)?,
            },
            interference: Source {
                position: interf,
                signal: draw_signal(&cfg.interference_source, rng, cfg.duration_s)?,
            },
            sir_db,
            sample_rate_hz: cfg.stft.sample_rate_hz,
            delay: cfg.rir_delay,
            rt60_mapping: cfg.rt60_mapping,
        };
        scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        return Ok(scenario);
    }
    Err(Error::Config(format!(
        "cannot place array and sources in a {room:?} m room with the configured ranges"
    )))
}

/// A scenario to be simulated, before any audio exists.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedItem {
    pub id: String,
    pub condition: String,
    pub scenario: RoomScenario,
}

pub fn condition_label(sir_db: f64) -> String {
    format!("sir_{sir_db}")
}

/// `count` scenarios per test SIR. Item `i` draws from its own ChaCha
/// stream, so the plan does not depend on evaluation order.
pub fn sample_scenarios(cfg: &ExperimentConfig, count: usize, seed: u64) -> Result<Vec<PlannedItem>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let jobs: Vec<(usize, f64, usize)> = cfg
        .test_sirs_db
        .iter()
        .enumerate()
        .flat_map(|(s, &sir)| (0..count).map(move |k| (s * count + k, sir, k)))
        .collect();
    jobs.into_par_iter()
        .map(|(index, sir, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let condition = condition_label(sir);
            Ok(PlannedItem {
                id: format!("{condition}_{k:04}"),
                condition,
                scenario: sample_scenario(cfg, &mut rng, sir)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub condition: String,
    pub sir_db: f64,
    pub target_doa_deg: f64,
    pub scenario: PathBuf,
    pub mixture: PathBuf,
    pub target_direct: PathBuf,
    pub target_reverb: PathBuf,
    /// Relative path → hex SHA-256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub num_mics: usize,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// Checks that every referenced file exists and matches its hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for item in &self.items {
            for (rel, hash) in &item.sha256 {
                let actual = sha256_file(&dir.join(rel))?;
                if &actual != hash {
                    return Err(Error::Format(format!("{rel}: checksum mismatch")));
                }
            }
        }
        Ok(())
    }
}

fn rel_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Runs `f` on a pool of `jobs` threads, or the global pool for `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Bank metadata written next to `bank.nbf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub look_angles_deg: Vec<f64>,
    pub diag_loading: f64,
    pub stft: StftConfig,
    pub geometry: ArrayGeometry,
    /// `[beams, bins, mics]`.
    pub dims: Vec<usize>,
}

/// Designs the bank and writes `bank.nbf` `[D][F][M]` and `bank.json`.
pub fn cmd_design(cfg: &ExperimentConfig, out: &Path) -> Result<BankInfo> {
    cfg.validate()?;
    let bank = cfg.design_bank()?;
    bank.tensor().save(out.join("bank.nbf"), Dtype::Complex64)?;
    let info = BankInfo {
        look_angles_deg: bank.look_angles().iter().map(|a| a.degrees()).collect(),
        diag_loading: bank.diag_loading(),
        stft: *bank.config(),
        geometry: bank.geometry().clone(),
        dims: bank.tensor().dims().to_vec(),
    };
    write_json(&out.join("bank.json"), &info)?;
    Ok(info)
}

/// Samples `items_per_sir` scenarios per SIR, simulates them, and writes
/// audio, scenario files and the manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let plan = sample_scenarios(cfg, cfg.items_per_sir, cfg.seed)?;
    let fs = cfg.stft.sample_rate_hz;
    let items = plan
        .par_iter()
        .map(|item| {
            let mixture = simulate_mixture(&item.scenario)?;
            let scenario_rel = PathBuf::from("scenarios").join(format!("{}.json", item.id));
            let audio_rel = |kind: &str| PathBuf::from("audio").join(format!("{}.{kind}.wav", item.id));
            let (mix_rel, direct_rel, reverb_rel) = (audio_rel("mix"), audio_rel("direct"), audio_rel("reverb"));
            write_json(&out.join(&scenario_rel), &item.scenario)?;
            for (rel, chans) in [
                (&mix_rel, mixture.mixture),
                (&direct_rel, mixture.target_direct),
                (&reverb_rel, mixture.target_reverb),
            ] {
                write_wav(&out.join(rel), &Audio::new(fs, chans)?, cfg.sample_format)?;
            }
            let mut sha256 = BTreeMap::new();
            for rel in [&scenario_rel, &mix_rel, &direct_rel, &reverb_rel] {
                sha256.insert(rel_string(rel), sha256_file(&out.join(rel))?);
            }
            Ok(ManifestItem {
                id: item.id.clone(),
                condition: item.condition.clone(),
                sir_db: item.scenario.sir_db,
                target_doa_deg: item.scenario.target_doa()?.degrees(),
                scenario: scenario_rel,
                mixture: mix_rel,
                target_direct: direct_rel,
                target_reverb: reverb_rel,
                sha256,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        sample_rate_hz: fs,
        num_mics: cfg.geometry()?.num_mics(),
        items,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Mixture, reference-channel clean target, and target direction for one
/// manifest item.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub mixture: Vec<Vec<f64>>,
    pub clean: Vec<f64>,
    pub target_doa: Doa,
}

pub fn load_item(cfg: &ExperimentConfig, dir: &Path, item: &ManifestItem) -> Result<LoadedItem> {
    let mix = read_wav(&dir.join(&item.mixture))?;
    let mics = cfg.geometry()?.num_mics();
    if mix.sample_rate != cfg.stft.sample_rate_hz {
        return Err(Error::Config(format!(
            "{}: sample rate {} Hz, config expects {} Hz",
            item.mixture.display(),
            mix.sample_rate,
            cfg.stft.sample_rate_hz
        )));
    }
    if mix.num_channels() != mics {
        return Err(Error::Config(format!(
            "{}: {} channels, config array has {mics} mics",
            item.mixture.display(),
            mix.num_channels()
        )));
    }
    let target_rel = match cfg.target {
        TargetKind::Direct => &item.target_direct,
        TargetKind::Reverberant => &item.target_reverb,
    };
    let target = read_wav(&dir.join(target_rel))?;
    let clean = target
        .channels
        .into_iter()
        .nth(cfg.reference_channel)
        .ok_or_else(|| Error::Format(format!("{}: missing reference channel", target_rel.display())))?;
    if clean.len() != mix.len() {
        return Err(Error::dims("target length", mix.len(), clean.len()));
    }
    Ok(LoadedItem {
        mixture: mix.channels,
        clean,
        target_doa: Doa::new(item.target_doa_deg)?,
    })
}

static REMOTE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Runs an external program on exported tensors and reads back its
/// weights and residual.
#[derive(Debug, Clone)]
pub struct CommandProvider {
    command: Vec<String>,
    causal: bool,
}

impl CommandProvider {
    pub fn new(command: Vec<String>, causal: bool) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("neural_remote needs provider_options.command".into()));
        }
        Ok(CommandProvider { command, causal })
    }
}

impl WeightProvider for CommandProvider {
    fn name(&self) -> &str {
        "neural_remote"
    }

    fn is_causal(&self) -> bool {
        self.causal
    }

    fn produce(&self, beams: &BeamSet, reference: &Spectrogram) -> Result<(BeamWeights, Residual)> {
        let call = REMOTE_CALLS.fetch_add(1, Ordering::Relaxed);
        let work = std::env::temp_dir().join(format!("nbf-remote-{}-{call}", std::process::id()));
        std::fs::create_dir_all(&work).map_err(|e| Error::file(&work, e))?;
        let paths: Vec<PathBuf> = ["beams", "reference", "weights", "residual"]
            .iter()
            .map(|n| work.join(format!("{n}.nbf")))
            .collect();
        let result = (|| {
            beams.to_tensor().save(&paths[0], Dtype::Complex64)?;
            spectrogram_to_tensor(reference).save(&paths[1], Dtype::Complex64)?;
            let status = Command::new(&self.command[0])
                .args(&self.command[1..])
                .args(&paths)
                .status()
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", self.command[0]))))?;
            if !status.success() {
                return Err(Error::Io(std::io::Error::other(format!("{} exited with {status}", self.command[0]))));
            }
            let p = TensorProvider::load(&paths[2], &paths[3], self.causal)?;
            p.produce(beams, reference)
        })();
        let _ = std::fs::remove_dir_all(&work);
        result
    }
}

/// Directory holding `<id>.weights.nbf` / `<id>.residual.nbf` for
/// `external_tensor`.
pub fn tensor_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.provider_options.tensor_dir.clone().unwrap_or_else(|| out.join("tensors"))
}

fn oracle(kind: ProviderKind, ctx: &OracleContext, bank: &FixedBeamformerBank) -> Option<Box<dyn WeightProvider>> {
    match kind {
        ProviderKind::Passthrough => Some(Box::new(PassthroughProvider)),
        ProviderKind::NearestBeam => Some(Box::new(NearestBeamOracle::new(ctx, bank))),
        ProviderKind::Minnorm => Some(Box::new(MinNormOracle::new(ctx))),
        _ => None,
    }
}

/// Instantiates `kind` for one utterance.
pub fn build_provider(
    cfg: &ExperimentConfig,
    kind: ProviderKind,
    ctx: &OracleContext,
    bank: &FixedBeamformerBank,
    out: &Path,
    id: &str,
) -> Result<Box<dyn WeightProvider>> {
    let opts = &cfg.provider_options;
    let external = |k: ProviderKind| -> Result<Box<dyn WeightProvider>> {
        match k {
            ProviderKind::ExternalTensor => {
                let dir = tensor_dir(cfg, out);
                Ok(Box::new(TensorProvider::load(
                    &dir.join(format!("{id}.weights.nbf")),
                    &dir.join(format!("{id}.residual.nbf")),
                    opts.causal,
                )?))
            }
            ProviderKind::NeuralRemote => Ok(Box::new(CommandProvider::new(opts.command.clone(), opts.causal)?)),
            _ => unreachable!(),
        }
    };
    if let Some(p) = oracle(kind, ctx, bank) {
        return Ok(p);
    }
    match kind {
        ProviderKind::PerfectResidual => {
            let inner = match oracle(opts.wrapped, ctx, bank) {
                Some(p) => p,
                None => external(opts.wrapped)?,
            };
            Ok(Box::new(PerfectResidual::new(inner, ctx)))
        }
        k => external(k),
    }
}

/// Enhances one loaded utterance with `kind`.
pub fn enhance_loaded(
    cfg: &ExperimentConfig,
    kind: ProviderKind,
    bank: &FixedBeamformerBank,
    loaded: &LoadedItem,
    out: &Path,
    id: &str,
) -> Result<Vec<f64>> {
    let spec = analyze(&loaded.mixture, &cfg.stft)?;
    let clean = Stft::new(cfg.stft)?.analyze_channel(&loaded.clean);
    let ctx = OracleContext::new(clean, loaded.target_doa, cfg.delta)?;
    let provider = build_provider(cfg, kind, &ctx, bank, out, id)?;
    let result = run_pipeline(&spec, bank, &*provider, cfg.reference_channel)?;
    if result.waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{id}: enhanced signal is not finite")));
    }
    Ok(result.waveform)
}

pub fn enhanced_dir(out: &Path, kind: ProviderKind) -> PathBuf {
    out.join("enhanced").join(kind.as_str())
}

/// Enhances every manifest item with the configured provider and writes
/// `enhanced/<provider>/<id>.wav`.
pub fn cmd_enhance(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(out)?;
    manifest.verify(out)?;
    let bank = cfg.design_bank()?;
    let dir = enhanced_dir(out, cfg.provider);
    manifest.items.par_iter().try_for_each(|item| {
        let loaded = load_item(cfg, out, item)?;
        let wave = enhance_loaded(cfg, cfg.provider, &bank, &loaded, out, &item.id)?;
        write_wav(
            &dir.join(format!("{}.wav", item.id)),
            &Audio::mono(cfg.stft.sample_rate_hz, wave),
            SampleFormat::Float32,
        )
    })?;
    Ok(dir)
}

/// Scores `enhanced/<provider>` against the configured target and writes
/// `eval/<provider>/metrics.csv` and `summary.json`.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(out)?;
    let enhanced = enhanced_dir(out, cfg.provider);
    let fs = cfg.stft.sample_rate_hz;
    let utterances = manifest
        .items
        .par_iter()
        .map(|item| {
            let loaded = load_item(cfg, out, item)?;
            let est = read_wav(&enhanced.join(format!("{}.wav", item.id)))?;
            let est = est.channels.into_iter().next().unwrap_or_default();
            Ok(UtteranceScore {
                utterance: item.id.clone(),
                condition: item.condition.clone(),
                si_sdr_db: si_sdr(&est, &loaded.clean)?,
                estoi: estoi(&est, &loaded.clean, fs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport { utterances };
    let dir = out.join("eval").join(cfg.provider.as_str());
    write_atomic(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    write_json(&dir.join("summary.json"), &report.aggregate())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedItem {
    pub id: String,
    pub condition: String,
    pub frames: usize,
    pub beams: PathBuf,
    pub reference: PathBuf,
    pub target: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamExport {
    pub look_angles_deg: Vec<f64>,
    pub num_bins: usize,
    pub items: Vec<ExportedItem>,
}

/// Writes `beams/<id>.beams.nbf` `[D][T][F]`, `<id>.reference.nbf` `[T][F]`
/// (reference mic) and `<id>.target.nbf` `[T][F]` (clean target), plus
/// `beams/index.json`.
pub fn cmd_export_beams(cfg: &ExperimentConfig, out: &Path) -> Result<BeamExport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(out)?;
    manifest.verify(out)?;
    let bank = cfg.design_bank()?;
    let stft = Stft::new(cfg.stft)?;
    let dir = out.join("beams");
    let items = manifest
        .items
        .par_iter()
        .map(|item| {
            let loaded = load_item(cfg, out, item)?;
            let spec = analyze(&loaded.mixture, &cfg.stft)?;
            let beams = crate::beamformer::apply_bank(&bank, &spec)?;
            let rel = |k: &str| PathBuf::from(format!("{}.{k}.nbf", item.id));
            let (b, r, t) = (rel("beams"), rel("reference"), rel("target"));
            beams.to_tensor().save(dir.join(&b), Dtype::Complex64)?;
            spectrogram_to_tensor(spec.channel(cfg.reference_channel)).save(dir.join(&r), Dtype::Complex64)?;
            spectrogram_to_tensor(&stft.analyze_channel(&loaded.clean)).save(dir.join(&t), Dtype::Complex64)?;
            Ok(ExportedItem {
                id: item.id.clone(),
                condition: item.condition.clone(),
                frames: spec.num_frames(),
                beams: b,
                reference: r,
                target: t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let export = BeamExport {
        look_angles_deg: bank.look_angles().iter().map(|a| a.degrees()).collect(),
        num_bins: cfg.stft.num_bins(),
        items,
    };
    write_json(&dir.join("index.json"), &export)?;
    Ok(export)
}

/// Loads an exported beam tensor back into a [`BeamSet`].
pub fn load_beams(path: &Path, look_angles_deg: &[f64]) -> Result<BeamSet> {
    let angles = look_angles_deg.iter().map(|&a| Doa::new(a)).collect::<Result<Vec<_>>>()?;
    BeamSet::from_tensor(angles, &Tensor::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            items_per_sir: 2,
            duration_s: 0.5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_validate_and_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"beams": 37, "seed": 4}"#).unwrap();
        assert_eq!(partial.beams, 37);
        assert_eq!(partial.items_per_sir, 150);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"beamz": 3}"#).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.beams = 1;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = ExperimentConfig::default();
        cfg.scenarios.rt60_s = [0.5, 0.2];
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = ExperimentConfig::default();
        cfg.reference_channel = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn provider_names_parse() {
        for k in [
            ProviderKind::Passthrough,
            ProviderKind::NearestBeam,
            ProviderKind::Minnorm,
            ProviderKind::PerfectResidual,
            ProviderKind::ExternalTensor,
            ProviderKind::NeuralRemote,
        ] {
            assert_eq!(k.as_str().parse::<ProviderKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ProviderKind>().is_err());
    }

    #[test]
    fn explicit_positions_array() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"array": {"type": "positions", "positions": [[0,0,0],[0.05,0,0],[0,0.05,0]]}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.geometry().unwrap().num_mics(), 3);
    }

    #[test]
    fn paper_test_set_size() {
        let cfg = ExperimentConfig::default();
        let plan = sample_scenarios(&cfg, 150, 1).unwrap();
        assert_eq!(plan.len(), 750);
        for sir in [-5.0, -2.0, 0.0, 2.0, 5.0] {
            assert_eq!(plan.iter().filter(|p| p.scenario.sir_db == sir).count(), 150);
        }
    }

    #[test]
    fn sampled_scenarios_respect_ranges() {
        let mut cfg = small_config();
        cfg.scenarios.min_separation_deg = 30.0;
        let plan = sample_scenarios(&cfg, 40, 9).unwrap();
        let r = &cfg.scenarios;
        for item in &plan {
            let s = &item.scenario;
            s.validate().unwrap();
            for k in 0..3 {
                assert!(s.room_dims[k] >= r.room_min_m[k] && s.room_dims[k] <= r.room_max_m[k]);
            }
            assert!(s.rt60 >= r.rt60_s[0] && s.rt60 <= r.rt60_s[1]);
            for p in [s.target.position, s.interference.position] {
                let d = crate::array::dist(p, s.array_center);
                assert!((0.5 - 1e-9..=3.0 + 1e-9).contains(&d), "{d}");
            }
            let sep = (s.target_doa().unwrap().degrees() - s.interference_doa()).abs();
            assert!(sep >= 30.0 - 1e-9, "{sep}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_seed_dependent() {
        let cfg = small_config();
        let a = sample_scenarios(&cfg, 3, 5).unwrap();
        let b = sample_scenarios(&cfg, 3, 5).unwrap();
        let c = sample_scenarios(&cfg, 3, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_ranges_pin_values() {
        let mut cfg = small_config();
        cfg.scenarios.room_min_m = [6.0, 5.0, 3.0];
        cfg.scenarios.room_max_m = [6.0, 5.0, 3.0];
        cfg.scenarios.rt60_s = [0.3, 0.3];
        cfg.scenarios.target_azimuth_deg = [60.0, 60.0];
        for item in sample_scenarios(&cfg, 5, 2).unwrap() {
            assert_eq!(item.scenario.room_dims, [6.0, 5.0, 3.0]);
            assert_eq!(item.scenario.rt60, 0.3);
            assert!((item.scenario.target_doa().unwrap().degrees() - 60.0).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_placement_is_reported() {
        let mut cfg = small_config();
        cfg.scenarios.room_min_m = [3.0, 3.0, 2.5];
        cfg.scenarios.room_max_m = [3.0, 3.0, 2.5];
        cfg.scenarios.source_distance_m = [2.9, 3.0];
        cfg.scenarios.target_azimuth_deg = [90.0, 90.0];
        assert!(matches!(sample_scenarios(&cfg, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn design_writes_bank_of_expected_dims() {
        let dir = tempfile::tempdir().unwrap();
        let info = cmd_design(&ExperimentConfig::default(), dir.path()).unwrap();
        assert_eq!(info.dims, vec![19, 257, 9]);
        let file = std::fs::File::open(dir.path().join("bank.nbf")).unwrap();
        let (t, dtype) = Tensor::read_from(file).unwrap();
        assert_eq!(t.dims(), &[19, 257, 9]);
        assert_eq!(dtype, Dtype::Complex64);
    }
}
