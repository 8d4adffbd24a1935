use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nbf::pipeline::{self, ExperimentConfig, ProviderKind, DATA_DIR_ENV};
use nbf::Result;

#[derive(Parser)]
#[command(name = "nbf", version, about = "Multi-beam speech enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Design the fixed beamformer bank and write bank.nbf / bank.json.
    Design(Common),
    /// Sample scenarios and simulate the multichannel dataset.
    Simulate(Common),
    /// Enhance every dataset item with a weight provider.
    Enhance(Common),
    /// Score enhanced audio (SI-SDR, ESTOI).
    Eval(Common),
    /// Export beam, reference and target tensors for external estimators.
    ExportBeams(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset / output directory [default: $NBF_DATA_DIR or ./nbf-data].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    provider: Option<String>,
    /// Number of beams D.
    #[arg(long)]
    beams: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &self.provider {
            cfg.provider = p.parse::<ProviderKind>()?;
        }
        if let Some(d) = self.beams {
            cfg.beams = d;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("nbf-data"));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<String> {
    let (common, f): (&Common, fn(&ExperimentConfig, &std::path::Path) -> Result<String>) = match &cli.command {
        Cmd::Design(c) => (c, |cfg, out| {
            let info = pipeline::cmd_design(cfg, out)?;
            Ok(format!("bank {:?} -> {}", info.dims, out.join("bank.nbf").display()))
        }),
        Cmd::Simulate(c) => (c, |cfg, out| {
            let m = pipeline::cmd_simulate(cfg, out)?;
            Ok(format!("{} items -> {}", m.items.len(), out.join(pipeline::MANIFEST_FILE).display()))
        }),
        Cmd::Enhance(c) => (c, |cfg, out| {
            let dir = pipeline::cmd_enhance(cfg, out)?;
            Ok(format!("{} -> {}", cfg.provider, dir.display()))
        }),
        Cmd::Eval(c) => (c, |cfg, out| {
            let report = pipeline::cmd_eval(cfg, out)?;
            let mut lines = vec![format!("{:<12} {:>5} {:>10} {:>8}", "condition", "n", "si_sdr_db", "estoi")];
            for (cond, s) in report.aggregate() {
                lines.push(format!("{cond:<12} {:>5} {:>10.3} {:>8.4}", s.count, s.mean_si_sdr_db, s.mean_estoi));
            }
            Ok(lines.join("\n"))
        }),
        Cmd::ExportBeams(c) => (c, |cfg, out| {
            let e = pipeline::cmd_export_beams(cfg, out)?;
            Ok(format!("{} items, {} beams -> {}", e.items.len(), e.look_angles_deg.len(), out.join("beams").display()))
        }),
    };
    let (cfg, out) = common.resolve()?;
    pipeline::with_jobs(common.jobs, || f(&cfg, &out))?
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nbf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
