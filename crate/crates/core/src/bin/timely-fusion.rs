use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use timely_fusion::calibration::calibrate_experiment;
use timely_fusion::config::{seed_set_hash, ExperimentConfig};
use timely_fusion::detector::{CompensationMode, DetectorParams};
use timely_fusion::experiment::stream_setup;
use timely_fusion::pairing::{lidar_file_name, radar_file_name, stream_fusion, ManifestEntry};
use timely_fusion::scene::random_scenario;
use timely_fusion::selfcheck;
use timely_fusion::sensors::{scan_lidar, scan_radar, Sweep};
use timely_fusion::sweep::{baseline_of, offset_sweep, Variant, TOOL_VERSION};
use timely_fusion::{Error, Result};

/// Timely fusion of asynchronous surround Lidar and Radar sweeps.
#[derive(Parser)]
#[command(name = "timely-fusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its sweep frames and fusion manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Scenario seed; defaults to `experiment.seed_base`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit detector parameters on the training seeds and write them as JSON.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: CompensationMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every variant at every offset; writes `sweep.csv` and `sweep.json`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Calibrated parameter files, one per non-`none` variant in the config.
        #[arg(long)]
        params: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the geometry, metric, scheduler and reconstruction oracles.
    Selfcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<CompensationMode, String> {
    match s {
        "none" => Ok(CompensationMode::None),
        "per_offset" => Ok(CompensationMode::PerOffset),
        "mixed" => Ok(CompensationMode::Mixed),
        _ => Err(format!("unknown mode `{s}` (none, per_offset, mixed)")),
    }
}

#[derive(Serialize)]
struct RunMetadata {
    tool_version: &'static str,
    config_sha256: String,
    seeds: Vec<u64>,
    seed_set_hash: String,
}

impl RunMetadata {
    fn new(config_sha256: &str, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: TOOL_VERSION,
            config_sha256: config_sha256.to_string(),
            seed_set_hash: seed_set_hash(&seeds),
            seeds,
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    metadata: RunMetadata,
    horizon_ns: i64,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ParamsFile<'a> {
    metadata: RunMetadata,
    #[serde(flatten)]
    params: &'a DetectorParams,
}

enum Failure {
    Run(Error),
    SelfCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn simulate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let (cfg, sha) = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.experiment.seed_base);
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let scenario = random_scenario(&cfg.scenario, seed)?;
    let setup = stream_setup(&cfg.sensors)?;
    let horizon = cfg.horizon_ns();
    let sets = stream_fusion(&scenario, &setup, &cfg.policy, horizon)?;
    create_dir(&out)?;
    write(&out.join("scenario.json"), scenario.to_json()? + "\n")?;

    let mut lidar = BTreeSet::new();
    let mut radar = BTreeSet::new();
    for set in &sets {
        for pair in std::iter::once(&set.current).chain(&set.history) {
            lidar.extend(pair.lidar.sources.iter().map(|s| s.index));
            radar.insert(pair.radar.sweep_index);
            if pair.aligned {
                radar.insert(pair.radar.sweep_index + 1);
            }
        }
    }
    if let Some(last) = setup.lidar.latest_completed(horizon) {
        lidar.extend(setup.lidar.first_index()..=last);
    }
    if let Some(last) = setup.radar.latest_completed(horizon) {
        radar.extend(setup.radar.first_index()..=last);
    }
    for i in lidar {
        let frame = scan_lidar(&scenario, &Sweep::of(&setup.lidar, i), &setup.lidar_params)?;
        write(&out.join(lidar_file_name(i)), frame.encode())?;
    }
    for i in radar {
        let frame = scan_radar(&scenario, &Sweep::of(&setup.radar, i), &setup.radar_params)?;
        write(&out.join(radar_file_name(i)), frame.encode())?;
    }
    let manifest = Manifest {
        metadata: RunMetadata::new(&sha, vec![seed]),
        horizon_ns: horizon,
        entries: sets.iter().map(ManifestEntry::of).collect(),
    };
    write(&out.join("manifest.json"), json(&manifest)?)?;
    println!("{} fusion inputs written to {}", sets.len(), out.display());
    Ok(())
}

fn calibrate(config: &Path, mode: CompensationMode, out: &Path) -> Result<()> {
    let (cfg, sha) = ExperimentConfig::load(config)?;
    let (params, report) = calibrate_experiment(&cfg, mode)?;
    print!("{}", report.table());
    let file = ParamsFile {
        metadata: RunMetadata::new(&sha, cfg.train_seeds()),
        params: &params,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, json(&file)?)
}

fn load_params(path: &Path) -> Result<DetectorParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("metadata");
    }
    let params = DetectorParams::from_json(&v.to_string()).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(params)
}

fn sweep(config: &Path, params: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let (cfg, sha) = ExperimentConfig::load(config)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let loaded = params.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
    let mut variants = Vec::new();
    for mode in &cfg.experiment.variants {
        let found = loaded.iter().find(|p| p.mode == *mode);
        match (mode, found) {
            (CompensationMode::None, p) => {
                let base = p.cloned().unwrap_or_else(|| baseline_of(loaded.first().unwrap_or(&cfg.detector)));
                variants.push(Variant::new(base));
            }
            (CompensationMode::PerOffset, Some(p)) if cfg.experiment.cross_branches => {
                variants.extend(Variant::with_branches(p.clone()))
            }
            (_, Some(p)) => variants.push(Variant::new(p.clone())),
            (m, None) => {
                return Err(Error::Parameter(format!(
                    "variant `{}` needs a --params file calibrated in that mode",
                    m.as_str()
                )))
            }
        }
    }
    let report = offset_sweep(&cfg, &sha, &variants)?;
    create_dir(&out)?;
    write(&out.join("sweep.csv"), report.to_csv())?;
    write(&out.join("sweep.json"), report.to_json()? + "\n")?;
    for v in &variants {
        let aps: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.variant == v.name)
            .map(|r| format!("{:.3}", r.ap_at(0.8).unwrap_or(f64::NAN)))
            .collect();
        println!("{:<12} AP@0.8 by offset: {}", v.name, aps.join(" "));
    }
    Ok(())
}

fn selfcheck_cmd(config: Option<&Path>) -> std::result::Result<(), Failure> {
    let sensors = match config {
        Some(p) => ExperimentConfig::load(p)?.0.sensors,
        None => Default::default(),
    };
    let outcomes = selfcheck::run_all(&sensors)?;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if outcomes.iter().all(|o| o.passed) {
        Ok(())
    } else {
        Err(Failure::SelfCheck)
    }
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var("TF_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Parameter(format!("TF_WORKERS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Parameter(e.to_string()))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    configure_workers()?;
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(&config, seed, out)?,
        Command::Calibrate { config, mode, out } => calibrate(&config, mode, &out)?,
        Command::Sweep { config, params, out } => sweep(&config, &params, out)?,
        Command::Selfcheck { config } => selfcheck_cmd(config.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::SelfCheck) => ExitCode::from(3),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
