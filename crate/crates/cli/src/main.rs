use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mdk_core::datagen::{generate_dataset, read_dataset, split_episodes, write_dataset, InputLibraries, NormStats};
use mdk_core::eval::{
    eval_open_loop, file_hash, git_describe, hardware_string, is_log_csv, read_log_csv, read_report, summary_text,
    tracking_stats, write_overlay_csv, write_report, Provenance,
};
use mdk_core::koopman::{train, Checkpoint, CheckpointConfig, TrainConfig, CHECKPOINT_SCHEMA};
use mdk_core::lti::{LtiSet, DEFAULT_RIDGE, LTI_SCHEMA};
use mdk_core::mpc::{closed_loop, write_log_csv, ControlModel, DoubleLaneChange, MpcConfig};
use mdk_core::plant::PlantParams;

#[derive(Parser)]
#[command(name = "mdk", version, about = "Deep Koopman vehicle models and lifted-space MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll random input profiles through the plant and write segmented NDJSON.
    Datagen {
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Plant parameters (key = value); defaults when omitted.
        #[arg(long)]
        plant_config: Option<PathBuf>,
    },
    /// Train the encoder and lifted linear model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of batch iterations.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML file overriding training hyperparameters.
        #[arg(long)]
        hyper: Option<PathBuf>,
    },
    /// Fit one ridge least-squares linear model per road curvature.
    IdentifyLti {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
    },
    /// Run a closed-loop scenario with either model and log every step.
    MpcSim {
        /// Koopman checkpoint or LTI model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "dlc")]
        scenario: String,
        #[arg(long)]
        plant_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TOML file overriding controller settings.
        #[arg(long)]
        mpc_config: Option<PathBuf>,
    },
    /// Open-loop prediction error of both models on the held-out episodes.
    EvalOpenloop {
        #[arg(long)]
        koopman: PathBuf,
        #[arg(long)]
        lti: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect report files and closed-loop logs in a directory into a summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        summary: PathBuf,
    },
}

fn plant_params(path: Option<&Path>) -> Result<PlantParams> {
    match path {
        Some(p) => PlantParams::load(p).with_context(|| format!("loading plant config {}", p.display())),
        None => Ok(PlantParams::default()),
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn schema_of(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v.get("schema").and_then(|s| s.as_str()).unwrap_or_default().to_string())
}

fn datagen(episodes: usize, seed: u64, out: &Path, plant_config: Option<&Path>) -> Result<()> {
    let params = plant_params(plant_config)?;
    let ds = generate_dataset(episodes, &InputLibraries::default(), &params, seed)?;
    write_dataset(&ds, out)?;
    log::info!(
        "{} segments from {} episodes ({} discarded) -> {}",
        ds.segments.len(),
        episodes,
        ds.header.episodes_discarded.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(data: &Path, out: &Path, max_epochs: Option<usize>, seed: u64, hyper: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = match hyper {
        Some(p) => load_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = max_epochs {
        cfg.max_iterations = n;
    }
    let ds = read_dataset(data)?;
    let (train_raw, test_raw) = split_episodes(&ds, cfg.train_fraction, ds.header.seed)?;
    let norm = NormStats::fit(&train_raw)?;
    let train_set: Vec<_> = train_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    let test_set: Vec<_> = test_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    let mut test_episodes: Vec<u64> = test_raw.iter().map(|s| s.episode).collect();
    test_episodes.dedup();
    log::info!("{} train / {} test segments", train_set.len(), test_set.len());

    let outcome = train(&train_set, &test_set, norm, &cfg, seed)?;
    for e in &outcome.evaluations {
        log::info!("iteration {:>6} lr {:.3e} test total {:.6e} msl {:.6e}", e.iteration, e.lr, e.test.total, e.test.msl);
    }
    let config = CheckpointConfig {
        train: cfg,
        dataset_seed: ds.header.seed,
        plant_config_hash: ds.header.plant_config_hash.clone(),
        normalized_inputs: vec!["throttle".into(), "brake".into(), "steering".into(), "curvature".into()],
        test_episodes,
    };
    let ck = Checkpoint::new(&outcome.best, config, seed, outcome.best_iteration, outcome.best_test_loss);
    ck.save(out)?;
    log::info!("best test loss {:.6e} at iteration {} -> {}", outcome.best_test_loss, outcome.best_iteration, out.display());
    Ok(())
}

fn identify_lti(data: &Path, out: &Path, ridge: f64) -> Result<()> {
    let ds = read_dataset(data)?;
    let (train_raw, _) = split_episodes(&ds, TrainConfig::default().train_fraction, ds.header.seed)?;
    let norm = NormStats::fit(&train_raw)?;
    let mut set = LtiSet::fit(&train_raw, &norm, ridge)?;
    set.dataset_seed = ds.header.seed;
    set.plant_config_hash = ds.header.plant_config_hash.clone();
    set.save(out)?;
    log::info!("{} curvature models -> {}", set.models.len(), out.display());
    Ok(())
}

fn load_control_model(path: &Path) -> Result<ControlModel> {
    let schema = schema_of(path)?;
    if schema == CHECKPOINT_SCHEMA {
        Ok(ControlModel::Koopman(Checkpoint::load(path)?.model()?))
    } else if schema == LTI_SCHEMA {
        Ok(ControlModel::Lti(LtiSet::load(path)?))
    } else {
        bail!("{}: unknown model schema {schema:?}", path.display())
    }
}

fn mpc_sim(model: &Path, scenario: &str, plant_config: Option<&Path>, out: &Path, mpc_config: Option<&Path>) -> Result<()> {
    if scenario != "dlc" {
        bail!("unknown scenario {scenario:?} (available: dlc)");
    }
    let params = plant_params(plant_config)?;
    let cfg: MpcConfig = match mpc_config {
        Some(p) => load_toml(p)?,
        None => MpcConfig::default(),
    };
    let scenario = DoubleLaneChange::default();
    let log = closed_loop(load_control_model(model)?, &params, &scenario, &cfg)?;
    write_log_csv(&log, out)?;
    let stats = tracking_stats(&log, scenario.steps())?;
    log::info!(
        "{}: {} steps, e_y rms {:.4} m max {:.4} m, median solve {:.3} ms",
        stats.controller,
        stats.steps,
        stats.rms_e_y,
        stats.max_e_y,
        stats.solve_median_ms
    );
    if let Some(f) = &log.failure {
        log::warn!("{f}");
    }
    Ok(())
}

fn eval_openloop(koopman: &Path, lti: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(koopman)?;
    let model = ck.model()?;
    let lti_set = LtiSet::load(lti)?;
    let ds = read_dataset(data)?;
    let held = &ck.config.test_episodes;
    if held.is_empty() {
        bail!("{} lists no held-out episodes", koopman.display());
    }
    let test: Vec<_> = ds.segments.iter().filter(|s| held.binary_search(&s.episode).is_ok()).cloned().collect();
    let report = eval_open_loop(&model, &lti_set, &test, held)?;

    let mut provenance = Provenance::default();
    provenance.set("dataset_seed", ds.header.seed);
    provenance.set("plant_config_hash", &ds.header.plant_config_hash);
    provenance.set("koopman_sha256", file_hash(koopman)?);
    provenance.set("lti_sha256", file_hash(lti)?);
    provenance.set("koopman_iteration", ck.iteration);
    provenance.set("git_describe", git_describe());
    provenance.set("hardware", hardware_string());

    let mut existing = read_report(out).unwrap_or_default();
    existing.provenance = provenance;
    existing.open_loop = Some(report);
    write_report(&existing, out)?;
    write_overlay_csv(&model, &lti_set, &test[0], &out.join("openloop_overlay.csv"))?;
    log::info!("open-loop report for {} trajectories -> {}", test.len(), out.display());
    Ok(())
}

fn report(input: &Path, summary: &Path) -> Result<()> {
    let mut report = read_report(input)?;
    let scenario = DoubleLaneChange::default();
    let mut logs: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && is_log_csv(p))
        .collect();
    logs.sort();
    if !logs.is_empty() {
        report.closed_loop = logs
            .iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let log = read_log_csv(p, &name, &scenario)?;
                tracking_stats(&log, scenario.steps())
            })
            .collect::<Result<_, _>>()?;
    }
    if report.provenance.get("hardware").is_none() {
        report.provenance.set("hardware", hardware_string());
    }
    if report.provenance.get("git_describe").is_none() {
        report.provenance.set("git_describe", git_describe());
    }
    write_report(&report, input)?;
    std::fs::write(summary, summary_text(&report)).with_context(|| format!("writing {}", summary.display()))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen { episodes, seed, out, plant_config } => datagen(episodes, seed, &out, plant_config.as_deref()),
        Command::Train { data, out, max_epochs, seed, hyper } => train_cmd(&data, &out, max_epochs, seed, hyper.as_deref()),
        Command::IdentifyLti { data, out, ridge } => identify_lti(&data, &out, ridge),
        Command::MpcSim { model, scenario, plant_config, out, mpc_config } => {
            mpc_sim(&model, &scenario, plant_config.as_deref(), &out, mpc_config.as_deref())
        }
        Command::EvalOpenloop { koopman, lti, data, out } => eval_openloop(&koopman, &lti, &data, &out),
        Command::Report { input, summary } => report(&input, &summary),
    }
}
