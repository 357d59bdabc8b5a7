//! `earlydet` command line: synthesize a benchmark, train, calibrate, detect,
//! evaluate and plot online curves from one JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use earlydet::audio::read_wav;
use earlydet::config::RunConfig;
use earlydet::eval::{curve_svg, online_curves, write_curves_csv, Calibration, ScoredStream};
use earlydet::gradcheck::{run_suite, DEFAULT_STEP};
use earlydet::pipeline::{
    calibrate, detect, evaluate, fit_model, load_dataset, score_streams, synthesize_dataset, write_dataset,
    write_detections_csv, write_track_csv, LabeledAudio,
};
use earlydet::train::{write_training_log, ModelBundle};
use earlydet::Error;

#[derive(Debug, Parser)]
#[command(name = "earlydet", version, about = "Early audio-event detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; every key defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.dnn1_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `paths.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic benchmark audio and its manifest.
    Synth,
    /// Train both networks on the training split and save the checkpoint.
    Train,
    /// Choose per-class thresholds on the training split.
    Calibrate,
    /// Run the streaming detector on the test split or on one WAV file.
    Detect {
        /// Mono WAV to scan instead of the test split.
        #[arg(long)]
        audio: Option<PathBuf>,
    },
    /// Event-wise metrics on the test split (calibrates first if needed).
    Evaluate,
    /// Online F1/ER against observed event frames, per class.
    Curves,
    /// Finite-difference check of both loss gradients.
    CheckGradients {
        /// Number of random problems to check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = resolve_config(&cli)?;
    let hash = cfg.hash();
    log::info!("config hash {hash}, seed {}", cfg.seed);
    log::info!("resolved config:\n{}", cfg.to_pretty_json());
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let out = cfg.paths.out_dir.clone();

    match cli.command {
        Command::Synth => {
            let ds = synthesize_dataset(&cfg)?;
            let path = cfg.paths.manifest_path();
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let manifest = write_dataset(&ds, &path, &hash)?;
            log::info!("wrote {} streams and {}", manifest.streams.len(), path.display());
        }
        Command::Train => {
            let ds = load_dataset(&cfg.paths.manifest_path())?;
            let (bundle, logs) = fit_model(&cfg, &ds, &hash, |_| {})?;
            let model = cfg.paths.model_path();
            if let Some(dir) = model.parent() {
                std::fs::create_dir_all(dir)?;
            }
            bundle.save(&model)?;
            write_training_log(&out.join("training_log.csv"), &logs, &hash)?;
            log::info!("saved {}", model.display());
        }
        Command::Calibrate => {
            let bundle = load_model(&cfg, &hash)?;
            run_calibration(&cfg, &bundle, &hash)?;
        }
        Command::Detect { audio } => {
            let bundle = load_model(&cfg, &hash)?;
            let calibration = Calibration::read_json(&cfg.paths.thresholds_path())?;
            let streams = match audio {
                Some(path) => vec![LabeledAudio {
                    audio: read_wav(&path)?,
                    events: Vec::new(),
                }],
                None => load_dataset(&cfg.paths.manifest_path())?.test,
            };
            let scored = score_streams(&bundle, &streams)?;
            let results = detect(&scored, &calibration)?;
            write_detections_csv(&out.join("detections.csv"), &results, &bundle.class_names, &hash)?;
            let tracks = out.join("tracks");
            std::fs::create_dir_all(&tracks)?;
            for (i, r) in results.iter().enumerate() {
                let path = tracks.join(format!("stream_{i:03}.csv"));
                write_track_csv(&path, &r.track, &calibration.scale, &bundle.class_names, &hash)?;
            }
            let events: usize = results.iter().map(|r| r.detections.len()).sum();
            log::info!("{events} detections in {} streams", results.len());
        }
        Command::Evaluate => {
            let bundle = load_model(&cfg, &hash)?;
            let calibration = thresholds_or_calibrate(&cfg, &bundle, &hash)?;
            let test = scored_test(&cfg, &bundle)?;
            let results = detect(&test, &calibration)?;
            let report = evaluate(&test, &results, &bundle.class_names, &hash);
            report.write_json(&out.join("metrics.json"))?;
            report.write_csv(&out.join("metrics.csv"))?;
            log::info!(
                "overall F1 {:.3}, ER {}",
                report.overall.f1,
                report.overall.er.map_or("n/a".into(), |e| format!("{e:.3}"))
            );
        }
        Command::Curves => {
            let bundle = load_model(&cfg, &hash)?;
            let calibration = thresholds_or_calibrate(&cfg, &bundle, &hash)?;
            let test = scored_test(&cfg, &bundle)?;
            let curves = online_curves(
                &test,
                &calibration.thresholds,
                &calibration.scale,
                &bundle.class_names,
                cfg.evaluation.k_step,
            )?;
            write_curves_csv(&out.join("curves.csv"), &curves, &hash)?;
            if cfg.evaluation.write_svg {
                for c in &curves {
                    std::fs::write(out.join(format!("curve_{}.svg", c.name)), curve_svg(c, &hash))?;
                }
            }
            for c in &curves {
                log::info!(
                    "{}: offline F1 {:.3}, 95% of it after {:?} of median {} frames",
                    c.name,
                    c.offline.f1,
                    c.first_k_reaching(0.95),
                    c.median_length
                );
            }
        }
        Command::CheckGradients { seeds } => {
            let report = run_suite(0..seeds, DEFAULT_STEP)?;
            let path = out.join("gradient_check.json");
            let doc = serde_json::json!({ "config_hash": hash, "report": report });
            std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
            log::info!(
                "max relative error {:.3e} over {} parameters (tolerance {:.0e})",
                report.max_rel_error,
                report.weighted.checked + report.multitask.checked,
                report.tolerance
            );
            if !report.passed {
                eprintln!("gradient check failed; see {}", path.display());
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_model(cfg: &RunConfig, hash: &str) -> Result<ModelBundle, Error> {
    let bundle = ModelBundle::load(&cfg.paths.model_path())?;
    if bundle.config_hash != hash {
        log::warn!("model was trained under config {}; current config is {hash}", bundle.config_hash);
    }
    Ok(bundle)
}

fn scored_test(cfg: &RunConfig, bundle: &ModelBundle) -> Result<Vec<ScoredStream>, Error> {
    let ds = load_dataset(&cfg.paths.manifest_path())?;
    check_classes(&ds.class_names, bundle)?;
    score_streams(bundle, &ds.test)
}

fn check_classes(names: &[String], bundle: &ModelBundle) -> Result<(), Error> {
    if names != bundle.class_names.as_slice() {
        return Err(Error::Config(format!(
            "dataset classes {names:?} differ from model classes {:?}",
            bundle.class_names
        )));
    }
    Ok(())
}

fn run_calibration(cfg: &RunConfig, bundle: &ModelBundle, hash: &str) -> Result<Calibration, Error> {
    let ds = load_dataset(&cfg.paths.manifest_path())?;
    check_classes(&ds.class_names, bundle)?;
    let train = score_streams(bundle, &ds.train)?;
    let calibration = calibrate(cfg, bundle, &train, hash)?;
    let path = cfg.paths.thresholds_path();
    calibration.write_json(&path)?;
    for (name, beta) in bundle.class_names.iter().zip(&calibration.thresholds.betas) {
        log::info!("threshold {name}: {beta}");
    }
    log::info!("wrote {}", path.display());
    Ok(calibration)
}

fn thresholds_or_calibrate(cfg: &RunConfig, bundle: &ModelBundle, hash: &str) -> Result<Calibration, Error> {
    let path: &Path = &cfg.paths.thresholds_path();
    if path.exists() {
        Calibration::read_json(path)
    } else {
        log::info!("{} not found; calibrating", path.display());
        run_calibration(cfg, bundle, hash)
    }
}
