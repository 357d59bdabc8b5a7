//! End-to-end steps shared by the command line and the benchmark tests:
//! synthesize or load a dataset, fit both networks, calibrate thresholds,
//! detect and evaluate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::audio::{read_wav, write_wav_f32, AudioBuffer};
use crate::config::RunConfig;
use crate::dataset::{make_training_set, Manifest, ManifestEntry, Normalization, Split, StreamFeatures};
use crate::error::{Error, Result};
use crate::eval::{calibrate_thresholds, calibration_divisors, compute_metrics, threshold_grid, Calibration, MetricsReport, ScoredStream};
use crate::features::{FeatureConfig, GammatoneBank, Standardizer};
use crate::inference::{accumulate_stream, run_detector, ConfidenceTrack, DetectedEvent, ScoreScale, Trigger};
use crate::synth::{synthesize_stream, EventInterval};
use crate::train::{train_dnn1, train_dnn2, EpochLog, ModelBundle};

/// Mono audio with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledAudio {
    pub audio: AudioBuffer,
    pub events: Vec<EventInterval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledAudio>,
    pub test: Vec<LabeledAudio>,
}

/// The configured synthetic benchmark; every stream has its own derived seed.
pub fn synthesize_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.features.validate()?;
    let spec = &cfg.synth;
    let total = spec.train_streams + spec.test_streams;
    let mut streams = Vec::with_capacity(total);
    for i in 0..total {
        let s = synthesize_stream(&spec.stream_spec(i, cfg.features.sample_rate, cfg.seed), &cfg.features)?;
        streams.push(LabeledAudio {
            audio: s.audio,
            events: s.events,
        });
    }
    let test = streams.split_off(spec.train_streams);
    Ok(Dataset {
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        train: streams,
        test,
    })
}

/// Writes 32-bit float WAVs under `audio/` next to the manifest.
pub fn write_dataset(ds: &Dataset, manifest_path: &Path, config_hash: &str) -> Result<Manifest> {
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    std::fs::create_dir_all(root.join("audio"))?;
    let mut entries = Vec::new();
    let sample_rate = ds.train.first().or(ds.test.first()).map_or(0, |s| s.audio.sample_rate);
    for (split, streams) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for (i, s) in streams.iter().enumerate() {
            let rel = Path::new("audio").join(format!("{split:?}_{i:03}.wav").to_lowercase());
            write_wav_f32(&root.join(&rel), &s.audio)?;
            entries.push(ManifestEntry {
                audio: rel,
                split,
                events: s.events.clone(),
            });
        }
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        sample_rate,
        classes: ds.class_names.clone(),
        streams: entries,
    };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let load = |split| -> Result<Vec<LabeledAudio>> {
        manifest
            .split(split)
            .map(|entry| {
                let audio = read_wav(&Manifest::audio_path(manifest_path, entry))?;
                if audio.sample_rate != manifest.sample_rate {
                    return Err(Error::input(format!(
                        "{} is {} Hz but the manifest declares {} Hz",
                        entry.audio.display(),
                        audio.sample_rate,
                        manifest.sample_rate
                    )));
                }
                Ok(LabeledAudio {
                    audio,
                    events: entry.events.clone(),
                })
            })
            .collect()
    };
    Ok(Dataset {
        class_names: manifest.classes.clone(),
        train: load(Split::Train)?,
        test: load(Split::Test)?,
    })
}

fn raw_features(cfg: &FeatureConfig, streams: &[LabeledAudio]) -> Result<Vec<Array2<f64>>> {
    let bank = GammatoneBank::new(*cfg)?;
    streams.iter().map(|s| bank.framewise(&s.audio)).collect()
}

/// Fits the feature standardizer, trains both networks and derives the
/// per-class score divisors from the training streams.
pub fn fit_model(
    cfg: &RunConfig,
    ds: &Dataset,
    config_hash: &str,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelBundle, Vec<EpochLog>)> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::config("dataset has no training streams"));
    }
    let mut framewise = raw_features(&cfg.features, &ds.train)?;
    let standardizer = Standardizer::fit(framewise.iter().map(|f| f.view()))?;
    for f in &mut framewise {
        standardizer.apply(f);
    }
    let streams = framewise
        .into_iter()
        .zip(&ds.train)
        .map(|(framewise, s)| StreamFeatures {
            framewise,
            events: s.events.clone(),
        })
        .collect();
    let set = make_training_set(streams, ds.class_names.len(), Normalization::Compute)?;
    log::info!(
        "training set: {} frames ({:.1}% foreground), {} event frames",
        set.dnn1.len(),
        100.0 * set.foreground_fraction(),
        set.dnn2.len()
    );
    let (dnn1, mut logs) = train_dnn1(&set, &cfg.train, &cfg.weighted_loss, cfg.seed, &mut on_epoch)?;
    let (dnn2, logs2) = train_dnn2(&set, &cfg.train, &cfg.multitask_loss, cfg.seed, &mut on_epoch)?;
    logs.extend(logs2);

    let mut bundle = ModelBundle {
        class_names: ds.class_names.clone(),
        features: cfg.features,
        standardizer,
        normalization: set.normalization,
        score_divisors: vec![1.0; ds.class_names.len()],
        dnn1,
        dnn2,
        config_hash: config_hash.to_string(),
    };
    let mut tracks = Vec::with_capacity(set.streams.len());
    for s in &set.streams {
        tracks.push(accumulate_stream(&bundle.predict(s.framewise.view())?)?);
    }
    bundle.score_divisors = calibration_divisors(&tracks, bundle.classes()).divisors;
    Ok((bundle, logs))
}

/// Network outputs for each stream under a trained model.
pub fn score_streams(bundle: &ModelBundle, streams: &[LabeledAudio]) -> Result<Vec<ScoredStream>> {
    let mut framewise = raw_features(&bundle.features, streams)?;
    framewise
        .iter_mut()
        .zip(streams)
        .map(|(f, s)| {
            bundle.standardizer.apply(f);
            Ok(ScoredStream {
                outputs: bundle.predict(f.view())?,
                truth: s.events.clone(),
            })
        })
        .collect()
}

pub fn model_scale(bundle: &ModelBundle) -> ScoreScale {
    ScoreScale {
        divisors: bundle.score_divisors.clone(),
    }
}

/// Threshold selection on the training streams.
pub fn calibrate(cfg: &RunConfig, bundle: &ModelBundle, train: &[ScoredStream], config_hash: &str) -> Result<Calibration> {
    let tracks: Vec<(ConfidenceTrack, Vec<EventInterval>)> = train
        .iter()
        .map(|s| Ok((accumulate_stream(&s.outputs)?, s.truth.clone())))
        .collect::<Result<_>>()?;
    calibrate_thresholds(
        &tracks,
        &model_scale(bundle),
        cfg.calibration.folds,
        &threshold_grid(cfg.calibration.grid_step)?,
        &bundle.class_names,
        config_hash,
    )
}

/// Streaming detection results for one stream.
#[derive(Debug, Clone)]
pub struct StreamDetections {
    pub detections: Vec<DetectedEvent>,
    pub triggers: Vec<Trigger>,
    pub track: ConfidenceTrack,
}

pub fn detect(streams: &[ScoredStream], calibration: &Calibration) -> Result<Vec<StreamDetections>> {
    streams
        .iter()
        .map(|s| {
            let (state, triggers) = run_detector(&s.outputs, &calibration.thresholds, &calibration.scale, |_| true)?;
            Ok(StreamDetections {
                detections: state.detections()?,
                triggers,
                track: state.into_track(),
            })
        })
        .collect()
}

pub fn evaluate(
    streams: &[ScoredStream],
    detections: &[StreamDetections],
    class_names: &[String],
    config_hash: &str,
) -> MetricsReport {
    compute_metrics(
        streams
            .iter()
            .zip(detections)
            .map(|(s, d)| (&d.detections[..], &s.truth[..])),
        class_names,
        config_hash,
    )
}

/// `stream_id,class,onset_frame,offset_frame,peak_score,trigger_frame`.
pub fn write_detections_csv(
    path: &Path,
    detections: &[StreamDetections],
    class_names: &[String],
    config_hash: &str,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash {config_hash}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["stream_id", "class", "onset_frame", "offset_frame", "peak_score", "trigger_frame"])?;
    for (stream, d) in detections.iter().enumerate() {
        let mut events = d.detections.clone();
        events.sort_by_key(|e| (e.onset, e.class_id));
        for e in events {
            csv.write_record([
                stream.to_string(),
                class_names[e.class_id].clone(),
                e.onset.to_string(),
                e.offset.to_string(),
                e.peak.to_string(),
                e.trigger_frame.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// `n,class,score` with scores normalized by the divisors; zero rows omitted.
pub fn write_track_csv(
    path: &Path,
    track: &ConfidenceTrack,
    scale: &ScoreScale,
    class_names: &[String],
    config_hash: &str,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash {config_hash}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["n", "class", "score"])?;
    for n in 0..track.len() {
        for (c, name) in class_names.iter().enumerate() {
            let raw = track.score(c, n);
            if raw > 0.0 {
                csv.write_record([n.to_string(), name.clone(), scale.normalize(c, raw).to_string()])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}
