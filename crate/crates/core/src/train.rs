//! Mini-batch training of both networks and the model checkpoint format.
//!
//! Both networks see the same context-stacked features. Training is
//! single-threaded and fully determined by the seed: it drives the
//! per-epoch shuffles and the dropout masks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::features::{
    stack_rows, DistancePair, FeatureConfig, NormalizationConstants, Standardizer, BANDS, FEATURE_DIM,
};
use crate::header::{read_f64s, write_f64s, write_header, Header};
use crate::inference::FrameOutputs;
use crate::losses::{multitask_loss, weighted_loss, LossReport, MultitaskLossConfig, WeightedLossConfig};
use crate::nn::{
    AdamConfig, AdamState, Head, Mode, NetworkLayout, NetworkParams, DEFAULT_LEARNING_RATE, DNN1_DROPOUT,
    DNN2_DROPOUT,
};

/// Arithmetic used for the matrix products of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f32` products; parameters and optimizer state stay `f64`.
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dnn1_epochs: usize,
    pub dnn2_epochs: usize,
    pub dnn1_batch: usize,
    pub dnn2_batch: usize,
    pub learning_rate: f64,
    pub dnn1_dropout: f64,
    pub dnn2_dropout: f64,
    pub adam: AdamConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dnn1_epochs: 25,
            dnn2_epochs: 25,
            dnn1_batch: 256,
            dnn2_batch: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            dnn1_dropout: DNN1_DROPOUT,
            dnn2_dropout: DNN2_DROPOUT,
            adam: AdamConfig::default(),
            precision: Precision::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dnn1_batch == 0 || self.dnn2_batch == 0 {
            return Err(Error::config("train batch sizes must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be > 0"));
        }
        for (name, p) in [("dnn1_dropout", self.dnn1_dropout), ("dnn2_dropout", self.dnn2_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("train.adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Batch-size-weighted mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub network: &'static str,
    pub epoch: usize,
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    pub wall_s: f64,
}

/// Generic loop: shuffle, batch, loss + gradients, Adam step.
#[allow(clippy::too_many_arguments)]
fn fit<B>(
    params: &mut NetworkParams,
    network: &'static str,
    examples: usize,
    epochs: usize,
    batch_size: usize,
    cfg: &TrainConfig,
    seed: u64,
    make_batch: impl Fn(&[usize]) -> B,
    loss: impl Fn(&B, &NetworkParams, Mode<'_>) -> Result<LossReport>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if examples == 0 {
        return Err(Error::input(format!("{network}: no training examples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(params, cfg.adam);
    let mut order: Vec<usize> = (0..examples).collect();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut components: Vec<(&'static str, f64)> = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch = make_batch(chunk);
            let mode = match cfg.precision {
                Precision::Single => Mode::TrainSingle(&mut rng),
                Precision::Double => Mode::Train(&mut rng),
            };
            let report = loss(&batch, params, mode)?;
            adam.step(params, &report.gradients, cfg.learning_rate)?;
            let share = chunk.len() as f64 / examples as f64;
            total += share * report.total;
            if components.is_empty() {
                components = report.terms.iter().map(|t| (t.name, 0.0)).collect();
            }
            for (slot, term) in components.iter_mut().zip(&report.terms) {
                slot.1 += share * term.value;
            }
        }
        let log = EpochLog {
            network,
            epoch,
            total,
            components,
            wall_s: start.elapsed().as_secs_f64(),
        };
        log::info!("{network} epoch {epoch}/{epochs}: loss {:.5} ({:.1} s)", log.total, log.wall_s);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Trains the foreground/background network with the weighted loss.
pub fn train_dnn1(
    set: &TrainingSet,
    cfg: &TrainConfig,
    loss_cfg: &WeightedLossConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(NetworkParams, Vec<EpochLog>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut params = NetworkParams::init(NetworkLayout::dnn1(), cfg.dnn1_dropout, seed)?;
    let logs = fit(
        &mut params,
        "dnn1",
        set.dnn1.len(),
        cfg.dnn1_epochs,
        cfg.dnn1_batch,
        cfg,
        seed ^ 0x5151,
        |idx| set.weighted_batch(idx),
        |b, p, mode| weighted_loss(b, p, loss_cfg, mode),
        on_epoch,
    )?;
    Ok((params, logs))
}

/// Trains the class/boundary network with the multitask loss on foreground frames.
pub fn train_dnn2(
    set: &TrainingSet,
    cfg: &TrainConfig,
    loss_cfg: &MultitaskLossConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(NetworkParams, Vec<EpochLog>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut params = NetworkParams::init(NetworkLayout::dnn2(set.classes), cfg.dnn2_dropout, seed.wrapping_add(1))?;
    let logs = fit(
        &mut params,
        "dnn2",
        set.dnn2.len(),
        cfg.dnn2_epochs,
        cfg.dnn2_batch,
        cfg,
        seed ^ 0xA2A2,
        |idx| set.multitask_batch(idx),
        |b, p, mode| multitask_loss(b, p, loss_cfg, mode),
        on_epoch,
    )?;
    Ok((params, logs))
}

const LOG_COMPONENTS: [&str; 7] = ["fg", "bg", "class", "dist", "conf", "regularizer", "wall_s"];

/// One row per epoch: network, epoch, total, every loss component, wall time.
/// Components a network does not have are left empty.
pub fn write_training_log(path: &Path, logs: &[EpochLog], config_hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash {config_hash}")?;
    writeln!(w, "network,epoch,total,{}", LOG_COMPONENTS.join(","))?;
    for log in logs {
        let mut row = vec![log.network.to_string(), log.epoch.to_string(), log.total.to_string()];
        for name in &LOG_COMPONENTS[..LOG_COMPONENTS.len() - 1] {
            let value = log.components.iter().find(|c| c.0 == *name);
            row.push(value.map(|c| c.1.to_string()).unwrap_or_default());
        }
        row.push(format!("{:.3}", log.wall_s));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Everything inference needs: both networks, the feature frontend settings
/// and the constants fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub class_names: Vec<String>,
    pub features: FeatureConfig,
    pub standardizer: Standardizer,
    pub normalization: NormalizationConstants,
    /// Per-class divisors mapping accumulated scores onto `[0, 1]`.
    pub score_divisors: Vec<f64>,
    pub dnn1: NetworkParams,
    pub dnn2: NetworkParams,
    pub config_hash: String,
}

const PREDICT_CHUNK: usize = 4096;
const CHECKPOINT_MAGIC: &str = "EARLYDET-MODEL 1";

impl ModelBundle {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Runs both networks over standardized framewise features (`frames × 64`).
    pub fn predict(&self, framewise: ArrayView2<f64>) -> Result<FrameOutputs> {
        if framewise.ncols() != BANDS {
            return Err(Error::input("framewise features must have 64 bands"));
        }
        let frames = framewise.nrows();
        let mut out = FrameOutputs {
            p_fg: Vec::with_capacity(frames),
            posterior: Array2::zeros((frames, self.classes())),
            distances: Vec::with_capacity(frames),
        };
        let indices: Vec<usize> = (0..frames).collect();
        for chunk in indices.chunks(PREDICT_CHUNK) {
            let x = stack_rows(framewise, chunk);
            let (p1, _) = self.dnn1.forward_dnn1(x.view(), Mode::Eval)?;
            let (y, d, _) = self.dnn2.forward_dnn2(x.view(), Mode::Eval)?;
            out.p_fg.extend(p1.column(1).iter().copied());
            out.posterior.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&y);
            for row in d.rows() {
                let restored = self.normalization.restore(DistancePair::normalized(row[0], row[1]))?;
                out.distances.push(restored);
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c == 0 {
            return Err(Error::config("model has no classes"));
        }
        if self.dnn1.layout.head != Head::ForegroundBackground
            || self.dnn2.layout.head != (Head::Multitask { classes: c })
            || self.dnn1.layout.input != FEATURE_DIM
            || self.dnn2.layout.input != FEATURE_DIM
        {
            return Err(Error::config("network layouts do not match the class list"));
        }
        if self.score_divisors.len() != c || self.score_divisors.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::config("one positive score divisor per class required"));
        }
        if self.class_names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return Err(Error::config("class names must be non-empty and contain no whitespace"));
        }
        self.normalization.validate()
    }

    /// Text header followed by little-endian f64 values: standardizer mean
    /// and std, then each network's layers (weights row-major, then biases).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        let joinf = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut w = BufWriter::new(File::create(path)?);
        write_header(
            &mut w,
            CHECKPOINT_MAGIC,
            &[
                ("config_hash", self.config_hash.clone()),
                ("classes", self.class_names.join(" ")),
                ("sample_rate", self.features.sample_rate.to_string()),
                ("frame_s", format!("{:?}", self.features.frame_s)),
                ("hop_s", format!("{:?}", self.features.hop_s)),
                ("f_min", format!("{:?}", self.features.f_min)),
                ("f_max", format!("{:?}", self.features.f_max)),
                ("max_on", format!("{:?}", self.normalization.max_on)),
                ("max_off", format!("{:?}", self.normalization.max_off)),
                ("score_divisors", joinf(&self.score_divisors)),
                ("input", self.dnn1.layout.input.to_string()),
                ("dnn1_hidden", join(&self.dnn1.layout.hidden)),
                ("dnn1_dropout", format!("{:?}", self.dnn1.dropout_p)),
                ("dnn2_hidden", join(&self.dnn2.layout.hidden)),
                ("dnn2_dropout", format!("{:?}", self.dnn2.dropout_p)),
            ],
        )?;
        write_f64s(&mut w, &self.standardizer.mean)?;
        write_f64s(&mut w, &self.standardizer.std)?;
        for net in [&self.dnn1, &self.dnn2] {
            for slice in net.slices() {
                write_f64s(&mut w, slice)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let h = Header::read(&mut r, CHECKPOINT_MAGIC, path)?;
        let class_names: Vec<String> = h.get("classes")?.split_whitespace().map(str::to_string).collect();
        let features = FeatureConfig {
            sample_rate: h.parse("sample_rate")?,
            frame_s: h.parse("frame_s")?,
            hop_s: h.parse("hop_s")?,
            f_min: h.parse("f_min")?,
            f_max: h.parse("f_max")?,
        };
        let input: usize = h.parse("input")?;
        let layout = |hidden: Vec<usize>, head| NetworkLayout { input, hidden, head };
        let mut dnn1 = NetworkParams::zeros(
            layout(h.parse_list("dnn1_hidden")?, Head::ForegroundBackground),
            h.parse("dnn1_dropout")?,
        )?;
        let mut dnn2 = NetworkParams::zeros(
            layout(h.parse_list("dnn2_hidden")?, Head::Multitask { classes: class_names.len() }),
            h.parse("dnn2_dropout")?,
        )?;
        let truncated = |_| h.error("truncated parameter payload");
        let mut standardizer = Standardizer::identity();
        read_f64s(&mut r, &mut standardizer.mean).map_err(truncated)?;
        read_f64s(&mut r, &mut standardizer.std).map_err(truncated)?;
        for net in [&mut dnn1, &mut dnn2] {
            for slice in net.slices_mut() {
                read_f64s(&mut r, slice).map_err(truncated)?;
            }
        }
        let bundle = Self {
            class_names,
            features,
            standardizer,
            normalization: NormalizationConstants::new(h.parse("max_on")?, h.parse("max_off")?)?,
            score_divisors: h.parse_list("score_divisors")?,
            dnn1,
            dnn2,
            config_hash: h.get("config_hash")?.to_string(),
        };
        bundle.validate().map_err(|e| h.error(e.to_string()))?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_training_set, Normalization, StreamFeatures};
    use crate::synth::EventInterval;
    use rand::Rng;

    fn toy_set() -> TrainingSet {
        // Foreground frames carry a shifted mean in the first bands.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = 300;
        let events = vec![
            EventInterval::new(0, 20, 60).unwrap(),
            EventInterval::new(1, 120, 170).unwrap(),
            EventInterval::new(0, 220, 250).unwrap(),
        ];
        let mut framewise = Array2::from_shape_simple_fn((frames, BANDS), || rng.random_range(-0.5..0.5));
        for e in &events {
            for i in e.onset..=e.offset {
                let band = if e.class_id == 0 { 5 } else { 40 };
                for j in band..band + 8 {
                    framewise[[i, j]] += 2.0;
                }
            }
        }
        make_training_set(vec![StreamFeatures { framewise, events }], 2, Normalization::Compute).unwrap()
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            dnn1_epochs: epochs,
            dnn2_epochs: epochs,
            dnn1_batch: 32,
            dnn2_batch: 16,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.dnn1_epochs, c.dnn2_epochs, c.dnn1_batch, c.dnn2_batch), (25, 25, 256, 128));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!((c.dnn1_dropout, c.dnn2_dropout), (0.5, 0.2));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let set = toy_set();
        let cfg = small_cfg(6);
        let (a, logs) = train_dnn1(&set, &cfg, &WeightedLossConfig::default(), 3, |_| {}).unwrap();
        assert_eq!(logs.len(), 6);
        assert!(logs.last().unwrap().total < logs[0].total);
        let (b, _) = train_dnn1(&set, &cfg, &WeightedLossConfig::default(), 3, |_| {}).unwrap();
        assert_eq!(a, b);

        let (_, logs2) = train_dnn2(&set, &cfg, &MultitaskLossConfig::default(), 3, |_| {}).unwrap();
        assert!(logs2.last().unwrap().total < logs2[0].total);
        let names: Vec<_> = logs2[0].components.iter().map(|c| c.0).collect();
        assert_eq!(names, vec!["class", "dist", "conf", "regularizer"]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let set = toy_set();
        let cfg = small_cfg(1);
        let (dnn1, _) = train_dnn1(&set, &cfg, &WeightedLossConfig::default(), 5, |_| {}).unwrap();
        let (dnn2, _) = train_dnn2(&set, &cfg, &MultitaskLossConfig::default(), 5, |_| {}).unwrap();
        let mut standardizer = Standardizer::identity();
        standardizer.mean[3] = 0.1 + 0.2;
        let bundle = ModelBundle {
            class_names: vec!["a".into(), "b".into()],
            features: FeatureConfig::default(),
            standardizer,
            normalization: set.normalization,
            score_divisors: vec![1.0 / 3.0, 7.5],
            dnn1,
            dnn2,
            config_hash: "abc123".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(loaded, bundle);

        let out = loaded.predict(set.streams[0].framewise.view()).unwrap();
        assert_eq!(out.len(), 300);
        assert!(out.distances.iter().all(|d| d.on <= set.normalization.max_on));

        assert!(matches!(
            ModelBundle::load(&dir.path().join("missing.bin")),
            Err(Error::MissingArtifact(_))
        ));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            dnn1_batch: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            dnn2_dropout: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
