//! Turns annotated, feature-extracted streams into training examples.
//!
//! Every frame is a foreground/background example; frames inside an event are
//! additionally class/boundary examples. Context-stacked inputs are built on
//! demand from the framewise features, so only `frames × 64` values are held
//! per stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{distance_targets, stack_rows, NormalizationConstants, BANDS};
use crate::losses::{MultitaskBatch, WeightedBatch};
use crate::synth::EventInterval;

/// Standardized framewise features (`frames × 64`) with their ground truth.
#[derive(Debug, Clone)]
pub struct StreamFeatures {
    pub framewise: Array2<f64>,
    pub events: Vec<EventInterval>,
}

impl StreamFeatures {
    /// Event covering each frame, if any.
    pub fn frame_labels(&self) -> Vec<Option<EventInterval>> {
        let mut labels = vec![None; self.framewise.nrows()];
        for e in &self.events {
            for slot in labels.iter_mut().take(e.offset + 1).skip(e.onset) {
                *slot = Some(*e);
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dnn1Example {
    pub stream: usize,
    pub frame: usize,
    pub foreground: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dnn2Example {
    pub stream: usize,
    pub frame: usize,
    pub class_id: usize,
    /// Normalized `(d_on, d_off)`.
    pub distance: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
pub enum Normalization {
    /// Derive maxima from the given streams.
    Compute,
    Fixed(NormalizationConstants),
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub streams: Vec<StreamFeatures>,
    pub dnn1: Vec<Dnn1Example>,
    pub dnn2: Vec<Dnn2Example>,
    pub normalization: NormalizationConstants,
    pub classes: usize,
}

pub fn make_training_set(
    streams: Vec<StreamFeatures>,
    classes: usize,
    normalization: Normalization,
) -> Result<TrainingSet> {
    let streams: Vec<StreamFeatures> = streams
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.framewise.nrows() == 0 {
                log::warn!("stream {i} has no frames; skipped");
                None
            } else {
                Some(s)
            }
        })
        .collect();
    for s in &streams {
        if s.framewise.ncols() != BANDS {
            return Err(Error::input("framewise features must have 64 bands"));
        }
        for e in &s.events {
            if e.class_id >= classes {
                return Err(Error::input(format!("event class {} >= {classes}", e.class_id)));
            }
            if e.offset >= s.framewise.nrows() {
                return Err(Error::input("event extends past the last frame"));
            }
        }
    }
    let normalization = match normalization {
        Normalization::Compute => {
            NormalizationConstants::from_events(streams.iter().flat_map(|s| &s.events))?
        }
        Normalization::Fixed(k) => {
            k.validate()?;
            k
        }
    };

    let mut dnn1 = Vec::new();
    let mut dnn2 = Vec::new();
    for (si, s) in streams.iter().enumerate() {
        for (frame, label) in s.frame_labels().into_iter().enumerate() {
            dnn1.push(Dnn1Example {
                stream: si,
                frame,
                foreground: label.is_some(),
            });
            if let Some(event) = label {
                let d = normalization.normalize(distance_targets(&event, frame)?)?;
                dnn2.push(Dnn2Example {
                    stream: si,
                    frame,
                    class_id: event.class_id,
                    distance: [d.on, d.off],
                });
            }
        }
    }
    Ok(TrainingSet {
        streams,
        dnn1,
        dnn2,
        normalization,
        classes,
    })
}

impl TrainingSet {
    fn inputs(&self, refs: impl Iterator<Item = (usize, usize)>) -> Array2<f64> {
        let refs: Vec<(usize, usize)> = refs.collect();
        let mut out = Array2::zeros((refs.len(), BANDS * crate::features::CONTEXT));
        // Group consecutive rows by stream to reuse the stacking helper.
        let mut start = 0;
        while start < refs.len() {
            let stream = refs[start].0;
            let mut end = start;
            let mut frames = Vec::new();
            while end < refs.len() && refs[end].0 == stream {
                frames.push(refs[end].1);
                end += 1;
            }
            let rows = stack_rows(self.streams[stream].framewise.view(), &frames);
            out.slice_mut(ndarray::s![start..end, ..]).assign(&rows);
            start = end;
        }
        out
    }

    pub fn weighted_batch(&self, indices: &[usize]) -> WeightedBatch {
        let inputs = self.inputs(indices.iter().map(|&i| (self.dnn1[i].stream, self.dnn1[i].frame)));
        WeightedBatch::from_flags(inputs, indices.iter().map(|&i| self.dnn1[i].foreground).collect())
    }

    pub fn multitask_batch(&self, indices: &[usize]) -> MultitaskBatch {
        let inputs = self.inputs(indices.iter().map(|&i| (self.dnn2[i].stream, self.dnn2[i].frame)));
        let mut labels = Array2::zeros((indices.len(), self.classes));
        let mut distances = Array2::zeros((indices.len(), 2));
        for (row, &i) in indices.iter().enumerate() {
            let ex = &self.dnn2[i];
            labels[[row, ex.class_id]] = 1.0;
            distances[[row, 0]] = ex.distance[0];
            distances[[row, 1]] = ex.distance[1];
        }
        MultitaskBatch {
            inputs,
            labels,
            distances,
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.dnn1.iter().filter(|e| e.foreground).count() as f64 / self.dnn1.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Audio file, relative to the manifest's directory unless absolute.
    pub audio: PathBuf,
    pub split: Split,
    pub events: Vec<EventInterval>,
}

/// JSON index of a dataset: audio files, their split and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub config_hash: String,
    pub sample_rate: u32,
    pub classes: Vec<String>,
    pub streams: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for entry in &m.streams {
            if let Some(e) = entry.events.iter().find(|e| e.class_id >= m.classes.len() || e.onset > e.offset) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("{}: invalid event {e:?}", entry.audio.display()),
                });
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Absolute location of an entry's audio given the manifest path.
    pub fn audio_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.audio.is_absolute() {
            entry.audio.clone()
        } else {
            manifest_path.parent().unwrap_or(Path::new("")).join(&entry.audio)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.streams.iter().filter(move |e| e.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(frames: usize, events: Vec<EventInterval>) -> StreamFeatures {
        StreamFeatures {
            framewise: Array2::from_shape_fn((frames, BANDS), |(i, j)| (i * BANDS + j) as f64),
            events,
        }
    }

    #[test]
    fn labels_and_counts() {
        let a = stream(
            50,
            vec![
                EventInterval::new(3, 5, 14).unwrap(),
                EventInterval::new(1, 30, 32).unwrap(),
            ],
        );
        let b = stream(20, vec![EventInterval::new(0, 0, 19).unwrap()]);
        let set = make_training_set(vec![a, b], 4, Normalization::Compute).unwrap();

        assert_eq!(set.dnn1.len(), 70);
        // Oracle: sum of annotation lengths.
        assert_eq!(set.dnn2.len(), 10 + 3 + 20);
        assert_eq!(set.normalization.max_on, 19.0);

        let inside = set.dnn1.iter().find(|e| e.stream == 0 && e.frame == 7).unwrap();
        assert!(inside.foreground);
        let ex = set.dnn2.iter().find(|e| e.stream == 0 && e.frame == 7).unwrap();
        assert_eq!(ex.class_id, 3);
        assert_eq!(ex.distance, [2.0 / 19.0, 7.0 / 19.0]);

        let gap = set.dnn1.iter().find(|e| e.stream == 0 && e.frame == 20).unwrap();
        assert!(!gap.foreground);
        assert!(!set.dnn2.iter().any(|e| e.stream == 0 && e.frame == 20));

        let batch = set.multitask_batch(&[0]);
        assert_eq!(batch.labels.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn every_frame_once_in_dnn1() {
        let a = stream(40, vec![EventInterval::new(2, 10, 20).unwrap()]);
        let set = make_training_set(vec![a], 3, Normalization::Compute).unwrap();
        let mut seen = [0; 40];
        for e in &set.dnn1 {
            seen[e.frame] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        let fg = set.dnn1.iter().filter(|e| e.foreground).count();
        assert_eq!(fg, 11);
    }

    #[test]
    fn empty_streams_are_skipped() {
        let empty = stream(0, vec![]);
        let a = stream(10, vec![EventInterval::new(0, 2, 4).unwrap()]);
        let set = make_training_set(vec![empty, a], 1, Normalization::Compute).unwrap();
        assert_eq!(set.streams.len(), 1);
        assert_eq!(set.dnn1.len(), 10);
    }

    #[test]
    fn batches_stack_context_across_streams() {
        let a = stream(10, vec![EventInterval::new(0, 2, 4).unwrap()]);
        let b = stream(10, vec![EventInterval::new(0, 2, 4).unwrap()]);
        let set = make_training_set(vec![a, b], 1, Normalization::Compute).unwrap();
        let batch = set.weighted_batch(&[0, 10, 3]);
        assert_eq!(batch.inputs.dim(), (3, 320));
        let expected = stack_rows(set.streams[1].framewise.view(), &[0]);
        assert_eq!(batch.inputs.row(1), expected.row(0));
        assert_eq!(batch.foreground, vec![false, false, true]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest {
            config_hash: "h".into(),
            sample_rate: 44_100,
            classes: vec!["a".into(), "b".into()],
            streams: vec![ManifestEntry {
                audio: "s0.wav".into(),
                split: Split::Test,
                events: vec![EventInterval::new(1, 3, 9).unwrap()],
            }],
        };
        m.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"onset_frame\": 3") && text.contains("\"split\": \"test\""));
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(Manifest::audio_path(&path, &back.streams[0]), dir.path().join("s0.wav"));
        assert_eq!(back.split(Split::Train).count(), 0);

        let bad = text.replace("\"class\": 1", "\"class\": 7");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(Manifest::read(&path), Err(Error::Format { .. })));
        assert!(matches!(
            Manifest::read(&dir.path().join("none.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn bad_class_is_rejected() {
        let a = stream(10, vec![EventInterval::new(5, 2, 4).unwrap()]);
        assert!(make_training_set(vec![a], 3, Normalization::Compute).is_err());
    }
}
